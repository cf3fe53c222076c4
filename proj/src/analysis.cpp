#include "svf/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "svf/errors.hpp"

namespace svf {

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

}  // namespace

double pca_ratio(std::span<const double> sigma, std::size_t r) {
    if (r < 1 || r > sigma.size()) {
        throw RangeError("r = " + std::to_string(r) + " outside [1, " + std::to_string(sigma.size()) + "]");
    }
    const double total = std::accumulate(sigma.begin(), sigma.end(), 0.0);
    if (total == 0.0) return 1.0;
    const double top = std::accumulate(sigma.begin(), sigma.begin() + static_cast<long>(r), 0.0);
    return top / total;
}

double pca_ratio(const SvdFactors& f, std::size_t r) { return pca_ratio(f.sigma, r); }

std::string PcaReport::to_csv() const {
    std::ostringstream os;
    os << "matrix,r,ratio\n";
    for (const auto& e : entries)
        for (const auto& [r, ratio] : e.ratios) os << e.id.str() << ',' << r << ',' << fmt(ratio) << '\n';
    return os.str();
}

PcaReport pca_report(const PolicyModel& model, std::span<const std::size_t> r_grid) {
    PcaReport rep;
    for (const auto& [id, f] : model.factors()) {
        PcaReport::Entry e;
        e.id = id;
        e.sigma = f.sigma;
        for (std::size_t r : r_grid) {
            const std::size_t rr = std::clamp<std::size_t>(r, 1, f.sigma.size());
            e.ratios.emplace_back(rr, pca_ratio(f.sigma, rr));
        }
        rep.entries.push_back(std::move(e));
    }
    return rep;
}

// ---------------------------------------------------------------------------

std::vector<std::vector<double>> ConfusionMatrix::rates() const {
    std::vector<std::vector<double>> out;
    for (const auto& row : counts) {
        const double n = static_cast<double>(std::accumulate(row.begin(), row.end(), std::size_t{0}));
        std::vector<double> r(row.size(), 0.0);
        for (std::size_t j = 0; j < row.size(); ++j) r[j] = n > 0 ? static_cast<double>(row[j]) / n : 0.0;
        out.push_back(std::move(r));
    }
    return out;
}

double ConfusionMatrix::pooled_accuracy() const {
    std::size_t hit = 0, total = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        hit += counts[i][i];
        total += std::accumulate(counts[i].begin(), counts[i].end(), std::size_t{0});
    }
    return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

bool ConfusionMatrix::diagonal_dominant() const {
    for (std::size_t i = 0; i < counts.size(); ++i)
        for (std::size_t j = 0; j < counts[i].size(); ++j)
            if (j != i && counts[i][j] >= counts[i][i]) return false;
    return true;
}

std::string ConfusionMatrix::to_csv() const {
    std::ostringstream os;
    os << "true";
    for (std::size_t j = 0; j <= k; ++j) os << ',' << category_name(j == k ? Category::Others : static_cast<Category>(j));
    os << '\n';
    const auto r = rates();
    for (std::size_t i = 0; i < k; ++i) {
        os << category_name(static_cast<Category>(i));
        for (double v : r[i]) os << ',' << fmt(v);
        os << '\n';
    }
    return os.str();
}

ConfusionMatrix confusion(const Dispatcher& dispatch, std::span<const LabeledPrompt> prompts, std::size_t k) {
    if (k == 0 || k >= kNumCategories) throw RangeError("confusion needs 1..3 expert categories");
    ConfusionMatrix cm;
    cm.k = k;
    cm.counts.assign(k, std::vector<std::size_t>(k + 1, 0));
    std::vector<Category> decided(prompts.size());
    const auto n = static_cast<long long>(prompts.size());
#pragma omp parallel for schedule(dynamic)
    for (long long ii = 0; ii < n; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        decided[i] = dispatch(prompts[i].prompt);
    }
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        const auto row = static_cast<std::size_t>(prompts[i].label);
        if (row >= k) throw RangeError("prompt label outside the expert categories");
        const auto col = static_cast<std::size_t>(decided[i]);
        cm.counts[row][std::min(col, k)] += 1;
    }
    for (std::size_t i = 0; i < k; ++i)
        if (std::accumulate(cm.counts[i].begin(), cm.counts[i].end(), std::size_t{0}) == 0)
            throw EmptyEval("no prompts for category " + std::string(category_name(static_cast<Category>(i))));
    return cm;
}

ConfusionMatrix confusion(const TwoPassEngine& engine, StrategyKind strategy, std::span<const LabeledPrompt> prompts) {
    return confusion([&](const TokenSequence& p) { return engine.classify(strategy, p); }, prompts,
                     engine.library().experts.size());
}

std::vector<LabeledPrompt> labeled_prompts(std::span<const TaskSplit> splits, std::string_view portion,
                                           std::size_t per_family) {
    std::vector<LabeledPrompt> out;
    for (const auto& s : splits) {
        auto insts = s.portion(portion);
        if (per_family) insts = insts.first(std::min(per_family, insts.size()));
        for (const auto& inst : insts) out.push_back({inst.prompt, domain_of(s.family), s.family});
    }
    return out;
}

// ---------------------------------------------------------------------------

std::string TransferReport::to_csv() const {
    std::ostringstream os;
    os << "task,base,ordered,shuffled_mean,shuffled_std,cross_cem\n";
    for (const auto& r : rows) {
        os << family_name(r.task) << ',' << fmt(r.base) << ',' << fmt(r.ordered) << ',' << fmt(r.shuffled_mean) << ','
           << fmt(r.shuffled_std) << ',' << (r.cross_cem ? fmt(*r.cross_cem) : "") << '\n';
    }
    return os.str();
}

void check_transferable(const ExpertLibrary& source, const PolicyModel& target) {
    const auto ranks = target.config().svf_ranks();
    for (const auto& e : source.experts) {
        for (const auto& [id, z] : e.entries) {
            auto it = ranks.find(id);
            if (it == ranks.end() || it->second != z.size()) {
                throw IncompatibleArchitecture("expert '" + e.name + "' entry " + id.str() + " does not fit the target model");
            }
        }
    }
}

TransferReport transfer_experiment(const ExpertLibrary& source, const PolicyModel& target,
                                   std::span<const TaskSplit> tasks, std::span<const std::uint64_t> shuffle_seeds,
                                   const ExpertLibrary* target_library, const CemConfig& cem, std::uint64_t seed) {
    check_transferable(source, target);
    if (target_library) check_transferable(*target_library, target);
    PolicyModel base = target;
    base.clear_adaptation();

    TransferReport rep;
    for (const auto& task : tasks) {
        TransferRow row;
        row.task = task.family;
        row.base = evaluate(base, task.test);
        const ExpertVector* z = source.expert_for(domain_of(task.family));
        if (!z) throw AdapterMissing("source library has no expert for " + std::string(family_name(task.family)));
        row.ordered = evaluate(base, TrainableAdapter(*z), task.test);
        for (std::uint64_t s : shuffle_seeds) row.shuffled.push_back(evaluate(base, TrainableAdapter(shuffle_expert(*z, s)), task.test));
        if (!row.shuffled.empty()) {
            const double n = static_cast<double>(row.shuffled.size());
            row.shuffled_mean = std::accumulate(row.shuffled.begin(), row.shuffled.end(), 0.0) / n;
            double var = 0.0;
            for (double v : row.shuffled) var += (v - row.shuffled_mean) * (v - row.shuffled_mean);
            row.shuffled_std = std::sqrt(var / n);
        }
        if (target_library) {
            std::vector<ExpertVector> pooled = source.experts;
            pooled.insert(pooled.end(), target_library->experts.begin(), target_library->experts.end());
            const auto r = adapt_cem(base, std::span<const ExpertVector>(pooled), task.few_shot_holdout, cem, seed);
            row.cross_cem = evaluate(base, TrainableAdapter(r.composed), task.test);
        }
        rep.rows.push_back(std::move(row));
    }
    return rep;
}

// ---------------------------------------------------------------------------

std::string_view method_name(Method m) { return m == Method::Svf ? "svf" : "lora"; }

std::string_view site_group_name(SiteGroup g) {
    switch (g) {
        case SiteGroup::Mlp: return "mlp";
        case SiteGroup::Attention: return "attention";
        case SiteGroup::Both: return "mlp+attention";
    }
    return "?";
}

std::set<Site> sites_for(Method m, SiteGroup g) {
    std::set<Site> mlp{Site::mlp_in, Site::mlp_out};
    std::set<Site> attn = m == Method::Svf ? std::set<Site>{Site::q_proj, Site::k_proj, Site::v_proj, Site::o_proj}
                                           : std::set<Site>{Site::q_proj, Site::v_proj};
    if (g == SiteGroup::Mlp) return mlp;
    if (g == SiteGroup::Attention) return attn;
    attn.insert(mlp.begin(), mlp.end());
    return attn;
}

std::vector<AblationCell> reference_ablation_cells() {
    using O = Objective;
    return {
        {Method::Svf, O::PolicyGradient, SiteGroup::Mlp},
        {Method::Svf, O::PolicyGradient, SiteGroup::Attention},
        {Method::Svf, O::PolicyGradient, SiteGroup::Both},
        {Method::Svf, O::NextToken, SiteGroup::Attention},
        {Method::Lora, O::PolicyGradient, SiteGroup::Attention},
        {Method::Lora, O::NextToken, SiteGroup::Attention},
        {Method::Lora, O::NextToken, SiteGroup::Both},
    };
}

std::size_t svf_parameter_count(const ModelConfig& cfg, const std::set<Site>& sites) {
    ModelConfig c = cfg;
    c.svf_sites = sites;
    std::size_t n = 0;
    for (const auto& [id, r] : c.svf_ranks()) n += r;
    return n;
}

std::vector<AblationRow> run_ablation_grid(const PolicyModel& model, const AblationSpec& spec,
                                           std::span<const AblationCell> cells) {
    std::vector<AblationRow> rows;
    for (const auto& cell : cells) {
        AblationRow row;
        row.cell = cell;
        const auto sites = sites_for(cell.method, cell.sites);
        std::optional<TrainableAdapter> adapter;
        if (cell.method == Method::Svf) {
            ModelConfig c = model.config();
            c.svf_sites = sites;
            ExpertVector init = init_expert(c, spec.svf_config, spec.seed, "ablation", std::string(category_name(domain_of(spec.train_task.family))));
            auto [trained, metrics] = train_adapter(model, std::move(init), spec.train_task, cell.objective, spec.svf_config, spec.seed);
            row.parameters = svf_parameter_count(model.config(), sites);
            row.val_acc = metrics.best_val_acc;
            row.learning_rate = spec.svf_config.learning_rate;
            row.clip_max_norm = spec.svf_config.clip_max_norm;
            adapter = std::move(trained);
        } else {
            auto sweep = lora_sweep(model, spec.train_task, cell.objective, spec.lora_config, spec.seed, sites,
                                    spec.lora_learning_rates, spec.lora_clip_norms);
            row.parameters = sweep.adapter.parameter_count();
            row.val_acc = sweep.metrics.best_val_acc;
            row.learning_rate = sweep.learning_rate;
            row.clip_max_norm = sweep.clip_max_norm;
            adapter = std::move(sweep.adapter);
        }
        row.train_score = evaluate(model, adapter, spec.train_task.test);
        row.unseen_score = evaluate(model, adapter, spec.unseen_task.test);
        rows.push_back(row);
    }
    return rows;
}

std::string ablation_csv(std::span<const AblationRow> rows) {
    std::ostringstream os;
    os << "index,method,objective,sites,params,train_score,unseen_score,val_acc,lr,clip\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        os << i + 1 << ',' << method_name(r.cell.method) << ','
           << (r.cell.objective == Objective::PolicyGradient ? "policy_gradient" : "next_token") << ','
           << site_group_name(r.cell.sites) << ',' << r.parameters << ',' << fmt(r.train_score) << ','
           << fmt(r.unseen_score) << ',' << fmt(r.val_acc) << ',' << r.learning_rate << ',' << r.clip_max_norm << '\n';
    }
    return os.str();
}

}  // namespace svf
