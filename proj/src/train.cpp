#include "svf/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "svf/errors.hpp"
#include "svf/rng.hpp"

namespace svf {

std::string_view objective_name(Objective o) { return o == Objective::PolicyGradient ? "policy_gradient" : "next_token"; }

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
    if (!(kl_lambda >= 0.0)) throw ConfigError("kl_lambda must be >= 0");
    if (!(clip_max_norm > 0.0)) throw ConfigError("clip_max_norm must be > 0");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (z_init_variance < 0.0) throw ConfigError("z_init_variance must be >= 0");
    if (temperature <= 0.0) throw ConfigError("rollout temperature must be > 0");
}

void PretrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("pretrain learning_rate must be > 0");
    if (batch_size == 0 || eval_every == 0 || eval_limit == 0) throw ConfigError("pretrain batch/eval sizes must be >= 1");
    if (!(band_low <= band_high)) throw ConfigError("pretrain band_low must not exceed band_high");
    if (!(distractor_rate >= 0.0 && distractor_rate <= 1.0)) throw ConfigError("pretrain distractor_rate must lie in [0, 1]");
}

double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps) {
    if (total_steps <= 1) return base_lr;
    const double frac = static_cast<double>(std::min(step, total_steps - 1)) / static_cast<double>(total_steps - 1);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

double clip_global_norm(std::span<double> g, double max_norm) {
    double sq = 0.0;
    for (double v : g) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (auto& v : g) v *= s;
    }
    return norm;
}

AdamW::AdamW(std::size_t n, double beta1, double beta2, double eps, double weight_decay)
    : m_(n, 0.0), v_(n, 0.0), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

void AdamW::step(std::span<double> theta, std::span<const double> grad, double lr) {
    if (theta.size() != m_.size() || grad.size() != m_.size()) throw ShapeError("optimizer parameter count changed");
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < theta.size(); ++i) {
        m_[i] = b1_ * m_[i] + (1.0 - b1_) * grad[i];
        v_[i] = b2_ * v_[i] + (1.0 - b2_) * grad[i] * grad[i];
        const double mhat = m_[i] / c1;
        const double vhat = v_[i] / c2;
        theta[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * theta[i]);
    }
}

std::string TrainMetrics::to_csv() const {
    std::ostringstream os;
    os.precision(10);
    os << "epoch,J,reward,kl,val_acc,lr\n";
    for (const auto& e : epochs) {
        os << e.epoch << ',' << e.objective << ',' << e.mean_reward << ',' << e.kl << ',' << e.val_acc << ',' << e.lr << '\n';
    }
    return os.str();
}

std::string PretrainMetrics::to_csv() const {
    std::ostringstream os;
    os.precision(10);
    os << "step,loss";
    for (Family f : families) os << ",acc_" << family_name(f);
    os << ",dispatch_acc\n";
    for (const auto& r : rows) {
        os << r.step << ',' << r.loss;
        for (double a : r.family_acc) os << ',' << a;
        os << ',' << r.dispatch_acc << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// adapter plumbing

std::vector<double> pack_adapter(const TrainableAdapter& a) {
    std::vector<double> flat;
    if (const auto* e = std::get_if<ExpertVector>(&a)) {
        for (const auto& [id, z] : e->entries) flat.insert(flat.end(), z.begin(), z.end());
    } else {
        for (const auto& [id, le] : std::get<LoraAdapter>(a).entries) {
            flat.insert(flat.end(), le.a.values().begin(), le.a.values().end());
            flat.insert(flat.end(), le.b.values().begin(), le.b.values().end());
        }
    }
    return flat;
}

void unpack_adapter(TrainableAdapter& a, std::span<const double> flat) {
    std::size_t off = 0;
    auto take = [&](std::span<double> dst) {
        if (off + dst.size() > flat.size()) throw ShapeError("flat adapter vector too short");
        std::copy(flat.begin() + static_cast<long>(off), flat.begin() + static_cast<long>(off + dst.size()), dst.begin());
        off += dst.size();
    };
    if (auto* e = std::get_if<ExpertVector>(&a)) {
        for (auto& [id, z] : e->entries) take(z);
    } else {
        for (auto& [id, le] : std::get<LoraAdapter>(a).entries) {
            take(le.a.values());
            take(le.b.values());
        }
    }
    if (off != flat.size()) throw ShapeError("flat adapter vector too long");
}

std::vector<double> pack_adapter_gradient(const TrainableAdapter& a, const PolicyModel& adapted_model, const ModelGradients& g) {
    std::vector<double> flat;
    if (std::holds_alternative<ExpertVector>(a)) {
        for (const auto& [id, dz] : adapted_model.z_gradients(g)) flat.insert(flat.end(), dz.begin(), dz.end());
    } else {
        for (const auto& [id, le] : std::get<LoraAdapter>(a).entries) {
            const auto& ge = g.lora.at(id);
            flat.insert(flat.end(), ge.a.values().begin(), ge.a.values().end());
            flat.insert(flat.end(), ge.b.values().begin(), ge.b.values().end());
        }
    }
    return flat;
}

void install_adapter(PolicyModel& model, const TrainableAdapter& a) {
    if (const auto* e = std::get_if<ExpertVector>(&a)) {
        model.set_expert(*e);
    } else {
        model.set_lora(std::get<LoraAdapter>(a));
    }
}

ExpertVector init_expert(const ModelConfig& cfg, const TrainConfig& tc, std::uint64_t seed, std::string name,
                         std::string domain_tag) {
    ExpertVector e;
    e.name = std::move(name);
    e.domain_tag = std::move(domain_tag);
    const double sd = std::sqrt(tc.z_init_variance);
    for (const auto& [id, r] : cfg.svf_ranks()) {
        SeededRng rng(seed, StreamPurpose::Init, {0x2f, id.layer, static_cast<std::uint64_t>(id.site)});
        std::vector<double> z(r);
        for (auto& v : z) v = sd > 0.0 ? rng.normal(tc.z_init_mean, sd) : tc.z_init_mean;
        e.entries.emplace(id, std::move(z));
    }
    return e;
}

// ---------------------------------------------------------------------------
// evaluation

std::size_t generation_budget(const TaskInstance& inst) { return inst.reference.tokens.size() + 1; }

std::vector<TokenSequence> greedy_answers(const PolicyModel& model, std::span<const TaskInstance> instances) {
    std::vector<TokenSequence> out(instances.size());
    const auto n = static_cast<long long>(instances.size());
#pragma omp parallel for schedule(dynamic)
    for (long long i = 0; i < n; ++i) {
        const auto& inst = instances[static_cast<std::size_t>(i)];
        out[static_cast<std::size_t>(i)] = model.generate(inst.prompt, GenerateMode::greedy(), generation_budget(inst));
    }
    return out;
}

double evaluate(const PolicyModel& model, std::span<const TaskInstance> instances) {
    if (instances.empty()) throw EmptyEval("nothing to evaluate");
    const auto answers = greedy_answers(model, instances);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < instances.size(); ++i) correct += reward(answers[i], instances[i].reference) > 0.0;
    return static_cast<double>(correct) / static_cast<double>(instances.size());
}

double evaluate(const PolicyModel& model, const std::optional<TrainableAdapter>& adapter,
                std::span<const TaskInstance> instances) {
    if (instances.empty()) throw EmptyEval("nothing to evaluate");
    PolicyModel m = model;
    if (adapter) {
        install_adapter(m, *adapter);
    } else {
        m.clear_adaptation();
    }
    return evaluate(m, instances);
}

// ---------------------------------------------------------------------------
// losses

SequenceLoss policy_gradient_loss(const PolicyModel& model, const ForwardCache& cache, const Matrix& base_log_probs,
                                  std::size_t prompt_len, double advantage, double kl_lambda, double scale) {
    const auto& lp = cache.log_probs;
    const std::size_t T = cache.tokens.size();
    const std::size_t V = model.config().vocab_size;
    if (prompt_len == 0 || prompt_len >= T) throw RangeError("rollout has no answer tokens");
    const double n_ans = static_cast<double>(T - prompt_len);

    SequenceLoss out;
    out.dlogits = Matrix(T, V);
    double logp = 0.0;
    double kl_sum = 0.0;
    for (std::size_t t = prompt_len; t < T; ++t) {
        const std::size_t row = t - 1;
        const Token y = cache.tokens[t];
        logp += lp(row, y);
        auto d = out.dlogits.row(row);
        // d(-adv * log p_y) / d logits = adv * (p - e_y)
        for (std::size_t v = 0; v < V; ++v) d[v] = advantage * std::exp(lp(row, v));
        d[y] -= advantage;
        if (kl_lambda > 0.0) {
            double kl = 0.0;
            for (std::size_t v = 0; v < V; ++v) kl += std::exp(lp(row, v)) * (lp(row, v) - base_log_probs(row, v));
            kl_sum += kl;
            const double c = kl_lambda / n_ans;
            for (std::size_t v = 0; v < V; ++v) {
                const double p = std::exp(lp(row, v));
                d[v] += c * p * (lp(row, v) - base_log_probs(row, v) - kl);
            }
        }
        for (auto& x : d) x *= scale;
    }
    out.loss = scale * (-advantage * logp + kl_lambda * kl_sum / n_ans);
    return out;
}

SequenceLoss next_token_loss(const ForwardCache& cache, std::size_t prompt_len, double scale) {
    const auto& lp = cache.log_probs;
    const std::size_t T = cache.tokens.size();
    const std::size_t V = lp.cols();
    if (prompt_len == 0 || prompt_len >= T) throw RangeError("sequence has no answer tokens");
    const double n_ans = static_cast<double>(T - prompt_len);
    SequenceLoss out;
    out.dlogits = Matrix(T, V);
    double nll = 0.0;
    for (std::size_t t = prompt_len; t < T; ++t) {
        const std::size_t row = t - 1;
        const Token y = cache.tokens[t];
        nll -= lp(row, y);
        auto d = out.dlogits.row(row);
        for (std::size_t v = 0; v < V; ++v) d[v] = scale * std::exp(lp(row, v)) / n_ans;
        d[y] -= scale / n_ans;
    }
    out.loss = scale * nll / n_ans;
    return out;
}

// ---------------------------------------------------------------------------
// adapter training

namespace {

struct ItemResult {
    std::vector<double> grad;
    double objective = 0.0;  // per-item contribution to J (unscaled)
    double reward = 0.0;
    double kl = 0.0;
};

double mean_kl(const Matrix& adapted, const Matrix& base, std::size_t prompt_len, std::size_t T) {
    double s = 0.0;
    for (std::size_t t = prompt_len; t < T; ++t) {
        double kl = 0.0;
        for (std::size_t v = 0; v < adapted.cols(); ++v) kl += std::exp(adapted(t - 1, v)) * (adapted(t - 1, v) - base(t - 1, v));
        s += kl;
    }
    return s / static_cast<double>(T - prompt_len);
}

double validation_accuracy(const PolicyModel& m, const TaskSplit& split, std::size_t limit) {
    std::span<const TaskInstance> val = split.validation;
    if (limit > 0 && limit < val.size()) val = val.first(limit);
    return evaluate(m, val);
}

}  // namespace

std::pair<TrainableAdapter, TrainMetrics> train_adapter(const PolicyModel& model, TrainableAdapter initial,
                                                        const TaskSplit& split, Objective objective,
                                                        const TrainConfig& config, std::uint64_t seed) {
    config.validate();
    if (split.train.empty()) throw EmptySplit(std::string(family_name(split.family)) + ": empty train portion");
    if (split.validation.empty()) throw EmptySplit(std::string(family_name(split.family)) + ": empty validation portion");

    PolicyModel work = model;
    TrainableAdapter current = std::move(initial);
    install_adapter(work, current);
    const bool is_lora = std::holds_alternative<LoraAdapter>(current);

    std::vector<double> theta = pack_adapter(current);
    AdamW opt(theta.size(), config.beta1, config.beta2, config.adam_eps, config.weight_decay);

    const std::size_t n_train = split.train.size();
    const std::size_t steps_per_epoch = (n_train + config.batch_size - 1) / config.batch_size;
    const std::size_t total_steps = steps_per_epoch * config.max_epochs;

    TrainMetrics metrics;
    TrainableAdapter best = current;
    std::size_t since_best = 0;
    std::size_t step = 0;

    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        std::vector<std::size_t> order(n_train);
        std::iota(order.begin(), order.end(), 0);
        SeededRng shuffler(seed, StreamPurpose::Batching, {epoch});
        shuffler.shuffle(order);

        EpochMetrics em;
        em.epoch = epoch;
        em.lr = cosine_lr(config.learning_rate, step, total_steps);
        double obj_sum = 0.0, reward_sum = 0.0, kl_sum = 0.0;

        for (std::size_t b0 = 0; b0 < n_train; b0 += config.batch_size) {
            const std::size_t bsz = std::min(config.batch_size, n_train - b0);
            const double scale = 1.0 / static_cast<double>(bsz);
            std::vector<ItemResult> items(bsz);
            std::vector<TokenSequence> seqs(bsz);

            // Rollout phase: the adapted model is frozen and shared.
            const auto nb = static_cast<long long>(bsz);
#pragma omp parallel for schedule(dynamic)
            for (long long ii = 0; ii < nb; ++ii) {
                const auto i = static_cast<std::size_t>(ii);
                const std::size_t idx = order[b0 + i];
                const auto& inst = split.train[idx];
                if (objective == Objective::PolicyGradient) {
                    SeededRng rng(seed, StreamPurpose::Rollout, {epoch, idx});
                    seqs[i] = work.generate(inst.prompt, GenerateMode::sample(config.temperature, rng), generation_budget(inst));
                    items[i].reward = reward(seqs[i], inst.reference);
                } else {
                    seqs[i] = inst.full_sequence();
                }
            }

            double baseline = 0.0;
            if (objective == Objective::PolicyGradient && config.baseline_enabled) {
                for (const auto& it : items) baseline += it.reward;
                baseline /= static_cast<double>(bsz);
            }

            // Gradient phase, one independent slot per item.
#pragma omp parallel for schedule(dynamic)
            for (long long ii = 0; ii < nb; ++ii) {
                const auto i = static_cast<std::size_t>(ii);
                const std::size_t idx = order[b0 + i];
                const auto& seq = seqs[i];
                SeededRng drop(seed, StreamPurpose::Dropout, {epoch, idx});
                ForwardCache cache = work.forward_cached(seq, is_lora ? &drop : nullptr);
                auto& it = items[i];
                SequenceLoss sl;
                if (objective == Objective::PolicyGradient) {
                    const Matrix base = work.forward_base(seq);
                    sl = policy_gradient_loss(work, cache, base, seq.prompt_len, it.reward - baseline, config.kl_lambda, scale);
                    double logp = 0.0;
                    for (std::size_t t = seq.prompt_len; t < seq.size(); ++t) logp += cache.log_probs(t - 1, seq.tokens[t]);
                    it.kl = mean_kl(cache.log_probs, base, seq.prompt_len, seq.size());
                    it.objective = logp * it.reward - config.kl_lambda * it.kl;
                } else {
                    sl = next_token_loss(cache, seq.prompt_len, scale);
                    it.objective = -sl.loss / scale;
                }
                it.grad = pack_adapter_gradient(current, work, work.backward(cache, sl.dlogits));
            }

            std::vector<double> grad(theta.size(), 0.0);
            for (const auto& it : items) {
                for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += it.grad[k];
                obj_sum += it.objective;
                reward_sum += it.reward;
                kl_sum += it.kl;
            }
            clip_global_norm(grad, config.clip_max_norm);
            const double lr = cosine_lr(config.learning_rate, step, total_steps);
            opt.step(theta, grad, lr);
            ++step;

            for (double v : theta)
                if (!std::isfinite(v)) throw Diverged("non-finite adapter parameter at step " + std::to_string(step));
            unpack_adapter(current, theta);
            install_adapter(work, current);
        }

        em.objective = obj_sum / static_cast<double>(n_train);
        em.mean_reward = reward_sum / static_cast<double>(n_train);
        em.kl = kl_sum / static_cast<double>(n_train);
        em.val_acc = validation_accuracy(work, split, config.validation_limit);
        metrics.epochs.push_back(em);

        if (metrics.best_epoch == 0 || em.val_acc > metrics.best_val_acc) {
            metrics.best_epoch = epoch;
            metrics.best_val_acc = em.val_acc;
            best = current;
            since_best = 0;
        } else if (++since_best >= config.early_stop_patience) {
            break;
        }
    }
    if (metrics.best_epoch == 0) best = current;
    return {std::move(best), std::move(metrics)};
}

std::pair<ExpertVector, TrainMetrics> train_svf_expert(const PolicyModel& model, const TaskSplit& split,
                                                       const TrainConfig& config, std::uint64_t seed, std::string name) {
    if (split.train.empty()) throw EmptySplit(std::string(family_name(split.family)) + ": empty train portion");
    const std::string tag(category_name(domain_of(split.family)));
    if (name.empty()) name = std::string(family_name(split.family));
    ExpertVector init = init_expert(model.config(), config, seed, name, tag);
    init.provenance.training_task = std::string(family_name(split.family));
    auto [trained, metrics] = train_adapter(model, std::move(init), split, Objective::PolicyGradient, config, seed);
    return {std::get<ExpertVector>(std::move(trained)), std::move(metrics)};
}

std::pair<TrainableAdapter, TrainMetrics> train_next_token(const PolicyModel& model, TrainableAdapter initial,
                                                           const TaskSplit& split, const TrainConfig& config,
                                                           std::uint64_t seed) {
    return train_adapter(model, std::move(initial), split, Objective::NextToken, config, seed);
}

std::pair<LoraAdapter, TrainMetrics> train_lora(const PolicyModel& model, const TaskSplit& split, Objective objective,
                                                const TrainConfig& config, std::uint64_t seed, const std::set<Site>& sites,
                                                std::size_t rank, double alpha, double dropout_p) {
    LoraAdapter init = init_lora(model.config().lora_shapes(sites), rank, alpha, dropout_p, seed);
    init.name = "lora-" + std::string(family_name(split.family));
    auto [trained, metrics] = train_adapter(model, std::move(init), split, objective, config, seed);
    return {std::get<LoraAdapter>(std::move(trained)), std::move(metrics)};
}

LoraSweepResult lora_sweep(const PolicyModel& model, const TaskSplit& split, Objective objective,
                           const TrainConfig& config, std::uint64_t seed, const std::set<Site>& sites,
                           std::span<const double> learning_rates, std::span<const double> clip_norms) {
    if (learning_rates.empty() || clip_norms.empty()) throw ConfigError("lora sweep needs at least one setting");
    std::optional<LoraSweepResult> best;
    for (double lr : learning_rates) {
        for (double clip : clip_norms) {
            TrainConfig tc = config;
            tc.learning_rate = lr;
            tc.clip_max_norm = clip;
            auto [adapter, metrics] = train_lora(model, split, objective, tc, seed, sites);
            if (!best || metrics.best_val_acc > best->metrics.best_val_acc) {
                best = LoraSweepResult{std::move(adapter), std::move(metrics), lr, clip};
            }
        }
    }
    return std::move(*best);
}

// ---------------------------------------------------------------------------
// pretraining

double corpus_loss(const PolicyModel& model, std::span<const TaskInstance> instances) {
    if (instances.empty()) throw EmptyEval("empty corpus");
    std::vector<double> losses(instances.size());
    const auto n = static_cast<long long>(instances.size());
#pragma omp parallel for schedule(dynamic)
    for (long long ii = 0; ii < n; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        const auto seq = instances[i].full_sequence();
        const Matrix lp = model.forward(seq);
        double nll = 0.0;
        for (std::size_t t = seq.prompt_len; t < seq.size(); ++t) nll -= lp(t - 1, seq.tokens[t]);
        losses[i] = nll / static_cast<double>(seq.size() - seq.prompt_len);
    }
    return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(losses.size());
}

std::pair<PolicyModel, PretrainMetrics> pretrain_base(PolicyModel model, std::span<const TaskSplit> band_families,
                                                      const PretrainConfig& config, std::uint64_t seed,
                                                      std::span<const TaskSplit> auxiliary) {
    config.validate();
    PretrainMetrics metrics;
    if (config.max_epochs == 0) return {std::move(model), std::move(metrics)};
    if (band_families.empty()) throw EmptySplit("no task families to pretrain on");
    model.clear_adaptation();

    std::vector<TaskSplit> families(band_families.begin(), band_families.end());
    families.insert(families.end(), auxiliary.begin(), auxiliary.end());
    for (const auto& f : families) metrics.families.push_back(f.family);

    const auto dispatch = build_classification_dataset(band_families, seed, config.classification_per_class).as_task_split();
    std::vector<const TaskInstance*> dispatch_pool;
    for (const auto& inst : dispatch.train) dispatch_pool.push_back(&inst);
    std::vector<TaskInstance> dispatch_eval(dispatch.validation.begin(),
                                            dispatch.validation.begin() + static_cast<long>(std::min(config.eval_limit, dispatch.validation.size())));

    std::vector<char> active(families.size(), 1);
    std::vector<double> theta;
    model.params().for_each([&](ParamKey, const Matrix& m) { theta.insert(theta.end(), m.values().begin(), m.values().end()); });
    AdamW opt(theta.size(), 0.9, 0.999, 1e-8, config.weight_decay);

    auto write_back = [&](PolicyModel& m) {
        std::size_t off = 0;
        m.mutable_params().for_each([&](ParamKey, Matrix& t) {
            std::copy(theta.begin() + static_cast<long>(off), theta.begin() + static_cast<long>(off + t.size()), t.values().begin());
            off += t.size();
        });
    };

    auto check_band = [&](std::size_t step, double loss) -> bool {
        PretrainMetrics::Row row;
        row.step = step;
        row.loss = loss;
        bool ok = true;
        for (std::size_t f = 0; f < families.size(); ++f) {
            std::span<const TaskInstance> val = families[f].validation;
            val = val.first(std::min(config.eval_limit, val.size()));
            const double acc = evaluate(model, val);
            row.family_acc.push_back(acc);
            if (f < band_families.size()) ok = ok && acc >= config.band_low && acc <= config.band_high;
            if (config.require_band) active[f] = acc < config.gate_target;
        }
        row.dispatch_acc = evaluate(model, dispatch_eval);
        metrics.final_family_acc = row.family_acc;
        metrics.rows.push_back(std::move(row));
        return ok;
    };

    std::size_t step = 0;
    auto train_batch = [&](std::span<const TaskInstance* const> batch) -> double {
        const double scale = 1.0 / static_cast<double>(batch.size());
        std::vector<std::vector<double>> grads(batch.size());
        std::vector<double> losses(batch.size());
        const auto nb = static_cast<long long>(batch.size());
#pragma omp parallel for schedule(dynamic)
        for (long long ii = 0; ii < nb; ++ii) {
            const auto i = static_cast<std::size_t>(ii);
            const auto seq = batch[i]->full_sequence();
            ForwardCache cache = model.forward_cached(seq);
            SequenceLoss sl = next_token_loss(cache, seq.prompt_len, scale);
            losses[i] = sl.loss;
            const ModelGradients g = model.backward(cache, sl.dlogits);
            auto& flat = grads[i];
            flat.reserve(theta.size());
            g.params.for_each([&](ParamKey, const Matrix& m) { flat.insert(flat.end(), m.values().begin(), m.values().end()); });
        }
        std::vector<double> grad(theta.size(), 0.0);
        double loss = 0.0;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += grads[i][k];
            loss += losses[i];
        }
        clip_global_norm(grad, config.clip_max_norm);
        opt.step(theta, grad, config.learning_rate);
        for (double v : theta)
            if (!std::isfinite(v)) throw Diverged("non-finite base weight during pretraining");
        write_back(model);
        ++step;
        return loss;
    };

    // Warmup on the auxiliary families alone, with clean answers.
    for (std::size_t epoch = 0; epoch < config.auxiliary_warmup_epochs && !auxiliary.empty(); ++epoch) {
        std::vector<const TaskInstance*> pool;
        for (const auto& f : auxiliary)
            for (const auto& inst : f.train) pool.push_back(&inst);
        SeededRng shuffler(seed, StreamPurpose::Batching, {0xa07, epoch});
        shuffler.shuffle(pool);
        for (std::size_t b0 = 0; b0 < pool.size(); b0 += config.batch_size) {
            const std::size_t bsz = std::min(config.batch_size, pool.size() - b0);
            train_batch(std::span<const TaskInstance* const>(pool).subspan(b0, bsz));
        }
    }
    metrics.warmup_steps = step;

    bool done = false;
    for (std::size_t epoch = 0; epoch < config.max_epochs && !done; ++epoch) {
        // Each epoch redraws which train instances carry the distractor answer,
        // so the base model learns a per-prompt mixture rather than a lookup.
        std::vector<TaskInstance> corpus;
        for (std::size_t f = 0; f < families.size(); ++f) {
            if (!active[f]) continue;
            for (std::size_t i = 0; i < families[f].train.size(); ++i) {
                TaskInstance inst = families[f].train[i];
                SeededRng coin(seed, StreamPurpose::TaskData, {0xd15, static_cast<std::uint64_t>(inst.family), epoch, i});
                if (coin.bernoulli(config.distractor_rate)) inst.reference.tokens = distractor_answer(inst);
                corpus.push_back(std::move(inst));
            }
        }
        std::vector<const TaskInstance*> pool = dispatch_pool;
        for (const auto& inst : corpus) pool.push_back(&inst);
        SeededRng shuffler(seed, StreamPurpose::Batching, {0x9e7, epoch});
        shuffler.shuffle(pool);

        for (std::size_t b0 = 0; b0 < pool.size() && !done; b0 += config.batch_size) {
            const std::size_t bsz = std::min(config.batch_size, pool.size() - b0);
            const double loss = train_batch(std::span<const TaskInstance* const>(pool).subspan(b0, bsz));
            if (config.require_band && step % config.eval_every == 0) done = check_band(step, loss);
        }
        if (!config.require_band) check_band(step, 0.0);
    }

    model.rebuild_factors();
    if (config.require_band && !done) {
        std::string accs;
        for (std::size_t f = 0; f < band_families.size(); ++f) {
            accs += std::string(f ? ", " : "") + std::string(family_name(families[f].family)) + "=" + std::to_string(metrics.final_family_acc[f]);
        }
        throw PretrainBandError("validation accuracies never all landed in [" + std::to_string(config.band_low) + ", " +
                                std::to_string(config.band_high) + "]: " + accs);
    }
    metrics.band_satisfied = done;
    return {std::move(model), std::move(metrics)};
}

}  // namespace svf
