// svf: command-line driver for pretraining, expert training, adaptation,
// evaluation and the analysis reports. Each writing subcommand fills one run
// directory with config.ini, run.json, run.log and its artifacts.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "svf/adapt.hpp"
#include "svf/analysis.hpp"
#include "svf/checkpoint.hpp"
#include "svf/config.hpp"
#include "svf/errors.hpp"
#include "svf/pipeline.hpp"

#ifndef SVF_GIT_DESCRIBE
#define SVF_GIT_DESCRIBE "unknown"
#endif

namespace fs = std::filesystem;
using namespace svf;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

// Raised for bad arguments discovered after parsing; maps to exit code 1.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool overwrite = false;
};

RunConfig load_config(const Common& c) { return c.config_path.empty() ? RunConfig{} : RunConfig::load(c.config_path); }

std::uint64_t run_seed(const Common& c, const RunConfig& cfg) { return c.seed.value_or(cfg.experiment.seed); }

class RunDir {
public:
    RunDir(const Common& c, const RunConfig& cfg, std::uint64_t seed, const std::string& command) : path_(c.out) {
        if (c.out.empty()) throw UsageError("--out is required");
        if (fs::exists(path_)) {
            if (!c.overwrite) throw UsageError("run directory " + c.out + " exists; pass --overwrite to replace it");
            if (!fs::is_directory(path_)) throw UsageError(c.out + " is not a directory");
            const bool empty = fs::directory_iterator(path_) == fs::directory_iterator();
            if (!empty && !fs::exists(path_ / "run.json")) {
                throw UsageError(c.out + " is not a run directory; refusing to replace it");
            }
            fs::remove_all(path_);
        }
        fs::create_directories(path_);
        write("config.ini", cfg.canonical());
        nlohmann::json run = {{"seed", seed},
                              {"config_hash", cfg.hash()},
                              {"git_describe", SVF_GIT_DESCRIBE},
                              {"command", command}};
        write("run.json", run.dump(2) + "\n");
        log_.open(path_ / "run.log");
    }

    void write(const std::string& name, std::string_view bytes) const { write_file((path_ / name).string(), bytes); }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

    template <class... A>
    void log(const A&... parts) {
        std::ostringstream line;
        (line << ... << parts);
        log_ << line.str() << "\n";
        log_.flush();
        std::cerr << line.str() << "\n";
    }

private:
    fs::path path_;
    std::ofstream log_;
};

void add_common(CLI::App* sub, Common& c, bool with_out = true) {
    sub->add_option("-c,--config", c.config_path, "Run config file (defaults apply when omitted)")->check(CLI::ExistingFile);
    sub->add_option("-s,--seed", c.seed, "Run seed (default: experiment.seed)");
    if (with_out) {
        sub->add_option("-o,--out", c.out, "Run directory")->required();
        sub->add_flag("--overwrite", c.overwrite, "Replace an existing run directory");
    }
}

Objective parse_objective(const std::string& s) {
    if (s == "pg") return Objective::PolicyGradient;
    if (s == "nt") return Objective::NextToken;
    throw UsageError("objective must be pg or nt");
}

PolicyModel load_model(const std::string& path) { return model_from_checkpoint(Checkpoint::load(path)); }

// Every expert checkpoint under the given files or directories, ordered by
// category with the classifier kept apart.
ExpertLibrary load_library(const std::vector<std::string>& paths) {
    std::vector<fs::path> files;
    for (const auto& p : paths) {
        if (fs::is_directory(p)) {
            for (const auto& e : fs::recursive_directory_iterator(p))
                if (e.is_regular_file() && e.path().extension() == ".svf2") files.push_back(e.path());
        } else {
            files.emplace_back(p);
        }
    }
    std::sort(files.begin(), files.end());
    ExpertLibrary lib;
    for (const auto& f : files) {
        const auto c = Checkpoint::load(f.string());
        if (c.type != CheckpointType::Expert) continue;
        auto e = expert_from_checkpoint(c);
        if (e.domain_tag == "classifier") {
            if (lib.classifier) throw IncompatibleExperts("more than one classifier expert in the library");
            lib.classifier = std::move(e);
        } else {
            lib.experts.push_back(std::move(e));
        }
    }
    if (lib.experts.empty()) throw EmptyLibrary("no expert checkpoints found");
    std::stable_sort(lib.experts.begin(), lib.experts.end(), [](const ExpertVector& a, const ExpertVector& b) {
        return static_cast<int>(parse_category(a.domain_tag).value_or(Category::Others)) <
               static_cast<int>(parse_category(b.domain_tag).value_or(Category::Others));
    });
    lib.validate();
    return lib;
}

StrategyKind parse_strategy(const std::string& s) {
    if (s == "prompt") return StrategyKind::Prompt;
    if (s == "classifier") return StrategyKind::Classifier;
    if (s == "cem") return StrategyKind::FixedAlpha;
    throw UsageError("strategy must be prompt, classifier or cem");
}

// --- subcommands ----------------------------------------------------------------

int cmd_pretrain(const Common& c) {
    const auto cfg = load_config(c);
    const auto seed = run_seed(c, cfg);
    RunDir dir(c, cfg, seed, "pretrain");
    const auto t0 = Clock::now();
    auto [model, metrics] = pretrain_reference(cfg, seed);
    dir.write("model.svf2", model_checkpoint(model, "base-seed" + std::to_string(seed), cfg.hash()).serialize());
    dir.write("pretrain_metrics.csv", metrics.to_csv());
    std::ostringstream acc;
    for (std::size_t i = 0; i < metrics.families.size(); ++i)
        acc << " " << family_name(metrics.families[i]) << "=" << metrics.final_family_acc[i];
    dir.log("pretrain seed ", seed, ": ", metrics.rows.empty() ? 0 : metrics.rows.back().step, " steps,", acc.str());
    dir.log("pretrain seconds ", seconds_since(t0));
    return 0;
}

int cmd_decompose(const Common& c, const std::string& model_path) {
    const auto cfg = load_config(c);
    RunDir dir(c, cfg, run_seed(c, cfg), "decompose");
    const auto t0 = Clock::now();
    const auto model = load_model(model_path);
    dir.write("factors.svf2", factors_checkpoint(model, cfg.hash()).serialize());
    dir.log("decompose ", model.factors().size(), " matrices in ", seconds_since(t0), " s");
    return 0;
}

int cmd_train_expert(const Common& c, const std::string& model_path, const std::string& family,
                     const std::string& method, const std::string& objective) {
    const auto cfg = load_config(c);
    const auto seed = run_seed(c, cfg);
    const Family fam = parse_family(family);
    const Objective obj = parse_objective(objective);
    if (method != "svf" && method != "lora") throw UsageError("method must be svf or lora");
    RunDir dir(c, cfg, seed, "train-expert " + method + " " + objective + " " + family);
    const auto model = load_model(model_path);
    const auto split = generate_family(fam, seed, cfg.sizes);
    const auto t0 = Clock::now();
    if (method == "svf") {
        const auto r = train_family_expert(model, split, obj, cfg, seed);
        dir.write("expert.svf2", expert_checkpoint(r.expert).serialize());
        dir.write("metrics.csv", r.metrics.to_csv());
        dir.log("svf ", objective, " expert ", family, ": best val ", r.metrics.best_val_acc, " at epoch ", r.metrics.best_epoch,
                ", ", r.expert.parameter_count(), " parameters");
    } else {
        const auto r = lora_sweep(model, split, obj, cfg.train, seed, cfg.lora.sites, cfg.lora.sweep_learning_rates,
                                  cfg.lora.sweep_clip_norms);
        dir.write("adapter.svf2", lora_checkpoint(r.adapter, model_hash(model), cfg.hash()).serialize());
        dir.write("metrics.csv", r.metrics.to_csv());
        dir.log("lora ", objective, " adapter ", family, ": best val ", r.metrics.best_val_acc, " lr ", r.learning_rate,
                " clip ", r.clip_max_norm, ", ", r.adapter.parameter_count(), " parameters");
    }
    dir.log("train seconds ", seconds_since(t0));
    return 0;
}

int cmd_train_classifier(const Common& c, const std::string& model_path) {
    const auto cfg = load_config(c);
    const auto seed = run_seed(c, cfg);
    RunDir dir(c, cfg, seed, "train-classifier");
    const auto model = load_model(model_path);
    const auto t0 = Clock::now();
    const auto r = train_reference_classifier(model, training_splits(cfg, seed), cfg, seed);
    dir.write("classifier.svf2", expert_checkpoint(r.expert).serialize());
    dir.write("metrics.csv", r.metrics.to_csv());
    dir.log("classifier: best val ", r.metrics.best_val_acc, " at epoch ", r.metrics.best_epoch);
    dir.log("train seconds ", seconds_since(t0));
    return 0;
}

int cmd_adapt(const Common& c, const std::string& model_path, const std::vector<std::string>& library,
              const std::string& family, const std::string& strategy) {
    const auto cfg = load_config(c);
    const auto seed = run_seed(c, cfg);
    const Family fam = parse_family(family);
    const StrategyKind kind = parse_strategy(strategy);
    RunDir dir(c, cfg, seed, "adapt " + strategy + " " + family);
    const auto model = load_model(model_path);
    const auto lib = load_library(library);
    const auto split = generate_family(fam, seed, cfg.sizes);

    nlohmann::json out;
    if (kind == StrategyKind::FixedAlpha) {
        const auto t0 = Clock::now();
        const auto r = adapt_cem(model, lib, split.few_shot_holdout, cfg.cem, seed);
        const double search = seconds_since(t0);
        const auto t1 = Clock::now();
        const double test = evaluate(model, TrainableAdapter(r.composed), split.test);
        out = nlohmann::json::parse(r.to_json());
        out["test_score"] = test;
        out["holdout_size"] = split.few_shot_holdout.size();
        dir.write("composed.svf2", expert_checkpoint(r.composed).serialize());
        dir.log("pass1 (cem search) seconds ", search, ", ", r.iterations, " iterations");
        dir.log("pass2 (test decoding) seconds ", seconds_since(t1));
    } else {
        const TwoPassEngine engine(model, lib);
        Strategy st;
        st.kind = kind;
        std::map<std::string, std::size_t> counts;
        std::size_t correct = 0;
        double p1 = 0.0, p2 = 0.0;
        for (const auto& inst : split.test) {
            const auto r = engine.infer(st, inst.prompt, generation_budget(inst));
            correct += reward(r.output, inst.reference) > 0;
            ++counts[std::string(category_name(r.category.value_or(Category::Others)))];
            p1 += r.pass1_seconds;
            p2 += r.pass2_seconds;
        }
        out["strategy"] = strategy_name(kind);
        out["categories"] = counts;
        out["test_score"] = static_cast<double>(correct) / static_cast<double>(split.test.size());
        dir.log("pass1 (dispatch) seconds ", p1);
        dir.log("pass2 (decoding) seconds ", p2);
    }
    out["family"] = family_name(fam);
    dir.write("adaptation.json", out.dump(2) + "\n");
    dir.log("test score ", out["test_score"].get<double>());
    return 0;
}

int cmd_eval(const Common& c, const std::string& model_path, const std::string& adapter_path,
             const std::string& family, const std::string& split_name) {
    const auto cfg = load_config(c);
    const auto seed = run_seed(c, cfg);
    const Family fam = parse_family(family);
    const auto split = generate_family(fam, seed, cfg.sizes);
    const auto portion = split.portion(split_name);
    auto model = load_model(model_path);
    std::optional<TrainableAdapter> adapter;
    if (!adapter_path.empty()) {
        const auto ck = Checkpoint::load(adapter_path);
        if (ck.type == CheckpointType::Expert) adapter = expert_from_checkpoint(ck);
        else if (ck.type == CheckpointType::Lora) adapter = lora_from_checkpoint(ck);
        else throw UsageError("adapter must be an expert or lora checkpoint");
    }
    nlohmann::json score = {{"family", family_name(fam)},
                            {"split", split_name},
                            {"seed", seed},
                            {"n", portion.size()},
                            {"accuracy", evaluate(model, adapter, portion)}};
    const std::string text = score.dump(2) + "\n";
    std::cout << text;
    if (!c.out.empty()) {
        RunDir dir(c, cfg, seed, "eval " + family + " " + split_name);
        dir.write("score.json", text);
    }
    return 0;
}

int cmd_dump_tasks(const Common& c, const std::string& family) {
    const auto cfg = load_config(c);
    const auto seed = run_seed(c, cfg);
    const auto text = dump_ldjson(generate_family(parse_family(family), seed, cfg.sizes));
    if (c.out.empty()) {
        std::cout << text;
    } else {
        RunDir dir(c, cfg, seed, "dump-tasks " + family);
        dir.write("tasks.ldjson", text);
    }
    return 0;
}

struct AnalyzeArgs {
    std::string model, factors, target_model;
    std::vector<std::string> library, target_library;
    std::string train_family = "mod10-add", unseen_family = "mod10-add-3op";
    bool cross_cem = false;
};

int cmd_analyze(const std::string& what, const Common& c, const AnalyzeArgs& a) {
    const auto cfg = load_config(c);
    const auto seed = run_seed(c, cfg);
    RunDir dir(c, cfg, seed, "analyze " + what);
    const auto t0 = Clock::now();
    if (what == "pca") {
        std::ostringstream csv;
        if (!a.factors.empty()) {
            PcaReport rep;
            for (const auto& [id, f] : factors_from_checkpoint(Checkpoint::load(a.factors))) {
                PcaReport::Entry e{id, f.sigma, {}};
                for (auto r : cfg.experiment.pca_grid) {
                    const auto rr = std::min<std::size_t>(r, f.rank());
                    e.ratios.emplace_back(rr, pca_ratio(f, rr));
                }
                rep.entries.push_back(std::move(e));
            }
            dir.write("pca.csv", rep.to_csv());
        } else {
            if (a.model.empty()) throw UsageError("pca needs --model or --factors");
            dir.write("pca.csv", pca_report(load_model(a.model), cfg.experiment.pca_grid).to_csv());
        }
    } else if (what == "confusion") {
        if (a.model.empty() || a.library.empty()) throw UsageError("confusion needs --model and --library");
        const TwoPassEngine engine(load_model(a.model), load_library(a.library));
        const auto prompts = labeled_prompts(training_splits(cfg, seed), "test");
        for (auto kind : {StrategyKind::Prompt, StrategyKind::Classifier}) {
            if (kind == StrategyKind::Classifier && !engine.library().classifier) continue;
            const auto m = confusion(engine, kind, prompts);
            dir.write("confusion_" + std::string(strategy_name(kind)) + ".csv", m.to_csv());
            dir.log(strategy_name(kind), ": pooled ", m.pooled_accuracy(), ", diagonal dominant ", m.diagonal_dominant());
        }
    } else if (what == "transfer") {
        if (a.library.empty() || a.target_model.empty()) throw UsageError("transfer needs --library and --target-model");
        const auto source = load_library(a.library);
        const auto target = load_model(a.target_model);
        std::optional<ExpertLibrary> target_lib;
        if (!a.target_library.empty()) target_lib = load_library(a.target_library);
        const auto rep = transfer_experiment(source, target, unseen_splits(cfg, seed), cfg.experiment.shuffle_seeds,
                                             target_lib ? &*target_lib : nullptr, cfg.cem, seed);
        dir.write("transfer.csv", rep.to_csv());
    } else if (what == "ablation") {
        if (a.model.empty()) throw UsageError("ablation needs --model");
        AblationSpec spec;
        spec.train_task = generate_family(parse_family(a.train_family), seed, cfg.sizes);
        spec.unseen_task = generate_family(parse_family(a.unseen_family), seed, cfg.sizes);
        spec.svf_config = cfg.train;
        spec.lora_config = cfg.train;
        spec.lora_learning_rates = cfg.lora.sweep_learning_rates;
        spec.lora_clip_norms = cfg.lora.sweep_clip_norms;
        spec.seed = seed;
        const auto cells = reference_ablation_cells();
        dir.write("ablation.csv", ablation_csv(run_ablation_grid(load_model(a.model), spec, cells)));
    } else {
        throw UsageError("unknown analysis '" + what + "'");
    }
    dir.log("analyze ", what, " seconds ", seconds_since(t0));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Singular-value fine-tuning experiments on synthetic task families"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(SVF_GIT_DESCRIBE));

    Common common;
    std::string model, adapter, family, method = "svf", objective = "pg", split = "test", strategy = "cem", what;
    std::vector<std::string> library;
    AnalyzeArgs an;
    std::function<int()> action;

    auto* pre = app.add_subcommand("pretrain", "Pretrain a base model into a run directory");
    add_common(pre, common);
    pre->callback([&] { action = [&] { return cmd_pretrain(common); }; });

    auto* dec = app.add_subcommand("decompose", "Write the SVD factor cache of a model checkpoint");
    add_common(dec, common);
    dec->add_option("-m,--model", model, "Model checkpoint")->required()->check(CLI::ExistingFile);
    dec->callback([&] { action = [&] { return cmd_decompose(common, model); }; });

    auto* te = app.add_subcommand("train-expert", "Train an SVF expert or LoRA adapter on one family");
    add_common(te, common);
    te->add_option("-m,--model", model, "Model checkpoint")->required()->check(CLI::ExistingFile);
    te->add_option("-f,--family", family, "Task family")->required();
    te->add_option("--method", method, "svf or lora")->check(CLI::IsMember({"svf", "lora"}));
    te->add_option("--objective", objective, "pg or nt")->check(CLI::IsMember({"pg", "nt"}));
    te->callback([&] { action = [&] { return cmd_train_expert(common, model, family, method, objective); }; });

    auto* tc = app.add_subcommand("train-classifier", "Train the dispatch classifier expert");
    add_common(tc, common);
    tc->add_option("-m,--model", model, "Model checkpoint")->required()->check(CLI::ExistingFile);
    tc->callback([&] { action = [&] { return cmd_train_classifier(common, model); }; });

    auto* ad = app.add_subcommand("adapt", "Two-pass adaptation on an unseen family");
    add_common(ad, common);
    ad->add_option("-m,--model", model, "Model checkpoint")->required()->check(CLI::ExistingFile);
    ad->add_option("-l,--library", library, "Expert checkpoints or directories holding them")->required();
    ad->add_option("-f,--family", family, "Task family")->required();
    ad->add_option("--strategy", strategy, "prompt, classifier or cem")->check(CLI::IsMember({"prompt", "classifier", "cem"}));
    ad->callback([&] { action = [&] { return cmd_adapt(common, model, library, family, strategy); }; });

    auto* ev = app.add_subcommand("eval", "Greedy accuracy of a model, optionally with an adapter");
    add_common(ev, common, false);
    ev->add_option("-o,--out", common.out, "Run directory (score is always printed)");
    ev->add_flag("--overwrite", common.overwrite, "Replace an existing run directory");
    ev->add_option("-m,--model", model, "Model checkpoint")->required()->check(CLI::ExistingFile);
    ev->add_option("-a,--adapter", adapter, "Expert or LoRA checkpoint")->check(CLI::ExistingFile);
    ev->add_option("-f,--family", family, "Task family")->required();
    ev->add_option("--split", split, "train, validation, test or holdout")
        ->check(CLI::IsMember({"train", "validation", "test", "holdout"}));
    ev->callback([&] { action = [&] { return cmd_eval(common, model, adapter, family, split); }; });

    auto* dt = app.add_subcommand("dump-tasks", "Write a family's split as line-delimited JSON");
    add_common(dt, common, false);
    dt->add_option("-o,--out", common.out, "Run directory (stdout when omitted)");
    dt->add_flag("--overwrite", common.overwrite, "Replace an existing run directory");
    dt->add_option("-f,--family", family, "Task family")->required();
    dt->callback([&] { action = [&] { return cmd_dump_tasks(common, family); }; });

    auto* az = app.add_subcommand("analyze", "pca, confusion, transfer or ablation report");
    add_common(az, common);
    az->add_option("what", what, "pca|confusion|transfer|ablation")
        ->required()
        ->check(CLI::IsMember({"pca", "confusion", "transfer", "ablation"}));
    az->add_option("-m,--model", an.model, "Model checkpoint")->check(CLI::ExistingFile);
    az->add_option("--factors", an.factors, "Factor cache (pca)")->check(CLI::ExistingFile);
    az->add_option("-l,--library", an.library, "Expert library (confusion, transfer source)");
    az->add_option("--target-model", an.target_model, "Transfer target model")->check(CLI::ExistingFile);
    az->add_option("--target-library", an.target_library, "Transfer target library for pooled CEM");
    az->add_option("--train-family", an.train_family, "Ablation training family");
    az->add_option("--unseen-family", an.unseen_family, "Ablation unseen family");
    az->callback([&] { action = [&] { return cmd_analyze(what, common, an); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        return action();
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const UnknownFamily& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
