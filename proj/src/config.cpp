#include "svf/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "svf/errors.hpp"

namespace svf {

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view s) {
    std::vector<std::string> out;
    if (trim(s).empty()) return out;
    std::size_t start = 0;
    while (true) {
        const auto comma = s.find(',', start);
        out.push_back(trim(s.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

// Shortest text that reads back to the same double.
std::string fmt_double(double v) {
    char buf[32];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

double to_double(const std::string& s) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        throw ConfigError("not a number: '" + s + "'");
    }
    if (used != s.size()) throw ConfigError("not a number: '" + s + "'");
    return v;
}

std::uint64_t to_u64(const std::string& s) {
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError("not a non-negative integer: '" + s + "'");
    return v;
}

bool to_bool(const std::string& s) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError("not a boolean: '" + s + "'");
}

struct Field {
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

// Field builders over a member accessor. Getters reuse the mutable accessor.
template <class Access>
Field dbl(Access a) {
    return {[a](const RunConfig& c) { return fmt_double(a(const_cast<RunConfig&>(c))); },
            [a](RunConfig& c, const std::string& v) { a(c) = to_double(v); }};
}
template <class Access>
Field u64(Access a) {
    return {[a](const RunConfig& c) { return std::to_string(a(const_cast<RunConfig&>(c))); },
            [a](RunConfig& c, const std::string& v) { a(c) = static_cast<std::remove_reference_t<decltype(a(c))>>(to_u64(v)); }};
}
template <class Access>
Field boolean(Access a) {
    return {[a](const RunConfig& c) { return std::string(a(const_cast<RunConfig&>(c)) ? "true" : "false"); },
            [a](RunConfig& c, const std::string& v) { a(c) = to_bool(v); }};
}
template <class Access>
Field u64_list(Access a) {
    return {[a](const RunConfig& c) {
                std::string out;
                for (auto v : a(const_cast<RunConfig&>(c))) out += (out.empty() ? "" : ", ") + std::to_string(v);
                return out;
            },
            [a](RunConfig& c, const std::string& v) {
                auto& dst = a(c);
                dst.clear();
                for (const auto& item : split_list(v)) dst.push_back(static_cast<std::remove_reference_t<decltype(dst[0])>>(to_u64(item)));
            }};
}
template <class Access>
Field dbl_list(Access a) {
    return {[a](const RunConfig& c) {
                std::string out;
                for (double v : a(const_cast<RunConfig&>(c))) out += (out.empty() ? "" : ", ") + fmt_double(v);
                return out;
            },
            [a](RunConfig& c, const std::string& v) {
                auto& dst = a(c);
                dst.clear();
                for (const auto& item : split_list(v)) dst.push_back(to_double(item));
            }};
}
template <class Access>
Field site_set(Access a) {
    return {[a](const RunConfig& c) {
                std::string out;
                for (Site s : a(const_cast<RunConfig&>(c))) out += (out.empty() ? "" : ", ") + std::string(site_name(s));
                return out;
            },
            [a](RunConfig& c, const std::string& v) {
                auto& dst = a(c);
                dst.clear();
                for (const auto& item : split_list(v)) {
                    const auto s = parse_site(item);
                    if (!s) throw ConfigError("unknown site '" + item + "'");
                    dst.insert(*s);
                }
            }};
}

#define ACC(expr) [](RunConfig& c) -> auto& { return c.expr; }

const std::map<std::string, Field>& fields() {
    static const std::map<std::string, Field> table = {
        {"model.init_seed", u64(ACC(init_seed))},
        {"model.context_len", u64(ACC(model.context_len))},
        {"model.n_layers", u64(ACC(model.n_layers))},
        {"model.d_model", u64(ACC(model.d_model))},
        {"model.n_heads", u64(ACC(model.n_heads))},
        {"model.d_mlp", u64(ACC(model.d_mlp))},
        {"model.svf_sites", site_set(ACC(model.svf_sites))},

        {"task.train_size", u64(ACC(sizes.train))},
        {"task.validation_size", u64(ACC(sizes.validation))},
        {"task.test_size", u64(ACC(sizes.test))},
        {"task.few_shot_size", u64(ACC(sizes.few_shot_holdout))},

        {"pretrain.learning_rate", dbl(ACC(pretrain.learning_rate))},
        {"pretrain.batch_size", u64(ACC(pretrain.batch_size))},
        {"pretrain.max_epochs", u64(ACC(pretrain.max_epochs))},
        {"pretrain.eval_every", u64(ACC(pretrain.eval_every))},
        {"pretrain.eval_limit", u64(ACC(pretrain.eval_limit))},
        {"pretrain.band_low", dbl(ACC(pretrain.band_low))},
        {"pretrain.band_high", dbl(ACC(pretrain.band_high))},
        {"pretrain.gate_target", dbl(ACC(pretrain.gate_target))},
        {"pretrain.classification_per_class", u64(ACC(pretrain.classification_per_class))},
        {"pretrain.distractor_rate", dbl(ACC(pretrain.distractor_rate))},
        {"pretrain.auxiliary", boolean(ACC(pretrain_auxiliary))},
        {"pretrain.auxiliary_warmup_epochs", u64(ACC(pretrain.auxiliary_warmup_epochs))},
        {"pretrain.weight_decay", dbl(ACC(pretrain.weight_decay))},
        {"pretrain.clip_max_norm", dbl(ACC(pretrain.clip_max_norm))},
        {"pretrain.require_band", boolean(ACC(pretrain.require_band))},

        {"train.learning_rate", dbl(ACC(train.learning_rate))},
        {"train.batch_size", u64(ACC(train.batch_size))},
        {"train.clip_max_norm", dbl(ACC(train.clip_max_norm))},
        {"train.kl_lambda", dbl(ACC(train.kl_lambda))},
        {"train.max_epochs", u64(ACC(train.max_epochs))},
        {"train.early_stop_patience", u64(ACC(train.early_stop_patience))},
        {"train.z_init_mean", dbl(ACC(train.z_init_mean))},
        {"train.z_init_variance", dbl(ACC(train.z_init_variance))},
        {"train.baseline", boolean(ACC(train.baseline_enabled))},
        {"train.temperature", dbl(ACC(train.temperature))},
        {"train.weight_decay", dbl(ACC(train.weight_decay))},
        {"train.beta1", dbl(ACC(train.beta1))},
        {"train.beta2", dbl(ACC(train.beta2))},
        {"train.adam_eps", dbl(ACC(train.adam_eps))},
        {"train.validation_limit", u64(ACC(train.validation_limit))},

        {"lora.rank", u64(ACC(lora.rank))},
        {"lora.alpha", dbl(ACC(lora.alpha))},
        {"lora.dropout", dbl(ACC(lora.dropout))},
        {"lora.sites", site_set(ACC(lora.sites))},
        {"lora.sweep_learning_rates", dbl_list(ACC(lora.sweep_learning_rates))},
        {"lora.sweep_clip_norms", dbl_list(ACC(lora.sweep_clip_norms))},

        {"cem.num_samples", u64(ACC(cem.num_samples))},
        {"cem.num_elites", u64(ACC(cem.num_elites))},
        {"cem.max_iterations", u64(ACC(cem.max_iterations))},
        {"cem.granularity",
         Field{[](const RunConfig& c) { return std::string(granularity_name(c.cem.granularity)); },
               [](RunConfig& c, const std::string& v) { c.cem.granularity = parse_granularity(v); }}},
        {"cem.normalized", boolean(ACC(cem.normalized))},
        {"cem.init_mu", dbl_list(ACC(cem.init_mu))},
        {"cem.init_sigma", dbl(ACC(cem.init_sigma))},
        {"cem.convergence_sigma", dbl(ACC(cem.convergence_sigma))},

        {"experiment.seed", u64(ACC(experiment.seed))},
        {"experiment.seeds", u64_list(ACC(experiment.seeds))},
        {"experiment.shuffle_seeds", u64_list(ACC(experiment.shuffle_seeds))},
        {"experiment.classification_per_class", u64(ACC(experiment.classification_per_class))},
        {"experiment.pca_grid", u64_list(ACC(experiment.pca_grid))},
    };
    return table;
}

#undef ACC

}  // namespace

RunConfig RunConfig::parse(std::string_view text) {
    RunConfig cfg;
    const auto& table = fields();
    std::set<std::string> seen;
    std::string section;
    std::size_t line_no = 0;
    std::istringstream in{std::string(text)};
    std::string raw;
    while (std::getline(in, raw)) {
        ++line_no;
        const auto hash = raw.find('#');
        const std::string line = trim(std::string_view(raw).substr(0, hash));
        if (line.empty()) continue;
        const std::string where = "line " + std::to_string(line_no) + ": ";
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + "unterminated section header");
            section = trim(std::string_view(line).substr(1, line.size() - 2));
            const bool known = std::any_of(table.begin(), table.end(),
                                           [&](const auto& kv) { return kv.first.starts_with(section + "."); });
            if (!known) throw ConfigError(where + "unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
        if (section.empty()) throw ConfigError(where + "key outside any section");
        const std::string key = section + "." + trim(std::string_view(line).substr(0, eq));
        const std::string value = trim(std::string_view(line).substr(eq + 1));
        const auto it = table.find(key);
        if (it == table.end()) throw ConfigError(where + "unknown key '" + key + "'");
        if (!seen.insert(key).second) throw ConfigError(where + "repeated key '" + key + "'");
        try {
            it->second.set(cfg, value);
        } catch (const ConfigError& e) {
            std::string msg = e.what();
            if (msg.starts_with("ConfigError: ")) msg.erase(0, 13);
            throw ConfigError(where + key + ": " + msg);
        } catch (const Error& e) {
            throw ConfigError(where + key + ": " + e.what());
        }
    }
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

std::string RunConfig::canonical() const {
    std::string out;
    std::string section;
    for (const auto& [key, field] : fields()) {
        const auto dot = key.find('.');
        const std::string sec = key.substr(0, dot);
        if (sec != section) {
            out += (section.empty() ? "" : "\n") + std::string("[") + sec + "]\n";
            section = sec;
        }
        out += key.substr(dot + 1) + " = " + field.get(*this) + "\n";
    }
    return out;
}

std::string RunConfig::hash() const { return hex64(fnv1a(canonical())); }

void RunConfig::validate() const {
    model.validate();
    pretrain.validate();
    train.validate();
    cem.validate();
    if (lora.rank == 0) throw ConfigError("lora.rank must be >= 1");
    if (!(lora.dropout >= 0.0 && lora.dropout < 1.0)) throw ConfigError("lora.dropout must lie in [0, 1)");
    if (lora.sweep_learning_rates.empty() || lora.sweep_clip_norms.empty()) throw ConfigError("lora sweep lists must not be empty");
    if (experiment.seeds.empty()) throw ConfigError("experiment.seeds must not be empty");
    if (experiment.pca_grid.empty()) throw ConfigError("experiment.pca_grid must not be empty");
    if (sizes.train == 0 || sizes.validation == 0 || sizes.test == 0 || sizes.few_shot_holdout == 0) {
        throw ConfigError("every task split size must be >= 1");
    }
}

}  // namespace svf
