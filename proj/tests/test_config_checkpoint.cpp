#include <doctest.h>

#include <filesystem>

#include "svf/checkpoint.hpp"
#include "svf/config.hpp"
#include "svf/errors.hpp"

using namespace svf;

namespace {

// Message without the "ConfigError: " prefix.
std::string error_of(std::string_view text) {
    try {
        RunConfig::parse(text);
    } catch (const ConfigError& e) {
        return std::string(e.what()).substr(13);
    }
    return "";
}

ModelConfig small_config() {
    ModelConfig c;
    c.context_len = 16;
    c.n_layers = 2;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_mlp = 12;
    return c;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("svf_test_" + name)).string();
}

}  // namespace

TEST_CASE("config parsing") {
    const auto cfg = RunConfig::parse(R"(
# comment
[model]
d_model = 16   # trailing comment
init_seed = 3

[train]
learning_rate = 0.05
baseline = true

[lora]
sites = q_proj, v_proj, mlp_in

[experiment]
seeds = 4, 5
)");
    CHECK(cfg.model.d_model == 16);
    CHECK(cfg.init_seed == 3);
    CHECK(cfg.train.learning_rate == 0.05);
    CHECK(cfg.train.baseline_enabled);
    CHECK(cfg.lora.sites == std::set<Site>{Site::q_proj, Site::v_proj, Site::mlp_in});
    CHECK(cfg.experiment.seeds == std::vector<std::uint64_t>{4, 5});
    CHECK(cfg.cem.num_samples == 32);

    const auto ref = RunConfig::load(SVF_SOURCE_DIR "/configs/reference.ini");
    CHECK(ref.train.max_epochs == 8);
    CHECK(ref.train.clip_max_norm == 0.001);
    CHECK(ref.cem.max_iterations == 100);
}

TEST_CASE("config errors carry line numbers") {
    CHECK(error_of("[nope]\n") == "line 1: unknown section [nope]");
    CHECK(error_of("[train]\nlearning_rat = 1\n") == "line 2: unknown key 'train.learning_rat'");
    CHECK(error_of("[train]\nmax_epochs = 2\n\nmax_epochs = 3\n") == "line 4: repeated key 'train.max_epochs'");
    CHECK(error_of("d_model = 3\n") == "line 1: key outside any section");
    CHECK(error_of("[model]\nd_model\n") == "line 2: expected key = value");
    CHECK(error_of("[model]\nd_model = -3\n").starts_with("line 2: model.d_model"));
    CHECK(error_of("[train]\nbaseline = maybe\n").starts_with("line 2:"));
    CHECK(error_of("[lora]\nsites = q_proj, x\n").starts_with("line 2:"));
    CHECK_FALSE(error_of("[train]\nclip_max_norm = 0\n").empty());
    CHECK_THROWS_AS(RunConfig::load("/nonexistent/config.ini"), ConfigError);
}

TEST_CASE("config hash and canonical form") {
    const auto a = RunConfig::parse("[train]\nlearning_rate = 0.1\nmax_epochs = 3\n[cem]\nnum_elites = 4\n");
    const auto b = RunConfig::parse("[cem]\nnum_elites = 4\n[train]\nmax_epochs = 3\nlearning_rate = 0.1\n");
    CHECK(a.hash() == b.hash());
    CHECK(a.hash().size() == 16);
    CHECK(a.hash() != RunConfig{}.hash());
    CHECK(RunConfig::parse("").hash() == RunConfig{}.hash());

    // canonical() is itself a config document
    const auto text = a.canonical();
    CHECK(text.find("[train]") != std::string::npos);
    CHECK(RunConfig::parse(text).canonical() == text);
    CHECK(RunConfig::parse(text).hash() == a.hash());
    CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
    CHECK(hex64(0xabcULL) == "0000000000000abc");
}

TEST_CASE("model checkpoint round trip") {
    PolicyModel m(small_config(), 7);
    m.round_to_float();
    const auto c = model_checkpoint(m, "base", "cafe");
    const auto bytes = c.serialize();
    CHECK(bytes.substr(0, 4) == "SVF2");
    const auto back = model_from_checkpoint(Checkpoint::parse(bytes));
    CHECK(back.config() == m.config());
    CHECK(back.params() == m.params());
    CHECK(model_hash(back) == model_hash(m));
    CHECK(c.meta.at("config_hash") == "cafe");
    CHECK(Checkpoint::parse(bytes).serialize() == bytes);

    const auto path = temp_path("model.svf2");
    c.save(path);
    CHECK(read_file(path) == bytes);
    CHECK(model_from_checkpoint(Checkpoint::load(path)).params() == m.params());
    std::filesystem::remove(path);

    CHECK_THROWS_AS(expert_from_checkpoint(c), CheckpointError);
}

TEST_CASE("expert checkpoint round trip") {
    const PolicyModel m(small_config(), 8);
    ExpertVector e = ones_expert(m.config().svf_ranks(), "mod10");
    e.domain_tag = "math";
    e.provenance = {"0123456789abcdef", "feed", "mod10-add"};
    double k = 0;
    for (auto& [id, z] : e.entries)
        for (auto& v : z) v = 1.0 + (k += 1.0) / 64.0;  // exact in float32
    const auto back = expert_from_checkpoint(Checkpoint::parse(expert_checkpoint(e).serialize()));
    CHECK(back == e);
    CHECK(expert_checkpoint(e).serialize() == expert_checkpoint(back).serialize());
}

TEST_CASE("lora checkpoint round trip") {
    const PolicyModel m(small_config(), 9);
    LoraAdapter a = init_lora(m.config().lora_shapes({Site::q_proj, Site::v_proj}), 4, 8.0, 0.05, 2);
    for (auto& [id, entry] : a.entries) {
        for (auto& v : entry.a.values()) v = static_cast<double>(static_cast<float>(v));
        for (std::size_t i = 0; i < entry.b.values().size(); ++i) entry.b.values()[i] = 0.25 * static_cast<double>(i);
    }
    const auto c = lora_checkpoint(a, "h", "c");
    CHECK(c.records.size() == 2 * a.entries.size());
    const auto back = lora_from_checkpoint(Checkpoint::parse(c.serialize()));
    CHECK(back == a);
}

TEST_CASE("factor checkpoint round trip") {
    PolicyModel m(small_config(), 10);
    const auto back = factors_from_checkpoint(Checkpoint::parse(factors_checkpoint(m, "c").serialize()));
    REQUIRE(back.size() == m.factors().size());
    for (const auto& [id, f] : m.factors()) {
        const auto& g = back.at(id);
        CHECK(max_abs_diff(g.u, f.u) <= 1e-6);
        CHECK(max_abs_diff(g.vt, f.vt) <= 1e-6);
        for (std::size_t i = 0; i < f.rank(); ++i) CHECK(std::abs(g.sigma[i] - f.sigma[i]) <= 1e-6 * std::max(1.0, f.sigma[i]));
    }
}

TEST_CASE("corrupt checkpoints are rejected") {
    const PolicyModel m(small_config(), 11);
    const auto bytes = expert_checkpoint(ones_expert(m.config().svf_ranks(), "x")).serialize();

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(Checkpoint::parse(bad_magic), CheckpointError);

    auto bad_version = bytes;
    bad_version[4] = 9;
    CHECK_THROWS_AS(Checkpoint::parse(bad_version), CheckpointError);

    auto bad_type = bytes;
    bad_type[6] = 7;
    CHECK_THROWS_AS(Checkpoint::parse(bad_type), CheckpointError);

    for (std::size_t cut : {std::size_t{3}, std::size_t{9}, bytes.size() - 1, bytes.size() - 5})
        CHECK_THROWS_AS(Checkpoint::parse(std::string_view(bytes).substr(0, cut)), CheckpointError);
    CHECK_THROWS_AS(Checkpoint::load("/nonexistent/x.svf2"), CheckpointError);
}
