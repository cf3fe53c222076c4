#include "svf/checkpoint.hpp"

#include <bit>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "svf/config.hpp"
#include "svf/errors.hpp"

namespace svf {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'S', 'V', 'F', '2'};
constexpr std::uint8_t kLoraB = 0x80;
constexpr std::uint8_t kFactorSigma = 0x40;
constexpr std::uint8_t kFactorVt = 0x80;

template <class T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

class Reader {
public:
    explicit Reader(std::string_view b) : b_(b) {}
    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, b_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string_view bytes(std::size_t n) {
        need(n);
        auto s = b_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == b_.size(); }

private:
    void need(std::size_t n) const {
        if (b_.size() - pos_ < n) throw CheckpointError("truncated checkpoint");
    }
    std::string_view b_;
    std::size_t pos_ = 0;
};

std::vector<float> to_float(std::span<const double> v) {
    std::vector<float> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i]);
    return out;
}

std::vector<double> to_double(const std::vector<float>& v) { return {v.begin(), v.end()}; }

Matrix matrix_from(const std::vector<float>& v, std::size_t rows, std::size_t cols) {
    if (v.size() != rows * cols) throw CheckpointError("record length does not match its matrix shape");
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < v.size(); ++i) m.values()[i] = v[i];
    return m;
}

void expect_type(const Checkpoint& c, CheckpointType t) {
    if (c.type != t) {
        throw CheckpointError("expected a " + std::string(checkpoint_type_name(t)) + " checkpoint, found " +
                              std::string(checkpoint_type_name(c.type)));
    }
}

Site site_of(std::uint8_t byte) {
    const auto s = static_cast<Site>(byte & 0x3f);
    if ((byte & 0x3f) > 5) throw CheckpointError("record site byte out of range");
    return s;
}

std::string str_or(const nlohmann::json& j, const char* key) { return j.contains(key) ? j.at(key).get<std::string>() : ""; }

}  // namespace

std::string_view checkpoint_type_name(CheckpointType t) {
    switch (t) {
        case CheckpointType::Model: return "model";
        case CheckpointType::Expert: return "expert";
        case CheckpointType::Lora: return "lora";
        case CheckpointType::Factors: return "factors";
    }
    return "?";
}

std::string Checkpoint::serialize() const {
    std::string out(kMagic, 4);
    put<std::uint16_t>(out, kCheckpointVersion);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(type));
    const std::string m = meta.dump();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.size()));
    out += m;
    for (const auto& r : records) {
        put<std::uint16_t>(out, r.layer);
        put<std::uint8_t>(out, r.site);
        put<std::uint32_t>(out, static_cast<std::uint32_t>(r.values.size()));
        out.append(reinterpret_cast<const char*>(r.values.data()), r.values.size() * sizeof(float));
    }
    return out;
}

Checkpoint Checkpoint::parse(std::string_view bytes) {
    Reader rd(bytes);
    if (rd.bytes(4) != std::string_view(kMagic, 4)) throw CheckpointError("bad magic, not an SVF2 file");
    const auto version = rd.get<std::uint16_t>();
    if (version != kCheckpointVersion) throw CheckpointError("unsupported format version " + std::to_string(version));
    Checkpoint c;
    const auto tag = rd.get<std::uint8_t>();
    if (tag > 3) throw CheckpointError("unknown type tag " + std::to_string(tag));
    c.type = static_cast<CheckpointType>(tag);
    const auto mlen = rd.get<std::uint32_t>();
    try {
        c.meta = nlohmann::json::parse(rd.bytes(mlen));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("metadata is not valid JSON: ") + e.what());
    }
    while (!rd.done()) {
        CheckpointRecord r;
        r.layer = rd.get<std::uint16_t>();
        r.site = rd.get<std::uint8_t>();
        const auto n = rd.get<std::uint32_t>();
        const auto raw = rd.bytes(static_cast<std::size_t>(n) * sizeof(float));
        r.values.resize(n);
        std::memcpy(r.values.data(), raw.data(), raw.size());
        c.records.push_back(std::move(r));
    }
    return c;
}

void Checkpoint::save(const std::string& path) const { write_file(path, serialize()); }

Checkpoint Checkpoint::load(const std::string& path) { return parse(read_file(path)); }

std::uint64_t checkpoint_created() {
    const char* e = std::getenv("SOURCE_DATE_EPOCH");
    if (!e || !*e) return 0;
    char* end = nullptr;
    const auto v = std::strtoull(e, &end, 10);
    return (end && *end == '\0') ? v : 0;
}

nlohmann::json model_config_json(const ModelConfig& cfg) {
    std::vector<std::string> sites;
    for (Site s : cfg.svf_sites) sites.emplace_back(site_name(s));
    return {{"vocab_size", cfg.vocab_size}, {"context_len", cfg.context_len}, {"n_layers", cfg.n_layers},
            {"d_model", cfg.d_model},       {"n_heads", cfg.n_heads},         {"d_mlp", cfg.d_mlp},
            {"svf_sites", sites}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    try {
        cfg.vocab_size = j.at("vocab_size");
        cfg.context_len = j.at("context_len");
        cfg.n_layers = j.at("n_layers");
        cfg.d_model = j.at("d_model");
        cfg.n_heads = j.at("n_heads");
        cfg.d_mlp = j.at("d_mlp");
        cfg.svf_sites.clear();
        for (const auto& s : j.at("svf_sites")) {
            const auto site = parse_site(s.get<std::string>());
            if (!site) throw CheckpointError("unknown site in model config");
            cfg.svf_sites.insert(*site);
        }
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("bad model config in metadata: ") + e.what());
    }
    return cfg;
}

std::string model_hash(const PolicyModel& model) {
    std::uint64_t h = fnv1a("");
    model.params().for_each([&](ParamKey, const Matrix& m) {
        const auto f = to_float(m.values());
        h = fnv1a(std::string_view(reinterpret_cast<const char*>(f.data()), f.size() * sizeof(float)), h);
    });
    return hex64(h);
}

Checkpoint model_checkpoint(const PolicyModel& model, const std::string& name, const std::string& config_hash) {
    Checkpoint c;
    c.type = CheckpointType::Model;
    c.meta = {{"name", name},
              {"domain_tag", ""},
              {"source_model_hash", model_hash(model)},
              {"config_hash", config_hash},
              {"created", checkpoint_created()},
              {"model_config", model_config_json(model.config())}};
    model.params().for_each([&](ParamKey k, const Matrix& m) {
        c.records.push_back({k.layer, static_cast<std::uint8_t>(k.kind), to_float(m.values())});
    });
    return c;
}

PolicyModel model_from_checkpoint(const Checkpoint& c) {
    expect_type(c, CheckpointType::Model);
    if (!c.meta.contains("model_config")) throw CheckpointError("model checkpoint lacks model_config");
    const ModelConfig cfg = model_config_from_json(c.meta.at("model_config"));
    ModelParams p = ModelParams::zeros(cfg);
    std::size_t seen = 0;
    for (const auto& r : c.records) {
        Matrix* dst = nullptr;
        try {
            dst = &p.at({r.layer, static_cast<ParamKind>(r.site)});
        } catch (const Error&) {
            throw CheckpointError("record for unknown tensor (layer " + std::to_string(r.layer) + ", kind " +
                                  std::to_string(r.site) + ")");
        }
        *dst = matrix_from(r.values, dst->rows(), dst->cols());
        ++seen;
    }
    std::size_t expected = 0;
    p.for_each([&](ParamKey, const Matrix&) { ++expected; });
    if (seen != expected) throw CheckpointError("model checkpoint has " + std::to_string(seen) + " tensors, expected " + std::to_string(expected));
    return PolicyModel(cfg, std::move(p));
}

Checkpoint expert_checkpoint(const ExpertVector& e) {
    Checkpoint c;
    c.type = CheckpointType::Expert;
    c.meta = {{"name", e.name},
              {"domain_tag", e.domain_tag},
              {"source_model_hash", e.provenance.source_model_hash},
              {"config_hash", e.provenance.config_hash},
              {"training_task", e.provenance.training_task},
              {"created", checkpoint_created()}};
    for (const auto& [id, z] : e.entries) c.records.push_back({id.layer, static_cast<std::uint8_t>(id.site), to_float(z)});
    return c;
}

ExpertVector expert_from_checkpoint(const Checkpoint& c) {
    expect_type(c, CheckpointType::Expert);
    ExpertVector e;
    e.name = str_or(c.meta, "name");
    e.domain_tag = str_or(c.meta, "domain_tag");
    e.provenance.source_model_hash = str_or(c.meta, "source_model_hash");
    e.provenance.config_hash = str_or(c.meta, "config_hash");
    e.provenance.training_task = str_or(c.meta, "training_task");
    for (const auto& r : c.records) {
        const MatrixId id{r.layer, site_of(r.site)};
        if (!e.entries.emplace(id, to_double(r.values)).second) throw CheckpointError("duplicate record for " + id.str());
    }
    return e;
}

Checkpoint lora_checkpoint(const LoraAdapter& a, const std::string& source_model_hash, const std::string& config_hash) {
    Checkpoint c;
    c.type = CheckpointType::Lora;
    c.meta = {{"name", a.name},
              {"domain_tag", ""},
              {"source_model_hash", source_model_hash},
              {"config_hash", config_hash},
              {"created", checkpoint_created()},
              {"rank", a.rank},
              {"alpha", a.alpha},
              {"dropout", a.dropout_p}};
    for (const auto& [id, e] : a.entries) {
        c.records.push_back({id.layer, static_cast<std::uint8_t>(id.site), to_float(e.a.values())});
        c.records.push_back({id.layer, static_cast<std::uint8_t>(static_cast<std::uint8_t>(id.site) | kLoraB), to_float(e.b.values())});
    }
    return c;
}

LoraAdapter lora_from_checkpoint(const Checkpoint& c) {
    expect_type(c, CheckpointType::Lora);
    LoraAdapter a;
    try {
        a.name = str_or(c.meta, "name");
        a.rank = c.meta.at("rank");
        a.alpha = c.meta.at("alpha");
        a.dropout_p = c.meta.at("dropout");
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("bad lora metadata: ") + e.what());
    }
    if (a.rank == 0) throw CheckpointError("lora rank 0");
    std::map<MatrixId, int> parts;
    for (const auto& r : c.records) {
        const MatrixId id{r.layer, site_of(r.site)};
        const bool is_b = (r.site & kLoraB) != 0;
        if (r.values.size() % a.rank != 0) throw CheckpointError("lora record length not a multiple of the rank");
        const std::size_t other = r.values.size() / a.rank;
        auto& entry = a.entries[id];
        if (is_b) entry.b = matrix_from(r.values, a.rank, other);
        else entry.a = matrix_from(r.values, other, a.rank);
        parts[id] |= is_b ? 2 : 1;
    }
    for (const auto& [id, mask] : parts)
        if (mask != 3) throw CheckpointError("lora entry " + id.str() + " lacks its A or B matrix");
    return a;
}

Checkpoint factors_checkpoint(const PolicyModel& model, const std::string& config_hash) {
    Checkpoint c;
    c.type = CheckpointType::Factors;
    nlohmann::json shapes = nlohmann::json::object();
    for (const auto& [id, f] : model.factors()) shapes[id.str()] = {f.rows(), f.cols(), f.rank()};
    c.meta = {{"name", "factors"},
              {"domain_tag", ""},
              {"source_model_hash", model_hash(model)},
              {"config_hash", config_hash},
              {"created", checkpoint_created()},
              {"shapes", shapes}};
    for (const auto& [id, f] : model.factors()) {
        const auto s = static_cast<std::uint8_t>(id.site);
        c.records.push_back({id.layer, s, to_float(f.u.values())});
        c.records.push_back({id.layer, static_cast<std::uint8_t>(s | kFactorSigma), to_float(f.sigma)});
        c.records.push_back({id.layer, static_cast<std::uint8_t>(s | kFactorVt), to_float(f.vt.values())});
    }
    return c;
}

std::map<MatrixId, SvdFactors> factors_from_checkpoint(const Checkpoint& c) {
    expect_type(c, CheckpointType::Factors);
    std::map<MatrixId, SvdFactors> out;
    if (c.records.size() % 3 != 0) throw CheckpointError("factor cache record count not a multiple of 3");
    for (std::size_t i = 0; i < c.records.size(); i += 3) {
        const auto& ru = c.records[i];
        const auto& rs = c.records[i + 1];
        const auto& rv = c.records[i + 2];
        const MatrixId id{ru.layer, site_of(ru.site)};
        if ((ru.site & 0xc0) != 0 || (rs.site & 0xc0) != kFactorSigma || (rv.site & 0xc0) != kFactorVt) {
            throw CheckpointError("factor records out of order for " + id.str());
        }
        const std::size_t r = rs.values.size();
        if (r == 0 || ru.values.size() % r != 0 || rv.values.size() % r != 0) throw CheckpointError("inconsistent factor shapes for " + id.str());
        SvdFactors f;
        f.sigma = to_double(rs.values);
        f.u = matrix_from(ru.values, ru.values.size() / r, r);
        f.vt = matrix_from(rv.values, r, rv.values.size() / r);
        out.emplace(id, std::move(f));
    }
    return out;
}

void write_file(const std::string& path, std::string_view bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError("cannot write " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw CheckpointError("short write to " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw CheckpointError("cannot move " + tmp + " to " + path + ": " + ec.message());
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace svf
