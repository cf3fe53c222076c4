#include "svf/model.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>

#include "svf/errors.hpp"
#include "svf/rng.hpp"

namespace svf {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC = 0.044715;

std::atomic<std::uint64_t> g_version{1};
std::uint64_t next_version() { return g_version.fetch_add(1) + 1; }

double gelu(double x) {
    const double t = std::tanh(kGeluK * (x + kGeluC * x * x * x));
    return 0.5 * x * (1.0 + t);
}

double gelu_grad(double x) {
    const double t = std::tanh(kGeluK * (x + kGeluC * x * x * x));
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluK * (1.0 + 3.0 * kGeluC * x * x);
}

Matrix layer_norm(const Matrix& x, const Matrix& g, const Matrix& b, ForwardCache::Norm* cache) {
    const std::size_t d = x.cols();
    Matrix y(x.rows(), d);
    if (cache) {
        cache->xhat = Matrix(x.rows(), d);
        cache->rstd.assign(x.rows(), 0.0);
    }
    for (std::size_t t = 0; t < x.rows(); ++t) {
        auto row = x.row(t);
        double mean = 0.0;
        for (double v : row) mean += v;
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (double v : row) var += (v - mean) * (v - mean);
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + kLnEps);
        auto out = y.row(t);
        for (std::size_t j = 0; j < d; ++j) {
            const double xh = (row[j] - mean) * rstd;
            out[j] = xh * g(0, j) + b(0, j);
            if (cache) cache->xhat(t, j) = xh;
        }
        if (cache) cache->rstd[t] = rstd;
    }
    return y;
}

Matrix layer_norm_backward(const Matrix& dy, const Matrix& g, const ForwardCache::Norm& c, Matrix& dg, Matrix& db) {
    const std::size_t d = dy.cols();
    Matrix dx(dy.rows(), d);
    std::vector<double> dxhat(d);
    for (std::size_t t = 0; t < dy.rows(); ++t) {
        double mean_dxhat = 0.0;
        double mean_dxhat_xhat = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            dg(0, j) += dy(t, j) * c.xhat(t, j);
            db(0, j) += dy(t, j);
            dxhat[j] = dy(t, j) * g(0, j);
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * c.xhat(t, j);
        }
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_xhat /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
            dx(t, j) = c.rstd[t] * (dxhat[j] - mean_dxhat - c.xhat(t, j) * mean_dxhat_xhat);
        }
    }
    return dx;
}

void add_bias(Matrix& y, const Matrix& b) {
    for (std::size_t t = 0; t < y.rows(); ++t) {
        auto row = y.row(t);
        for (std::size_t j = 0; j < row.size(); ++j) row[j] += b(0, j);
    }
}

void accumulate_bias_grad(Matrix& db, const Matrix& dy) {
    for (std::size_t t = 0; t < dy.rows(); ++t) {
        auto row = dy.row(t);
        for (std::size_t j = 0; j < row.size(); ++j) db(0, j) += row[j];
    }
}

void log_softmax_inplace(std::span<double> row) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : row) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : row) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (auto& v : row) v -= lse;
}

}  // namespace

Matrix log_softmax_rows(const Matrix& logits) {
    Matrix out = logits;
    for (std::size_t t = 0; t < out.rows(); ++t) log_softmax_inplace(out.row(t));
    return out;
}

// ---------------------------------------------------------------------------
// config and parameter containers

void ModelConfig::validate() const {
    if (vocab_size < tok::kVocabSize) throw ConfigError("vocab_size must cover the symbol table (" + std::to_string(tok::kVocabSize) + ")");
    if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_mlp == 0 || context_len == 0) throw ConfigError("model dimensions must be positive");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (n_layers > 0xffff) throw ConfigError("too many layers");
}

std::size_t ModelConfig::site_rows(Site s) const { return s == Site::mlp_out ? d_mlp : d_model; }
std::size_t ModelConfig::site_cols(Site s) const { return s == Site::mlp_in ? d_mlp : d_model; }

std::vector<MatrixId> ModelConfig::svf_targets() const {
    std::vector<MatrixId> ids;
    for (std::size_t l = 0; l < n_layers; ++l)
        for (auto s : svf_sites) ids.push_back({static_cast<std::uint16_t>(l), s});
    return ids;
}

std::map<MatrixId, std::size_t> ModelConfig::svf_ranks() const {
    std::map<MatrixId, std::size_t> r;
    for (auto id : svf_targets()) r[id] = std::min(site_rows(id.site), site_cols(id.site));
    return r;
}

std::map<MatrixId, LoraShape> ModelConfig::lora_shapes(const std::set<Site>& sites) const {
    std::map<MatrixId, LoraShape> out;
    for (std::size_t l = 0; l < n_layers; ++l)
        for (auto s : sites) out[{static_cast<std::uint16_t>(l), s}] = {site_rows(s), site_cols(s)};
    return out;
}

Matrix& LayerParams::site(Site s) {
    switch (s) {
        case Site::q_proj: return wq;
        case Site::k_proj: return wk;
        case Site::v_proj: return wv;
        case Site::o_proj: return wo;
        case Site::mlp_in: return w_in;
        case Site::mlp_out: return w_out;
    }
    return wq;
}

const Matrix& LayerParams::site(Site s) const { return const_cast<LayerParams*>(this)->site(s); }

ModelParams ModelParams::zeros(const ModelConfig& cfg) {
    ModelParams p;
    const std::size_t d = cfg.d_model;
    p.tok_emb = Matrix(cfg.vocab_size, d);
    p.pos_emb = Matrix(cfg.context_len, d);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        LayerParams lp;
        lp.ln1_g = Matrix(1, d);
        lp.ln1_b = Matrix(1, d);
        lp.wq = Matrix(d, d);
        lp.wk = Matrix(d, d);
        lp.wv = Matrix(d, d);
        lp.wo = Matrix(d, d);
        lp.ln2_g = Matrix(1, d);
        lp.ln2_b = Matrix(1, d);
        lp.w_in = Matrix(d, cfg.d_mlp);
        lp.b_in = Matrix(1, cfg.d_mlp);
        lp.w_out = Matrix(cfg.d_mlp, d);
        lp.b_out = Matrix(1, d);
        p.layers.push_back(std::move(lp));
    }
    p.lnf_g = Matrix(1, d);
    p.lnf_b = Matrix(1, d);
    p.lm_head = Matrix(d, cfg.vocab_size);
    return p;
}

void ModelParams::for_each(const std::function<void(ParamKey, Matrix&)>& fn) {
    fn({0, ParamKind::tok_emb}, tok_emb);
    fn({0, ParamKind::pos_emb}, pos_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto L = static_cast<std::uint16_t>(l);
        auto& lp = layers[l];
        fn({L, ParamKind::ln1_g}, lp.ln1_g);
        fn({L, ParamKind::ln1_b}, lp.ln1_b);
        fn({L, ParamKind::q_proj}, lp.wq);
        fn({L, ParamKind::k_proj}, lp.wk);
        fn({L, ParamKind::v_proj}, lp.wv);
        fn({L, ParamKind::o_proj}, lp.wo);
        fn({L, ParamKind::ln2_g}, lp.ln2_g);
        fn({L, ParamKind::ln2_b}, lp.ln2_b);
        fn({L, ParamKind::mlp_in}, lp.w_in);
        fn({L, ParamKind::b_in}, lp.b_in);
        fn({L, ParamKind::mlp_out}, lp.w_out);
        fn({L, ParamKind::b_out}, lp.b_out);
    }
    fn({0, ParamKind::lnf_g}, lnf_g);
    fn({0, ParamKind::lnf_b}, lnf_b);
    fn({0, ParamKind::lm_head}, lm_head);
}

void ModelParams::for_each(const std::function<void(ParamKey, const Matrix&)>& fn) const {
    const_cast<ModelParams*>(this)->for_each([&](ParamKey k, Matrix& m) { fn(k, m); });
}

Matrix& ModelParams::at(ParamKey key) {
    if (static_cast<int>(key.kind) <= 5) {
        if (key.layer >= layers.size()) throw RangeError("layer index out of range");
        return layers[key.layer].site(static_cast<Site>(key.kind));
    }
    auto layer = [&]() -> LayerParams& {
        if (key.layer >= layers.size()) throw RangeError("layer index out of range");
        return layers[key.layer];
    };
    switch (key.kind) {
        case ParamKind::tok_emb: return tok_emb;
        case ParamKind::pos_emb: return pos_emb;
        case ParamKind::ln1_g: return layer().ln1_g;
        case ParamKind::ln1_b: return layer().ln1_b;
        case ParamKind::ln2_g: return layer().ln2_g;
        case ParamKind::ln2_b: return layer().ln2_b;
        case ParamKind::b_in: return layer().b_in;
        case ParamKind::b_out: return layer().b_out;
        case ParamKind::lnf_g: return lnf_g;
        case ParamKind::lnf_b: return lnf_b;
        case ParamKind::lm_head: return lm_head;
        default: break;
    }
    throw RangeError("unknown parameter kind " + std::to_string(static_cast<int>(key.kind)));
}

const Matrix& ModelParams::at(ParamKey key) const { return const_cast<ModelParams*>(this)->at(key); }

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    for_each([&](ParamKey, const Matrix& m) { n += m.size(); });
    return n;
}

// ---------------------------------------------------------------------------
// model

PolicyModel::PolicyModel(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    params_ = ModelParams::zeros(cfg_);
    const double d = static_cast<double>(cfg_.d_model);
    const double resid_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg_.n_layers));
    params_.for_each([&](ParamKey key, Matrix& m) {
        SeededRng rng(init_seed, StreamPurpose::Init, {key.layer, static_cast<std::uint64_t>(key.kind)});
        switch (key.kind) {
            case ParamKind::ln1_g:
            case ParamKind::ln2_g:
            case ParamKind::lnf_g: m.fill(1.0); break;
            case ParamKind::ln1_b:
            case ParamKind::ln2_b:
            case ParamKind::lnf_b:
            case ParamKind::b_in:
            case ParamKind::b_out: break;
            case ParamKind::tok_emb:
            case ParamKind::pos_emb: m = Matrix::random_normal(m.rows(), m.cols(), rng, 0.3); break;
            case ParamKind::o_proj:
            case ParamKind::mlp_out:
                m = Matrix::random_normal(m.rows(), m.cols(), rng, resid_scale / std::sqrt(static_cast<double>(m.rows())));
                break;
            default: m = Matrix::random_normal(m.rows(), m.cols(), rng, 1.0 / std::sqrt(static_cast<double>(m.rows()))); break;
        }
    });
    (void)d;
    version_ = next_version();
    rebuild_factors();
}

PolicyModel::PolicyModel(ModelConfig cfg, ModelParams params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
    const auto expect = ModelParams::zeros(cfg_);
    expect.for_each([&](ParamKey k, const Matrix& m) {
        if (!params_.at(k).same_shape(m)) throw ShapeError("parameter shape does not match config");
    });
    version_ = next_version();
    rebuild_factors();
}

ModelParams& PolicyModel::mutable_params() {
    version_ = next_version();
    factors_current_ = false;
    adaptation_ = std::monostate{};
    effective_.clear();
    return params_;
}

void PolicyModel::round_to_float() {
    auto& p = mutable_params();
    p.for_each([](ParamKey, Matrix& m) {
        for (auto& v : m.values()) v = static_cast<double>(static_cast<float>(v));
    });
    rebuild_factors();
}

void PolicyModel::rebuild_factors() {
    factors_.clear();
    for (std::size_t l = 0; l < cfg_.n_layers; ++l)
        for (auto s : kAllSites) factors_.emplace(MatrixId{static_cast<std::uint16_t>(l), s}, svd(params_.layers[l].site(s)));
    factors_current_ = true;
}

const std::map<MatrixId, SvdFactors>& PolicyModel::factors() const {
    if (!factors_current_) throw CacheError("factor cache is stale; call rebuild_factors()");
    return factors_;
}

const SvdFactors& PolicyModel::factors(MatrixId id) const {
    const auto& f = factors();
    auto it = f.find(id);
    if (it == f.end()) throw RangeError("no factors for " + id.str());
    return it->second;
}

void PolicyModel::set_expert(ExpertVector e) {
    const auto& f = factors();
    std::map<MatrixId, Matrix> eff;
    for (const auto& [id, z] : e.entries) {
        auto it = f.find(id);
        if (it == f.end()) throw IncompatibleExperts(e.name + ": model has no matrix " + id.str());
        if (!std::all_of(z.begin(), z.end(), [](double v) { return std::isfinite(v); })) {
            throw IncompatibleExperts(e.name + ": non-finite entry at " + id.str());
        }
        eff.emplace(id, apply_expert(it->second, z));
    }
    effective_ = std::move(eff);
    adaptation_ = std::move(e);
    version_ = next_version();
}

void PolicyModel::set_lora(LoraAdapter a) {
    for (const auto& [id, entry] : a.entries) {
        if (id.layer >= cfg_.n_layers) throw ShapeError("lora entry for missing layer " + id.str());
        const auto& w = params_.layers[id.layer].site(id.site);
        if (entry.a.rows() != w.rows() || entry.b.cols() != w.cols() || entry.a.cols() != a.rank || entry.b.rows() != a.rank) {
            throw ShapeError("lora entry shape mismatch at " + id.str());
        }
    }
    effective_.clear();
    adaptation_ = std::move(a);
    version_ = next_version();
}

void PolicyModel::clear_adaptation() {
    effective_.clear();
    adaptation_ = std::monostate{};
    version_ = next_version();
}

const Matrix& PolicyModel::effective_weight(MatrixId id, bool use_adaptation) const {
    if (use_adaptation) {
        auto it = effective_.find(id);
        if (it != effective_.end()) return it->second;
    }
    return params_.layers[id.layer].site(id.site);
}

void PolicyModel::check_sequence(const TokenSequence& s) const {
    if (s.tokens.empty()) throw RangeError("empty token sequence");
    if (s.tokens.size() > cfg_.context_len) {
        throw ContextOverflow("sequence of " + std::to_string(s.tokens.size()) + " tokens exceeds context " +
                              std::to_string(cfg_.context_len));
    }
    for (auto t : s.tokens)
        if (t >= cfg_.vocab_size) throw RangeError("token id " + std::to_string(t) + " outside vocabulary");
}

Matrix PolicyModel::linear(const Matrix& x, MatrixId id, bool adapt, ForwardCache::Linear* lc, SeededRng* dropout_rng) const {
    Matrix y = matmul(x, effective_weight(id, adapt));
    if (lc) lc->input = x;
    const LoraAdapter* ad = adapt ? lora() : nullptr;
    if (!ad) return y;
    auto it = ad->entries.find(id);
    if (it == ad->entries.end()) return y;

    Matrix xin = x;
    Matrix mask;
    if (dropout_rng && ad->dropout_p > 0.0) {
        mask = Matrix(x.rows(), x.cols());
        const double keep = 1.0 / (1.0 - ad->dropout_p);
        for (auto& m : mask.values()) m = dropout_rng->bernoulli(ad->dropout_p) ? 0.0 : keep;
        for (std::size_t i = 0; i < xin.size(); ++i) xin.values()[i] *= mask.values()[i];
    }
    Matrix mid = matmul(xin, it->second.a);
    Matrix delta = matmul(mid, it->second.b);
    delta *= ad->scale();
    y += delta;
    if (lc) {
        lc->lora_in = std::move(xin);
        lc->lora_mask = std::move(mask);
        lc->lora_mid = std::move(mid);
    }
    return y;
}

Matrix PolicyModel::forward_impl(const TokenSequence& s, bool adapt, ForwardCache* cache, SeededRng* dropout_rng) const {
    check_sequence(s);
    const std::size_t T = s.tokens.size();
    const std::size_t d = cfg_.d_model;
    const std::size_t H = cfg_.n_heads;
    const std::size_t dh = cfg_.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    if (cache) {
        cache->model_version = version_;
        cache->adapted = adapt;
        cache->tokens = s.tokens;
        cache->layers.assign(cfg_.n_layers, {});
    }

    Matrix x(T, d);
    for (std::size_t t = 0; t < T; ++t) {
        auto te = params_.tok_emb.row(s.tokens[t]);
        auto pe = params_.pos_emb.row(t);
        auto xr = x.row(t);
        for (std::size_t j = 0; j < d; ++j) xr[j] = te[j] + pe[j];
    }

    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        const auto& lp = params_.layers[l];
        const auto L = static_cast<std::uint16_t>(l);
        ForwardCache::Layer* lc = cache ? &cache->layers[l] : nullptr;
        if (lc) lc->x_in = x;

        Matrix a = layer_norm(x, lp.ln1_g, lp.ln1_b, lc ? &lc->ln1 : nullptr);
        Matrix q = linear(a, {L, Site::q_proj}, adapt, lc ? &lc->q : nullptr, dropout_rng);
        Matrix k = linear(a, {L, Site::k_proj}, adapt, lc ? &lc->k : nullptr, dropout_rng);
        Matrix v = linear(a, {L, Site::v_proj}, adapt, lc ? &lc->v : nullptr, dropout_rng);

        Matrix att(T, d);
        if (lc) lc->probs.assign(H, Matrix());
        for (std::size_t h = 0; h < H; ++h) {
            const std::size_t off = h * dh;
            Matrix p(T, T);
            for (std::size_t i = 0; i < T; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j <= i; ++j) {
                    double sc = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) sc += q(i, off + c) * k(j, off + c);
                    sc *= inv_sqrt_dh;
                    p(i, j) = sc;
                    mx = std::max(mx, sc);
                }
                double sum = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    p(i, j) = std::exp(p(i, j) - mx);
                    sum += p(i, j);
                }
                for (std::size_t j = 0; j <= i; ++j) p(i, j) /= sum;
                for (std::size_t j = 0; j <= i; ++j) {
                    const double pij = p(i, j);
                    for (std::size_t c = 0; c < dh; ++c) att(i, off + c) += pij * v(j, off + c);
                }
            }
            if (lc) lc->probs[h] = std::move(p);
        }
        if (lc) {
            lc->qm = q;
            lc->km = k;
            lc->vm = v;
        }
        Matrix o = linear(att, {L, Site::o_proj}, adapt, lc ? &lc->o : nullptr, dropout_rng);
        x += o;
        if (lc) lc->x_mid = x;

        Matrix b = layer_norm(x, lp.ln2_g, lp.ln2_b, lc ? &lc->ln2 : nullptr);
        Matrix hpre = linear(b, {L, Site::mlp_in}, adapt, lc ? &lc->mlp_in : nullptr, dropout_rng);
        add_bias(hpre, lp.b_in);
        Matrix hact = hpre;
        for (auto& val : hact.values()) val = gelu(val);
        if (lc) lc->h_pre = std::move(hpre);
        Matrix m = linear(hact, {L, Site::mlp_out}, adapt, lc ? &lc->mlp_out : nullptr, dropout_rng);
        add_bias(m, lp.b_out);
        x += m;
    }

    Matrix f = layer_norm(x, params_.lnf_g, params_.lnf_b, cache ? &cache->lnf : nullptr);
    Matrix logp = log_softmax_rows(matmul(f, params_.lm_head));
    if (cache) {
        cache->log_probs = logp;
        cache->final_out = std::move(f);
    }
    return logp;
}

Matrix PolicyModel::forward(const TokenSequence& s) const { return forward_impl(s, true, nullptr, nullptr); }
Matrix PolicyModel::forward_base(const TokenSequence& s) const { return forward_impl(s, false, nullptr, nullptr); }

ForwardCache PolicyModel::forward_cached(const TokenSequence& s, SeededRng* dropout_rng) const {
    ForwardCache c;
    forward_impl(s, true, &c, dropout_rng);
    return c;
}

Matrix PolicyModel::linear_backward(const Matrix& dy, MatrixId id, const ForwardCache::Linear& lc, bool adapted,
                                    ModelGradients& g) const {
    const Matrix& w = effective_weight(id, adapted);
    add_matmul_tn(g.params.layers[id.layer].site(id.site), lc.input, dy);
    Matrix dx = matmul_nt(dy, w);

    const LoraAdapter* ad = adapted ? lora() : nullptr;
    if (!ad) return dx;
    auto it = ad->entries.find(id);
    if (it == ad->entries.end()) return dx;
    const auto& e = it->second;
    const double s = ad->scale();
    auto& ge = g.lora.at(id);

    // y += s * (lora_in A) B
    Matrix dmid = matmul_nt(dy, e.b);
    dmid *= s;
    Matrix dB = matmul_tn(lc.lora_mid, dy);
    dB *= s;
    ge.b += dB;
    add_matmul_tn(ge.a, lc.lora_in, dmid);
    Matrix dxin = matmul_nt(dmid, e.a);
    if (!lc.lora_mask.empty()) {
        for (std::size_t i = 0; i < dxin.size(); ++i) dxin.values()[i] *= lc.lora_mask.values()[i];
    }
    dx += dxin;
    return dx;
}

ModelGradients PolicyModel::backward(const ForwardCache& cache, const Matrix& dlogits) const {
    if (cache.model_version != version_) throw CacheError("activation cache was produced by a different model state");
    const std::size_t T = cache.tokens.size();
    if (dlogits.rows() != T || dlogits.cols() != cfg_.vocab_size) throw ShapeError("dlogits shape");
    const std::size_t d = cfg_.d_model;
    const std::size_t H = cfg_.n_heads;
    const std::size_t dh = cfg_.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    const bool adapt = cache.adapted;

    ModelGradients g;
    g.params = ModelParams::zeros(cfg_);
    if (const LoraAdapter* ad = adapt ? lora() : nullptr) {
        for (const auto& [id, e] : ad->entries) g.lora[id] = {Matrix(e.a.rows(), e.a.cols()), Matrix(e.b.rows(), e.b.cols())};
    }

    const Matrix& f = cache.final_out;
    add_matmul_tn(g.params.lm_head, f, dlogits);
    Matrix df = matmul_nt(dlogits, params_.lm_head);
    Matrix dx = layer_norm_backward(df, params_.lnf_g, cache.lnf, g.params.lnf_g, g.params.lnf_b);

    for (std::size_t li = cfg_.n_layers; li-- > 0;) {
        const auto& lp = params_.layers[li];
        const auto& lc = cache.layers[li];
        auto& gl = g.params.layers[li];
        const auto L = static_cast<std::uint16_t>(li);

        // MLP branch
        accumulate_bias_grad(gl.b_out, dx);
        Matrix dh_act = linear_backward(dx, {L, Site::mlp_out}, lc.mlp_out, adapt, g);
        Matrix dh_pre = dh_act;
        for (std::size_t i = 0; i < dh_pre.size(); ++i) dh_pre.values()[i] *= gelu_grad(lc.h_pre.values()[i]);
        accumulate_bias_grad(gl.b_in, dh_pre);
        Matrix db_norm = linear_backward(dh_pre, {L, Site::mlp_in}, lc.mlp_in, adapt, g);
        dx += layer_norm_backward(db_norm, lp.ln2_g, lc.ln2, gl.ln2_g, gl.ln2_b);

        // attention branch
        Matrix datt = linear_backward(dx, {L, Site::o_proj}, lc.o, adapt, g);
        Matrix dq(T, d), dk(T, d), dv(T, d);
        for (std::size_t h = 0; h < H; ++h) {
            const std::size_t off = h * dh;
            const Matrix& p = lc.probs[h];
            for (std::size_t i = 0; i < T; ++i) {
                // dP_ij = datt_i . v_j ; dS = P * (dP - sum_j P dP)
                std::vector<double> dp(i + 1);
                double dot_pdp = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) s += datt(i, off + c) * lc.vm(j, off + c);
                    dp[j] = s;
                    dot_pdp += p(i, j) * s;
                    for (std::size_t c = 0; c < dh; ++c) dv(j, off + c) += p(i, j) * datt(i, off + c);
                }
                for (std::size_t j = 0; j <= i; ++j) {
                    const double ds = p(i, j) * (dp[j] - dot_pdp) * inv_sqrt_dh;
                    if (ds == 0.0) continue;
                    for (std::size_t c = 0; c < dh; ++c) {
                        dq(i, off + c) += ds * lc.km(j, off + c);
                        dk(j, off + c) += ds * lc.qm(i, off + c);
                    }
                }
            }
        }
        Matrix da = linear_backward(dq, {L, Site::q_proj}, lc.q, adapt, g);
        da += linear_backward(dk, {L, Site::k_proj}, lc.k, adapt, g);
        da += linear_backward(dv, {L, Site::v_proj}, lc.v, adapt, g);
        dx += layer_norm_backward(da, lp.ln1_g, lc.ln1, gl.ln1_g, gl.ln1_b);
    }

    for (std::size_t t = 0; t < T; ++t) {
        auto dr = dx.row(t);
        auto te = g.params.tok_emb.row(cache.tokens[t]);
        auto pe = g.params.pos_emb.row(t);
        for (std::size_t j = 0; j < d; ++j) {
            te[j] += dr[j];
            pe[j] += dr[j];
        }
    }
    return g;
}

std::map<MatrixId, std::vector<double>> PolicyModel::z_gradients(const ModelGradients& g) const {
    std::map<MatrixId, std::vector<double>> out;
    const ExpertVector* e = expert();
    if (!e) throw AdapterMissing("z gradients need an active expert");
    for (const auto& [id, z] : e->entries) {
        const auto& f = factors(id);
        auto c = rank1_contraction(f, g.params.layers[id.layer].site(id.site));
        for (std::size_t i = 0; i < c.size(); ++i) c[i] *= f.sigma[i];
        out.emplace(id, std::move(c));
    }
    return out;
}

std::map<MatrixId, std::vector<double>> PolicyModel::backward_z(const ForwardCache& cache, const Matrix& dlogits) const {
    if (!expert()) throw AdapterMissing("backward_z needs an active expert");
    if (!cache.adapted) throw CacheError("activation cache was produced without the adaptation");
    return z_gradients(backward(cache, dlogits));
}

// ---------------------------------------------------------------------------
// decoding

Decoder::Decoder(const PolicyModel& model, bool use_adaptation) : model_(model), adapt_(use_adaptation) {
    const auto& cfg = model.config();
    keys_.assign(cfg.n_layers, Matrix(cfg.context_len, cfg.d_model));
    values_.assign(cfg.n_layers, Matrix(cfg.context_len, cfg.d_model));
    log_probs_.assign(cfg.vocab_size, 0.0);
}

std::span<const double> Decoder::step(Token t) {
    const auto& cfg = model_.config();
    const auto& params = model_.params();
    if (pos_ >= cfg.context_len) throw ContextOverflow("decoder reached the context length " + std::to_string(cfg.context_len));
    if (t >= cfg.vocab_size) throw RangeError("token id outside vocabulary");
    const std::size_t d = cfg.d_model;
    const std::size_t dh = cfg.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix x(1, d);
    for (std::size_t j = 0; j < d; ++j) x(0, j) = params.tok_emb(t, j) + params.pos_emb(pos_, j);

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& lp = params.layers[l];
        const auto L = static_cast<std::uint16_t>(l);
        Matrix a = layer_norm(x, lp.ln1_g, lp.ln1_b, nullptr);
        Matrix q = model_.linear(a, {L, Site::q_proj}, adapt_, nullptr, nullptr);
        Matrix k = model_.linear(a, {L, Site::k_proj}, adapt_, nullptr, nullptr);
        Matrix v = model_.linear(a, {L, Site::v_proj}, adapt_, nullptr, nullptr);
        std::copy(k.values().begin(), k.values().end(), keys_[l].row(pos_).begin());
        std::copy(v.values().begin(), v.values().end(), values_[l].row(pos_).begin());

        Matrix att(1, d);
        std::vector<double> p(pos_ + 1);
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            const std::size_t off = h * dh;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j <= pos_; ++j) {
                double sc = 0.0;
                for (std::size_t c = 0; c < dh; ++c) sc += q(0, off + c) * keys_[l](j, off + c);
                sc *= inv_sqrt_dh;
                p[j] = sc;
                mx = std::max(mx, sc);
            }
            double sum = 0.0;
            for (std::size_t j = 0; j <= pos_; ++j) {
                p[j] = std::exp(p[j] - mx);
                sum += p[j];
            }
            for (std::size_t j = 0; j <= pos_; ++j) p[j] /= sum;
            for (std::size_t j = 0; j <= pos_; ++j)
                for (std::size_t c = 0; c < dh; ++c) att(0, off + c) += p[j] * values_[l](j, off + c);
        }
        x += model_.linear(att, {L, Site::o_proj}, adapt_, nullptr, nullptr);
        Matrix b = layer_norm(x, lp.ln2_g, lp.ln2_b, nullptr);
        Matrix h = model_.linear(b, {L, Site::mlp_in}, adapt_, nullptr, nullptr);
        add_bias(h, lp.b_in);
        for (auto& val : h.values()) val = gelu(val);
        Matrix m = model_.linear(h, {L, Site::mlp_out}, adapt_, nullptr, nullptr);
        add_bias(m, lp.b_out);
        x += m;
    }
    Matrix f = layer_norm(x, params.lnf_g, params.lnf_b, nullptr);
    Matrix logits = matmul(f, params.lm_head);
    log_softmax_inplace(logits.row(0));
    std::copy(logits.values().begin(), logits.values().end(), log_probs_.begin());
    ++pos_;
    return log_probs_;
}

Token argmax_token(std::span<const double> log_probs) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < log_probs.size(); ++i)
        if (log_probs[i] > log_probs[best]) best = i;
    return static_cast<Token>(best);
}

Token sample_token(std::span<const double> log_probs, double temperature, SeededRng& rng) {
    if (temperature <= 0.0) return argmax_token(log_probs);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : log_probs) mx = std::max(mx, v / temperature);
    std::vector<double> w(log_probs.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = std::exp(log_probs[i] / temperature - mx);
        sum += w[i];
    }
    double u = rng.uniform() * sum;
    for (std::size_t i = 0; i < w.size(); ++i) {
        u -= w[i];
        if (u < 0.0) return static_cast<Token>(i);
    }
    // Rounding can leave u marginally non-negative; fall back to the last
    // token with non-zero weight.
    for (std::size_t i = w.size(); i-- > 0;)
        if (w[i] > 0.0) return static_cast<Token>(i);
    return 0;
}

TokenSequence PolicyModel::generate(const TokenSequence& prompt, GenerateMode mode, std::size_t max_new,
                                    bool use_adaptation) const {
    if (max_new == 0) throw RangeError("generate needs max_new >= 1");
    if (mode.temperature > 0.0 && !mode.rng) throw RangeError("sampling needs a random stream");
    check_sequence(prompt);
    if (prompt.tokens.size() + 1 > cfg_.context_len) throw ContextOverflow("prompt leaves no room to generate");

    TokenSequence out;
    out.tokens.assign(prompt.tokens.begin(), prompt.tokens.begin() + static_cast<long>(prompt.prompt_len));
    out.prompt_len = out.tokens.size();
    Decoder dec(*this, use_adaptation);
    std::span<const double> lp;
    for (auto t : out.tokens) lp = dec.step(t);
    for (std::size_t n = 0; n < max_new; ++n) {
        const Token next = mode.temperature > 0.0 ? sample_token(lp, mode.temperature, *mode.rng) : argmax_token(lp);
        out.tokens.push_back(next);
        if (next == tok::kEos || n + 1 == max_new || out.tokens.size() >= cfg_.context_len) break;
        lp = dec.step(next);
    }
    return out;
}

std::pair<double, std::vector<double>> PolicyModel::sequence_log_prob(const TokenSequence& s) const {
    if (s.prompt_len == 0 || s.prompt_len >= s.tokens.size()) throw RangeError("sequence needs a non-empty prompt and answer");
    const Matrix lp = forward(s);
    std::vector<double> per;
    double total = 0.0;
    for (std::size_t t = s.prompt_len; t < s.tokens.size(); ++t) {
        const double v = lp(t - 1, s.tokens[t]);
        per.push_back(v);
        total += v;
    }
    return {total, per};
}

double kl_divergence(std::span<const double> log_p, std::span<const double> log_q) {
    if (log_p.size() != log_q.size()) throw ShapeError("kl_divergence: distributions differ in length");
    double kl = 0.0;
    for (std::size_t v = 0; v < log_p.size(); ++v) kl += std::exp(log_p[v]) * (log_p[v] - log_q[v]);
    return kl;
}

double PolicyModel::kl_to_base(const TokenSequence& s) const {
    if (!has_adaptation()) throw AdapterMissing("kl_to_base needs an active adaptation");
    if (s.prompt_len == 0 || s.prompt_len >= s.tokens.size()) throw RangeError("sequence needs a non-empty prompt and answer");
    const Matrix adapted = forward(s);
    const Matrix base = forward_base(s);
    double total = 0.0;
    for (std::size_t t = s.prompt_len; t < s.tokens.size(); ++t) {
        total += kl_divergence(adapted.row(t - 1), base.row(t - 1));
    }
    return std::max(0.0, total / static_cast<double>(s.tokens.size() - s.prompt_len));
}

}  // namespace svf
