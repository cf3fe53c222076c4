#include "svf/svf.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "svf/errors.hpp"
#include "svf/rng.hpp"

namespace svf {

std::string_view site_name(Site s) {
    switch (s) {
        case Site::q_proj: return "q_proj";
        case Site::k_proj: return "k_proj";
        case Site::v_proj: return "v_proj";
        case Site::o_proj: return "o_proj";
        case Site::mlp_in: return "mlp_in";
        case Site::mlp_out: return "mlp_out";
    }
    return "?";
}

std::optional<Site> parse_site(std::string_view name) {
    for (auto s : kAllSites)
        if (site_name(s) == name) return s;
    return std::nullopt;
}

bool is_attention_site(Site s) { return s == Site::q_proj || s == Site::k_proj || s == Site::v_proj || s == Site::o_proj; }

std::string MatrixId::str() const { return "L" + std::to_string(layer) + "." + std::string(site_name(site)); }

std::size_t ExpertVector::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [id, z] : entries) n += z.size();
    return n;
}

bool ExpertVector::all_finite() const {
    for (const auto& [id, z] : entries)
        for (double v : z)
            if (!std::isfinite(v)) return false;
    return true;
}

ExpertVector ones_expert(const std::map<MatrixId, std::size_t>& ranks, std::string name) {
    ExpertVector e;
    e.name = std::move(name);
    e.domain_tag = "identity";
    for (const auto& [id, r] : ranks) e.entries[id] = std::vector<double>(r, 1.0);
    return e;
}

CompositionWeights CompositionWeights::normalize(std::vector<double> alphas) {
    const double sum = std::accumulate(alphas.begin(), alphas.end(), 0.0);
    for (auto& a : alphas) a /= sum;
    return {std::move(alphas), true};
}

Matrix apply_expert(const SvdFactors& f, std::span<const double> z) {
    if (z.size() != f.rank()) {
        throw ShapeError("expert vector length " + std::to_string(z.size()) + " != rank " + std::to_string(f.rank()));
    }
    return scaled_reconstruct(f, z);
}

ExpertVector compose(std::span<const ExpertVector> experts, const CompositionWeights& w) {
    if (experts.empty()) throw IncompatibleExperts("no experts to compose");
    if (w.alphas.size() != experts.size()) {
        throw ShapeError("composition has " + std::to_string(w.alphas.size()) + " weights for " +
                         std::to_string(experts.size()) + " experts");
    }
    const auto& first = experts.front();
    for (const auto& e : experts) {
        if (e.entries.size() != first.entries.size()) throw IncompatibleExperts(e.name + ": key set differs from " + first.name);
        for (const auto& [id, z] : first.entries) {
            auto it = e.entries.find(id);
            if (it == e.entries.end()) throw IncompatibleExperts(e.name + ": missing " + id.str());
            if (it->second.size() != z.size()) throw IncompatibleExperts(e.name + ": rank differs at " + id.str());
        }
    }

    ExpertVector out;
    out.name = "composed";
    out.domain_tag = "composed";
    std::string task = "compose(";
    for (std::size_t k = 0; k < experts.size(); ++k) {
        task += (k ? "," : "") + experts[k].name + ":" + std::to_string(w.alphas[k]);
    }
    out.provenance.training_task = task + ")";
    out.provenance.source_model_hash = first.provenance.source_model_hash;

    for (const auto& [id, z0] : first.entries) {
        std::vector<double> acc(z0.size(), 0.0);
        for (std::size_t k = 0; k < experts.size(); ++k) {
            const auto& zk = experts[k].entries.at(id);
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w.alphas[k] * zk[i];
        }
        out.entries.emplace(id, std::move(acc));
    }
    return out;
}

ExpertVector shuffle_expert(const ExpertVector& e, std::uint64_t seed) {
    ExpertVector out = e;
    out.name = e.name + ".shuffled" + std::to_string(seed);
    for (auto& [id, z] : out.entries) {
        SeededRng rng(seed, StreamPurpose::Shuffle, {id.layer, static_cast<std::uint64_t>(id.site)});
        rng.shuffle(z);
    }
    return out;
}

}  // namespace svf
