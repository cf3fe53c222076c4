#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "svf/linalg.hpp"

namespace svf {

// Weight-matrix positions inside one transformer block.
enum class Site : std::uint8_t { q_proj = 0, k_proj = 1, v_proj = 2, o_proj = 3, mlp_in = 4, mlp_out = 5 };

inline constexpr Site kAllSites[] = {Site::q_proj, Site::k_proj, Site::v_proj, Site::o_proj, Site::mlp_in, Site::mlp_out};

std::string_view site_name(Site s);
std::optional<Site> parse_site(std::string_view name);
bool is_attention_site(Site s);

struct MatrixId {
    std::uint16_t layer = 0;
    Site site = Site::q_proj;

    auto operator<=>(const MatrixId&) const = default;
    std::string str() const;  // e.g. "L1.v_proj"
};

// Provenance carried alongside an expert so transfer experiments stay auditable.
struct ExpertProvenance {
    std::string source_model_hash;
    std::string config_hash;
    std::string training_task;
    friend bool operator==(const ExpertProvenance&, const ExpertProvenance&) = default;
};

// A trained SVF parameter set: one scale vector z per adapted matrix.
struct ExpertVector {
    std::string name;
    std::string domain_tag;
    std::map<MatrixId, std::vector<double>> entries;
    ExpertProvenance provenance;

    std::size_t parameter_count() const;
    bool all_finite() const;
    friend bool operator==(const ExpertVector&, const ExpertVector&) = default;
};

// An expert whose every entry is 1.0 with the given per-matrix ranks; applying
// it reproduces the base weights.
ExpertVector ones_expert(const std::map<MatrixId, std::size_t>& ranks, std::string name = "ones");

struct CompositionWeights {
    std::vector<double> alphas;
    bool normalized = false;

    // Rescales so the alphas sum to one and sets the flag.
    static CompositionWeights normalize(std::vector<double> alphas);
};

// U diag(sigma * z) V^T. Throws ShapeError when z does not match the rank.
Matrix apply_expert(const SvdFactors& f, std::span<const double> z);

// Per matrix, z' = sum_k alpha_k z_k. Throws IncompatibleExperts on differing
// key sets or ranks, ShapeError when the weight count differs from K.
ExpertVector compose(std::span<const ExpertVector> experts, const CompositionWeights& w);

// Independently permutes every per-matrix z with a stream keyed by
// (seed, matrix id). Entries are preserved as a multiset.
ExpertVector shuffle_expert(const ExpertVector& e, std::uint64_t seed);

}  // namespace svf
