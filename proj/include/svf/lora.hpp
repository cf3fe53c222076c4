#pragma once

#include <map>
#include <set>
#include <vector>

#include "svf/linalg.hpp"
#include "svf/svf.hpp"

namespace svf {

// Additive low-rank update for one weight matrix: W + (alpha/rank) A B.
struct LoraEntry {
    Matrix a;  // n x rank
    Matrix b;  // rank x m
    friend bool operator==(const LoraEntry&, const LoraEntry&) = default;
};

struct LoraAdapter {
    std::map<MatrixId, LoraEntry> entries;
    std::size_t rank = 16;
    double alpha = 32.0;
    double dropout_p = 0.05;
    std::string name = "lora";

    double scale() const { return alpha / static_cast<double>(rank); }
    std::size_t parameter_count() const;  // sum of rank * (n + m)
    bool all_finite() const;
    friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;
};

// W + (alpha/rank) A B. Throws ShapeError on inconsistent shapes.
Matrix apply_lora(const Matrix& w, const LoraEntry& entry, double alpha, std::size_t rank);

struct LoraShape {
    std::size_t rows;
    std::size_t cols;
};

// A ~ N(0, a_std^2), B = 0, so the untrained adapter is the identity update.
LoraAdapter init_lora(const std::map<MatrixId, LoraShape>& shapes, std::size_t rank, double alpha, double dropout_p,
                      std::uint64_t seed, double a_std = 0.02);

std::size_t lora_parameter_count(const std::map<MatrixId, LoraShape>& shapes, std::size_t rank);

}  // namespace svf
