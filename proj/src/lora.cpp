#include "svf/lora.hpp"

#include "svf/errors.hpp"
#include "svf/rng.hpp"

namespace svf {

std::size_t LoraAdapter::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [id, e] : entries) n += e.a.size() + e.b.size();
    return n;
}

bool LoraAdapter::all_finite() const {
    for (const auto& [id, e] : entries)
        if (!e.a.all_finite() || !e.b.all_finite()) return false;
    return true;
}

Matrix apply_lora(const Matrix& w, const LoraEntry& entry, double alpha, std::size_t rank) {
    if (rank == 0) throw ShapeError("lora rank must be >= 1");
    if (entry.a.rows() != w.rows() || entry.b.cols() != w.cols() || entry.a.cols() != entry.b.rows()) {
        throw ShapeError("lora entry shapes do not match weight " + std::to_string(w.rows()) + "x" + std::to_string(w.cols()));
    }
    Matrix delta = matmul(entry.a, entry.b);
    delta *= alpha / static_cast<double>(rank);
    return w + delta;
}

LoraAdapter init_lora(const std::map<MatrixId, LoraShape>& shapes, std::size_t rank, double alpha, double dropout_p,
                      std::uint64_t seed, double a_std) {
    if (rank == 0) throw ShapeError("lora rank must be >= 1");
    LoraAdapter ad;
    ad.rank = rank;
    ad.alpha = alpha;
    ad.dropout_p = dropout_p;
    for (const auto& [id, shape] : shapes) {
        SeededRng rng(seed, StreamPurpose::Init, {0x10a, id.layer, static_cast<std::uint64_t>(id.site)});
        LoraEntry e;
        e.a = Matrix::random_normal(shape.rows, rank, rng, a_std);
        e.b = Matrix(rank, shape.cols);
        ad.entries.emplace(id, std::move(e));
    }
    return ad;
}

std::size_t lora_parameter_count(const std::map<MatrixId, LoraShape>& shapes, std::size_t rank) {
    std::size_t n = 0;
    for (const auto& [id, s] : shapes) n += rank * (s.rows + s.cols);
    return n;
}

}  // namespace svf
