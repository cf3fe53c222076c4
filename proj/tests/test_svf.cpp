#include <doctest.h>

#include <algorithm>

#include "oracles.hpp"
#include "svf/errors.hpp"
#include "svf/svf.hpp"

using namespace svf;

namespace {

ExpertVector make_expert(std::string name, std::vector<double> z0, std::vector<double> z1) {
    ExpertVector e;
    e.name = std::move(name);
    e.domain_tag = "math";
    e.entries[{0, Site::q_proj}] = std::move(z0);
    e.entries[{1, Site::mlp_in}] = std::move(z1);
    return e;
}

}  // namespace

TEST_CASE("apply_expert scaling") {
    const auto f = svd(oracle::random_matrix(6, 4, 3));
    CHECK(max_abs_diff(apply_expert(f, std::vector<double>(4, 1.0)), reconstruct(f)) <= 1e-10);
    CHECK(apply_expert(f, std::vector<double>(4, 0.0)).frobenius_norm() == 0.0);

    const std::vector<double> z{2, 1, 1, 1};
    const Matrix got = apply_expert(f, z);
    CHECK(max_abs_diff(got, oracle::rank1_sum(f, z)) <= 1e-12);
    Matrix expect = reconstruct(f);
    for (std::size_t r = 0; r < 6; ++r)
        for (std::size_t c = 0; c < 4; ++c) expect(r, c) += f.sigma[0] * f.u(r, 0) * f.vt(0, c);
    CHECK(max_abs_diff(got, expect) <= 1e-12);

    CHECK_THROWS_AS(apply_expert(f, std::vector<double>(3, 1.0)), ShapeError);
}

TEST_CASE("apply_expert is linear in z") {
    const auto f = svd(oracle::random_matrix(9, 7, 21));
    SeededRng rng(4, StreamPurpose::Test);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> a(7), b(7), mix(7);
        for (auto& v : a) v = rng.normal();
        for (auto& v : b) v = rng.normal();
        const double al = rng.normal(), be = rng.normal();
        for (std::size_t i = 0; i < 7; ++i) mix[i] = al * a[i] + be * b[i];
        const Matrix lhs = apply_expert(f, mix);
        const Matrix rhs = apply_expert(f, a) * al + apply_expert(f, b) * be;
        CHECK(max_abs_diff(lhs, rhs) <= 1e-9);
    }
}

TEST_CASE("compose") {
    const auto e1 = make_expert("a", {1, 1}, {1, 2, 3});
    const auto e2 = make_expert("b", {3, 1}, {0, 0, 1});
    const auto e3 = make_expert("c", {-1, 5}, {2, 2, 2});
    const std::vector<ExpertVector> all{e1, e2, e3};

    const auto one_hot = compose(all, CompositionWeights::normalize({0, 1, 0}));
    CHECK(one_hot.entries == e2.entries);

    const std::vector<ExpertVector> two{e1, e2};
    const auto half = compose(two, CompositionWeights::normalize({0.5, 0.5}));
    CHECK(half.entries.at({0, Site::q_proj}) == std::vector<double>{2, 1});

    SeededRng rng(11, StreamPurpose::Test);
    std::vector<ExpertVector> rnd;
    for (int k = 0; k < 3; ++k) {
        std::vector<double> a(4), b(6);
        for (auto& v : a) v = rng.normal();
        for (auto& v : b) v = rng.normal();
        rnd.push_back(make_expert("r" + std::to_string(k), a, b));
    }
    const std::vector<double> alpha{rng.normal(), rng.normal(), rng.normal()};
    const auto mixed = compose(rnd, CompositionWeights{alpha, false});
    for (const auto& [id, z] : mixed.entries)
        for (std::size_t i = 0; i < z.size(); ++i) {
            double ref = 0.0;
            for (int k = 0; k < 3; ++k) ref += alpha[k] * rnd[k].entries.at(id)[i];
            CHECK(std::abs(z[i] - ref) <= 1e-12);
        }

    auto bad = e2;
    bad.entries.erase(bad.entries.begin());
    CHECK_THROWS_AS(compose(std::vector<ExpertVector>{e1, bad}, CompositionWeights{{0.5, 0.5}, false}), IncompatibleExperts);
    auto wrong_rank = e2;
    wrong_rank.entries[{0, Site::q_proj}].push_back(1.0);
    CHECK_THROWS_AS(compose(std::vector<ExpertVector>{e1, wrong_rank}, CompositionWeights{{0.5, 0.5}, false}),
                    IncompatibleExperts);
    CHECK_THROWS_AS(compose(two, CompositionWeights{{1.0}, false}), ShapeError);
}

TEST_CASE("normalize") {
    const auto w = CompositionWeights::normalize({1, 3});
    CHECK(w.normalized);
    CHECK(w.alphas == std::vector<double>{0.25, 0.75});
}

TEST_CASE("shuffle_expert") {
    ExpertVector e = make_expert("x", {7}, {1, 1, 1});
    const auto s = shuffle_expert(e, 3);
    CHECK(s.entries == e.entries);

    int differ = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto t = shuffle_expert(make_expert("y", {1, 2, 3, 4}, {5, 6}), seed);
        auto z = t.entries.at({0, Site::q_proj});
        differ += z != std::vector<double>{1, 2, 3, 4};
        std::sort(z.begin(), z.end());
        CHECK(z == std::vector<double>{1, 2, 3, 4});
    }
    CHECK(differ >= 90);

    const auto a = shuffle_expert(make_expert("y", {1, 2, 3, 4}, {5, 6}), 5);
    const auto b = shuffle_expert(make_expert("y", {1, 2, 3, 4}, {5, 6}), 5);
    CHECK(a == b);
}

TEST_CASE("ones expert and parameter count") {
    const auto e = ones_expert({{{0, Site::q_proj}, 3}, {{0, Site::v_proj}, 2}});
    CHECK(e.parameter_count() == 5);
    CHECK(e.all_finite());
    for (const auto& [id, z] : e.entries)
        for (double v : z) CHECK(v == 1.0);
}

TEST_CASE("site names round trip") {
    for (Site s : kAllSites) CHECK(parse_site(site_name(s)) == s);
    CHECK_FALSE(parse_site("nope").has_value());
    CHECK(MatrixId{1, Site::v_proj}.str() == "L1.v_proj");
}
