#include <doctest.h>

#include "dcnet/gradcheck.hpp"
#include "dcnet/tensor.hpp"

using namespace dcnet;

TEST_SUITE("gradcheck") {

TEST_CASE("finite differences recover a known gradient") {
    // f(x) = sum of squares; gradient 2x.
    Rng rng(5);
    Tensor x = Tensor::uniform(rng, {3, 3}, -2.0, 2.0);
    auto f = [](const Tensor& v) {
        double s = 0.0;
        for (std::int64_t i = 0; i < v.size(); ++i) s += v[i] * v[i];
        return s;
    };
    Tensor fd = gradcheck::fd_gradient(f, x);
    Tensor expect = ew_scale(x, 2.0);
    CHECK(gradcheck::max_rel_err(expect, fd) <= 1e-8);
}

TEST_CASE("every op gradient matches finite differences") {
    const auto results = gradcheck::check_ops(20240901);
    CHECK(results.size() > 30); // conv sweep alone contributes 24 entries
    for (const auto& r : results) {
        INFO(r.name, " max_rel_err=", r.max_rel_err, " tol=", r.tolerance);
        CHECK(r.pass());
    }
}

TEST_CASE("op checks are deterministic per seed") {
    const auto a = gradcheck::check_ops(77);
    const auto b = gradcheck::check_ops(77);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].name == b[i].name);
        CHECK(a[i].max_rel_err == b[i].max_rel_err);
    }
}

} // TEST_SUITE
