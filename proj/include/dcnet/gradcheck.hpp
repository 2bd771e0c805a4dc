#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dcnet/tensor.hpp"

// Finite-difference verification of the analytic gradients. Used by the
// test suite and by the `gradcheck` CLI command.
namespace dcnet::gradcheck {

struct CheckResult {
    std::string name; // e.g. "conv2d[r=4,same]/dw"
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    bool pass() const { return max_rel_err <= tolerance; }
};

// Central-difference gradient of the scalar functional f at x.
Tensor fd_gradient(const std::function<double(const Tensor&)>& f, Tensor x, double eps = 1e-5);

// max_i |a_i - f_i| / max(|a_i|, |f_i|, 1e-6)
double max_rel_err(const Tensor& analytic, const Tensor& fd);

// Per-op checks against finite differences (tolerance 1e-4): conv2d over
// dilations {1,2,4,6} and both paddings, depthwise_conv2d, batch_norm in
// training mode, elu, avg_pool, dropout with a fixed mask seed, dense,
// relu, sigmoid, and a softmax-with-loss composite.
std::vector<CheckResult> check_ops(std::uint64_t seed);

// Whole-model check on a deliberately tiny configuration (tolerance 1e-3):
// loss gradient w.r.t. every trainable parameter and the input batch.
std::vector<CheckResult> check_model(std::uint64_t seed);

} // namespace dcnet::gradcheck
