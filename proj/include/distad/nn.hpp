#pragma once

// Small tanh MLP mapping 2-D coordinates to a positive coefficient:
//   kappa(x) = softplus(MLP(x)) + kCoefficientFloor
// Hidden layers use tanh, the output layer is affine.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "distad/graph.hpp"

namespace distad::nn {

inline constexpr double kCoefficientFloor = 0.1;

std::vector<std::size_t> default_layers();  // 2 -> 20 -> 20 -> 20 -> 1

// Flat length: sum over layers of (fan_in + 1) * fan_out. Each layer stores
// its fan_out x fan_in weights row-major, then its biases.
std::size_t parameter_count(std::span<const std::size_t> layers);

struct MlpParams {
    std::vector<std::size_t> layers;
    std::uint64_t seed = 0;
    std::vector<double> theta;
};

// Xavier-uniform weights and zero biases from a 64-bit seed; identical on
// every platform for a given seed.
MlpParams xavier_init(std::vector<std::size_t> layers, std::uint64_t seed);

double softplus(double z) noexcept;

// Plain evaluation at k points (coords is k x 2, row-major).
std::vector<double> mlp_eval(std::span<const std::size_t> layers, std::span<const double> theta,
                             std::span<const double> coords);

// Differentiable evaluation; the coordinates are constants of the node.
graph::NodeId mlp_forward(graph::Tape& t, std::vector<std::size_t> layers, graph::NodeId theta,
                          std::vector<double> coords);

// Broadcast of root-owned parameters; the backward sums every rank's
// parameter adjoint onto root.
graph::NodeId params_on_root(graph::Tape& t, graph::NodeId theta_root, int root = 0);

// Text checkpoint: a header with layer sizes and seed, then one %.17g value
// per line. Round-trips bit-exactly.
void save_checkpoint(std::ostream& os, const MlpParams& params);
MlpParams load_checkpoint(std::istream& is);

}  // namespace distad::nn
