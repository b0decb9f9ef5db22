#pragma once

// Verification suites shared by the gradcheck command and the acceptance
// runner: adjoint dot-product tests of every communication operator and
// finite-difference checks of the model gradients.

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "distad/graph.hpp"

namespace distad::checks {

// Records a linear map of `input` and returns its output node.
using MapBuilder = std::function<graph::NodeId(graph::Tape&, graph::NodeId input)>;

// Collective. Draws v for the input and w against the output and returns
//   |sum_r <F v, w> - sum_r <v, F^T w>| / max(|.|, |.|),
// identical on every rank.
double dot_product_test(comm::Communicator& comm, std::size_t input_size, const MapBuilder& build,
                        std::uint64_t seed);

struct CheckResult {
    std::string name;
    std::string layout;  // rank grid, e.g. "2x2"
    double error = 0.0;
    double tolerance = 0.0;
    bool passed = false;
    std::string detail;
};

struct AdjointSuiteOptions {
    std::vector<std::array<int, 2>> grids{{1, 1}, {1, 2}, {2, 2}, {3, 3}};
    int trials = 20;
    std::uint64_t seed = 1;
    double tolerance = 1e-12;
};

// One result per (operator, rank grid): mpi_bcast, mpi_sum, mpi_gather,
// mpi_send/mpi_recv, mpi_sendrecv, halo_exchange depth 1 and 2, dist_spmv
// (vector and values), dist_transpose, acoustic_step.
std::vector<CheckResult> adjoint_suite(const AdjointSuiteOptions& options);

// L(theta) = sum_r theta^r over `ranks` ranks: analytic value and gradient
// at theta = 1 and 2, plus a central difference.
CheckResult cubic_check(int ranks);

struct FdOptions {
    int px = 1, py = 1;
    std::size_t nx = 16, ny = 16;
    int components = 10;
    double eps = 1e-6;
    double tolerance = 1e-5;
    double solve_tol = 1e-12;
    int steps = 50;  // wave only
    std::uint64_t seed = 7;
};

// Network-parameter gradient of the Poisson observation loss vs central
// differences at random components.
CheckResult poisson_fd_check(const FdOptions& options);
// Same for the wave trace misfit.
CheckResult wave_fd_check(const FdOptions& options);
// Network backprop alone against central differences.
CheckResult mlp_fd_check(int samples, std::uint64_t seed);

}  // namespace distad::checks
