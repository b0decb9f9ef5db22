#pragma once

// Domain decomposition and the two model problems: a Poisson equation
// -div(kappa grad u) = f with a network coefficient, and acoustic wave
// propagation u_tt = div(c^2 grad u), both with homogeneous Dirichlet walls.
//
// Unknowns live at the nodes x_i = (i + 1) h, y_j = (j + 1) h of an nx x ny
// grid; the wall sits one spacing outside. Rank r = ry * px + rx owns an
// nxl x nyl block and its DOFs are numbered contiguously,
//   dof = r * nxl * nyl + jl * nxl + il,
// so matrix row stripes coincide with patches.

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <vector>

#include "distad/collectives.hpp"
#include "distad/sparse.hpp"

namespace distad::pde {

using graph::NodeId;
using graph::Tape;

struct GridPartition {
    std::size_t nx = 0, ny = 0;  // global nodes
    int px = 1, py = 1;          // rank grid
    int rank = 0;
    double h = 0.0;
    std::size_t nxl = 0, nyl = 0;  // owned block
    std::size_t x0 = 0, y0 = 0;    // global offset of the block

    int size() const noexcept { return px * py; }
    int rx() const noexcept { return rank % px; }
    int ry() const noexcept { return rank / px; }
    std::size_t owned() const noexcept { return nxl * nyl; }
    std::size_t local_index(std::size_t il, std::size_t jl) const noexcept { return jl * nxl + il; }
    std::int64_t global_dof(int owner, std::size_t il, std::size_t jl) const noexcept {
        return static_cast<std::int64_t>(static_cast<std::size_t>(owner) * owned() + jl * nxl + il);
    }
    // Owner rank and DOF of a global grid node.
    int owner_of(std::size_t gx, std::size_t gy) const noexcept {
        return static_cast<int>(gy / nyl) * px + static_cast<int>(gx / nxl);
    }
    std::int64_t dof_of(std::size_t gx, std::size_t gy) const noexcept {
        return global_dof(owner_of(gx, gy), gx % nxl, gy % nyl);
    }

    double x(std::size_t il) const noexcept { return static_cast<double>(x0 + il + 1) * h; }
    double y(std::size_t jl) const noexcept { return static_cast<double>(y0 + jl + 1) * h; }

    sparse::RowPartition rows() const;
    collectives::HaloSpec halo(int depth) const;
    // Owned node coordinates, k x 2 row-major in local DOF order.
    std::vector<double> coordinates() const;
};

// h <= 0 selects 1 / (max(nx, ny) + 1). Throws InvalidArgument when the
// grid is not divisible by the rank grid.
GridPartition partition_grid(std::size_t nx, std::size_t ny, int px, int py, int rank,
                             double h = 0.0);

// Near-square factorization px * py = ranks with px >= py.
std::array<int, 2> default_rank_grid(int ranks);

// Gathers owned values of a node field on every rank and returns the global
// field row-major (ny rows of nx values).
std::vector<double> gather_field(comm::Communicator& comm, const GridPartition& part,
                                 std::span<const double> local);

// Plain-text matrix, one grid row per line starting at j = 0, %.17g values.
void write_field(std::ostream& os, const std::vector<double>& global, std::size_t nx, std::size_t ny);

// ---- Poisson ----------------------------------------------------------

double kappa_true(double x, double y) noexcept;  // 1.5 + x + 2 y (1 - y)

// Five-point pattern of this rank's stripe.
sparse::PatternPtr poisson_pattern(const GridPartition& part);

// Assembly of the stencil values from a depth-1 halo'd frame of kappa:
// faces use the arithmetic mean of the two cells, wall faces the cell's own
// value; diagonal sum(kappa_face) / h^2, off-diagonals -kappa_face / h^2.
NodeId assemble_poisson(Tape& t, NodeId kappa_frame, const GridPartition& part,
                        sparse::PatternPtr pattern);
std::vector<double> assemble_poisson_values(const GridPartition& part, const sparse::CsrPattern& pattern,
                                            std::span<const double> kappa_frame);

struct ObservationSet {
    std::vector<std::int64_t> dofs;  // global, owned by this rank, ascending
    std::vector<double> values;
};

enum class SamplingMode {
    kPerRank,  // floor(fraction * owned) nodes per patch, stream seeded by seed ^ rank
    kGlobal,   // floor(fraction * N) nodes of the whole grid; independent of the partition
};

// Collective. Picks the observed nodes and fills their values from a
// forward solve with kappa_true.
ObservationSet sample_observations(comm::Communicator& comm, const GridPartition& part,
                                   double fraction, std::uint64_t seed,
                                   SamplingMode mode = SamplingMode::kPerRank,
                                   sparse::SolveOptions solve = {});

// Index selection only (local, no solve).
std::vector<std::int64_t> sample_dofs(const GridPartition& part, double fraction, std::uint64_t seed,
                                      SamplingMode mode);

// Sum of squared misfits at the observed DOFs, summed on root.
NodeId observation_loss(Tape& t, NodeId u, const ObservationSet& obs, const GridPartition& part);

// Solution of A(kappa) u = 1 for a plain owned kappa field. Collective.
std::vector<double> solve_poisson(comm::Communicator& comm, const GridPartition& part,
                                  std::span<const double> kappa_owned, sparse::SolveOptions solve = {});

struct PoissonProblem {
    GridPartition part;
    sparse::PatternPtr pattern;
    ObservationSet obs;
    sparse::SolveOptions solve;
    std::vector<std::size_t> layers;
};

PoissonProblem make_poisson_problem(comm::Communicator& comm, const GridPartition& part,
                                    double fraction, std::uint64_t seed, SamplingMode mode,
                                    sparse::SolveOptions solve, std::vector<std::size_t> layers);

struct PoissonGraph {
    NodeId theta = 0;  // root-owned parameter (zeros elsewhere)
    NodeId kappa = 0;  // owned coefficient values
    NodeId u = 0;
    NodeId loss = 0;
};

// theta -> bcast -> mlp -> halo -> assembly -> solve -> observation loss.
PoissonGraph build_poisson_graph(Tape& t, const PoissonProblem& prob, std::vector<double> theta0);

// Same tail with kappa as a per-rank parameter.
PoissonGraph build_poisson_graph_from_kappa(Tape& t, const PoissonProblem& prob,
                                            std::vector<double> kappa0);

// ---- Acoustic wave ----------------------------------------------------

double c_true(double x, double y) noexcept;  // smooth background with a slow lens

struct AcousticModel {
    double dt = 0.0;
    int steps = 0;
    double c_max = 0.0;  // CFL bound that every evaluated c must respect
    double source_x = 0.5, source_y = 0.5;
    double peak_frequency = 0.0;
    double amplitude = 1.0;

    double ricker(double t) const noexcept;
};

// Throws InvalidArgument unless c_max * dt / h <= 1/sqrt(2).
AcousticModel make_acoustic_model(const GridPartition& part, double c_max, int steps,
                                  double cfl = 0.5, double c_ref = 1.0);

// Bilinear weights of the point source on this rank's owned nodes, divided
// by h^2 so that the source integrates to the wavelet.
std::vector<double> source_weights(const GridPartition& part, const AcousticModel& model);

// One leapfrog step on depth-1 frames:
//   u_next = 2 u_curr - u_prev + dt^2 div(c2 grad u_curr)
// u_curr and c2 must be halo'd; the output frame has zero ghosts.
NodeId acoustic_step(Tape& t, NodeId u_prev, NodeId u_curr, NodeId c2, const GridPartition& part,
                     const AcousticModel& model);

// Plain helpers for oracles: K u = -div(c2 grad u) on owned nodes of a frame.
std::vector<double> apply_wave_operator(const GridPartition& part, std::span<const double> c2_frame,
                                        std::span<const double> u_frame);

// Top grid row (j = ny - 1) of an owned interior; empty on ranks below.
NodeId surface_row(Tape& t, NodeId u_frame, const GridPartition& part);

struct WaveGraph {
    NodeId theta = 0;
    NodeId c = 0;
    NodeId loss = 0;
    std::vector<NodeId> frames;  // u^0 .. u^steps (depth-1 frames)
    std::vector<NodeId> traces;  // surface row per step 1..steps
};

// Differentiable simulation with c = N_theta. The squared misfit against
// `observed` (steps x surface values on this rank) is summed on root. An
// empty `observed` means zero data.
WaveGraph build_wave_graph(Tape& t, const GridPartition& part, const AcousticModel& model,
                           const std::vector<std::size_t>& layers, std::vector<double> theta0,
                           const std::vector<std::vector<double>>& observed);

// Same with c given as a per-rank parameter of owned values.
WaveGraph build_wave_graph_from_c(Tape& t, const GridPartition& part, const AcousticModel& model,
                                  std::vector<double> c0, const std::vector<std::vector<double>>& observed);

// Forward run with a fixed c field; returns the owned interior per step
// (index 0 is the initial zero field) and the surface traces.
struct WaveRun {
    std::vector<std::vector<double>> fields;
    std::vector<std::vector<double>> traces;
};
WaveRun simulate(comm::Communicator& comm, const GridPartition& part, const AcousticModel& model,
                 std::span<const double> c_owned, bool with_source = true);

}  // namespace distad::pde
