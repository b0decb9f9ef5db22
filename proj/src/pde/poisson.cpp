#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "distad/nn.hpp"
#include "distad/pde.hpp"

namespace distad::pde {

namespace {

using graph::Tensor;

constexpr int kPlainHaloTag = 1 << 27;

struct Face {
    int di, dj;
};
constexpr std::array<Face, 4> kFaces{{{-1, 0}, {1, 0}, {0, -1}, {0, 1}}};

bool inside(const GridPartition& p, std::size_t il, std::size_t jl, const Face& f) {
    const auto gx = static_cast<std::ptrdiff_t>(p.x0 + il) + f.di;
    const auto gy = static_cast<std::ptrdiff_t>(p.y0 + jl) + f.dj;
    return gx >= 0 && gy >= 0 && gx < static_cast<std::ptrdiff_t>(p.nx) &&
           gy < static_cast<std::ptrdiff_t>(p.ny);
}

// Stored positions of the diagonal and of each face neighbor (-1 at a wall).
struct RowSlots {
    std::int64_t diag;
    std::array<std::int64_t, 4> face;
};

std::vector<RowSlots> locate(const GridPartition& p, const sparse::CsrPattern& pat) {
    if (pat.local_rows() != static_cast<std::int64_t>(p.owned()) || pat.rank != p.rank) {
        throw InvalidArgument("Poisson pattern does not match the grid partition");
    }
    std::vector<RowSlots> slots(p.owned());
    auto find = [&](std::size_t row, std::int64_t col) -> std::int64_t {
        for (auto k = pat.row_ptr[row]; k < pat.row_ptr[row + 1]; ++k) {
            if (pat.cols[static_cast<std::size_t>(k)] == col) return k;
        }
        throw InvalidArgument("Poisson pattern lacks a stencil entry");
    };
    for (std::size_t j = 0; j < p.nyl; ++j) {
        for (std::size_t i = 0; i < p.nxl; ++i) {
            const auto row = p.local_index(i, j);
            auto& s = slots[row];
            s.diag = find(row, p.dof_of(p.x0 + i, p.y0 + j));
            for (std::size_t f = 0; f < 4; ++f) {
                s.face[f] = inside(p, i, j, kFaces[f])
                                ? find(row, p.dof_of(static_cast<std::size_t>(static_cast<std::ptrdiff_t>(p.x0 + i) + kFaces[f].di),
                                                     static_cast<std::size_t>(static_cast<std::ptrdiff_t>(p.y0 + j) + kFaces[f].dj)))
                                : -1;
            }
        }
    }
    return slots;
}

void check_kappa(double k, const GridPartition& p, std::size_t i, std::size_t j) {
    if (!(k > 0.0) || !std::isfinite(k)) {
        throw InvalidArgument("nonpositive kappa " + std::to_string(k) + " near node (" +
                              std::to_string(p.x0 + i) + ", " + std::to_string(p.y0 + j) + ")");
    }
}

std::vector<double> assemble(const GridPartition& p, const collectives::HaloSpec& hs,
                             const std::vector<RowSlots>& slots, std::size_t nnz,
                             std::span<const double> frame) {
    if (frame.size() != hs.frame_size()) throw InvalidArgument("assemble_poisson: frame size mismatch");
    const double ih2 = 1.0 / (p.h * p.h);
    std::vector<double> v(nnz, 0.0);
    for (std::size_t j = 0; j < p.nyl; ++j) {
        for (std::size_t i = 0; i < p.nxl; ++i) {
            const auto& s = slots[p.local_index(i, j)];
            const double kc = frame[hs.index(static_cast<std::ptrdiff_t>(i), static_cast<std::ptrdiff_t>(j))];
            check_kappa(kc, p, i, j);
            double diag = 0.0;
            for (std::size_t f = 0; f < 4; ++f) {
                if (s.face[f] < 0) {
                    diag += kc * ih2;
                    continue;
                }
                const double kn = frame[hs.index(static_cast<std::ptrdiff_t>(i) + kFaces[f].di,
                                                 static_cast<std::ptrdiff_t>(j) + kFaces[f].dj)];
                check_kappa(kn, p, i, j);
                const double kf = 0.5 * (kc + kn) * ih2;
                diag += kf;
                v[static_cast<std::size_t>(s.face[f])] = -kf;
            }
            v[static_cast<std::size_t>(s.diag)] = diag;
        }
    }
    return v;
}

class AssemblePoisson final : public graph::Op {
public:
    AssemblePoisson(GridPartition part, sparse::PatternPtr pattern)
        : part_(part), hs_(part.halo(1)), pattern_(std::move(pattern)), slots_(locate(part_, *pattern_)) {}
    std::string name() const override { return "assemble_poisson"; }

    Tensor forward(std::span<const Tensor* const> in) override {
        return assemble(part_, hs_, slots_, pattern_->nnz(), *in[0]);
    }

    void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> adj) override {
        Tensor& a = *adj[0];
        const double ih2 = 1.0 / (part_.h * part_.h);
        for (std::size_t j = 0; j < part_.nyl; ++j) {
            for (std::size_t i = 0; i < part_.nxl; ++i) {
                const auto& s = slots_[part_.local_index(i, j)];
                const auto c = hs_.index(static_cast<std::ptrdiff_t>(i), static_cast<std::ptrdiff_t>(j));
                const double gd = g[static_cast<std::size_t>(s.diag)];
                for (std::size_t f = 0; f < 4; ++f) {
                    if (s.face[f] < 0) {
                        a[c] += gd * ih2;
                        continue;
                    }
                    const auto n = hs_.index(static_cast<std::ptrdiff_t>(i) + kFaces[f].di,
                                             static_cast<std::ptrdiff_t>(j) + kFaces[f].dj);
                    const double w = 0.5 * ih2 * (gd - g[static_cast<std::size_t>(s.face[f])]);
                    a[c] += w;
                    a[n] += w;
                }
            }
        }
    }

private:
    GridPartition part_;
    collectives::HaloSpec hs_;
    sparse::PatternPtr pattern_;
    std::vector<RowSlots> slots_;
};

class ObservationMisfit final : public graph::Op {
public:
    ObservationMisfit(std::vector<std::size_t> local, std::vector<double> values)
        : local_(std::move(local)), values_(std::move(values)) {}
    std::string name() const override { return "observation_misfit"; }

    Tensor forward(std::span<const Tensor* const> in) override {
        const Tensor& u = *in[0];
        double s = 0.0;
        for (std::size_t k = 0; k < local_.size(); ++k) {
            if (local_[k] >= u.size()) throw InvalidArgument("observation index outside owned segment");
            const double r = u[local_[k]] - values_[k];
            s += r * r;
        }
        return {s};
    }

    void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> adj) override {
        const Tensor& u = *in[0];
        for (std::size_t k = 0; k < local_.size(); ++k) {
            (*adj[0])[local_[k]] += 2.0 * (u[local_[k]] - values_[k]) * g[0];
        }
    }

private:
    std::vector<std::size_t> local_;
    std::vector<double> values_;
};

// Deterministic index draw in [0, n) independent of the standard library's
// distribution implementations.
std::size_t draw(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

std::size_t take(double fraction, std::size_t n) {
    return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
}

}  // namespace

double kappa_true(double x, double y) noexcept { return 1.5 + x + 2.0 * y * (1.0 - y); }

sparse::PatternPtr poisson_pattern(const GridPartition& p) {
    auto pat = std::make_shared<sparse::CsrPattern>();
    pat->rows = p.rows();
    pat->rank = p.rank;
    pat->row_ptr.push_back(0);
    std::vector<std::int64_t> cols;
    for (std::size_t j = 0; j < p.nyl; ++j) {
        for (std::size_t i = 0; i < p.nxl; ++i) {
            cols.clear();
            cols.push_back(p.dof_of(p.x0 + i, p.y0 + j));
            for (const auto& f : kFaces) {
                if (!inside(p, i, j, f)) continue;
                cols.push_back(p.dof_of(static_cast<std::size_t>(static_cast<std::ptrdiff_t>(p.x0 + i) + f.di),
                                        static_cast<std::size_t>(static_cast<std::ptrdiff_t>(p.y0 + j) + f.dj)));
            }
            std::sort(cols.begin(), cols.end());
            pat->cols.insert(pat->cols.end(), cols.begin(), cols.end());
            pat->row_ptr.push_back(static_cast<std::int64_t>(pat->cols.size()));
        }
    }
    pat->validate();
    return pat;
}

NodeId assemble_poisson(Tape& t, NodeId kappa_frame, const GridPartition& part,
                        sparse::PatternPtr pattern) {
    return t.record(std::make_unique<AssemblePoisson>(part, std::move(pattern)), {kappa_frame});
}

std::vector<double> assemble_poisson_values(const GridPartition& part, const sparse::CsrPattern& pattern,
                                            std::span<const double> kappa_frame) {
    return assemble(part, part.halo(1), locate(part, pattern), pattern.nnz(), kappa_frame);
}

std::vector<std::int64_t> sample_dofs(const GridPartition& part, double fraction, std::uint64_t seed,
                                      SamplingMode mode) {
    if (!(fraction > 0.0 && fraction <= 1.0)) {
        throw InvalidArgument("observation fraction must lie in (0, 1], got " + std::to_string(fraction));
    }
    std::vector<std::int64_t> dofs;
    if (mode == SamplingMode::kPerRank) {
        const std::size_t n = part.owned();
        std::vector<std::size_t> perm(n);
        for (std::size_t k = 0; k < n; ++k) perm[k] = k;
        std::mt19937_64 rng(seed ^ static_cast<std::uint64_t>(part.rank));
        const std::size_t k_obs = take(fraction, n);
        for (std::size_t k = 0; k < k_obs; ++k) std::swap(perm[k], perm[k + draw(rng, n - k)]);
        const auto base = part.global_dof(part.rank, 0, 0);
        for (std::size_t k = 0; k < k_obs; ++k) dofs.push_back(base + static_cast<std::int64_t>(perm[k]));
    } else {
        const std::size_t n = part.nx * part.ny;
        std::vector<std::size_t> perm(n);
        for (std::size_t k = 0; k < n; ++k) perm[k] = k;
        std::mt19937_64 rng(seed);
        const std::size_t k_obs = take(fraction, n);
        for (std::size_t k = 0; k < k_obs; ++k) std::swap(perm[k], perm[k + draw(rng, n - k)]);
        for (std::size_t k = 0; k < k_obs; ++k) {
            const std::size_t gx = perm[k] % part.nx, gy = perm[k] / part.nx;
            if (part.owner_of(gx, gy) == part.rank) dofs.push_back(part.dof_of(gx, gy));
        }
    }
    std::sort(dofs.begin(), dofs.end());
    return dofs;
}

std::vector<double> solve_poisson(comm::Communicator& comm, const GridPartition& part,
                                  std::span<const double> kappa_owned, sparse::SolveOptions solve) {
    if (kappa_owned.size() != part.owned()) throw InvalidArgument("solve_poisson: kappa size mismatch");
    const auto hs = part.halo(1);
    std::vector<double> frame(hs.frame_size(), 0.0), filled(hs.frame_size());
    for (std::size_t j = 0; j < part.nyl; ++j)
        for (std::size_t i = 0; i < part.nxl; ++i)
            frame[hs.index(static_cast<std::ptrdiff_t>(i), static_cast<std::ptrdiff_t>(j))] = kappa_owned[part.local_index(i, j)];
    collectives::halo_fill(comm, hs, frame, filled, kPlainHaloTag);
    auto pattern = poisson_pattern(part);
    sparse::DistCSR a{pattern, assemble_poisson_values(part, *pattern, filled)};
    sparse::DistVector f{pattern->rows, part.rank, std::vector<double>(part.owned(), 1.0)};
    return sparse::dist_solve(comm, a, f, solve).values;
}

ObservationSet sample_observations(comm::Communicator& comm, const GridPartition& part, double fraction,
                                   std::uint64_t seed, SamplingMode mode, sparse::SolveOptions solve) {
    ObservationSet obs;
    obs.dofs = sample_dofs(part, fraction, seed, mode);
    std::vector<double> kappa(part.owned());
    for (std::size_t j = 0; j < part.nyl; ++j)
        for (std::size_t i = 0; i < part.nxl; ++i) kappa[part.local_index(i, j)] = kappa_true(part.x(i), part.y(j));
    const auto u = solve_poisson(comm, part, kappa, solve);
    const auto base = part.global_dof(part.rank, 0, 0);
    for (auto d : obs.dofs) obs.values.push_back(u[static_cast<std::size_t>(d - base)]);
    return obs;
}

NodeId observation_loss(Tape& t, NodeId u, const ObservationSet& obs, const GridPartition& part) {
    if (obs.dofs.size() != obs.values.size()) throw InvalidArgument("observation set is inconsistent");
    const auto base = part.global_dof(part.rank, 0, 0);
    std::vector<std::size_t> local;
    local.reserve(obs.dofs.size());
    for (auto d : obs.dofs) {
        if (d < base || d >= base + static_cast<std::int64_t>(part.owned())) {
            throw InvalidArgument("observed DOF " + std::to_string(d) + " is not owned by rank " +
                                  std::to_string(part.rank));
        }
        local.push_back(static_cast<std::size_t>(d - base));
    }
    const auto misfit = t.record(std::make_unique<ObservationMisfit>(std::move(local), obs.values), {u});
    return collectives::mpi_sum(t, misfit);
}

PoissonProblem make_poisson_problem(comm::Communicator& comm, const GridPartition& part, double fraction,
                                    std::uint64_t seed, SamplingMode mode, sparse::SolveOptions solve,
                                    std::vector<std::size_t> layers) {
    if (part.size() != comm.size()) {
        throw InvalidArgument("rank grid " + std::to_string(part.px) + "x" + std::to_string(part.py) +
                              " does not match " + std::to_string(comm.size()) + " ranks");
    }
    PoissonProblem p;
    p.part = part;
    p.pattern = poisson_pattern(part);
    p.obs = sample_observations(comm, part, fraction, seed, mode, solve);
    p.solve = solve;
    p.layers = std::move(layers);
    return p;
}

namespace {

PoissonGraph poisson_tail(Tape& t, const PoissonProblem& prob, PoissonGraph g) {
    const auto hs = prob.part.halo(1);
    const auto frame = collectives::halo_exchange(t, collectives::pad_frame(t, g.kappa, hs), hs);
    const auto values = assemble_poisson(t, frame, prob.part, prob.pattern);
    const auto f = t.constant(Tensor(prob.part.owned(), 1.0));
    g.u = sparse::solve(t, prob.pattern, values, f, prob.solve);
    g.loss = observation_loss(t, g.u, prob.obs, prob.part);
    t.set_loss(g.loss);
    return g;
}

}  // namespace

PoissonGraph build_poisson_graph(Tape& t, const PoissonProblem& prob, std::vector<double> theta0) {
    PoissonGraph g;
    const auto n = nn::parameter_count(prob.layers);
    if (theta0.size() != n) throw InvalidArgument("theta has the wrong length for the network");
    if (t.comm().rank() != 0) theta0.assign(n, 0.0);
    g.theta = t.parameter(std::move(theta0));
    const auto theta = nn::params_on_root(t, g.theta);
    g.kappa = nn::mlp_forward(t, prob.layers, theta, prob.part.coordinates());
    return poisson_tail(t, prob, g);
}

PoissonGraph build_poisson_graph_from_kappa(Tape& t, const PoissonProblem& prob, std::vector<double> kappa0) {
    if (kappa0.size() != prob.part.owned()) throw InvalidArgument("kappa has the wrong length");
    PoissonGraph g;
    g.theta = t.parameter(std::move(kappa0));
    g.kappa = g.theta;
    return poisson_tail(t, prob, g);
}

}  // namespace distad::pde
