#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <random>
#include <sstream>

#include "distad/checks.hpp"
#include "distad/collectives.hpp"
#include "distad/nn.hpp"
#include "distad/pde.hpp"
#include "distad/sparse.hpp"

namespace distad::checks {

namespace {

using graph::NodeId;
using graph::Tape;
using graph::Tensor;

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<double> v(n);
    for (auto& x : v) x = 2.0 * (static_cast<double>(rng() >> 11) * 0x1.0p-53) - 1.0;
    return v;
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a * 0x9E3779B97F4A7C15ull ^ (b + 0x632BE59BD9B4E019ull);
    x ^= x >> 31;
    x *= 0xBF58476D1CE4E5B9ull;
    x ^= x >> 29;
    return x;
}

// <w, y> with w drawn from the output size at forward time.
class Probe final : public graph::Op {
public:
    explicit Probe(std::uint64_t seed) : seed_(seed) {}
    std::string name() const override { return "probe"; }

    Tensor forward(std::span<const Tensor* const> in) override {
        w_ = random_values(in[0]->size(), seed_);
        double s = 0.0;
        for (std::size_t i = 0; i < w_.size(); ++i) s += w_[i] * (*in[0])[i];
        return {s};
    }

    void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> adj) override {
        for (std::size_t i = 0; i < w_.size(); ++i) (*adj[0])[i] += g[0] * w_[i];
    }

private:
    std::uint64_t seed_;
    std::vector<double> w_;
};

std::string layout(int px, int py) { return std::to_string(px) + "x" + std::to_string(py); }

sparse::CooMatrix random_matrix(std::int64_t n, double density, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    sparse::CooMatrix m;
    m.n = n;
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
            const double v = 2.0 * (static_cast<double>(rng() >> 11) * 0x1.0p-53) - 1.0;
            if (i == j || u < density) m.entries.push_back({i, j, v});
        }
    }
    return m;
}

double fd_rel_error(double fd, double g) {
    const double scale = std::max(std::abs(fd), std::abs(g));
    return scale > 0.0 ? std::abs(fd - g) / scale : 0.0;
}

// Distinct random components, identical on every rank.
std::vector<std::size_t> pick_components(std::size_t n, int count, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::mt19937_64 rng(seed);
    const auto k = std::min<std::size_t>(static_cast<std::size_t>(count), n);
    for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + static_cast<std::size_t>(rng() % (n - i))]);
    idx.resize(k);
    return idx;
}

// Runs the tape's forward with the root parameter perturbed along `i`.
double perturbed_loss(Tape& t, NodeId theta, const std::vector<double>& base, std::size_t i, double delta) {
    auto x = base;
    if (t.comm().rank() == 0) x[i] += delta;
    t.set_parameter(theta, x);
    return t.forward();
}

struct FdOutcome {
    double max_error = 0.0;
    std::size_t worst = 0;
};

// Central differences of a root-owned parameter; all ranks take part.
FdOutcome central_differences(Tape& t, NodeId theta, const std::vector<double>& base, int count,
                              double eps, std::uint64_t seed) {
    t.set_parameter(theta, base);
    t.evaluate_with_gradient();
    const auto grad = t.adjoint(theta);
    FdOutcome out;
    for (auto i : pick_components(base.size(), count, seed)) {
        const double lp = perturbed_loss(t, theta, base, i, eps);
        const double lm = perturbed_loss(t, theta, base, i, -eps);
        if (t.comm().rank() != 0) continue;
        const double e = fd_rel_error((lp - lm) / (2.0 * eps), grad[i]);
        if (e > out.max_error) {
            out.max_error = e;
            out.worst = i;
        }
    }
    t.set_parameter(theta, base);
    return out;
}

}  // namespace

double dot_product_test(comm::Communicator& comm, std::size_t input_size, const MapBuilder& build,
                        std::uint64_t seed) {
    Tape t(comm);
    const auto v = random_values(input_size, mix(seed, 2 * static_cast<std::uint64_t>(comm.rank()) + 1));
    const auto in = t.parameter(v);
    const auto out = build(t, in);
    t.set_loss(t.record(std::make_unique<Probe>(mix(seed, 2 * static_cast<std::uint64_t>(comm.rank()) + 2)), {out}));
    t.evaluate_with_gradient();
    std::array<double, 2> s{t.value(t.loss())[0], 0.0};
    const auto& g = t.adjoint(in);
    for (std::size_t i = 0; i < v.size(); ++i) s[1] += v[i] * g[i];
    comm::allreduce_sum(comm, std::span<double>(s));
    const double scale = std::max({std::abs(s[0]), std::abs(s[1]), 1e-300});
    return std::abs(s[0] - s[1]) / scale;
}

std::vector<CheckResult> adjoint_suite(const AdjointSuiteOptions& options) {
    std::vector<CheckResult> results;
    for (const auto& grid : options.grids) {
        const int px = grid[0], py = grid[1], size = px * py;
        // Max error per operator; written by rank 0 only.
        std::map<std::string, double> worst;
        std::vector<std::string> order;
        auto note = [&](int rank, const std::string& op, double e) {
            if (rank != 0) return;
            if (!worst.count(op)) order.push_back(op);
            worst[op] = std::max(worst[op], e);
        };

        comm::spawn_ranks(size, [&](comm::Communicator& c) {
            const int r = c.rank();
            const int next = (r + 1) % size, prev = (r + size - 1) % size;
            const auto mat = random_matrix(6 * size + 3, 0.1, options.seed);
            const auto rows = sparse::RowPartition::uniform(mat.n, size);
            const auto a = sparse::distribute(mat, rows, r);
            const auto xfix = random_values(static_cast<std::size_t>(rows.count(r)), mix(options.seed, 99 + r));
            const auto part = pde::partition_grid(4 * static_cast<std::size_t>(px), 4 * static_cast<std::size_t>(py), px, py, r);
            const auto model = pde::make_acoustic_model(part, 2.0, 1);
            const auto hs1 = part.halo(1);

            // Fixed positive c^2 frame for the wave step, halo'd once.
            std::vector<double> c2(hs1.frame_size(), 0.0), c2h(hs1.frame_size());
            const auto cr = random_values(part.owned(), mix(options.seed, 500 + r));
            for (std::size_t j = 0; j < part.nyl; ++j)
                for (std::size_t i = 0; i < part.nxl; ++i)
                    c2[hs1.index(static_cast<std::ptrdiff_t>(i), static_cast<std::ptrdiff_t>(j))] =
                        1.0 + 0.9 * cr[part.local_index(i, j)];
            collectives::halo_fill(c, hs1, c2, c2h, 1 << 27);

            for (int trial = 0; trial < options.trials; ++trial) {
                const auto seed = mix(options.seed, static_cast<std::uint64_t>(trial));
                const int root = trial % size;
                note(r, "mpi_bcast", dot_product_test(c, 3, [&](Tape& t, NodeId x) {
                    return collectives::mpi_bcast(t, x, root);
                }, seed));
                note(r, "mpi_sum", dot_product_test(c, 3, [&](Tape& t, NodeId x) {
                    return collectives::mpi_sum(t, x, root);
                }, seed + 1));
                note(r, "mpi_gather", dot_product_test(c, 2, [&](Tape& t, NodeId x) {
                    return collectives::mpi_gather(t, x, root);
                }, seed + 2));
                note(r, "mpi_send/mpi_recv", dot_product_test(c, 3, [&](Tape& t, NodeId x) {
                    collectives::mpi_send(t, x, next, trial);
                    return collectives::mpi_recv(t, 3, prev, trial);
                }, seed + 3));
                note(r, "mpi_sendrecv", dot_product_test(c, 4, [&](Tape& t, NodeId x) {
                    return collectives::mpi_sendrecv(t, x, next, prev, trial);
                }, seed + 4));
                for (int depth : {1, 2}) {
                    const auto hs = part.halo(depth);
                    note(r, "halo_exchange(depth " + std::to_string(depth) + ")",
                         dot_product_test(c, hs.frame_size(), [&](Tape& t, NodeId x) {
                             return collectives::halo_exchange(t, x, hs);
                         }, seed + 5 + static_cast<std::uint64_t>(depth)));
                }
                note(r, "dist_spmv", dot_product_test(c, xfix.size(), [&](Tape& t, NodeId x) {
                    return sparse::spmv(t, a.pattern, t.constant(a.values), x);
                }, seed + 8));
                note(r, "dist_spmv(values)", dot_product_test(c, a.values.size(), [&](Tape& t, NodeId v) {
                    return sparse::spmv(t, a.pattern, v, t.constant(xfix));
                }, seed + 9));
                const auto plan = sparse::plan_transpose(c, a.pattern);
                note(r, "dist_transpose", dot_product_test(c, a.values.size(), [&](Tape& t, NodeId v) {
                    return sparse::transpose(t, plan, v);
                }, seed + 10));
                note(r, "acoustic_step", dot_product_test(c, 2 * part.owned(), [&](Tape& t, NodeId x) {
                    const auto up = collectives::pad_frame(t, graph::ops::slice(t, x, 0, part.owned()), hs1);
                    const auto uc = collectives::pad_frame(t, graph::ops::slice(t, x, part.owned(), part.owned()), hs1);
                    return pde::acoustic_step(t, up, collectives::halo_exchange(t, uc, hs1), t.constant(c2h), part, model);
                }, seed + 11));
            }
            return 0;
        });

        for (const auto& op : order) {
            CheckResult cr;
            cr.name = op;
            cr.layout = layout(px, py);
            cr.error = worst[op];
            cr.tolerance = options.tolerance;
            cr.passed = cr.error < options.tolerance;
            cr.detail = std::to_string(options.trials) + " trials";
            results.push_back(std::move(cr));
        }
    }
    return results;
}

CheckResult cubic_check(int ranks) {
    CheckResult res;
    res.name = "cubic_demo";
    res.layout = std::to_string(ranks) + " ranks";
    res.tolerance = 1e-12;
    double fd_worst = 0.0;
    std::ostringstream detail;
    comm::spawn_ranks(ranks, [&](comm::Communicator& c) {
        for (double theta : {1.0, 2.0}) {
            Tape t(c);
            const auto th0 = t.parameter({c.rank() == 0 ? theta : 0.0});
            const auto th = collectives::mpi_bcast(t, th0);
            t.set_loss(collectives::mpi_sum(t, graph::ops::powi(t, th, c.rank())));
            const double l = t.evaluate_with_gradient();
            const double g = c.rank() == 0 ? t.adjoint(th0)[0] : 0.0;
            const auto fd = central_differences(t, th0, {c.rank() == 0 ? theta : 0.0}, 1, 1e-6, 1);
            if (c.rank() != 0) continue;
            double l_ref = 0.0, g_ref = 0.0;
            for (int r = 0; r < ranks; ++r) {
                l_ref += std::pow(theta, r);
                if (r > 0) g_ref += r * std::pow(theta, r - 1);
            }
            res.error = std::max({res.error, std::abs(l - l_ref), std::abs(g - g_ref)});
            fd_worst = std::max(fd_worst, fd.max_error);
            detail << "L(" << theta << ")=" << l << " g=" << g << "; ";
        }
        return 0;
    });
    detail << "fd rel err " << fd_worst;
    res.detail = detail.str();
    res.passed = res.error <= res.tolerance && fd_worst < 1e-6;
    return res;
}

CheckResult poisson_fd_check(const FdOptions& o) {
    CheckResult res;
    res.name = "poisson_gradient";
    res.layout = layout(o.px, o.py);
    res.tolerance = o.tolerance;
    const auto layers = nn::default_layers();
    comm::spawn_ranks(o.px * o.py, [&](comm::Communicator& c) {
        const auto part = pde::partition_grid(o.nx, o.ny, o.px, o.py, c.rank());
        sparse::SolveOptions so;
        so.tol = o.solve_tol;
        const auto prob = pde::make_poisson_problem(c, part, 0.8, o.seed, pde::SamplingMode::kGlobal, so, layers);
        const auto theta0 = nn::xavier_init(layers, o.seed).theta;
        Tape t(c);
        const auto g = pde::build_poisson_graph(t, prob, theta0);
        const auto base = c.rank() == 0 ? theta0 : std::vector<double>(theta0.size(), 0.0);
        const auto fd = central_differences(t, g.theta, base, o.components, o.eps, o.seed + 1);
        if (c.rank() == 0) {
            res.error = fd.max_error;
            res.detail = std::to_string(o.components) + " components, grid " + std::to_string(o.nx) + "x" +
                         std::to_string(o.ny) + ", worst theta[" + std::to_string(fd.worst) + "]";
        }
        return 0;
    });
    res.passed = res.error < res.tolerance;
    return res;
}

CheckResult wave_fd_check(const FdOptions& o) {
    CheckResult res;
    res.name = "wave_gradient";
    res.layout = layout(o.px, o.py);
    res.tolerance = o.tolerance;
    const auto layers = nn::default_layers();
    comm::spawn_ranks(o.px * o.py, [&](comm::Communicator& c) {
        const auto part = pde::partition_grid(o.nx, o.ny, o.px, o.py, c.rank());
        const auto model = pde::make_acoustic_model(part, 2.0, o.steps);
        std::vector<double> ct(part.owned());
        for (std::size_t j = 0; j < part.nyl; ++j)
            for (std::size_t i = 0; i < part.nxl; ++i) ct[part.local_index(i, j)] = pde::c_true(part.x(i), part.y(j));
        const auto observed = pde::simulate(c, part, model, ct).traces;
        const auto theta0 = nn::xavier_init(layers, o.seed).theta;
        Tape t(c);
        const auto g = pde::build_wave_graph(t, part, model, layers, theta0, observed);
        const auto base = c.rank() == 0 ? theta0 : std::vector<double>(theta0.size(), 0.0);
        const auto fd = central_differences(t, g.theta, base, o.components, o.eps, o.seed + 2);
        if (c.rank() == 0) {
            res.error = fd.max_error;
            res.detail = std::to_string(o.components) + " components, " + std::to_string(o.steps) +
                         " steps, worst theta[" + std::to_string(fd.worst) + "]";
        }
        return 0;
    });
    res.passed = res.error < res.tolerance;
    return res;
}

CheckResult mlp_fd_check(int samples, std::uint64_t seed) {
    CheckResult res;
    res.name = "mlp_gradient";
    res.layout = "serial";
    res.tolerance = 1e-7;
    const auto layers = nn::default_layers();
    auto theta = nn::xavier_init(layers, seed).theta;
    const auto jitter = random_values(theta.size(), seed + 1);
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] += 0.1 * jitter[i];
    auto coords = random_values(20, seed + 2);
    for (auto& x : coords) x = 0.5 + 0.5 * x;
    const auto w = random_values(10, seed + 3);

    Tape t;
    const auto th = t.parameter(theta);
    const auto k = nn::mlp_forward(t, layers, th, coords);
    t.set_loss(graph::ops::dot(t, k, t.constant(w)));
    t.evaluate_with_gradient();
    const auto grad = t.adjoint(th);
    // Fourth-order central stencil: rounding at eps = 1e-6 alone would
    // exceed 1e-7 relative on the small components.
    const double eps = 1e-3;
    auto at = [&](std::size_t i, double d) {
        auto x = theta;
        x[i] += d;
        t.set_parameter(th, x);
        return t.forward();
    };
    for (auto i : pick_components(theta.size(), samples, seed + 4)) {
        const double fd = (8.0 * (at(i, eps) - at(i, -eps)) - (at(i, 2 * eps) - at(i, -2 * eps))) / (12 * eps);
        res.error = std::max(res.error, fd_rel_error(fd, grad[i]));
    }
    res.detail = std::to_string(samples) + " components";
    res.passed = res.error < res.tolerance;
    return res;
}

}  // namespace distad::checks
