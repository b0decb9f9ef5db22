#include <doctest.h>

#include <cmath>
#include <map>
#include <mutex>
#include <set>

#include "distad/checks.hpp"
#include "distad/collectives.hpp"
#include "distad/nn.hpp"
#include "distad/pde.hpp"
#include "support.hpp"

using namespace distad;
using namespace distad::pde;

namespace {

// Depth-1 frame of an owned field with filled ghosts.
std::vector<double> halo_frame(comm::Communicator& c, const GridPartition& p, const std::vector<double>& owned) {
    const auto hs = p.halo(1);
    std::vector<double> frame(hs.frame_size(), 0.0), filled(hs.frame_size());
    for (std::size_t j = 0; j < p.nyl; ++j)
        for (std::size_t i = 0; i < p.nxl; ++i)
            frame[hs.index(static_cast<std::ptrdiff_t>(i), static_cast<std::ptrdiff_t>(j))] = owned[p.local_index(i, j)];
    collectives::halo_fill(c, hs, frame, filled, 1 << 27);
    return filled;
}

std::vector<double> owned_of(const GridPartition& p, const std::vector<double>& global) {
    std::vector<double> v(p.owned());
    for (std::size_t j = 0; j < p.nyl; ++j)
        for (std::size_t i = 0; i < p.nxl; ++i) v[p.local_index(i, j)] = global[(p.y0 + j) * p.nx + p.x0 + i];
    return v;
}

// Assembled operator keyed by global grid nodes ((gx, gy), (gx, gy)).
using NodeMatrix = std::map<std::pair<std::pair<std::size_t, std::size_t>, std::pair<std::size_t, std::size_t>>, double>;

NodeMatrix assemble_by_node(comm::Communicator& c, const GridPartition& p, const std::vector<double>& kappa_global) {
    const auto pattern = poisson_pattern(p);
    const auto values = assemble_poisson_values(p, *pattern, halo_frame(c, p, owned_of(p, kappa_global)));
    const auto global = sparse::assemble_global(c, sparse::DistCSR{pattern, values});
    // DOF -> node
    std::map<std::int64_t, std::pair<std::size_t, std::size_t>> node;
    for (std::size_t gy = 0; gy < p.ny; ++gy)
        for (std::size_t gx = 0; gx < p.nx; ++gx) node[p.dof_of(gx, gy)] = {gx, gy};
    NodeMatrix m;
    for (const auto& e : global.entries) m[{node.at(e.row), node.at(e.col)}] = e.value;
    return m;
}

}  // namespace

TEST_CASE("grid partition examples") {
    const auto a = partition_grid(4, 4, 2, 2, 3);
    CHECK(a.nxl == 2);
    CHECK(a.nyl == 2);
    CHECK(a.x0 == 2);
    CHECK(a.y0 == 2);
    const auto b = partition_grid(6, 4, 3, 1, 1);
    CHECK(b.nxl == 2);
    CHECK(b.nyl == 4);
    CHECK(b.x0 == 2);
    CHECK_THROWS_AS(partition_grid(5, 5, 2, 2, 0), InvalidArgument);
    CHECK(partition_grid(4, 4, 1, 1, 0).h == doctest::Approx(0.2));
    // Neighbour table of the centre of a 3x3 layout.
    const auto hs = partition_grid(9, 9, 3, 3, 4).halo(1);
    CHECK(hs.neighbors == std::array<int, 4>{3, 5, 1, 7});
    CHECK(default_rank_grid(4) == std::array<int, 2>{2, 2});
    CHECK(default_rank_grid(6) == std::array<int, 2>{3, 2});
    CHECK(default_rank_grid(7) == std::array<int, 2>{7, 1});
}

TEST_CASE("stencil of a constant coefficient") {
    testsupport::run(1, [](comm::Communicator& c) {
        const auto p = partition_grid(3, 3, 1, 1, 0, 1.0);
        for (double kappa : {1.0, 2.0}) {
            const auto m = assemble_by_node(c, p, std::vector<double>(9, kappa));
            const std::pair<std::size_t, std::size_t> mid{1, 1};
            CHECK(m.at({mid, mid}) == 4.0 * kappa);
            CHECK(m.at({mid, {0, 1}}) == -kappa);
            CHECK(m.at({mid, {2, 1}}) == -kappa);
            CHECK(m.at({mid, {1, 0}}) == -kappa);
            CHECK(m.at({mid, {1, 2}}) == -kappa);
            // Wall faces keep the corner diagonal at 4 kappa.
            CHECK(m.at({{0, 0}, {0, 0}}) == 4.0 * kappa);
        }
    });
}

TEST_CASE("nonpositive kappa is rejected") {
    testsupport::run(1, [](comm::Communicator& c) {
        const auto p = partition_grid(3, 3, 1, 1, 0);
        std::vector<double> k(9, 1.0);
        k[4] = 0.0;
        CHECK_THROWS_AS(assemble_by_node(c, p, k), InvalidArgument);
    });
}

TEST_CASE("parallel assembly equals serial assembly exactly") {
    const auto kappa = testsupport::random_vector(64, 3);
    std::vector<double> k(64);
    for (std::size_t i = 0; i < 64; ++i) k[i] = 2.0 + kappa[i];
    NodeMatrix serial;
    testsupport::run(1, [&](comm::Communicator& c) { serial = assemble_by_node(c, partition_grid(8, 8, 1, 1, 0), k); });
    for (auto [px, py] : {std::pair{2, 2}, std::pair{1, 4}, std::pair{4, 2}}) {
        testsupport::run(px * py, [&, px = px, py = py](comm::Communicator& c) {
            const auto m = assemble_by_node(c, partition_grid(8, 8, px, py, c.rank()), k);
            CHECK(m == serial);
        });
    }
}

TEST_CASE("assembled operator is symmetric positive definite") {
    testsupport::run(4, [](comm::Communicator& c) {
        const auto p = partition_grid(12, 12, 2, 2, c.rank());
        std::vector<double> k(144);
        for (std::size_t i = 0; i < 144; ++i) k[i] = 1.0 + 0.5 * std::sin(0.3 * static_cast<double>(i));
        const auto pattern = poisson_pattern(p);
        const sparse::DistCSR a{pattern, assemble_poisson_values(p, *pattern, halo_frame(c, p, owned_of(p, k)))};
        for (std::uint64_t s = 0; s < 5; ++s) {
            const auto x = owned_of(p, testsupport::random_vector(144, 10 + s));
            const auto y = owned_of(p, testsupport::random_vector(144, 20 + s));
            const sparse::DistVector xv{pattern->rows, c.rank(), x}, yv{pattern->rows, c.rank(), y};
            const auto ax = sparse::dist_spmv(c, a, xv).values;
            const auto ay = sparse::dist_spmv(c, a, yv).values;
            const double axy = comm::allreduce_sum(c, testsupport::dot(ax, y));
            const double xay = comm::allreduce_sum(c, testsupport::dot(x, ay));
            CHECK(std::abs(axy - xay) <= 1e-13 * std::max(std::abs(axy), std::abs(xay)));
            CHECK(comm::allreduce_sum(c, testsupport::dot(ax, x)) > 0.0);
        }
    });
}

TEST_CASE("coefficient gradient agrees with central differences") {
    testsupport::run(4, [](comm::Communicator& c) {
        const auto p = partition_grid(8, 8, 2, 2, c.rank());
        auto prob = make_poisson_problem(c, p, 0.8, 5, SamplingMode::kGlobal, {1e-12, 0}, nn::default_layers());
        // Observations of kappa_true; evaluate away from it so the gradient is O(1).
        std::vector<double> k(p.owned());
        for (std::size_t j = 0; j < p.nyl; ++j)
            for (std::size_t i = 0; i < p.nxl; ++i) k[p.local_index(i, j)] = 1.0 + p.x(i) * p.y(j);
        graph::Tape t(c);
        const auto g = build_poisson_graph_from_kappa(t, prob, k);
        t.evaluate_with_gradient();
        const auto grad = t.adjoint(g.theta);
        const double eps = 1e-6;
        for (int owner = 0; owner < 4; ++owner) {
            for (std::size_t li : {std::size_t{0}, std::size_t{5}, std::size_t{15}}) {
                auto kp = k, km = k;
                if (c.rank() == owner) {
                    kp[li] += eps;
                    km[li] -= eps;
                }
                t.set_parameter(g.theta, kp);
                const double lp = comm::allreduce_sum(c, t.forward());
                t.set_parameter(g.theta, km);
                const double lm = comm::allreduce_sum(c, t.forward());
                const double an = comm::allreduce_sum(c, c.rank() == owner ? grad[li] : 0.0);
                CHECK(testsupport::rel_err((lp - lm) / (2 * eps), an) < 1e-5);
            }
        }
    });
}

TEST_CASE("Poisson solution with unit coefficient has the square's rotation symmetry") {
    for (auto [px, py] : {std::pair{1, 1}, std::pair{2, 2}}) {
        testsupport::run(px * py, [px = px, py = py](comm::Communicator& c) {
            const std::size_t n = 12;
            const auto p = partition_grid(n, n, px, py, c.rank());
            const auto u = gather_field(c, p, solve_poisson(c, p, std::vector<double>(p.owned(), 1.0), {1e-13, 0}));
            double umax = 0.0, err = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                for (std::size_t i = 0; i < n; ++i) {
                    umax = std::max(umax, std::abs(u[j * n + i]));
                    err = std::max(err, std::abs(u[j * n + i] - u[i * n + (n - 1 - j)]));
                }
            }
            CHECK(err <= 1e-10 * umax);
        });
    }
}

TEST_CASE("observation loss examples") {
    testsupport::run(1, [](comm::Communicator& c) {
        const auto p = partition_grid(1, 1, 1, 1, 0);
        ObservationSet obs{{0}, {1.0}};
        graph::Tape t(c);
        const auto u = t.parameter({3.0});
        t.set_loss(observation_loss(t, u, obs, p));
        CHECK(t.evaluate_with_gradient() == 4.0);
        CHECK(t.adjoint(u)[0] == 4.0);
        t.set_parameter(u, {1.0});
        CHECK(t.forward() == 0.0);

        ObservationSet foreign{{1}, {0.0}};
        graph::Tape t2(c);
        const auto u2 = t2.parameter({0.0});
        CHECK_THROWS_AS(observation_loss(t2, u2, foreign, p), InvalidArgument);
    });
}

TEST_CASE("observation loss is partition independent") {
    const std::size_t n = 8;
    std::vector<double> integer_u(n * n), random_u = testsupport::random_vector(n * n, 4);
    for (std::size_t k = 0; k < n * n; ++k) integer_u[k] = static_cast<double>(k % 7);
    const auto obs_global = testsupport::random_vector(n * n, 5);
    for (const auto* field : {&integer_u, &random_u}) {
        std::vector<double> losses;
        std::mutex mu;
        for (auto [px, py] : {std::pair{1, 1}, std::pair{2, 2}, std::pair{4, 1}}) {
            testsupport::run(px * py, [&, px = px, py = py](comm::Communicator& c) {
                const auto p = partition_grid(n, n, px, py, c.rank());
                ObservationSet obs;
                obs.dofs = sample_dofs(p, 0.8, 9, SamplingMode::kGlobal);
                const auto base = p.global_dof(p.rank, 0, 0);
                // Observed values are integers when the field is, so the sum is exact.
                const auto u = owned_of(p, *field);
                for (auto d : obs.dofs) {
                    const auto l = static_cast<std::size_t>(d - base);
                    obs.values.push_back(field == &integer_u ? u[l] + 1.0 : obs_global[l]);
                }
                graph::Tape t(c);
                t.set_loss(observation_loss(t, t.parameter(u), obs, p));
                const double l = t.forward();
                if (c.rank() == 0) {
                    std::lock_guard lock(mu);
                    losses.push_back(l);
                }
            });
        }
        if (field == &integer_u) {
            CHECK(losses[0] == 51.0);
            CHECK(losses[1] == losses[0]);
            CHECK(losses[2] == losses[0]);
        }
    }
}

TEST_CASE("observation sampling") {
    const auto p = partition_grid(10, 10, 1, 1, 0);
    for (auto mode : {SamplingMode::kPerRank, SamplingMode::kGlobal}) {
        const auto a = sample_dofs(p, 0.8, 1, mode);
        CHECK(a.size() == 80);
        CHECK(std::set<std::int64_t>(a.begin(), a.end()).size() == 80);
        CHECK(sample_dofs(p, 0.8, 1, mode) == a);
        CHECK(sample_dofs(p, 0.8, 2, mode) != a);
        CHECK(sample_dofs(p, 1.0, 1, mode).size() == 100);
        CHECK_THROWS_AS(sample_dofs(p, 0.0, 1, mode), InvalidArgument);
        CHECK_THROWS_AS(sample_dofs(p, 1.5, 1, mode), InvalidArgument);
    }
    // Per patch: 80 of each rank's 100 owned nodes.
    for (int r = 0; r < 4; ++r) {
        const auto q = partition_grid(20, 20, 2, 2, r);
        const auto d = sample_dofs(q, 0.8, 1, SamplingMode::kPerRank);
        CHECK(d.size() == 80);
        for (auto x : d) {
            CHECK(x >= q.global_dof(r, 0, 0));
            CHECK(x < q.global_dof(r, 0, 0) + 100);
        }
    }
    // Global mode observes the same grid nodes under any partition.
    auto nodes = [](int px, int py) {
        std::set<std::pair<std::size_t, std::size_t>> s;
        for (int r = 0; r < px * py; ++r) {
            const auto q = partition_grid(12, 12, px, py, r);
            for (auto d : sample_dofs(q, 0.8, 3, SamplingMode::kGlobal)) {
                const auto l = static_cast<std::size_t>(d - q.global_dof(r, 0, 0));
                s.insert({q.x0 + l % q.nxl, q.y0 + l / q.nxl});
            }
        }
        return s;
    };
    CHECK(nodes(1, 1).size() == 115);
    CHECK(nodes(2, 2) == nodes(1, 1));
    CHECK(nodes(3, 4) == nodes(1, 1));
}

TEST_CASE("acoustic step without velocity drifts freely") {
    testsupport::run(1, [](comm::Communicator& c) {
        const auto p = partition_grid(4, 4, 1, 1, 0);
        const auto model = make_acoustic_model(p, 1.0, 1);
        const auto hs = p.halo(1);
        const auto a = testsupport::random_vector(hs.frame_size(), 1);
        const auto b = testsupport::random_vector(hs.frame_size(), 2);
        graph::Tape t(c);
        const auto next = acoustic_step(t, t.constant(a), t.constant(b), t.constant(std::vector<double>(hs.frame_size(), 0.0)), p, model);
        t.set_loss(graph::ops::sum(t, next));
        t.forward();
        for (std::size_t j = 0; j < 4; ++j)
            for (std::size_t i = 0; i < 4; ++i) {
                const auto k = hs.index(static_cast<std::ptrdiff_t>(i), static_cast<std::ptrdiff_t>(j));
                CHECK(t.value(next)[k] == 2.0 * b[k] - a[k]);
            }
    });
}

TEST_CASE("constant field stays constant away from the walls") {
    testsupport::run(1, [](comm::Communicator& c) {
        const auto p = partition_grid(6, 6, 1, 1, 0);
        const auto model = make_acoustic_model(p, 1.0, 1);
        const auto hs = p.halo(1);
        std::vector<double> u(hs.frame_size(), 0.0);
        for (std::size_t j = 0; j < 6; ++j)
            for (std::size_t i = 0; i < 6; ++i) u[hs.index(static_cast<std::ptrdiff_t>(i), static_cast<std::ptrdiff_t>(j))] = 0.7;
        graph::Tape t(c);
        const auto next = acoustic_step(t, t.constant(u), t.constant(u), t.constant(std::vector<double>(hs.frame_size(), 1.0)), p, model);
        t.set_loss(graph::ops::sum(t, next));
        t.forward();
        for (std::ptrdiff_t j = 1; j < 5; ++j)
            for (std::ptrdiff_t i = 1; i < 5; ++i) CHECK(t.value(next)[hs.index(i, j)] == doctest::Approx(0.7).epsilon(1e-15));
    });
}

TEST_CASE("CFL violations are rejected") {
    const auto p = partition_grid(8, 8, 1, 1, 0);
    CHECK_THROWS_AS(make_acoustic_model(p, 1.0, 10, 0.8), InvalidArgument);
    CHECK_THROWS_AS(make_acoustic_model(p, 0.0, 10), InvalidArgument);
    CHECK_THROWS_AS(testsupport::run(2,
                                     [](comm::Communicator& c) {
                                         const auto q = partition_grid(8, 8, 2, 1, c.rank());
                                         const auto m = make_acoustic_model(q, 1.0, 3);
                                         // Only rank 1 exceeds c_max; both ranks must fail together.
                                         std::vector<double> vel(q.owned(), c.rank() == 1 ? 1.5 : 0.5);
                                         graph::Tape t(c);
                                         build_wave_graph_from_c(t, q, m, vel, {});
                                         t.forward();
                                     }),
                    InvalidArgument);
}

TEST_CASE("leapfrog conserves the discrete energy") {
    testsupport::run(1, [](comm::Communicator& c) {
        const std::size_t n = 40;
        const auto p = partition_grid(n, n, 1, 1, 0);
        const auto model = make_acoustic_model(p, 1.0, 100);
        const auto hs = p.halo(1);
        std::vector<double> bump(hs.frame_size(), 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t i = 0; i < n; ++i) {
                const double dx = p.x(i) - 0.5, dy = p.y(j) - 0.5;
                const auto k = hs.index(static_cast<std::ptrdiff_t>(i), static_cast<std::ptrdiff_t>(j));
                bump[k] = std::exp(-(dx * dx + dy * dy) / 0.005);
            }
        }
        const auto c2h = halo_frame(c, p, std::vector<double>(n * n, 1.0));
        graph::Tape t(c);
        const auto c2n = t.constant(c2h);
        std::vector<graph::NodeId> frames{t.constant(bump), t.constant(bump)};
        for (int s = 0; s < 100; ++s) {
            const auto curr = frames.back();
            frames.push_back(acoustic_step(t, frames[frames.size() - 2], curr, c2n, p, model));
        }
        t.set_loss(graph::ops::sum(t, frames.back()));
        t.forward();
        const double dt2 = model.dt * model.dt;
        auto energy = [&](std::size_t s) {
            const auto& a = t.value(frames[s]);
            const auto& b = t.value(frames[s + 1]);
            const auto ka = apply_wave_operator(p, c2h, a);
            double e = 0.0;
            for (std::size_t j = 0; j < n; ++j)
                for (std::size_t i = 0; i < n; ++i) {
                    const auto k = hs.index(static_cast<std::ptrdiff_t>(i), static_cast<std::ptrdiff_t>(j));
                    e += (b[k] - a[k]) * (b[k] - a[k]) / dt2 + b[k] * ka[p.local_index(i, j)];
                }
            return e;
        };
        const double e0 = energy(0);
        double drift = 0.0;
        for (std::size_t s = 1; s < 100; ++s) drift = std::max(drift, std::abs(energy(s) - e0) / e0);
        CHECK(e0 > 0.0);
        CHECK(drift < 1e-6);
    });
}

TEST_CASE("wave traces: zero source and exact velocity") {
    testsupport::run(4, [](comm::Communicator& c) {
        const auto p = partition_grid(16, 16, 2, 2, c.rank());
        const auto model = make_acoustic_model(p, 2.0, 30);
        std::vector<double> ct(p.owned());
        for (std::size_t j = 0; j < p.nyl; ++j)
            for (std::size_t i = 0; i < p.nxl; ++i) ct[p.local_index(i, j)] = c_true(p.x(i), p.y(j));
        const auto run = simulate(c, p, model, ct);
        const auto quiet = simulate(c, p, model, ct, false);
        double energy = 0.0, quiet_energy = 0.0, obs_sq = 0.0;
        for (std::size_t s = 0; s < run.traces.size(); ++s)
            for (std::size_t k = 0; k < run.traces[s].size(); ++k) {
                energy += run.traces[s][k] * run.traces[s][k];
                quiet_energy += std::abs(quiet.traces[s][k]);
            }
        obs_sq = comm::allreduce_sum(c, energy);
        CHECK(comm::allreduce_sum(c, quiet_energy) == 0.0);
        CHECK(obs_sq > 0.0);

        graph::Tape t(c);
        const auto g = build_wave_graph_from_c(t, p, model, ct, run.traces);
        CHECK(comm::allreduce_sum(c, t.forward()) == 0.0);

        auto silent = model;
        silent.amplitude = 0.0;
        graph::Tape t2(c);
        build_wave_graph_from_c(t2, p, silent, ct, run.traces);
        CHECK(comm::allreduce_sum(c, t2.forward()) == doctest::Approx(obs_sq).epsilon(1e-14));
        (void)g;
    });
}

TEST_CASE("wave gradient agrees with central differences") {
    checks::FdOptions opt;
    opt.nx = opt.ny = 20;
    opt.steps = 50;
    opt.components = 5;
    opt.tolerance = 1e-4;
    const auto r = checks::wave_fd_check(opt);
    INFO(r.detail);
    CHECK(r.passed);
}

TEST_CASE("serial and parallel wavefields agree") {
    const std::size_t n = 20;
    std::vector<std::vector<double>> reference;
    for (auto [px, py] : {std::pair{1, 1}, std::pair{2, 2}, std::pair{1, 4}}) {
        testsupport::run(px * py, [&, px = px, py = py](comm::Communicator& c) {
            const auto p = partition_grid(n, n, px, py, c.rank());
            const auto model = make_acoustic_model(p, 2.0, 60);
            std::vector<double> ct(p.owned());
            for (std::size_t j = 0; j < p.nyl; ++j)
                for (std::size_t i = 0; i < p.nxl; ++i) ct[p.local_index(i, j)] = c_true(p.x(i), p.y(j));
            const auto run = simulate(c, p, model, ct);
            std::vector<std::vector<double>> fields;
            for (const auto& f : run.fields) fields.push_back(gather_field(c, p, f));
            if (c.rank() != 0) return;
            if (reference.empty()) {
                reference = fields;
                return;
            }
            double scale = 0.0, err = 0.0;
            for (std::size_t s = 0; s < fields.size(); ++s)
                for (std::size_t k = 0; k < fields[s].size(); ++k) {
                    scale = std::max(scale, std::abs(reference[s][k]));
                    err = std::max(err, std::abs(fields[s][k] - reference[s][k]));
                }
            CHECK(scale > 0.0);
            CHECK(err <= 1e-10 * scale);
        });
    }
}

TEST_CASE("serial and parallel network gradients agree") {
    const std::size_t n = 16;
    const auto theta0 = nn::xavier_init(nn::default_layers(), 11).theta;
    struct Out {
        double loss;
        std::vector<double> grad;
    };
    for (bool wave : {false, true}) {
        std::vector<Out> outs;
        for (auto [px, py] : {std::pair{1, 1}, std::pair{2, 2}, std::pair{1, 4}}) {
            testsupport::run(px * py, [&, px = px, py = py](comm::Communicator& c) {
                const auto p = partition_grid(n, n, px, py, c.rank());
                graph::Tape t(c);
                graph::NodeId theta;
                if (wave) {
                    const auto model = make_acoustic_model(p, 2.0, 30);
                    std::vector<double> ct(p.owned());
                    for (std::size_t j = 0; j < p.nyl; ++j)
                        for (std::size_t i = 0; i < p.nxl; ++i) ct[p.local_index(i, j)] = c_true(p.x(i), p.y(j));
                    const auto obs = simulate(c, p, model, ct).traces;
                    theta = build_wave_graph(t, p, model, nn::default_layers(), theta0, obs).theta;
                } else {
                    const auto prob = make_poisson_problem(c, p, 0.8, 42, SamplingMode::kGlobal, {1e-12, 0},
                                                           nn::default_layers());
                    theta = build_poisson_graph(t, prob, theta0).theta;
                }
                const double l = t.evaluate_with_gradient();
                if (c.rank() == 0) outs.push_back({l, t.adjoint(theta)});
            });
        }
        REQUIRE(outs.size() == 3);
        double gscale = 0.0;
        for (double g : outs[0].grad) gscale = std::max(gscale, std::abs(g));
        for (std::size_t k = 1; k < 3; ++k) {
            CHECK(testsupport::rel_err(outs[k].loss, outs[0].loss) < 1e-8);
            double err = 0.0;
            for (std::size_t i = 0; i < outs[0].grad.size(); ++i)
                err = std::max(err, std::abs(outs[k].grad[i] - outs[0].grad[i]));
            CHECK(err <= 1e-8 * gscale);
        }
    }
}
