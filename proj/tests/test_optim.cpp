#include <doctest.h>

#include <cmath>
#include <sstream>

#include "distad/collectives.hpp"
#include "distad/nn.hpp"
#include "distad/optim.hpp"
#include "distad/pde.hpp"
#include "support.hpp"

using namespace distad;
using namespace distad::optim;

namespace {

Objective quadratic(std::vector<double> diag) {
    return [diag](std::span<const double> x, std::vector<double>* g) {
        double f = 0.0;
        if (g) g->assign(x.size(), 0.0);
        for (std::size_t i = 0; i < x.size(); ++i) {
            f += 0.5 * diag[i] * x[i] * x[i];
            if (g) (*g)[i] = diag[i] * x[i];
        }
        return f;
    };
}

// L(theta) = sum_r theta^r with theta owned by root.
graph::NodeId cubic_tape(graph::Tape& t, double theta0) {
    auto& c = t.comm();
    const auto th = t.parameter({c.rank() == 0 ? theta0 : 0.0});
    const auto b = collectives::mpi_bcast(t, th);
    t.set_loss(collectives::mpi_sum(t, graph::ops::powi(t, b, c.rank())));
    return th;
}

}  // namespace

TEST_CASE("identity quadratic converges in at most two iterations") {
    LbfgsState st;
    std::vector<double> x{1.0, 1.0}, g;
    const auto obj = quadratic({1.0, 1.0});
    double f = obj(x, &g);
    const auto x0 = x;
    const auto r = lbfgs_step(st, x, f, g, obj);
    CHECK(r.accepted);
    // Step 1 along -g lands on the minimiser.
    CHECK(x[0] == doctest::Approx(x0[0] - 1.0 * x0[0]));
    CHECK(f == 0.0);
    const auto res = minimize(obj, {1.0, 1.0});
    CHECK(res.history.size() <= 3);
    CHECK(res.history.back().grad_norm < 1e-8);
}

TEST_CASE("ill-conditioned quadratic") {
    const auto res = minimize(quadratic({1.0, 100.0}), {1.0, 1.0}, {10, 50, 1e-8});
    CHECK(res.history.back().grad_norm < 1e-8);
    CHECK(res.history.size() <= 51);
    for (std::size_t k = 1; k < res.history.size(); ++k) CHECK(res.history[k].loss <= res.history[k - 1].loss);
}

TEST_CASE("empty history is gradient descent with line search") {
    LbfgsOptions opt;
    opt.history = 0;
    opt.max_iterations = 1;
    const auto obj = quadratic({1.0, 100.0});
    const auto res = minimize(obj, {1.0, 1.0}, opt);
    REQUIRE(res.history.size() == 2);
    // Backtracking from 1 halves until Armijo holds; the step is along -g.
    const double a = res.history[1].step;
    CHECK(res.x[0] == doctest::Approx(1.0 - a * 1.0));
    CHECK(res.x[1] == doctest::Approx(1.0 - a * 100.0));
}

TEST_CASE("line search failure keeps the iterate") {
    LbfgsState st;
    st.options.max_trials = 3;
    std::vector<double> x{1.0}, g{-1.0};  // wrong-sign gradient: no descent along -g
    double f = 0.5;
    const auto r = lbfgs_step(st, x, f, g, quadratic({1.0}));
    CHECK_FALSE(r.accepted);
    CHECK(r.diagnostic.find("line search failed") != std::string::npos);
    CHECK(x == std::vector<double>{1.0});
    std::vector<double> bad{NAN};
    CHECK_THROWS_AS(lbfgs_step(st, x, f, bad, quadratic({1.0})), InvalidArgument);
}

TEST_CASE("history CSV format") {
    std::ostringstream os;
    write_history_csv(os, {{0, 4.0, 6.0, 0.0}, {1, 0.1, 0.25, 0.5}});
    CHECK(os.str() == "iteration,loss,grad_norm,step\n0,4,6,0\n1,0.10000000000000001,0.25,0.5\n");
}

TEST_CASE("distributed cubic: root sees g = 6 and the loss decreases") {
    std::vector<IterationRecord> seen;
    testsupport::run(4, [&](comm::Communicator& c) {
        graph::Tape t(c);
        const auto th = cubic_tape(t, 1.0);
        LbfgsOptions opt;
        opt.max_iterations = 4;
        const auto res = run_distributed(t, th, {1.0}, opt);
        if (c.rank() == 0) seen = res.history;
    });
    REQUIRE(seen.size() == 5);
    CHECK(seen[0].loss == 4.0);
    CHECK(seen[0].grad_norm == 6.0);
    for (std::size_t k = 1; k < seen.size(); ++k) CHECK(seen[k].loss < seen[k - 1].loss);
}

TEST_CASE("one rank reproduces the serial trajectory bit for bit") {
    const auto theta0 = nn::xavier_init(nn::default_layers(), 3).theta;
    LbfgsOptions opt;
    opt.max_iterations = 5;
    MinimizeResult dist, serial;
    testsupport::run(1, [&](comm::Communicator& c) {
        const auto p = pde::partition_grid(8, 8, 1, 1, 0);
        const auto prob = pde::make_poisson_problem(c, p, 0.8, 1, pde::SamplingMode::kGlobal, {1e-12, 0},
                                                    nn::default_layers());
        {
            graph::Tape t(c);
            const auto g = pde::build_poisson_graph(t, prob, theta0);
            dist = run_distributed(t, g.theta, theta0, opt);
        }
        graph::Tape t(c);
        const auto g = pde::build_poisson_graph(t, prob, theta0);
        serial = minimize(
            [&](std::span<const double> x, std::vector<double>* grad) {
                t.set_parameter(g.theta, std::vector<double>(x.begin(), x.end()));
                if (!grad) return t.forward();
                const double l = t.evaluate_with_gradient();
                *grad = t.adjoint(g.theta);
                return l;
            },
            theta0, opt);
    });
    REQUIRE(dist.history.size() == serial.history.size());
    for (std::size_t k = 0; k < dist.history.size(); ++k) {
        CHECK(dist.history[k].loss == serial.history[k].loss);
        CHECK(dist.history[k].grad_norm == serial.history[k].grad_norm);
    }
    CHECK(dist.x == serial.x);
}

TEST_CASE("an evaluation failure stops every rank") {
    CHECK_THROWS_AS(testsupport::run(4,
                                     [](comm::Communicator& c) {
                                         const auto p = pde::partition_grid(8, 8, 2, 2, c.rank());
                                         auto prob = pde::make_poisson_problem(
                                             c, p, 0.8, 1, pde::SamplingMode::kGlobal, {1e-12, 0}, nn::default_layers());
                                         prob.solve.max_iterations = 2;  // CG cannot converge
                                         const auto theta0 = nn::xavier_init(nn::default_layers(), 1).theta;
                                         graph::Tape t(c);
                                         const auto g = pde::build_poisson_graph(t, prob, theta0);
                                         run_distributed(t, g.theta, theta0);
                                     }),
                    SolverError);
}

TEST_CASE("invalid options are rejected") {
    LbfgsOptions opt;
    opt.history = -1;
    CHECK_THROWS_AS(minimize(quadratic({1.0}), {1.0}, opt), InvalidArgument);
}
