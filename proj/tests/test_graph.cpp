#include <doctest.h>

#include <algorithm>
#include <sstream>

#include "distad/collectives.hpp"
#include "distad/graph.hpp"
#include "support.hpp"

using namespace distad;
using graph::NodeId;
using graph::Tape;
namespace ops = graph::ops;

TEST_CASE("record assigns dense ids and rejects unknown inputs") {
    Tape t;
    const auto c = t.constant({2.0});
    CHECK(c == 0);
    const auto s = ops::add(t, c, c);
    CHECK(s == 1);
    CHECK_THROWS_AS(ops::add(t, 0, 5), InvalidArgument);
    t.set_loss(s);
    CHECK(t.forward() == 4.0);
}

TEST_CASE("backward requires forward") {
    Tape t;
    const auto x = t.parameter({3.0});
    t.set_loss(ops::square(t, x));
    CHECK_THROWS_AS(t.backward(), InvalidArgument);
    CHECK(t.evaluate_with_gradient() == 9.0);
    CHECK(t.adjoint(x)[0] == 6.0);
}

TEST_CASE("loss must be scalar") {
    Tape t;
    const auto x = t.parameter({1.0, 2.0});
    t.set_loss(x);
    CHECK_THROWS_AS(t.forward(), InvalidArgument);
}

namespace {

// theta0 on root -> bcast -> theta^rank -> sum on root.
struct Cubic {
    NodeId theta0, loss;
};

Cubic build_cubic(Tape& t, double theta0) {
    Cubic c;
    c.theta0 = t.parameter({t.comm().rank() == 0 ? theta0 : 0.0});
    const auto theta = collectives::mpi_bcast(t, c.theta0);
    const auto term = ops::powi(t, theta, t.comm().rank());
    c.loss = collectives::mpi_sum(t, term);
    t.set_loss(c.loss);
    return c;
}

}  // namespace

TEST_CASE("cubic demo on 4 ranks") {
    for (auto [theta, l, g] : {std::tuple{1.0, 4.0, 6.0}, std::tuple{2.0, 15.0, 17.0}}) {
        testsupport::run(4, [&, theta = theta, l = l, g = g](comm::Communicator& c) {
            Tape t(c);
            const auto cu = build_cubic(t, theta);
            const double loss = t.evaluate_with_gradient();
            if (c.rank() == 0) {
                CHECK(loss == doctest::Approx(l).epsilon(1e-14));
                CHECK(t.adjoint(cu.theta0)[0] == doctest::Approx(g).epsilon(1e-14));
            } else {
                CHECK(loss == 0.0);
            }
        });
    }
}

TEST_CASE("ghost dependency orders comm nodes by creation id") {
    testsupport::run(1, [](comm::Communicator& c) {
        Tape t(c);
        const auto x = t.parameter({1.0});                 // 0
        const auto a = ops::square(t, x);                  // 1
        const auto b = ops::square(t, a);                  // 2
        const auto first = collectives::mpi_bcast(t, b);   // 3
        const auto y = t.parameter({2.0});                 // 4
        const auto p = ops::scale(t, y, 2.0);              // 5
        const auto q = ops::scale(t, p, 2.0);              // 6
        const auto second = collectives::mpi_sum(t, q);    // 7
        t.set_loss(ops::add(t, first, second));
        REQUIRE(first == 3);
        REQUIRE(second == 7);

        graph::ScheduleOptions opt;
        opt.policy = graph::SchedulePolicy::kLifo;
        opt.ghost_dependencies = false;
        t.set_schedule(opt);
        auto order = t.inject_dependencies();
        auto pos = [&](NodeId id) { return std::find(order.begin(), order.end(), id) - order.begin(); };
        CHECK(pos(7) < pos(3));  // without the ghost edge, 7 runs first

        opt.ghost_dependencies = true;
        t.set_schedule(opt);
        order = t.inject_dependencies();
        CHECK(pos(3) < pos(7));
        CHECK(t.evaluate_with_gradient() == 1.0 + 8.0);
    });
}

namespace {

NodeId two_comm_tape(Tape& t) {
    const auto x = t.parameter({1.0});
    const auto a = ops::square(t, ops::square(t, x));
    const auto first = collectives::mpi_bcast(t, a);
    const auto y = t.parameter({2.0});
    const auto second = collectives::mpi_sum(t, ops::scale(t, ops::scale(t, y, 2.0), 2.0));
    const auto l = ops::add(t, first, second);
    t.set_loss(l);
    return l;
}

}  // namespace

TEST_CASE("different local schedules still agree on comm order") {
    testsupport::run(2, [](comm::Communicator& c) {
        Tape t(c);
        two_comm_tape(t);
        graph::ScheduleOptions opt;
        opt.policy = c.rank() == 0 ? graph::SchedulePolicy::kFifo : graph::SchedulePolicy::kLifo;
        t.set_schedule(opt);
        t.evaluate_with_gradient();
    });
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        testsupport::run(3, [seed](comm::Communicator& c) {
            Tape t(c);
            two_comm_tape(t);
            t.set_schedule({graph::SchedulePolicy::kRandom, seed * 31 + static_cast<std::uint64_t>(c.rank()), true});
            t.evaluate_with_gradient();
        });
    }
}

TEST_CASE("without ghost edges divergent schedules collide") {
    CHECK_THROWS_AS(testsupport::run(2,
                                     [](comm::Communicator& c) {
                                         Tape t(c);
                                         two_comm_tape(t);
                                         graph::ScheduleOptions opt;
                                         opt.policy = c.rank() == 0 ? graph::SchedulePolicy::kFifo
                                                                    : graph::SchedulePolicy::kLifo;
                                         opt.ghost_dependencies = false;
                                         t.set_schedule(opt);
                                         t.forward();
                                     }),
                    ProtocolError);
}

namespace {

// A small random expression over a 3-vector exercising every basic op.
NodeId random_tape(Tape& t, NodeId x, std::uint64_t seed) {
    const auto w = t.constant(testsupport::random_vector(3, seed));
    const auto a = ops::mul(t, x, w);
    const auto b = ops::powi(t, x, 3);
    const auto c = ops::sub(t, ops::add(t, a, b), ops::scale(t, x, 0.5));
    const auto d = ops::square(t, c);
    const auto e = ops::dot(t, d, x);
    const auto f = ops::sum(t, ops::mul(t, x, x));
    const auto l = ops::add_n(t, {e, f, ops::sum(t, a)});
    t.set_loss(l);
    return l;
}

}  // namespace

TEST_CASE("finite differences on random tapes") {
    const double eps = 1e-6;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const auto x0 = testsupport::random_vector(3, seed + 1000);
        Tape t;
        const auto x = t.parameter(x0);
        random_tape(t, x, seed);
        t.evaluate_with_gradient();
        const auto g = t.adjoint(x);
        for (std::size_t i = 0; i < 3; ++i) {
            auto xp = x0, xm = x0;
            xp[i] += eps;
            xm[i] -= eps;
            t.set_parameter(x, xp);
            const double lp = t.forward();
            t.set_parameter(x, xm);
            const double lm = t.forward();
            const double fd = (lp - lm) / (2 * eps);
            CHECK(std::abs(fd - g[i]) <= 1e-6 * std::max(1.0, std::abs(g[i])));
        }
    }
}

TEST_CASE("repeated evaluation is bitwise deterministic") {
    const auto x0 = testsupport::random_vector(3, 5);
    std::vector<double> first;
    double l0 = 0;
    for (int rep = 0; rep < 2; ++rep) {
        Tape t;
        const auto x = t.parameter(x0);
        random_tape(t, x, 9);
        const double l = t.evaluate_with_gradient();
        if (rep == 0) {
            l0 = l;
            first = t.adjoint(x);
        } else {
            CHECK(l == l0);
            CHECK(t.adjoint(x) == first);
        }
    }
}

TEST_CASE("adjoint is linear in the loss") {
    const auto x0 = testsupport::random_vector(3, 11);
    const double alpha = 0.7, beta = -1.3;
    auto grad = [&](int which) {
        Tape t;
        const auto x = t.parameter(x0);
        const auto l1 = random_tape(t, x, 1);
        const auto l2 = random_tape(t, x, 2);
        NodeId l = l1;
        if (which == 2) l = l2;
        if (which == 3) l = ops::add(t, ops::scale(t, l1, alpha), ops::scale(t, l2, beta));
        t.set_loss(l);
        t.evaluate_with_gradient();
        return t.adjoint(x);
    };
    const auto g1 = grad(1), g2 = grad(2), g3 = grad(3);
    for (int i = 0; i < 3; ++i) {
        CHECK(g3[i] == doctest::Approx(alpha * g1[i] + beta * g2[i]).epsilon(1e-14));
    }
}

TEST_CASE("tape dump lists one line per node") {
    Tape t;
    const auto c = t.constant({2.0});
    t.set_loss(ops::add(t, c, c));
    t.forward();
    std::ostringstream os;
    t.dump(os);
    CHECK(os.str() == "0 constant comm=0 inputs=[] size=1\n1 add comm=0 inputs=[0,0] size=1\n");
}

TEST_CASE("adjoint fault hook perturbs the named op") {
    graph::testing::set_adjoint_fault("powi");
    Tape t;
    const auto x = t.parameter({3.0});
    t.set_loss(ops::square(t, x));
    t.evaluate_with_gradient();
    graph::testing::set_adjoint_fault("");
    CHECK(t.adjoint(x)[0] == doctest::Approx(6.0 * (1 + 1e-3)));
}
