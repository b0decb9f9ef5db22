#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <map>
#include <random>
#include <sstream>

#include "distad/collectives.hpp"
#include "distad/sparse.hpp"
#include "support.hpp"

using namespace distad;
using namespace distad::sparse;

namespace {

CooMatrix random_coo(std::int64_t n, double density, std::uint64_t seed, bool diagonal = false) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0), v(-1.0, 1.0);
    CooMatrix m;
    m.n = n;
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < n; ++j)
            if ((diagonal && i == j) || u(rng) < density) m.entries.push_back({i, j, v(rng)});
    return m;
}

// Symmetric and strictly diagonally dominant.
CooMatrix random_spd(std::int64_t n, double density, std::uint64_t seed) {
    const auto b = random_coo(n, density, seed);
    std::map<std::pair<std::int64_t, std::int64_t>, double> acc;
    for (const auto& e : b.entries) {
        if (e.row == e.col) continue;
        acc[{e.row, e.col}] += e.value;
        acc[{e.col, e.row}] += e.value;
    }
    std::vector<double> rowsum(static_cast<std::size_t>(n), 1.0);
    for (const auto& [k, val] : acc) rowsum[static_cast<std::size_t>(k.first)] += std::abs(val);
    for (std::int64_t i = 0; i < n; ++i) acc[{i, i}] = rowsum[static_cast<std::size_t>(i)];
    CooMatrix m;
    m.n = n;
    for (const auto& [k, val] : acc) m.entries.push_back({k.first, k.second, val});
    return m;
}

CooMatrix laplacian_2d(std::int64_t k) {
    CooMatrix m;
    m.n = k * k;
    for (std::int64_t j = 0; j < k; ++j) {
        for (std::int64_t i = 0; i < k; ++i) {
            const auto r = j * k + i;
            if (j > 0) m.entries.push_back({r, r - k, -1.0});
            if (i > 0) m.entries.push_back({r, r - 1, -1.0});
            m.entries.push_back({r, r, 4.0});
            if (i < k - 1) m.entries.push_back({r, r + 1, -1.0});
            if (j < k - 1) m.entries.push_back({r, r + k, -1.0});
        }
    }
    return m;
}

Eigen::MatrixXd dense(const CooMatrix& m) {
    Eigen::MatrixXd d = Eigen::MatrixXd::Zero(m.n, m.n);
    for (const auto& e : m.entries) d(e.row, e.col) += e.value;
    return d;
}

DistVector segment(const std::vector<double>& global, const RowPartition& rows, int rank) {
    DistVector v{rows, rank, {}};
    v.values.assign(global.begin() + rows.begin(rank), global.begin() + rows.end(rank));
    return v;
}

std::vector<double> gather_all(comm::Communicator& c, const DistVector& v) {
    return c.allgatherv(std::span<const double>(v.values));
}

// Slot of global entry (i, j) in this rank's stripe, or -1.
std::int64_t slot_of(const CsrPattern& p, std::int64_t i, std::int64_t j) {
    if (i < p.row_begin() || i >= p.row_end()) return -1;
    const auto l = static_cast<std::size_t>(i - p.row_begin());
    for (auto k = p.row_ptr[l]; k < p.row_ptr[l + 1]; ++k)
        if (p.cols[static_cast<std::size_t>(k)] == j) return k;
    return -1;
}

}  // namespace

TEST_CASE("row partitions") {
    const auto p = RowPartition::uniform(10, 3);
    CHECK(p.offsets() == std::vector<std::int64_t>{0, 4, 7, 10});
    CHECK(p.owner(0) == 0);
    CHECK(p.owner(6) == 1);
    CHECK(p.owner(9) == 2);
    CHECK_THROWS_AS(p.owner(10), InvalidArgument);
    CHECK_THROWS_AS(RowPartition(std::vector<std::int64_t>{0, 3, 2}), InvalidArgument);
}

TEST_CASE("transpose of the 2x2 example") {
    CooMatrix m{2, {{0, 0, 1.0}, {0, 1, 2.0}, {1, 1, 3.0}}};
    for (int size : {1, 2}) {
        testsupport::run(size, [&](comm::Communicator& c) {
            const auto a = distribute(m, RowPartition::uniform(2, c.size()), c.rank());
            const auto at = dist_transpose(c, a);
            const auto g = dense(assemble_global(c, at.matrix));
            CHECK(g(0, 0) == 1.0);
            CHECK(g(0, 1) == 0.0);
            CHECK(g(1, 0) == 2.0);
            CHECK(g(1, 1) == 3.0);
        });
    }
}

TEST_CASE("transpose matches the dense oracle") {
    for (double density : {0.01, 0.1}) {
        const auto m = random_coo(200, density, 11);
        const Eigen::MatrixXd ref = dense(m).transpose();
        for (int size = 1; size <= 4; ++size) {
            testsupport::run(size, [&](comm::Communicator& c) {
                const auto rows = RowPartition::uniform(m.n, c.size());
                const auto a = distribute(m, rows, c.rank());
                const auto at = dist_transpose(c, a);
                at.matrix.pattern->validate();
                CHECK(at.matrix.pattern->rows == rows);
                const auto g = assemble_global(c, at.matrix);
                CHECK(g.entries.size() == m.entries.size());
                CHECK((dense(g) - ref).cwiseAbs().maxCoeff() == 0.0);
                // Involution, bit for bit.
                const auto att = dist_transpose(c, at.matrix);
                CHECK(att.matrix.pattern->cols == a.pattern->cols);
                CHECK(att.matrix.values == a.values);
            });
        }
    }
}

TEST_CASE("transpose of the identity and of an empty stripe") {
    CooMatrix id{5, {}};
    for (std::int64_t i = 0; i < 5; ++i) id.entries.push_back({i, i, 1.0});
    testsupport::run(3, [&](comm::Communicator& c) {
        const auto a = distribute(id, RowPartition::uniform(5, 3), c.rank());
        const auto at = dist_transpose(c, a);
        CHECK(at.matrix.values == a.values);
        CHECK(at.matrix.pattern->cols == a.pattern->cols);
    });
    // Rank 1 owns no rows.
    testsupport::run(3, [&](comm::Communicator& c) {
        const auto a = distribute(id, RowPartition(std::vector<std::int64_t>{0, 3, 3, 5}), c.rank());
        const auto at = dist_transpose(c, a);
        CHECK(at.matrix.values.size() == a.values.size());
    });
}

TEST_CASE("spmv of the 2x2 example") {
    CooMatrix m{2, {{0, 0, 2.0}, {1, 0, 1.0}, {1, 1, 3.0}}};
    for (int size : {1, 2}) {
        testsupport::run(size, [&](comm::Communicator& c) {
            const auto rows = RowPartition::uniform(2, c.size());
            const auto a = distribute(m, rows, c.rank());
            const auto y = gather_all(c, dist_spmv(c, a, segment({1.0, 1.0}, rows, c.rank())));
            CHECK(y == std::vector<double>{2.0, 4.0});
        });
    }
}

TEST_CASE("spmv matches the dense oracle") {
    const auto m = random_coo(50, 0.2, 5);
    const auto x = testsupport::random_vector(50, 6);
    const Eigen::VectorXd ref = dense(m) * Eigen::Map<const Eigen::VectorXd>(x.data(), 50);
    for (int size = 1; size <= 4; ++size) {
        testsupport::run(size, [&](comm::Communicator& c) {
            const auto rows = RowPartition::uniform(50, c.size());
            const auto y = gather_all(c, dist_spmv(c, distribute(m, rows, c.rank()), segment(x, rows, c.rank())));
            for (int i = 0; i < 50; ++i) CHECK(y[static_cast<std::size_t>(i)] == doctest::Approx(ref(i)).epsilon(1e-14));
        });
    }
}

TEST_CASE("conjugate gradient on a 20x20 Laplacian matches a dense solve") {
    const auto m = laplacian_2d(20);
    const auto f = testsupport::random_vector(400, 3);
    const Eigen::VectorXd ref = dense(m).llt().solve(Eigen::Map<const Eigen::VectorXd>(f.data(), 400));
    for (int size : {1, 2, 4}) {
        testsupport::run(size, [&](comm::Communicator& c) {
            const auto rows = RowPartition::uniform(400, c.size());
            SolveStats st;
            const auto u = gather_all(c, dist_solve(c, distribute(m, rows, c.rank()), segment(f, rows, c.rank()),
                                                     {1e-12, 0}, &st));
            CHECK(st.relative_residual <= 1e-12);
            double err = 0.0;
            for (int i = 0; i < 400; ++i) err = std::max(err, std::abs(u[static_cast<std::size_t>(i)] - ref(i)));
            CHECK(err / ref.cwiseAbs().maxCoeff() < 1e-8);
        });
    }
}

TEST_CASE("solver errors") {
    testsupport::run(2, [](comm::Communicator& c) {
        const auto rows = RowPartition::uniform(400, c.size());
        const auto a = distribute(laplacian_2d(20), rows, c.rank());
        const auto f = segment(std::vector<double>(400, 1.0), rows, c.rank());
        CHECK_THROWS_AS(dist_solve(c, a, f, {1e-12, 3}), SolverError);
        CooMatrix z{2, {{0, 0, 1.0}, {0, 1, 0.5}, {1, 0, 0.5}}};
        const auto r2 = RowPartition::uniform(2, c.size());
        CHECK_THROWS_AS(dist_solve(c, distribute(z, r2, c.rank()), segment({1.0, 1.0}, r2, c.rank())),
                        InvalidArgument);
    });
}

TEST_CASE("solve of 2I: adjoints of f and of the diagonal") {
    testsupport::run(1, [](comm::Communicator& c) {
        const CooMatrix m{1, {{0, 0, 2.0}}};
        const auto a = distribute(m, RowPartition::uniform(1, 1), 0);
        graph::Tape t(c);
        const auto vals = t.parameter(a.values);
        const auto f = t.parameter({2.0});
        const auto u = solve(t, a.pattern, vals, f);
        t.set_loss(graph::ops::square(t, graph::ops::sum(t, u)));
        CHECK(t.evaluate_with_gradient() == doctest::Approx(1.0));
        CHECK(t.adjoint(f)[0] == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(t.adjoint(vals)[0] == doctest::Approx(-1.0).epsilon(1e-12));
    });
}

TEST_CASE("solve gradients agree with central differences") {
    const std::int64_t n = 30;
    const auto m = random_spd(n, 0.1, 21);
    const auto f0 = testsupport::random_vector(static_cast<std::size_t>(n), 22);
    const auto w = testsupport::random_vector(static_cast<std::size_t>(n), 23);
    // Symmetric entry pairs to perturb (i, j) with i <= j.
    std::vector<std::pair<std::int64_t, std::int64_t>> pairs;
    for (const auto& e : m.entries)
        if (e.row <= e.col && pairs.size() < 8) pairs.push_back({e.row, e.col});
    for (int size : {1, 3}) {
        testsupport::run(size, [&](comm::Communicator& c) {
            const auto rows = RowPartition::uniform(n, c.size());
            const auto a = distribute(m, rows, c.rank());
            graph::Tape t(c);
            const auto vals = t.parameter(a.values);
            const auto f = t.parameter(segment(f0, rows, c.rank()).values);
            const auto u = solve(t, a.pattern, vals, f, {1e-14, 0});
            const auto wl = t.constant(segment(w, rows, c.rank()).values);
            t.set_loss(collectives::mpi_sum(t, graph::ops::dot(t, graph::ops::square(t, u), wl)));
            t.evaluate_with_gradient();
            const auto gv = t.adjoint(vals);
            const auto gf = t.adjoint(f);
            const double eps = 1e-6;
            auto loss_at = [&](const std::vector<double>& v, const std::vector<double>& ff) {
                t.set_parameter(vals, v);
                t.set_parameter(f, ff);
                return comm::allreduce_sum(c, t.forward());
            };
            const auto base_f = segment(f0, rows, c.rank()).values;
            for (std::int64_t i : {std::int64_t{0}, n / 2, n - 1}) {
                auto fp = base_f, fm = base_f;
                const bool mine = rows.owner(i) == c.rank();
                const auto li = static_cast<std::size_t>(i - rows.begin(c.rank()));
                if (mine) {
                    fp[li] += eps;
                    fm[li] -= eps;
                }
                const double fd = (loss_at(a.values, fp) - loss_at(a.values, fm)) / (2 * eps);
                const double g = comm::allreduce_sum(c, mine ? gf[li] : 0.0);
                CHECK(testsupport::rel_err(fd, g) < 1e-5);
            }
            for (const auto& [i, j] : pairs) {
                auto vp = a.values, vm = a.values;
                double g = 0.0;
                for (const auto& [r, col] : {std::pair{i, j}, std::pair{j, i}}) {
                    const auto s = slot_of(*a.pattern, r, col);
                    if (s < 0) continue;
                    vp[static_cast<std::size_t>(s)] += eps;
                    vm[static_cast<std::size_t>(s)] -= eps;
                    g += gv[static_cast<std::size_t>(s)];
                    if (i == j) break;
                }
                g = comm::allreduce_sum(c, g);
                const double fd = (loss_at(vp, base_f) - loss_at(vm, base_f)) / (2 * eps);
                CHECK(testsupport::rel_err(fd, g) < 1e-5);
            }
        });
    }
}

TEST_CASE("MatrixMarket round trip is exact") {
    const auto m = random_coo(17, 0.3, 9);
    std::stringstream ss;
    write_matrix_market(ss, m);
    const auto r = read_matrix_market(ss);
    REQUIRE(r.n == m.n);
    REQUIRE(r.entries.size() == m.entries.size());
    for (std::size_t k = 0; k < m.entries.size(); ++k) {
        CHECK(r.entries[k].row == m.entries[k].row);
        CHECK(r.entries[k].col == m.entries[k].col);
        CHECK(r.entries[k].value == m.entries[k].value);
    }
    std::istringstream bad("%%MatrixMarket matrix coordinate real general\n2 2 1\n3 1 1.0\n");
    CHECK_THROWS(read_matrix_market(bad));
}
