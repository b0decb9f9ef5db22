#include <array>
#include <cmath>
#include <sstream>

#include "distad/sparse.hpp"

namespace distad::sparse {

namespace {

using graph::NodeId;
using graph::Tensor;

void check_conforming(comm::Communicator& comm, const CsrPattern& p, std::size_t nvalues,
                      std::size_t nlocal, const char* op) {
    if (p.rows.size() != comm.size() || p.rank != comm.rank()) {
        throw InvalidArgument(std::string(op) + ": pattern does not belong to this rank");
    }
    if (nvalues != p.nnz()) throw InvalidArgument(std::string(op) + ": values/pattern size mismatch");
    if (nlocal != static_cast<std::size_t>(p.local_rows())) {
        throw InvalidArgument(std::string(op) + ": vector segment has " + std::to_string(nlocal) +
                              " entries, stripe has " + std::to_string(p.local_rows()) + " rows");
    }
}

std::vector<double> gather_full(comm::Communicator& comm, const CsrPattern& p,
                                std::span<const double> local) {
    auto full = comm.allgatherv(local);
    if (static_cast<std::int64_t>(full.size()) != p.n()) {
        throw InvalidArgument("distributed vector length " + std::to_string(full.size()) +
                              " does not match matrix dimension " + std::to_string(p.n()));
    }
    return full;
}

void multiply(const CsrPattern& p, std::span<const double> values, std::span<const double> x_full,
              std::span<double> y) {
    for (std::int64_t i = 0; i < p.local_rows(); ++i) {
        double s = 0.0;
        for (auto k = p.row_ptr[static_cast<std::size_t>(i)]; k < p.row_ptr[static_cast<std::size_t>(i) + 1]; ++k) {
            s += values[static_cast<std::size_t>(k)] * x_full[static_cast<std::size_t>(p.cols[static_cast<std::size_t>(k)])];
        }
        y[static_cast<std::size_t>(i)] = s;
    }
}

std::vector<double> solve_local(comm::Communicator& comm, const CsrPattern& p,
                                std::span<const double> values, std::span<const double> f,
                                const SolveOptions& opt, SolveStats* stats) {
    check_conforming(comm, p, values.size(), f.size(), "dist_solve");
    if (!(opt.tol > 0.0)) throw InvalidArgument("dist_solve: tol must be positive");
    const auto m = f.size();
    const std::int64_t max_it = opt.max_iterations > 0 ? opt.max_iterations : 10 * p.n();

    std::vector<double> inv_diag(m, 0.0);
    std::int64_t bad_row = -1;
    for (std::size_t i = 0; i < m; ++i) {
        const auto row = p.row_begin() + static_cast<std::int64_t>(i);
        for (auto k = p.row_ptr[i]; k < p.row_ptr[i + 1]; ++k) {
            if (p.cols[static_cast<std::size_t>(k)] == row) inv_diag[i] = values[static_cast<std::size_t>(k)];
        }
        if (inv_diag[i] == 0.0) {
            if (bad_row < 0) bad_row = row;
        } else {
            inv_diag[i] = 1.0 / inv_diag[i];
        }
    }
    // Agree on preconditioner failure so that every rank raises together.
    double bad = bad_row >= 0 ? 1.0 : 0.0;
    if (comm::allreduce_sum(comm, bad) > 0.0) {
        throw InvalidArgument("dist_solve: zero diagonal entry" +
                              (bad_row >= 0 ? " at row " + std::to_string(bad_row) : std::string{}) +
                              "; Jacobi preconditioner undefined");
    }

    auto dot2 = [&](std::span<const double> a, std::span<const double> b,
                    std::span<const double> c, std::span<const double> d) {
        std::array<double, 2> s{0.0, 0.0};
        for (std::size_t i = 0; i < m; ++i) {
            s[0] += a[i] * b[i];
            s[1] += c[i] * d[i];
        }
        comm::allreduce_sum(comm, std::span<double>(s));
        return s;
    };

    std::vector<double> u(m, 0.0), r(f.begin(), f.end()), z(m), pdir(m), ap(m);
    for (std::size_t i = 0; i < m; ++i) z[i] = inv_diag[i] * r[i];
    pdir = z;
    auto [rz, rr] = dot2(r, z, r, r);
    const double fnorm = std::sqrt(rr);
    std::int64_t it = 0;
    auto rel = [&] { return fnorm > 0.0 ? std::sqrt(rr) / fnorm : 0.0; };
    while (fnorm > 0.0 && std::sqrt(rr) > opt.tol * fnorm) {
        if (it >= max_it) {
            std::ostringstream os;
            os << "dist_solve: CG did not reach tol " << opt.tol << " in " << max_it
               << " iterations (relative residual " << rel() << ")";
            throw SolverError(os.str(), rel());
        }
        const auto x_full = gather_full(comm, p, pdir);
        multiply(p, values, x_full, ap);
        double pap = 0.0;
        for (std::size_t i = 0; i < m; ++i) pap += pdir[i] * ap[i];
        pap = comm::allreduce_sum(comm, pap);
        if (!(pap > 0.0)) {
            throw SolverError("dist_solve: matrix is not positive definite along a search direction", rel());
        }
        const double alpha = rz / pap;
        for (std::size_t i = 0; i < m; ++i) {
            u[i] += alpha * pdir[i];
            r[i] -= alpha * ap[i];
            z[i] = inv_diag[i] * r[i];
        }
        const auto [rz_new, rr_new] = dot2(r, z, r, r);
        const double beta = rz_new / rz;
        rz = rz_new;
        rr = rr_new;
        for (std::size_t i = 0; i < m; ++i) pdir[i] = z[i] + beta * pdir[i];
        ++it;
    }
    if (stats != nullptr) {
        stats->iterations = it;
        stats->relative_residual = rel();
    }
    return u;
}

class SpmvOp final : public graph::Op {
public:
    SpmvOp(comm::Communicator& c, PatternPtr p) : comm_(c), pattern_(std::move(p)) {}
    std::string name() const override { return "dist_spmv"; }
    bool is_comm() const override { return true; }

    Tensor forward(std::span<const Tensor* const> in) override {
        check_conforming(comm_, *pattern_, in[0]->size(), in[1]->size(), "dist_spmv");
        x_full_ = gather_full(comm_, *pattern_, *in[1]);
        Tensor y(in[1]->size());
        multiply(*pattern_, *in[0], x_full_, y);
        return y;
    }

    void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> adj) override {
        const auto& p = *pattern_;
        auto& a_adj = *adj[0];
        for (std::int64_t i = 0; i < p.local_rows(); ++i) {
            for (auto k = p.row_ptr[static_cast<std::size_t>(i)]; k < p.row_ptr[static_cast<std::size_t>(i) + 1]; ++k) {
                a_adj[static_cast<std::size_t>(k)] += g[static_cast<std::size_t>(i)] * x_full_[static_cast<std::size_t>(p.cols[static_cast<std::size_t>(k)])];
            }
        }
        // x-adjoint = A^T g through the distributed transpose.
        const auto at = dist_transpose(comm_, DistCSR{pattern_, *in[0]});
        const auto g_full = gather_full(comm_, *at.matrix.pattern, g);
        Tensor xt(g.size());
        multiply(*at.matrix.pattern, at.matrix.values, g_full, xt);
        for (std::size_t i = 0; i < xt.size(); ++i) (*adj[1])[i] += xt[i];
    }

private:
    comm::Communicator& comm_;
    PatternPtr pattern_;
    std::vector<double> x_full_;
};

class TransposeOp final : public graph::Op {
public:
    TransposeOp(comm::Communicator& c, std::shared_ptr<const TransposePlan> plan)
        : comm_(c), plan_(std::move(plan)) {}
    std::string name() const override { return "dist_transpose"; }
    bool is_comm() const override { return true; }

    Tensor forward(std::span<const Tensor* const> in) override {
        auto t = dist_transpose(comm_, DistCSR{plan_->source, *in[0]});
        if (t.matrix.pattern->cols != plan_->result->cols ||
            t.matrix.pattern->row_ptr != plan_->result->row_ptr) {
            throw ProtocolError("dist_transpose: structure differs from the recorded plan");
        }
        return std::move(t.matrix.values);
    }

    void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> adj) override {
        const auto back = transpose_adjoint(comm_, *plan_, g);
        for (std::size_t i = 0; i < back.size(); ++i) (*adj[0])[i] += back[i];
    }

private:
    comm::Communicator& comm_;
    std::shared_ptr<const TransposePlan> plan_;
};

class SolveOp final : public graph::Op {
public:
    SolveOp(comm::Communicator& c, PatternPtr p, SolveOptions opt)
        : comm_(c), pattern_(std::move(p)), opt_(opt) {}
    std::string name() const override { return "dist_solve"; }
    bool is_comm() const override { return true; }

    Tensor forward(std::span<const Tensor* const> in) override {
        return solve_local(comm_, *pattern_, *in[0], *in[1], opt_, nullptr);
    }

    void backward(std::span<const Tensor* const> in, const Tensor& u, const Tensor& g,
                  std::span<Tensor* const> adj) override {
        // A^T lambda = g; for the symmetric matrices the drivers build this is
        // the forward matrix, but the transpose keeps the rule general.
        const auto at = dist_transpose(comm_, DistCSR{pattern_, *in[0]});
        const auto lambda = solve_local(comm_, *at.matrix.pattern, at.matrix.values, g, opt_, nullptr);
        for (std::size_t i = 0; i < lambda.size(); ++i) (*adj[1])[i] += lambda[i];

        const auto u_full = gather_full(comm_, *pattern_, u);
        const auto& p = *pattern_;
        auto& a_adj = *adj[0];
        for (std::int64_t i = 0; i < p.local_rows(); ++i) {
            for (auto k = p.row_ptr[static_cast<std::size_t>(i)]; k < p.row_ptr[static_cast<std::size_t>(i) + 1]; ++k) {
                a_adj[static_cast<std::size_t>(k)] -= lambda[static_cast<std::size_t>(i)] * u_full[static_cast<std::size_t>(p.cols[static_cast<std::size_t>(k)])];
            }
        }
    }

private:
    comm::Communicator& comm_;
    PatternPtr pattern_;
    SolveOptions opt_;
};

}  // namespace

DistVector dist_spmv(comm::Communicator& comm, const DistCSR& a, const DistVector& x) {
    const auto& p = *a.pattern;
    check_conforming(comm, p, a.values.size(), x.values.size(), "dist_spmv");
    if (!(x.partition == p.rows)) throw InvalidArgument("dist_spmv: vector partition differs from matrix rows");
    const auto x_full = gather_full(comm, p, x.values);
    DistVector y{p.rows, comm.rank(), std::vector<double>(x.values.size())};
    multiply(p, a.values, x_full, y.values);
    return y;
}

DistVector dist_solve(comm::Communicator& comm, const DistCSR& a, const DistVector& f,
                      SolveOptions options, SolveStats* stats) {
    if (!(f.partition == a.pattern->rows)) {
        throw InvalidArgument("dist_solve: right-hand side partition differs from matrix rows");
    }
    return DistVector{a.pattern->rows, comm.rank(),
                      solve_local(comm, *a.pattern, a.values, f.values, options, stats)};
}

NodeId spmv(graph::Tape& t, PatternPtr pattern, NodeId values, NodeId x) {
    return t.record(std::make_unique<SpmvOp>(t.comm(), std::move(pattern)), {values, x});
}

NodeId transpose(graph::Tape& t, std::shared_ptr<const TransposePlan> plan, NodeId values) {
    return t.record(std::make_unique<TransposeOp>(t.comm(), std::move(plan)), {values});
}

NodeId solve(graph::Tape& t, PatternPtr pattern, NodeId values, NodeId f, SolveOptions options) {
    return t.record(std::make_unique<SolveOp>(t.comm(), std::move(pattern), options), {values, f});
}

}  // namespace distad::sparse
