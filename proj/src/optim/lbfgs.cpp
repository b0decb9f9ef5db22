#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>

#include "distad/optim.hpp"

namespace distad::optim {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

std::vector<double> two_loop(const LbfgsState& st, const std::vector<double>& g) {
    std::vector<double> q = g;
    const std::size_t m = st.s.size();
    std::vector<double> alpha(m), rho(m);
    for (std::size_t k = m; k-- > 0;) {
        rho[k] = 1.0 / dot(st.y[k], st.s[k]);
        alpha[k] = rho[k] * dot(st.s[k], q);
        for (std::size_t i = 0; i < q.size(); ++i) q[i] -= alpha[k] * st.y[k][i];
    }
    if (m > 0) {
        const double gamma = dot(st.s.back(), st.y.back()) / dot(st.y.back(), st.y.back());
        for (auto& v : q) v *= gamma;
    }
    for (std::size_t k = 0; k < m; ++k) {
        const double beta = rho[k] * dot(st.y[k], q);
        for (std::size_t i = 0; i < q.size(); ++i) q[i] += (alpha[k] - beta) * st.s[k][i];
    }
    for (auto& v : q) v = -v;
    return q;
}

}  // namespace

StepResult lbfgs_step(LbfgsState& state, std::vector<double>& x, double& f, std::vector<double>& g,
                      const Objective& objective) {
    for (double v : g) {
        if (!std::isfinite(v)) throw InvalidArgument("lbfgs_step: gradient is not finite");
    }
    StepResult res;
    auto d = two_loop(state, g);
    double gd = dot(g, d);
    if (!(gd < 0.0)) {
        // Not a descent direction: restart from steepest descent.
        state.s.clear();
        state.y.clear();
        d = g;
        for (auto& v : d) v = -v;
        gd = -dot(g, g);
    }

    std::vector<double> xt(x.size()), gt;
    double alpha = 1.0, ft = 0.0;
    const auto& opt = state.options;
    for (int trial = 1; trial <= opt.max_trials; ++trial) {
        for (std::size_t i = 0; i < x.size(); ++i) xt[i] = x[i] + alpha * d[i];
        // The first trial is usually accepted, so it also fetches the gradient.
        gt.clear();
        ft = objective(xt, trial == 1 ? &gt : nullptr);
        res.trials = trial;
        if (std::isfinite(ft) && ft <= f + opt.c1 * alpha * gd) {
            res.accepted = true;
            break;
        }
        alpha *= 0.5;
    }
    if (!res.accepted) {
        std::ostringstream os;
        os << "line search failed after " << opt.max_trials << " trials (last step " << alpha * 2.0
           << ", directional derivative " << gd << ")";
        res.diagnostic = os.str();
        return res;
    }
    if (res.trials > 1) ft = objective(xt, &gt);

    std::vector<double> s(x.size()), y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        s[i] = xt[i] - x[i];
        y[i] = gt[i] - g[i];
    }
    if (opt.history > 0 && dot(s, y) > 1e-10 * norm(s) * norm(y)) {
        state.s.push_back(std::move(s));
        state.y.push_back(std::move(y));
        while (state.s.size() > static_cast<std::size_t>(opt.history)) {
            state.s.pop_front();
            state.y.pop_front();
        }
    }
    x = std::move(xt);
    f = ft;
    g = std::move(gt);
    res.step = alpha;
    ++state.iteration;
    return res;
}

MinimizeResult minimize(const Objective& objective, std::vector<double> x0, LbfgsOptions options,
                        const IterationCallback& on_iteration) {
    if (options.history < 0 || options.max_iterations < 0 || options.max_trials < 1) {
        throw InvalidArgument("invalid L-BFGS options");
    }
    MinimizeResult r;
    r.x = std::move(x0);
    r.loss = objective(r.x, &r.grad);
    if (!std::isfinite(r.loss)) throw InvalidArgument("objective is not finite at the starting point");
    LbfgsState st;
    st.options = options;
    r.history.push_back({0, r.loss, norm(r.grad), 0.0});
    if (on_iteration) on_iteration(r.history.back(), r.x);
    r.stop_reason = "maximum iterations reached";
    while (st.iteration < options.max_iterations) {
        if (r.history.back().grad_norm < options.grad_tol) {
            r.stop_reason = "gradient tolerance reached";
            break;
        }
        const auto step = lbfgs_step(st, r.x, r.loss, r.grad, objective);
        if (!step.accepted) {
            r.stop_reason = step.diagnostic;
            break;
        }
        r.history.push_back({st.iteration, r.loss, norm(r.grad), step.step});
        if (on_iteration) on_iteration(r.history.back(), r.x);
    }
    return r;
}

void write_history_csv(std::ostream& os, const std::vector<IterationRecord>& history) {
    os << "iteration,loss,grad_norm,step\n";
    char buf[128];
    for (const auto& h : history) {
        std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g\n", h.iteration, h.loss, h.grad_norm, h.step);
        os << buf;
    }
}

MinimizeResult run_distributed(graph::Tape& tape, graph::NodeId theta, std::vector<double> theta0,
                               LbfgsOptions options, const IterationCallback& on_iteration) {
    auto& comm = tape.comm();
    auto announce = [&](Command c) {
        auto code = static_cast<std::int64_t>(c);
        comm.bcast(std::span<std::int64_t>(&code, 1), 0);
        return static_cast<Command>(code);
    };

    if (comm.rank() == 0) {
        const Objective objective = [&](std::span<const double> x, std::vector<double>* grad) {
            announce(grad ? Command::kEvalGradient : Command::kEvalLoss);
            tape.set_parameter(theta, std::vector<double>(x.begin(), x.end()));
            if (grad == nullptr) return tape.forward();
            const double l = tape.evaluate_with_gradient();
            *grad = tape.adjoint(theta);
            return l;
        };
        MinimizeResult r;
        try {
            r = minimize(objective, std::move(theta0), options, on_iteration);
        } catch (const Aborted&) {
            throw;
        } catch (const DeadlockError&) {
            throw;
        } catch (const Error&) {
            announce(Command::kStop);
            throw;
        }
        announce(Command::kStop);
        return r;
    }

    tape.set_parameter(theta, std::vector<double>(theta0.size(), 0.0));
    std::exception_ptr failure;
    for (;;) {
        const Command c = announce(Command::kStop);  // value ignored off root
        if (c == Command::kStop) break;
        if (c != Command::kEvalLoss && c != Command::kEvalGradient) {
            throw ProtocolError("unknown optimizer command " + std::to_string(static_cast<std::int64_t>(c)));
        }
        try {
            if (c == Command::kEvalLoss)
                tape.forward();
            else
                tape.evaluate_with_gradient();
        } catch (const Aborted&) {
            throw;
        } catch (const DeadlockError&) {
            throw;
        } catch (const Error&) {
            // Collective failures hit root too; it answers with Stop.
            failure = std::current_exception();
        }
    }
    if (failure) std::rethrow_exception(failure);
    return {};
}

}  // namespace distad::optim
