#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>

#include "distad/app.hpp"
#include "distad/checks.hpp"
#include "distad/error.hpp"
#include "distad/nn.hpp"
#include "distad/optim.hpp"
#include "distad/pde.hpp"

namespace distad::app {

namespace fs = std::filesystem;

namespace {

comm::SpawnOptions spawn_options(const RunConfig& cfg) {
    comm::SpawnOptions o;
    o.watchdog = std::chrono::milliseconds(cfg.watchdog_ms);
    return o;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory '" + dir + "'");
}

std::ofstream open_out(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write '" + path + "'");
    return os;
}

void finish(std::ofstream& os, const std::string& path, RunResult& r) {
    os.flush();
    if (!os) throw IoError("write to '" + path + "' failed");
    r.files.push_back(path);
}

std::string g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string e3(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3e", v);
    return buf;
}

double rel_l2(const std::vector<double>& a, const std::vector<double>& ref) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - ref[i]) * (a[i] - ref[i]);
        den += ref[i] * ref[i];
    }
    return std::sqrt(num / den);
}

std::vector<double> owned_field(const pde::GridPartition& p, double (*f)(double, double)) {
    std::vector<double> v(p.owned());
    for (std::size_t j = 0; j < p.nyl; ++j)
        for (std::size_t i = 0; i < p.nxl; ++i) v[p.local_index(i, j)] = f(p.x(i), p.y(j));
    return v;
}

double unit_velocity(double, double) { return 1.0; }

void write_field_file(const std::string& path, const std::vector<double>& field, std::size_t nx, std::size_t ny,
                      RunResult& r) {
    auto os = open_out(path);
    pde::write_field(os, field, nx, ny);
    finish(os, path, r);
}

void write_history_file(const std::string& path, const std::vector<optim::IterationRecord>& h, RunResult& r) {
    auto os = open_out(path);
    optim::write_history_csv(os, h);
    finish(os, path, r);
}

// Sets the adjoint fault hook for the lifetime of the object.
struct FaultScope {
    explicit FaultScope(const std::string& op) { graph::testing::set_adjoint_fault(op); }
    ~FaultScope() { graph::testing::set_adjoint_fault(""); }
    FaultScope(const FaultScope&) = delete;
    FaultScope& operator=(const FaultScope&) = delete;
};

}  // namespace

RunResult cmd_poisson(const RunConfig& cfg) {
    RunResult r;
    ensure_dir(cfg.out);
    const int px = cfg.resolved_px(), py = cfg.resolved_py();
    const auto layers = nn::default_layers();
    const auto init = nn::xavier_init(layers, cfg.seed);
    const auto mode = cfg.sampling == "per_rank" ? pde::SamplingMode::kPerRank : pde::SamplingMode::kGlobal;
    const bool truth = cfg.kappa_init == "truth";

    std::vector<optim::IterationRecord> history;
    std::vector<double> theta;
    std::vector<double> kappa, kappa_ref;
    std::string stop_reason;
    std::atomic<int> last_iteration{-1};
    std::size_t observed = 0;

    comm::spawn_ranks(
        cfg.ranks,
        [&](comm::Communicator& c) {
            const auto part = pde::partition_grid(cfg.nx, cfg.ny, px, py, c.rank());
            pde::PoissonProblem prob;
            try {
                prob = pde::make_poisson_problem(c, part, cfg.obs_fraction, cfg.seed, mode, {cfg.tol, 0}, layers);
            } catch (const SolverError& e) {
                throw SolverError(std::string("synthesizing observations: ") + e.what(), e.residual());
            }
            const double n_obs = comm::allreduce_sum(c, static_cast<double>(prob.obs.dofs.size()));
            const auto kt = owned_field(part, pde::kappa_true);
            std::vector<double> k_owned;
            if (truth) {
                graph::Tape t(c);
                pde::build_poisson_graph_from_kappa(t, prob, kt);
                const double loss = t.forward();
                if (c.rank() == 0) {
                    history.push_back({0, loss, 0.0, 0.0});
                    stop_reason = "kappa_true evaluated, no training";
                }
                k_owned = kt;
            } else {
                graph::Tape t(c);
                const auto g = pde::build_poisson_graph(t, prob, init.theta);
                optim::LbfgsOptions opt;
                opt.history = cfg.history;
                opt.max_iterations = cfg.maxiter;
                auto on_iteration = [&](const optim::IterationRecord& rec, std::span<const double> x) {
                    history.push_back(rec);
                    last_iteration = rec.iteration;
                    if (cfg.checkpoint_every > 0 && rec.iteration > 0 && rec.iteration % cfg.checkpoint_every == 0) {
                        char name[64];
                        std::snprintf(name, sizeof name, "checkpoint_%05d.txt", rec.iteration);
                        const auto path = (fs::path(cfg.out) / name).string();
                        auto os = open_out(path);
                        nn::save_checkpoint(os, {layers, cfg.seed, std::vector<double>(x.begin(), x.end())});
                        finish(os, path, r);
                    }
                };
                optim::MinimizeResult res;
                try {
                    res = optim::run_distributed(t, g.theta, init.theta, opt, on_iteration);
                } catch (const SolverError& e) {
                    throw SolverError("L-BFGS iteration " + std::to_string(last_iteration + 1) + ": " + e.what(),
                                      e.residual());
                }
                std::vector<double> th = c.rank() == 0 ? res.x : std::vector<double>(init.theta.size());
                c.bcast(std::span<double>(th), 0);
                if (c.rank() == 0) {
                    theta = th;
                    stop_reason = res.stop_reason;
                }
                k_owned = nn::mlp_eval(layers, th, part.coordinates());
            }
            auto kg = pde::gather_field(c, part, k_owned);
            auto kr = pde::gather_field(c, part, kt);
            if (c.rank() == 0) {
                kappa = std::move(kg);
                kappa_ref = std::move(kr);
                observed = static_cast<std::size_t>(n_obs);
            }
            return 0;
        },
        spawn_options(cfg));

    const auto out = fs::path(cfg.out);
    write_history_file((out / "loss_history.csv").string(), history, r);
    write_field_file((out / "kappa.txt").string(), kappa, cfg.nx, cfg.ny, r);
    write_field_file((out / "kappa_true.txt").string(), kappa_ref, cfg.nx, cfg.ny, r);
    if (!truth) {
        const auto path = (out / "theta.txt").string();
        auto os = open_out(path);
        nn::save_checkpoint(os, {layers, cfg.seed, theta});
        finish(os, path, r);
    }

    const double l0 = history.front().loss, l1 = history.back().loss;
    r.metrics["initial_loss"] = l0;
    r.metrics["final_loss"] = l1;
    r.metrics["loss_reduction"] = l1 > 0.0 ? l0 / l1 : INFINITY;
    r.metrics["kappa_rel_l2"] = rel_l2(kappa, kappa_ref);
    r.metrics["iterations"] = history.back().iteration;
    r.metrics["observations"] = static_cast<double>(observed);
    std::ostringstream s;
    s << "poisson " << cfg.nx << "x" << cfg.ny << " on " << cfg.ranks << (cfg.ranks == 1 ? " rank (" : " ranks (") << px << "x" << py << "), "
      << observed << " observations\n"
      << "iterations " << history.back().iteration << ", loss " << e3(l0) << " -> " << e3(l1) << " (reduction "
      << e3(r.metrics["loss_reduction"]) << ")\n"
      << "kappa relative L2 error " << e3(r.metrics["kappa_rel_l2"]) << "\n"
      << "stop: " << stop_reason << "\n";
    r.summary = s.str();
    return r;
}

RunResult cmd_wave(const RunConfig& cfg) {
    RunResult r;
    ensure_dir(cfg.out);
    const int px = cfg.resolved_px(), py = cfg.resolved_py();
    const auto layers = nn::default_layers();
    const std::size_t nx = cfg.nx, ny = cfg.ny;
    const int steps = cfg.steps;
    std::vector<int> snap_steps;
    for (int k = 1; k <= 5; ++k) snap_steps.push_back(k * steps / 5);

    std::vector<std::vector<double>> snapshots;
    std::vector<std::vector<double>> trace;  // steps x nx
    std::vector<optim::IterationRecord> history;
    std::vector<double> c_fit, c_ref;
    pde::AcousticModel model_out;

    comm::spawn_ranks(
        cfg.ranks,
        [&](comm::Communicator& c) {
            const auto part = pde::partition_grid(nx, ny, px, py, c.rank());
            auto model = pde::make_acoustic_model(part, cfg.c_max, steps, cfg.cfl);
            model.amplitude *= cfg.source_amplitude;
            const auto vel = owned_field(part, cfg.velocity == "const" ? unit_velocity : pde::c_true);
            const auto run = pde::simulate(c, part, model, vel);
            std::vector<std::vector<double>> fields;
            for (int n = 1; n <= steps; ++n) {
                auto g = pde::gather_field(c, part, run.fields[static_cast<std::size_t>(n)]);
                if (c.rank() != 0) continue;
                trace.emplace_back(g.end() - static_cast<std::ptrdiff_t>(nx), g.end());
                if (std::find(snap_steps.begin(), snap_steps.end(), n) != snap_steps.end()) {
                    snapshots.push_back(std::move(g));
                }
            }
            if (c.rank() == 0) model_out = model;
            if (!cfg.invert) return 0;

            const auto init = nn::xavier_init(layers, cfg.seed);
            graph::Tape t(c);
            const auto g = pde::build_wave_graph(t, part, model, layers, init.theta, run.traces);
            optim::LbfgsOptions opt;
            opt.history = cfg.history;
            opt.max_iterations = cfg.maxiter;
            const auto res = optim::run_distributed(t, g.theta, init.theta, opt,
                                                    [&](const optim::IterationRecord& rec, std::span<const double>) {
                                                        history.push_back(rec);
                                                    });
            std::vector<double> th = c.rank() == 0 ? res.x : std::vector<double>(init.theta.size());
            c.bcast(std::span<double>(th), 0);
            auto fit = pde::gather_field(c, part, nn::mlp_eval(layers, th, part.coordinates()));
            auto ref = pde::gather_field(c, part, vel);
            if (c.rank() == 0) {
                c_fit = std::move(fit);
                c_ref = std::move(ref);
            }
            return 0;
        },
        spawn_options(cfg));

    const auto out = fs::path(cfg.out);
    double umax = 0.0, mirror = 0.0;
    for (std::size_t k = 0; k < snapshots.size(); ++k) {
        char name[64];
        std::snprintf(name, sizeof name, "snapshot_%05d.txt", snap_steps[k]);
        write_field_file((out / name).string(), snapshots[k], nx, ny, r);
        const auto& f = snapshots[k];
        for (std::size_t j = 0; j < ny; ++j) {
            for (std::size_t i = 0; i < nx; ++i) {
                const double v = f[j * nx + i];
                umax = std::max(umax, std::abs(v));
                mirror = std::max({mirror, std::abs(v - f[j * nx + (nx - 1 - i)]), std::abs(v - f[(ny - 1 - j) * nx + i])});
            }
        }
    }
    {
        const auto path = (out / "trace.csv").string();
        auto os = open_out(path);
        os << "step,time";
        for (std::size_t i = 0; i < nx; ++i) os << ",u" << i;
        os << "\n";
        for (std::size_t n = 0; n < trace.size(); ++n) {
            os << n + 1 << "," << g17(static_cast<double>(n + 1) * model_out.dt);
            for (double v : trace[n]) os << "," << g17(v);
            os << "\n";
        }
        finish(os, path, r);
    }
    r.metrics["dt"] = model_out.dt;
    r.metrics["max_abs_u"] = umax;
    r.metrics["mirror_symmetry_error"] = umax > 0.0 ? mirror / umax : mirror;
    std::ostringstream s;
    s << "wave " << nx << "x" << ny << " on " << cfg.ranks << (cfg.ranks == 1 ? " rank (" : " ranks (") << px << "x" << py << "), " << steps
      << " steps, dt " << e3(model_out.dt) << ", velocity " << cfg.velocity << "\n"
      << "max |u| " << e3(umax) << ", mirror symmetry error " << e3(r.metrics["mirror_symmetry_error"]) << "\n";
    if (cfg.invert) {
        write_history_file((out / "wave_loss_history.csv").string(), history, r);
        write_field_file((out / "velocity.txt").string(), c_fit, nx, ny, r);
        write_field_file((out / "velocity_true.txt").string(), c_ref, nx, ny, r);
        r.metrics["initial_loss"] = history.front().loss;
        r.metrics["final_loss"] = history.back().loss;
        r.metrics["velocity_rel_l2"] = rel_l2(c_fit, c_ref);
        s << "inversion: " << history.back().iteration << " iterations, loss " << e3(history.front().loss) << " -> "
          << e3(history.back().loss) << ", velocity relative L2 error " << e3(r.metrics["velocity_rel_l2"]) << "\n";
    }
    r.summary = s.str();
    return r;
}

RunResult cmd_gradcheck(const RunConfig& cfg) {
    RunResult r;
    ensure_dir(cfg.out);
    const int px = cfg.resolved_px(), py = cfg.resolved_py();
    FaultScope fault(cfg.fault_op);

    std::vector<checks::CheckResult> results;
    checks::AdjointSuiteOptions suite;
    suite.grids = {{1, 1}};
    if (px * py > 1) suite.grids.push_back({px, py});
    suite.seed = cfg.seed;
    results = checks::adjoint_suite(suite);
    double max_adj = 0.0;
    for (const auto& c : results) max_adj = std::max(max_adj, c.error);

    results.push_back(checks::cubic_check(cfg.ranks));
    r.metrics["cubic_error"] = results.back().error;
    results.push_back(checks::mlp_fd_check(20, cfg.seed));
    r.metrics["mlp_fd_error"] = results.back().error;

    checks::FdOptions fd;
    fd.px = px;
    fd.py = py;
    fd.nx = cfg.nx;
    fd.ny = cfg.ny;
    fd.seed = cfg.seed;
    results.push_back(checks::poisson_fd_check(fd));
    r.metrics["poisson_fd_error"] = results.back().error;
    fd.steps = std::min(cfg.steps, 50);
    fd.components = 5;
    fd.tolerance = 1e-4;
    results.push_back(checks::wave_fd_check(fd));
    r.metrics["wave_fd_error"] = results.back().error;
    r.metrics["max_adjoint_error"] = max_adj;

    const auto path = (fs::path(cfg.out) / "gradcheck.txt").string();
    auto os = open_out(path);
    int failures = 0;
    std::ostringstream s;
    for (const auto& c : results) {
        char line[512];
        std::snprintf(line, sizeof line, "%s %-24s %-8s max_rel_err=%.3e tol=%.1e %s\n", c.passed ? "PASS" : "FAIL",
                      c.name.c_str(), c.layout.c_str(), c.error, c.tolerance, c.detail.c_str());
        os << line;
        if (!c.passed) {
            ++failures;
            s << line;
        }
    }
    os << (failures == 0 ? "all checks passed" : std::to_string(failures) + " checks failed") << "\n";
    finish(os, path, r);
    r.metrics["checks"] = static_cast<double>(results.size());
    r.metrics["failures"] = failures;
    r.passed = failures == 0;
    s << results.size() << " checks, " << failures << " failed; max adjoint error " << e3(max_adj) << "\n";
    r.summary = s.str();
    return r;
}

RunResult run_command(const std::string& command, const RunConfig& cfg) {
    cfg.validate(command);
    if (command == "gradcheck") return cmd_gradcheck(cfg);
    if (command == "poisson") return cmd_poisson(cfg);
    if (command == "wave") return cmd_wave(cfg);
    return cmd_bench(cfg);
}

}  // namespace distad::app
