// distad command-line driver. Talks to the engine only through the C API.

#include <cstdio>
#include <cstdlib>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "distad/distad.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

int exit_code(distad_status s) {
    switch (s) {
        case DISTAD_OK: return kExitOk;
        case DISTAD_ERR_INVALID_ARGUMENT: return kExitUsage;
        default: return kExitFailure;
    }
}

int report(distad_status s, const char* what) {
    std::fprintf(stderr, "distad: %s: %s: %s\n", what, distad_status_string(s), distad_last_error());
    return exit_code(s);
}

struct Flags {
    std::optional<std::string> config;
    std::optional<int> ranks;
    std::vector<std::size_t> grid;
    std::vector<int> rank_grid;
    std::optional<int> steps;
    std::optional<std::string> tol;
    std::optional<std::string> seed;
    std::optional<std::string> obs_fraction;
    std::optional<int> maxiter;
    std::optional<std::string> out;
    std::vector<std::string> sets;
    bool quiet = false;
};

void add_common(CLI::App& sub, Flags& f) {
    sub.add_option("-c,--config", f.config, "key=value config file");
    sub.add_option("--ranks", f.ranks, "number of in-process ranks (env DISTAD_RANKS)");
    sub.add_option("--grid", f.grid, "grid size NX NY")->expected(2);
    sub.add_option("--rank-grid", f.rank_grid, "rank grid PX PY")->expected(2);
    sub.add_option("--steps", f.steps, "time steps");
    sub.add_option("--tol", f.tol, "CG relative tolerance");
    sub.add_option("--seed", f.seed, "random seed");
    sub.add_option("--obs-fraction", f.obs_fraction, "fraction of grid nodes observed");
    sub.add_option("--maxiter", f.maxiter, "L-BFGS iterations");
    sub.add_option("--out", f.out, "output directory");
    sub.add_option("--set", f.sets, "extra key=value setting (repeatable)")
        ->check([](const std::string& v) { return v.find('=') == std::string::npos ? "expected key=value" : ""; });
    sub.add_flag("-q,--quiet", f.quiet, "print only errors");
}

// Defaults < config file < environment < flags.
distad_status apply(distad_config* cfg, const Flags& f) {
    distad_status s = DISTAD_OK;
    auto set = [&](const char* k, const std::string& v) {
        if (s == DISTAD_OK) s = distad_config_set(cfg, k, v.c_str());
    };
    if (f.config) s = distad_config_load(cfg, f.config->c_str());
    if (const char* env = std::getenv("DISTAD_RANKS"); env && *env) set("ranks", env);
    if (f.ranks) set("ranks", std::to_string(*f.ranks));
    if (f.grid.size() == 2) set("grid", std::to_string(f.grid[0]) + "x" + std::to_string(f.grid[1]));
    if (f.rank_grid.size() == 2) set("rank_grid", std::to_string(f.rank_grid[0]) + "x" + std::to_string(f.rank_grid[1]));
    if (f.steps) set("steps", std::to_string(*f.steps));
    if (f.tol) set("tol", *f.tol);
    if (f.seed) set("seed", *f.seed);
    if (f.obs_fraction) set("obs_fraction", *f.obs_fraction);
    if (f.maxiter) set("maxiter", std::to_string(*f.maxiter));
    if (f.out) set("out", *f.out);
    for (const auto& kv : f.sets) {
        const auto eq = kv.find('=');
        set(kv.substr(0, eq).c_str(), kv.substr(eq + 1));
    }
    return s;
}

int run(const std::string& command, const Flags& f) {
    distad_config* cfg = nullptr;
    if (auto s = distad_config_create(&cfg); s != DISTAD_OK) return report(s, "config");
    int code = kExitOk;
    if (auto s = apply(cfg, f); s != DISTAD_OK) {
        code = report(s, "config");
    } else if (s = distad_config_validate(cfg, command.c_str()); s != DISTAD_OK) {
        code = report(s, "invalid configuration");
    } else {
        distad_result* r = nullptr;
        s = distad_run(cfg, command.c_str(), &r);
        if (r) {
            if (!f.quiet) std::fputs(distad_result_summary(r), stdout);
            distad_result_destroy(r);
        }
        if (s == DISTAD_ERR_CHECK_FAILED) {
            std::fprintf(stderr, "distad: %s: checks failed\n", command.c_str());
            code = kExitFailure;
        } else if (s != DISTAD_OK) {
            code = report(s, command.c_str());
        }
    }
    distad_config_destroy(cfg);
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"distributed reverse-mode AD on an in-process rank runtime"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(distad_version()));

    Flags flags;
    const std::vector<std::pair<std::string, std::string>> cmds{
        {"gradcheck", "adjoint dot-product and finite-difference checks"},
        {"poisson", "invert the Poisson conductivity network with L-BFGS"},
        {"wave", "acoustic wave simulation, optionally with velocity inversion"},
        {"bench", "timings for rank counts 1, 2 and 4"},
    };
    std::string chosen;
    for (const auto& [name, help] : cmds) {
        auto* sub = app.add_subcommand(name, help);
        add_common(*sub, flags);
        sub->callback([&chosen, n = name] { chosen = n; });
    }

    double theta = 1.0;
    int demo_ranks = 4;
    auto* demo = app.add_subcommand("demo", "L(theta) = 1 + theta + theta^2 + ... over ranks");
    demo->add_option("--theta", theta, "parameter value");
    demo->add_option("--ranks", demo_ranks, "number of ranks")->check(CLI::PositiveNumber);
    demo->callback([&chosen] { chosen = "demo"; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    if (chosen == "demo") {
        double loss = 0.0, grad = 0.0;
        if (auto s = distad_cubic_demo(demo_ranks, theta, &loss, &grad); s != DISTAD_OK) return report(s, "demo");
        std::printf("ranks=%d theta=%.17g loss=%.17g gradient=%.17g\n", demo_ranks, theta, loss, grad);
        return kExitOk;
    }
    return run(chosen, flags);
}
