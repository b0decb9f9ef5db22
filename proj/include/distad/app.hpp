#pragma once

// Subcommand drivers shared by the C API and the acceptance runner.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace distad::app {

struct RunConfig {
    int ranks = 4;
    std::size_t nx = 32, ny = 32;
    int px = 0, py = 0;  // 0: near-square factorization of ranks
    int steps = 100;
    double tol = 1e-10;
    std::uint64_t seed = 42;
    double obs_fraction = 0.8;
    int maxiter = 100;
    std::string out = "out";
    int checkpoint_every = 0;
    std::string sampling = "global";  // global | per_rank
    std::string kappa_init = "network";  // network | truth (loss of kappa_true, no training)
    bool invert = false;
    std::string fault_op;  // gradcheck only: corrupt this op's adjoint
    int watchdog_ms = 30000;
    int bench_repeats = 3;
    int history = 10;
    double c_max = 2.0;
    double cfl = 0.5;
    std::string velocity = "true";  // true | const
    double source_amplitude = 1.0;

    // String interface used by config files and the C API. Unknown keys and
    // unparsable values raise InvalidArgument. "grid" and "rank_grid" take
    // "NXxNY" or "NX NY".
    void set(const std::string& key, const std::string& value);
    std::string get(const std::string& key) const;
    static std::vector<std::string> keys();

    // key=value lines; '#' starts a comment. Raises IoError / InvalidArgument.
    void load(const std::string& path);

    // Rank grid after resolving px = py = 0.
    int resolved_px() const;
    int resolved_py() const;

    // Checks everything that can fail before ranks are spawned.
    void validate(const std::string& command) const;
};

struct RunResult {
    bool passed = true;
    std::map<std::string, double> metrics;
    std::string summary;
    std::vector<std::string> files;
};

RunResult cmd_gradcheck(const RunConfig& cfg);
RunResult cmd_poisson(const RunConfig& cfg);
RunResult cmd_wave(const RunConfig& cfg);
RunResult cmd_bench(const RunConfig& cfg);

// Validates, then dispatches on gradcheck | poisson | wave | bench.
RunResult run_command(const std::string& command, const RunConfig& cfg);

std::vector<std::string> commands();

}  // namespace distad::app
