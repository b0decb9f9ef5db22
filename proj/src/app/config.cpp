#include <charconv>
#include <cmath>
#include <fstream>
#include <cstdio>
#include <sstream>
#include <tuple>

#include "distad/app.hpp"
#include "distad/error.hpp"
#include "distad/pde.hpp"

namespace distad::app {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
    const std::string v = trim(value);
    T out{};
    const auto* end = v.data() + v.size();
    const auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (v.empty() || ec != std::errc() || ptr != end) {
        throw InvalidArgument("bad value '" + value + "' for " + key);
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
    const std::string v = trim(value);
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw InvalidArgument("bad value '" + value + "' for " + key + " (expected true or false)");
}

std::pair<std::size_t, std::size_t> parse_pair(const std::string& key, const std::string& value) {
    std::string v = trim(value);
    for (auto& ch : v)
        if (ch == 'x' || ch == 'X' || ch == ',') ch = ' ';
    std::istringstream is(v);
    std::string a, b, extra;
    if (!(is >> a >> b) || (is >> extra)) throw InvalidArgument("bad value '" + value + "' for " + key);
    return {parse_number<std::size_t>(key, a), parse_number<std::size_t>(key, b)};
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

std::vector<std::string> RunConfig::keys() {
    return {"ranks",   "nx",          "ny",       "grid",         "px",           "py",
            "rank_grid", "steps",     "tol",      "seed",         "obs_fraction", "maxiter",
            "out",     "checkpoint_every", "sampling", "kappa_init", "invert",   "fault_op",
            "watchdog_ms", "bench_repeats", "history", "c_max",     "cfl",          "velocity",
            "source_amplitude"};
}

void RunConfig::set(const std::string& raw_key, const std::string& value) {
    std::string key = trim(raw_key);
    for (auto& ch : key)
        if (ch == '-') ch = '_';
    if (key == "ranks") ranks = parse_number<int>(key, value);
    else if (key == "nx") nx = parse_number<std::size_t>(key, value);
    else if (key == "ny") ny = parse_number<std::size_t>(key, value);
    else if (key == "grid") std::tie(nx, ny) = parse_pair(key, value);
    else if (key == "px") px = parse_number<int>(key, value);
    else if (key == "py") py = parse_number<int>(key, value);
    else if (key == "rank_grid") {
        const auto [a, b] = parse_pair(key, value);
        px = static_cast<int>(a);
        py = static_cast<int>(b);
    } else if (key == "steps") steps = parse_number<int>(key, value);
    else if (key == "tol") tol = parse_number<double>(key, value);
    else if (key == "seed") seed = parse_number<std::uint64_t>(key, value);
    else if (key == "obs_fraction") obs_fraction = parse_number<double>(key, value);
    else if (key == "maxiter") maxiter = parse_number<int>(key, value);
    else if (key == "out") out = trim(value);
    else if (key == "checkpoint_every") checkpoint_every = parse_number<int>(key, value);
    else if (key == "sampling") sampling = trim(value);
    else if (key == "kappa_init") kappa_init = trim(value);
    else if (key == "invert") invert = parse_bool(key, value);
    else if (key == "fault_op") fault_op = trim(value);
    else if (key == "watchdog_ms") watchdog_ms = parse_number<int>(key, value);
    else if (key == "bench_repeats") bench_repeats = parse_number<int>(key, value);
    else if (key == "history") history = parse_number<int>(key, value);
    else if (key == "c_max") c_max = parse_number<double>(key, value);
    else if (key == "cfl") cfl = parse_number<double>(key, value);
    else if (key == "velocity") velocity = trim(value);
    else if (key == "source_amplitude") source_amplitude = parse_number<double>(key, value);
    else throw InvalidArgument("unknown configuration key '" + raw_key + "'");
}

std::string RunConfig::get(const std::string& raw_key) const {
    std::string key = trim(raw_key);
    for (auto& ch : key)
        if (ch == '-') ch = '_';
    if (key == "ranks") return std::to_string(ranks);
    if (key == "nx") return std::to_string(nx);
    if (key == "ny") return std::to_string(ny);
    if (key == "grid") return std::to_string(nx) + "x" + std::to_string(ny);
    if (key == "px") return std::to_string(px);
    if (key == "py") return std::to_string(py);
    if (key == "rank_grid") return std::to_string(resolved_px()) + "x" + std::to_string(resolved_py());
    if (key == "steps") return std::to_string(steps);
    if (key == "tol") return fmt(tol);
    if (key == "seed") return std::to_string(seed);
    if (key == "obs_fraction") return fmt(obs_fraction);
    if (key == "maxiter") return std::to_string(maxiter);
    if (key == "out") return out;
    if (key == "checkpoint_every") return std::to_string(checkpoint_every);
    if (key == "sampling") return sampling;
    if (key == "kappa_init") return kappa_init;
    if (key == "invert") return invert ? "true" : "false";
    if (key == "fault_op") return fault_op;
    if (key == "watchdog_ms") return std::to_string(watchdog_ms);
    if (key == "bench_repeats") return std::to_string(bench_repeats);
    if (key == "history") return std::to_string(history);
    if (key == "c_max") return fmt(c_max);
    if (key == "cfl") return fmt(cfl);
    if (key == "velocity") return velocity;
    if (key == "source_amplitude") return fmt(source_amplitude);
    throw InvalidArgument("unknown configuration key '" + raw_key + "'");
}

void RunConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        if (trim(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw InvalidArgument(path + ":" + std::to_string(lineno) + ": expected key=value");
        }
        try {
            set(line.substr(0, eq), line.substr(eq + 1));
        } catch (const InvalidArgument& e) {
            throw InvalidArgument(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

int RunConfig::resolved_px() const { return px > 0 ? px : pde::default_rank_grid(ranks)[0]; }
int RunConfig::resolved_py() const { return py > 0 ? py : pde::default_rank_grid(ranks)[1]; }

std::vector<std::string> commands() { return {"gradcheck", "poisson", "wave", "bench"}; }

void RunConfig::validate(const std::string& command) const {
    bool known = false;
    for (const auto& c : commands()) known = known || c == command;
    if (!known) throw InvalidArgument("unknown command '" + command + "'");
    if (ranks < 1) throw InvalidArgument("ranks must be at least 1");
    if ((px > 0) != (py > 0)) throw InvalidArgument("rank grid needs both px and py");
    if (px < 0 || py < 0) throw InvalidArgument("rank grid entries must be positive");
    const int rpx = resolved_px(), rpy = resolved_py();
    if (rpx * rpy != ranks) {
        throw InvalidArgument("rank grid " + std::to_string(rpx) + "x" + std::to_string(rpy) + " does not match " +
                              std::to_string(ranks) + " ranks");
    }
    if (watchdog_ms < 1) throw InvalidArgument("watchdog_ms must be positive");
    if (command == "bench") {
        if (bench_repeats < 1) throw InvalidArgument("bench_repeats must be at least 1");
        return;
    }
    if (nx == 0 || ny == 0) throw InvalidArgument("grid must be non-empty");
    // Throws on indivisible grids.
    pde::partition_grid(nx, ny, rpx, rpy, 0);
    if (!(tol > 0.0) || tol >= 1.0) throw InvalidArgument("tol must lie in (0, 1)");
    if (command == "poisson") {
        if (!(obs_fraction > 0.0 && obs_fraction <= 1.0)) throw InvalidArgument("obs_fraction must lie in (0, 1]");
        if (maxiter < 0) throw InvalidArgument("maxiter must be non-negative");
        if (history < 0) throw InvalidArgument("history must be non-negative");
        if (checkpoint_every < 0) throw InvalidArgument("checkpoint_every must be non-negative");
        if (sampling != "global" && sampling != "per_rank") {
            throw InvalidArgument("sampling must be global or per_rank");
        }
        if (kappa_init != "network" && kappa_init != "truth") {
            throw InvalidArgument("kappa_init must be network or truth");
        }
    }
    if (command == "wave") {
        if (steps < 1) throw InvalidArgument("steps must be at least 1");
        if (velocity != "true" && velocity != "const") throw InvalidArgument("velocity must be true or const");
        if (maxiter < 0 || history < 0) throw InvalidArgument("maxiter and history must be non-negative");
        const auto part = pde::partition_grid(nx, ny, 1, 1, 0);
        pde::make_acoustic_model(part, c_max, steps, cfl);  // CFL number and c_max
        double vmax = 1.0;
        if (velocity == "true") {
            for (std::size_t j = 0; j < ny; ++j)
                for (std::size_t i = 0; i < nx; ++i) vmax = std::max(vmax, pde::c_true(part.x(i), part.y(j)));
        }
        if (vmax > c_max) {
            throw InvalidArgument("velocity " + fmt(vmax) + " exceeds c_max " + fmt(c_max) + " (CFL)");
        }
    }
    if (command == "gradcheck" && steps < 1) throw InvalidArgument("steps must be at least 1");
}

}  // namespace distad::app
