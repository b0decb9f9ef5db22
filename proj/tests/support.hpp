#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "distad/comm.hpp"

namespace testsupport {

// Tests that provoke the watchdog on purpose bump this; main compares it
// against the real firing count.
inline std::atomic<std::uint64_t> expected_watchdog_fires{0};

// Every test runs under a short watchdog so that a stall fails quickly.
inline std::vector<int> run(int size, const std::function<void(distad::comm::Communicator&)>& fn) {
    distad::comm::SpawnOptions opt;
    opt.watchdog = std::chrono::milliseconds(20000);
    return distad::comm::spawn_ranks(
        size,
        [&](distad::comm::Communicator& c) {
            fn(c);
            return 0;
        },
        opt);
}

inline std::vector<double> random_vector(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

inline double rel_err(double a, double b) {
    const double scale = std::max({std::abs(a), std::abs(b), 1e-300});
    return std::abs(a - b) / scale;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace testsupport
