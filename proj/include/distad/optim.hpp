#pragma once

// L-BFGS with backtracking Armijo line search, and the root/worker command
// protocol that drives it across ranks.

#include <cstdint>
#include <deque>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "distad/graph.hpp"

namespace distad::optim {

struct LbfgsOptions {
    int history = 10;
    int max_iterations = 100;
    double grad_tol = 1e-8;
    double c1 = 1e-4;
    int max_trials = 40;
};

struct LbfgsState {
    LbfgsOptions options;
    std::deque<std::vector<double>> s, y;  // oldest first
    int iteration = 0;
};

// Loss oracle; fills `grad` when it is non-null.
using Objective = std::function<double(std::span<const double> x, std::vector<double>* grad)>;

struct StepResult {
    bool accepted = false;
    double step = 0.0;
    int trials = 0;
    std::string diagnostic;  // set when the line search fails
};

// Two-loop direction, Armijo backtracking from step 1 (halving), then the
// gradient at the accepted point. On failure x, f and g are left untouched.
StepResult lbfgs_step(LbfgsState& state, std::vector<double>& x, double& f, std::vector<double>& g,
                      const Objective& objective);

struct IterationRecord {
    int iteration = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
    double step = 0.0;
};

struct MinimizeResult {
    std::vector<double> x;
    double loss = 0.0;
    std::vector<double> grad;
    std::vector<IterationRecord> history;  // row 0 is the starting point
    std::string stop_reason;
};

using IterationCallback = std::function<void(const IterationRecord&, std::span<const double> x)>;

MinimizeResult minimize(const Objective& objective, std::vector<double> x0, LbfgsOptions options = {},
                        const IterationCallback& on_iteration = {});

// CSV with header `iteration,loss,grad_norm,step`, values printed %.17g.
void write_history_csv(std::ostream& os, const std::vector<IterationRecord>& history);

enum class Command : std::int64_t { kEvalLoss = 1, kEvalGradient = 2, kStop = 3 };

// Collective. Every rank passes its copy of the recorded tape; `theta` is the
// root-owned parameter node feeding a broadcast. Root runs the optimizer and
// announces each evaluation with a Command; workers replay the tape on
// command until Stop. The result is meaningful on root only.
MinimizeResult run_distributed(graph::Tape& tape, graph::NodeId theta, std::vector<double> theta0,
                               LbfgsOptions options = {}, const IterationCallback& on_iteration = {});

}  // namespace distad::optim
