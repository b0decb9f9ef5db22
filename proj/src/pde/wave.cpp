#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "distad/nn.hpp"
#include "distad/pde.hpp"

namespace distad::pde {

namespace {

using graph::Tensor;

struct Face {
    int di, dj;
};
constexpr std::array<Face, 4> kFaces{{{-1, 0}, {1, 0}, {0, -1}, {0, 1}}};

bool at_wall(const GridPartition& p, std::size_t i, std::size_t j, const Face& f) {
    const auto gx = static_cast<std::ptrdiff_t>(p.x0 + i) + f.di;
    const auto gy = static_cast<std::ptrdiff_t>(p.y0 + j) + f.dj;
    return gx < 0 || gy < 0 || gx >= static_cast<std::ptrdiff_t>(p.nx) || gy >= static_cast<std::ptrdiff_t>(p.ny);
}

// Face coefficient: mean of the two nodes, the node's own value at a wall.
double face_c2(const GridPartition& p, const collectives::HaloSpec& hs, std::span<const double> c2,
               std::size_t i, std::size_t j, std::size_t f) {
    const auto ii = static_cast<std::ptrdiff_t>(i), jj = static_cast<std::ptrdiff_t>(j);
    const double cc = c2[hs.index(ii, jj)];
    if (at_wall(p, i, j, kFaces[f])) return cc;
    return 0.5 * (cc + c2[hs.index(ii + kFaces[f].di, jj + kFaces[f].dj)]);
}

// div(c2 grad u) at owned node (i, j) of a halo'd frame.
double divergence(const GridPartition& p, const collectives::HaloSpec& hs, std::span<const double> c2,
                  std::span<const double> u, std::size_t i, std::size_t j) {
    const auto ii = static_cast<std::ptrdiff_t>(i), jj = static_cast<std::ptrdiff_t>(j);
    const double uc = u[hs.index(ii, jj)];
    double s = 0.0;
    for (std::size_t f = 0; f < 4; ++f) {
        const double un = at_wall(p, i, j, kFaces[f]) ? 0.0 : u[hs.index(ii + kFaces[f].di, jj + kFaces[f].dj)];
        s += face_c2(p, hs, c2, i, j, f) * (un - uc);
    }
    return s / (p.h * p.h);
}

class AcousticStep final : public graph::Op {
public:
    AcousticStep(GridPartition part, AcousticModel model) : part_(part), hs_(part.halo(1)), model_(model) {}
    std::string name() const override { return "acoustic_step"; }

    Tensor forward(std::span<const Tensor* const> in) override {
        const Tensor &up = *in[0], &uc = *in[1], &c2 = *in[2];
        const auto n = hs_.frame_size();
        if (up.size() != n || uc.size() != n || c2.size() != n) {
            throw InvalidArgument("acoustic_step: fields must be depth-1 frames of " + std::to_string(n) + " values");
        }
        const double bound = model_.c_max * model_.c_max * (1.0 + 1e-12);
        const double dt2 = model_.dt * model_.dt;
        Tensor out(n, 0.0);
        for (std::size_t j = 0; j < part_.nyl; ++j) {
            for (std::size_t i = 0; i < part_.nxl; ++i) {
                const auto k = hs_.index(static_cast<std::ptrdiff_t>(i), static_cast<std::ptrdiff_t>(j));
                if (!(c2[k] >= 0.0 && c2[k] <= bound)) {
                    throw InvalidArgument("acoustic_step: velocity violates the CFL bound c_max = " +
                                          std::to_string(model_.c_max));
                }
                out[k] = 2.0 * uc[k] - up[k] + dt2 * divergence(part_, hs_, c2, uc, i, j);
            }
        }
        return out;
    }

    void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> adj) override {
        const Tensor &uc = *in[1], &c2 = *in[2];
        Tensor &a_up = *adj[0], &a_uc = *adj[1], &a_c2 = *adj[2];
        const double w = model_.dt * model_.dt / (part_.h * part_.h);
        for (std::size_t j = 0; j < part_.nyl; ++j) {
            for (std::size_t i = 0; i < part_.nxl; ++i) {
                const auto ii = static_cast<std::ptrdiff_t>(i), jj = static_cast<std::ptrdiff_t>(j);
                const auto k = hs_.index(ii, jj);
                const double gk = g[k];
                a_up[k] -= gk;
                a_uc[k] += 2.0 * gk;
                for (std::size_t f = 0; f < 4; ++f) {
                    const double cf = face_c2(part_, hs_, c2, i, j, f);
                    if (at_wall(part_, i, j, kFaces[f])) {
                        a_uc[k] -= w * cf * gk;
                        a_c2[k] -= w * uc[k] * gk;
                        continue;
                    }
                    const auto n = hs_.index(ii + kFaces[f].di, jj + kFaces[f].dj);
                    a_uc[k] -= w * cf * gk;
                    a_uc[n] += w * cf * gk;
                    const double d = 0.5 * w * (uc[n] - uc[k]) * gk;
                    a_c2[k] += d;
                    a_c2[n] += d;
                }
            }
        }
    }

private:
    GridPartition part_;
    collectives::HaloSpec hs_;
    AcousticModel model_;
};

class SurfaceRow final : public graph::Op {
public:
    explicit SurfaceRow(GridPartition part) : part_(part), hs_(part.halo(1)) {}
    std::string name() const override { return "surface_row"; }

    Tensor forward(std::span<const Tensor* const> in) override {
        if (!owns_surface()) return {};
        Tensor out(part_.nxl);
        for (std::size_t i = 0; i < part_.nxl; ++i) out[i] = (*in[0])[slot(i)];
        return out;
    }

    void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> adj) override {
        for (std::size_t i = 0; i < g.size(); ++i) (*adj[0])[slot(i)] += g[i];
    }

private:
    bool owns_surface() const { return part_.ry() == part_.py - 1; }
    std::size_t slot(std::size_t i) const {
        return hs_.index(static_cast<std::ptrdiff_t>(i), static_cast<std::ptrdiff_t>(part_.nyl) - 1);
    }

    GridPartition part_;
    collectives::HaloSpec hs_;
};

// Collective agreement that every rank's c^2 respects the CFL bound, so a
// violation raises on all ranks together. Identity otherwise.
class CflGuard final : public graph::Op {
public:
    CflGuard(comm::Communicator& c, double c_max) : comm_(c), c_max_(c_max) {}
    std::string name() const override { return "cfl_guard"; }
    bool is_comm() const override { return true; }

    Tensor forward(std::span<const Tensor* const> in) override {
        double local = 0.0;
        for (double v : *in[0]) local = std::isfinite(v) ? std::max(local, v) : INFINITY;
        const auto all = comm_.allgatherv(std::span<const double>(&local, 1));
        const double worst = *std::max_element(all.begin(), all.end());
        if (!(worst <= c_max_ * c_max_ * (1.0 + 1e-12))) {
            throw InvalidArgument("velocity " + std::to_string(std::sqrt(worst)) +
                                  " violates the CFL bound c_max = " + std::to_string(c_max_));
        }
        return *in[0];
    }

    void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> adj) override {
        for (std::size_t i = 0; i < g.size(); ++i) (*adj[0])[i] += g[i];
    }

private:
    comm::Communicator& comm_;
    double c_max_;
};

Tensor source_frame(const collectives::HaloSpec& hs, const GridPartition& part,
                    const std::vector<double>& weights, double scale) {
    Tensor f(hs.frame_size(), 0.0);
    for (std::size_t j = 0; j < part.nyl; ++j)
        for (std::size_t i = 0; i < part.nxl; ++i)
            f[hs.index(static_cast<std::ptrdiff_t>(i), static_cast<std::ptrdiff_t>(j))] = scale * weights[part.local_index(i, j)];
    return f;
}

WaveGraph wave_tail(Tape& t, const GridPartition& part, const AcousticModel& model, WaveGraph g,
                    const std::vector<std::vector<double>>& observed) {
    if (!observed.empty() && observed.size() != static_cast<std::size_t>(model.steps)) {
        throw InvalidArgument("observed trace has " + std::to_string(observed.size()) + " steps, model has " +
                              std::to_string(model.steps));
    }
    const auto hs = part.halo(1);
    auto c2 = graph::ops::square(t, g.c);
    c2 = t.record(std::make_unique<CflGuard>(t.comm(), model.c_max), {c2});
    const auto c2h = collectives::halo_exchange(t, collectives::pad_frame(t, c2, hs), hs);

    const auto weights = source_weights(part, model);
    const bool has_source = model.amplitude != 0.0 &&
                            std::any_of(weights.begin(), weights.end(), [](double w) { return w != 0.0; });
    auto prev = t.constant(Tensor(hs.frame_size(), 0.0));
    auto curr = prev;
    g.frames.push_back(curr);
    std::vector<NodeId> misfits;
    const double dt2 = model.dt * model.dt;
    for (int n = 0; n < model.steps; ++n) {
        const auto curr_h = collectives::halo_exchange(t, curr, hs);
        auto next = acoustic_step(t, prev, curr_h, c2h, part, model);
        if (has_source) {
            const double s = model.ricker(n * model.dt);
            next = graph::ops::add(t, next, t.constant(source_frame(hs, part, weights, dt2 * s)));
        }
        const auto trace = surface_row(t, next, part);
        g.frames.push_back(next);
        g.traces.push_back(trace);
        const auto n_surface = part.ry() == part.py - 1 ? part.nxl : 0;
        Tensor obs = observed.empty() ? Tensor(n_surface, 0.0) : observed[static_cast<std::size_t>(n)];
        if (obs.size() != n_surface) throw InvalidArgument("observed trace width mismatch");
        const auto r = graph::ops::sub(t, trace, t.constant(std::move(obs)));
        misfits.push_back(graph::ops::dot(t, r, r));
        prev = curr;
        curr = next;
    }
    const auto local = misfits.empty() ? t.constant({0.0}) : graph::ops::add_n(t, misfits);
    g.loss = collectives::mpi_sum(t, local);
    t.set_loss(g.loss);
    return g;
}

}  // namespace

double c_true(double x, double y) noexcept {
    const double dx = x - 0.5, dy = y - 0.4;
    return 1.0 + 0.5 * y - 0.3 * std::exp(-(dx * dx + dy * dy) / 0.02);
}

double AcousticModel::ricker(double t) const noexcept {
    const double t0 = 1.0 / peak_frequency;
    const double a = std::numbers::pi * peak_frequency * (t - t0);
    return amplitude * (1.0 - 2.0 * a * a) * std::exp(-a * a);
}

AcousticModel make_acoustic_model(const GridPartition& part, double c_max, int steps, double cfl, double c_ref) {
    if (!(c_max > 0.0)) throw InvalidArgument("c_max must be positive");
    if (steps < 0) throw InvalidArgument("steps must be non-negative");
    if (!(cfl > 0.0) || cfl > 1.0 / std::numbers::sqrt2 + 1e-15) {
        throw InvalidArgument("CFL number " + std::to_string(cfl) + " exceeds 1/sqrt(2)");
    }
    AcousticModel m;
    m.c_max = c_max;
    m.steps = steps;
    m.dt = cfl * part.h / c_max;
    m.source_x = 0.5 * static_cast<double>(part.nx + 1) * part.h;
    m.source_y = 0.5 * static_cast<double>(part.ny + 1) * part.h;
    m.peak_frequency = c_ref / (10.0 * part.h);
    return m;
}

std::vector<double> source_weights(const GridPartition& part, const AcousticModel& model) {
    std::vector<double> w(part.owned(), 0.0);
    // Fractional node coordinates of the source (node g sits at (g + 1) h).
    const double fx = model.source_x / part.h - 1.0;
    const double fy = model.source_y / part.h - 1.0;
    const double ix = std::floor(fx), iy = std::floor(fy);
    const double ax = fx - ix, ay = fy - iy;
    const double ih2 = 1.0 / (part.h * part.h);
    for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
            const double gx = ix + dx, gy = iy + dy;
            const double wt = (dx ? ax : 1.0 - ax) * (dy ? ay : 1.0 - ay);
            if (wt == 0.0 || gx < 0 || gy < 0) continue;
            const auto ux = static_cast<std::size_t>(gx), uy = static_cast<std::size_t>(gy);
            if (ux < part.x0 || ux >= part.x0 + part.nxl || uy < part.y0 || uy >= part.y0 + part.nyl) continue;
            w[part.local_index(ux - part.x0, uy - part.y0)] += wt * ih2;
        }
    }
    return w;
}

NodeId acoustic_step(Tape& t, NodeId u_prev, NodeId u_curr, NodeId c2, const GridPartition& part,
                     const AcousticModel& model) {
    return t.record(std::make_unique<AcousticStep>(part, model), {u_prev, u_curr, c2});
}

std::vector<double> apply_wave_operator(const GridPartition& part, std::span<const double> c2_frame,
                                        std::span<const double> u_frame) {
    const auto hs = part.halo(1);
    std::vector<double> out(part.owned());
    for (std::size_t j = 0; j < part.nyl; ++j)
        for (std::size_t i = 0; i < part.nxl; ++i)
            out[part.local_index(i, j)] = -divergence(part, hs, c2_frame, u_frame, i, j);
    return out;
}

NodeId surface_row(Tape& t, NodeId u_frame, const GridPartition& part) {
    return t.record(std::make_unique<SurfaceRow>(part), {u_frame});
}

WaveGraph build_wave_graph(Tape& t, const GridPartition& part, const AcousticModel& model,
                           const std::vector<std::size_t>& layers, std::vector<double> theta0,
                           const std::vector<std::vector<double>>& observed) {
    const auto n = nn::parameter_count(layers);
    if (theta0.size() != n) throw InvalidArgument("theta has the wrong length for the network");
    if (t.comm().rank() != 0) theta0.assign(n, 0.0);
    WaveGraph g;
    g.theta = t.parameter(std::move(theta0));
    g.c = nn::mlp_forward(t, layers, nn::params_on_root(t, g.theta), part.coordinates());
    return wave_tail(t, part, model, g, observed);
}

WaveGraph build_wave_graph_from_c(Tape& t, const GridPartition& part, const AcousticModel& model,
                                  std::vector<double> c0, const std::vector<std::vector<double>>& observed) {
    if (c0.size() != part.owned()) throw InvalidArgument("c has the wrong length");
    WaveGraph g;
    g.theta = t.parameter(std::move(c0));
    g.c = g.theta;
    return wave_tail(t, part, model, g, observed);
}

WaveRun simulate(comm::Communicator& comm, const GridPartition& part, const AcousticModel& model,
                 std::span<const double> c_owned, bool with_source) {
    AcousticModel m = model;
    if (!with_source) m.amplitude = 0.0;
    Tape t(comm);
    const auto g = build_wave_graph_from_c(t, part, m, std::vector<double>(c_owned.begin(), c_owned.end()), {});
    t.forward();
    const auto hs = part.halo(1);
    WaveRun run;
    for (auto id : g.frames) {
        const auto& f = t.value(id);
        std::vector<double> interior(part.owned());
        for (std::size_t j = 0; j < part.nyl; ++j)
            for (std::size_t i = 0; i < part.nxl; ++i)
                interior[part.local_index(i, j)] = f[hs.index(static_cast<std::ptrdiff_t>(i), static_cast<std::ptrdiff_t>(j))];
        run.fields.push_back(std::move(interior));
    }
    for (auto id : g.traces) run.traces.push_back(t.value(id));
    return run;
}

}  // namespace distad::pde
