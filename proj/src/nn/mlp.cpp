#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <string>

#include "distad/collectives.hpp"
#include "distad/nn.hpp"

namespace distad::nn {

namespace {

using graph::Tensor;

void check_layers(std::span<const std::size_t> layers) {
    if (layers.size() < 2 || layers.front() != 2 || layers.back() != 1) {
        throw InvalidArgument("MLP layers must start at 2 inputs and end at 1 output");
    }
    for (auto w : layers) {
        if (w == 0) throw InvalidArgument("MLP layer width must be positive");
    }
}

double sigmoid(double z) noexcept {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// Forward pass keeping every layer's activations (batch-major) for backprop.
struct Trace {
    std::vector<std::vector<double>> act;  // act[0] = inputs, act[l] after layer l
    std::vector<double> z_out;             // pre-softplus outputs
};

Trace run(std::span<const std::size_t> layers, std::span<const double> theta,
          std::span<const double> coords) {
    check_layers(layers);
    if (theta.size() != parameter_count(layers)) {
        throw InvalidArgument("MLP parameter vector has " + std::to_string(theta.size()) +
                              " entries, expected " + std::to_string(parameter_count(layers)));
    }
    for (double v : theta) {
        if (!std::isfinite(v)) throw InvalidArgument("MLP parameters contain a non-finite value");
    }
    if (coords.size() % 2 != 0) throw InvalidArgument("MLP coordinates must be k x 2");
    const std::size_t k = coords.size() / 2;

    Trace tr;
    tr.act.emplace_back(coords.begin(), coords.end());
    std::size_t off = 0;
    const std::size_t nl = layers.size() - 1;
    for (std::size_t l = 0; l < nl; ++l) {
        const std::size_t fi = layers[l], fo = layers[l + 1];
        const double* w = theta.data() + off;
        const double* b = w + fi * fo;
        off += (fi + 1) * fo;
        const auto& a = tr.act.back();
        std::vector<double> z(k * fo);
        for (std::size_t p = 0; p < k; ++p) {
            for (std::size_t o = 0; o < fo; ++o) {
                double s = b[o];
                for (std::size_t i = 0; i < fi; ++i) s += w[o * fi + i] * a[p * fi + i];
                z[p * fo + o] = s;
            }
        }
        if (l + 1 < nl) {
            for (auto& v : z) v = std::tanh(v);
            tr.act.push_back(std::move(z));
        } else {
            tr.z_out = std::move(z);
        }
    }
    return tr;
}

class MlpOp final : public graph::Op {
public:
    MlpOp(std::vector<std::size_t> layers, std::vector<double> coords)
        : layers_(std::move(layers)), coords_(std::move(coords)) {
        check_layers(layers_);
    }
    std::string name() const override { return "mlp"; }

    Tensor forward(std::span<const Tensor* const> in) override {
        trace_ = run(layers_, *in[0], coords_);
        Tensor out(trace_.z_out.size());
        for (std::size_t p = 0; p < out.size(); ++p) out[p] = softplus(trace_.z_out[p]) + kCoefficientFloor;
        return out;
    }

    void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> adj) override {
        const Tensor& theta = *in[0];
        Tensor& dtheta = *adj[0];
        const std::size_t k = g.size();
        const std::size_t nl = layers_.size() - 1;

        std::vector<std::size_t> offsets(nl);
        for (std::size_t l = 0, off = 0; l < nl; ++l) {
            offsets[l] = off;
            off += (layers_[l] + 1) * layers_[l + 1];
        }

        std::vector<double> delta(k);
        for (std::size_t p = 0; p < k; ++p) delta[p] = g[p] * sigmoid(trace_.z_out[p]);

        for (std::size_t l = nl; l-- > 0;) {
            const std::size_t fi = layers_[l], fo = layers_[l + 1];
            const std::size_t woff = offsets[l], boff = woff + fi * fo;
            const auto& a = trace_.act[l];
            for (std::size_t p = 0; p < k; ++p) {
                for (std::size_t o = 0; o < fo; ++o) {
                    const double d = delta[p * fo + o];
                    dtheta[boff + o] += d;
                    for (std::size_t i = 0; i < fi; ++i) dtheta[woff + o * fi + i] += d * a[p * fi + i];
                }
            }
            if (l == 0) break;
            std::vector<double> prev(k * fi, 0.0);
            for (std::size_t p = 0; p < k; ++p) {
                for (std::size_t i = 0; i < fi; ++i) {
                    double s = 0.0;
                    for (std::size_t o = 0; o < fo; ++o) s += theta[woff + o * fi + i] * delta[p * fo + o];
                    const double ai = a[p * fi + i];
                    prev[p * fi + i] = s * (1.0 - ai * ai);
                }
            }
            delta = std::move(prev);
        }
    }

private:
    std::vector<std::size_t> layers_;
    std::vector<double> coords_;
    Trace trace_;
};

}  // namespace

std::vector<std::size_t> default_layers() { return {2, 20, 20, 20, 1}; }

std::size_t parameter_count(std::span<const std::size_t> layers) {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < layers.size(); ++l) n += (layers[l] + 1) * layers[l + 1];
    return n;
}

double softplus(double z) noexcept {
    return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

MlpParams xavier_init(std::vector<std::size_t> layers, std::uint64_t seed) {
    check_layers(layers);
    MlpParams p;
    p.seed = seed;
    p.theta.reserve(parameter_count(layers));
    std::mt19937_64 rng(seed);
    for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
        const std::size_t fi = layers[l], fo = layers[l + 1];
        const double limit = std::sqrt(6.0 / static_cast<double>(fi + fo));
        for (std::size_t k = 0; k < fi * fo; ++k) {
            const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
            p.theta.push_back((2.0 * u - 1.0) * limit);
        }
        p.theta.insert(p.theta.end(), fo, 0.0);
    }
    p.layers = std::move(layers);
    return p;
}

std::vector<double> mlp_eval(std::span<const std::size_t> layers, std::span<const double> theta,
                             std::span<const double> coords) {
    const auto tr = run(layers, theta, coords);
    std::vector<double> out(tr.z_out.size());
    for (std::size_t p = 0; p < out.size(); ++p) out[p] = softplus(tr.z_out[p]) + kCoefficientFloor;
    return out;
}

graph::NodeId mlp_forward(graph::Tape& t, std::vector<std::size_t> layers, graph::NodeId theta,
                          std::vector<double> coords) {
    return t.record(std::make_unique<MlpOp>(std::move(layers), std::move(coords)), {theta});
}

graph::NodeId params_on_root(graph::Tape& t, graph::NodeId theta_root, int root) {
    return collectives::mpi_bcast(t, theta_root, root);
}

void save_checkpoint(std::ostream& os, const MlpParams& params) {
    os << "# distad mlp checkpoint\n";
    os << "layers";
    for (auto w : params.layers) os << ' ' << w;
    os << "\nseed " << params.seed << "\ncount " << params.theta.size() << '\n';
    char buf[40];
    for (double v : params.theta) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        os << buf << '\n';
    }
}

MlpParams load_checkpoint(std::istream& is) {
    MlpParams p;
    std::string line;
    std::size_t count = 0;
    bool have_layers = false, have_count = false;
    while (!have_count && std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "layers") {
            std::size_t w;
            while (ls >> w) p.layers.push_back(w);
            have_layers = true;
        } else if (key == "seed") {
            ls >> p.seed;
        } else if (key == "count") {
            ls >> count;
            have_count = true;
        } else {
            throw IoError("unknown checkpoint header key '" + key + "'");
        }
    }
    if (!have_layers || !have_count) throw IoError("checkpoint header incomplete");
    check_layers(p.layers);
    if (count != parameter_count(p.layers)) throw IoError("checkpoint count does not match layers");
    p.theta.reserve(count);
    while (p.theta.size() < count && std::getline(is, line)) {
        if (line.empty()) continue;
        char* end = nullptr;
        const double v = std::strtod(line.c_str(), &end);
        if (end == line.c_str()) throw IoError("bad checkpoint value '" + line + "'");
        p.theta.push_back(v);
    }
    if (p.theta.size() != count) throw IoError("checkpoint truncated");
    return p;
}

}  // namespace distad::nn
