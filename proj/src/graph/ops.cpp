#include <cmath>

#include "distad/graph.hpp"

namespace distad::graph::ops {

namespace {

void require_same_size(const Tensor& a, const Tensor& b, const char* op) {
    if (a.size() != b.size()) {
        throw InvalidArgument(std::string(op) + ": size mismatch " + std::to_string(a.size()) +
                              " vs " + std::to_string(b.size()));
    }
}

class Add final : public Op {
public:
    explicit Add(double sign) : sign_(sign) {}
    std::string name() const override { return sign_ > 0 ? "add" : "sub"; }

    Tensor forward(std::span<const Tensor* const> in) override {
        require_same_size(*in[0], *in[1], "add");
        Tensor out(*in[0]);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += sign_ * (*in[1])[i];
        return out;
    }

    void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> adj) override {
        for (std::size_t i = 0; i < g.size(); ++i) {
            (*adj[0])[i] += g[i];
            (*adj[1])[i] += sign_ * g[i];
        }
    }

private:
    double sign_;
};

class Mul final : public Op {
public:
    std::string name() const override { return "mul"; }

    Tensor forward(std::span<const Tensor* const> in) override {
        require_same_size(*in[0], *in[1], "mul");
        Tensor out(in[0]->size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*in[0])[i] * (*in[1])[i];
        return out;
    }

    void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> adj) override {
        for (std::size_t i = 0; i < g.size(); ++i) {
            (*adj[0])[i] += g[i] * (*in[1])[i];
            (*adj[1])[i] += g[i] * (*in[0])[i];
        }
    }
};

class Scale final : public Op {
public:
    explicit Scale(double alpha) : alpha_(alpha) {}
    std::string name() const override { return "scale"; }

    Tensor forward(std::span<const Tensor* const> in) override {
        Tensor out(*in[0]);
        for (auto& v : out) v *= alpha_;
        return out;
    }

    void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> adj) override {
        for (std::size_t i = 0; i < g.size(); ++i) (*adj[0])[i] += alpha_ * g[i];
    }

private:
    double alpha_;
};

class PowI final : public Op {
public:
    explicit PowI(int e) : e_(e) {}
    std::string name() const override { return "powi"; }

    Tensor forward(std::span<const Tensor* const> in) override {
        Tensor out(in[0]->size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = ipow((*in[0])[i], e_);
        return out;
    }

    void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> adj) override {
        if (e_ == 0) return;
        for (std::size_t i = 0; i < g.size(); ++i) {
            (*adj[0])[i] += g[i] * e_ * ipow((*in[0])[i], e_ - 1);
        }
    }

private:
    static double ipow(double x, int e) {
        if (e < 0) return 1.0 / ipow(x, -e);
        double r = 1.0;
        for (int k = 0; k < e; ++k) r *= x;
        return r;
    }

    int e_;
};

class Sum final : public Op {
public:
    std::string name() const override { return "sum"; }

    Tensor forward(std::span<const Tensor* const> in) override {
        double s = 0.0;
        for (double v : *in[0]) s += v;
        return {s};
    }

    void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> adj) override {
        for (auto& a : *adj[0]) a += g[0];
    }
};

class AddN final : public Op {
public:
    std::string name() const override { return "add_n"; }

    Tensor forward(std::span<const Tensor* const> in) override {
        Tensor out(*in[0]);
        for (std::size_t k = 1; k < in.size(); ++k) {
            require_same_size(out, *in[k], "add_n");
            for (std::size_t i = 0; i < out.size(); ++i) out[i] += (*in[k])[i];
        }
        return out;
    }

    void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> adj) override {
        for (auto* a : adj) {
            for (std::size_t i = 0; i < g.size(); ++i) (*a)[i] += g[i];
        }
    }
};

class Dot final : public Op {
public:
    std::string name() const override { return "dot"; }

    Tensor forward(std::span<const Tensor* const> in) override {
        require_same_size(*in[0], *in[1], "dot");
        double s = 0.0;
        for (std::size_t i = 0; i < in[0]->size(); ++i) s += (*in[0])[i] * (*in[1])[i];
        return {s};
    }

    void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> adj) override {
        for (std::size_t i = 0; i < in[0]->size(); ++i) {
            (*adj[0])[i] += g[0] * (*in[1])[i];
            (*adj[1])[i] += g[0] * (*in[0])[i];
        }
    }
};

class Slice final : public Op {
public:
    Slice(std::size_t offset, std::size_t length) : offset_(offset), length_(length) {}
    std::string name() const override { return "slice"; }

    Tensor forward(std::span<const Tensor* const> in) override {
        if (offset_ + length_ > in[0]->size()) throw InvalidArgument("slice: range exceeds input");
        const auto first = in[0]->begin() + static_cast<std::ptrdiff_t>(offset_);
        return Tensor(first, first + static_cast<std::ptrdiff_t>(length_));
    }

    void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> adj) override {
        for (std::size_t i = 0; i < length_; ++i) (*adj[0])[offset_ + i] += g[i];
    }

private:
    std::size_t offset_, length_;
};

}  // namespace

NodeId add(Tape& t, NodeId a, NodeId b) { return t.record(std::make_unique<Add>(1.0), {a, b}); }
NodeId sub(Tape& t, NodeId a, NodeId b) { return t.record(std::make_unique<Add>(-1.0), {a, b}); }
NodeId mul(Tape& t, NodeId a, NodeId b) { return t.record(std::make_unique<Mul>(), {a, b}); }
NodeId scale(Tape& t, NodeId a, double alpha) {
    return t.record(std::make_unique<Scale>(alpha), {a});
}
NodeId powi(Tape& t, NodeId a, int exponent) {
    return t.record(std::make_unique<PowI>(exponent), {a});
}
NodeId square(Tape& t, NodeId a) { return powi(t, a, 2); }
NodeId sum(Tape& t, NodeId a) { return t.record(std::make_unique<Sum>(), {a}); }
NodeId add_n(Tape& t, std::vector<NodeId> terms) {
    if (terms.empty()) throw InvalidArgument("add_n: no terms");
    return t.record(std::make_unique<AddN>(), std::move(terms));
}
NodeId dot(Tape& t, NodeId a, NodeId b) { return t.record(std::make_unique<Dot>(), {a, b}); }
NodeId slice(Tape& t, NodeId a, std::size_t offset, std::size_t length) {
    return t.record(std::make_unique<Slice>(offset, length), {a});
}

}  // namespace distad::graph::ops
