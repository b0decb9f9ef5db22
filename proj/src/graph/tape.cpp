#include <algorithm>
#include <deque>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>

#include "distad/graph.hpp"

namespace distad::graph {

namespace {

class ParameterOp final : public Op {
public:
    ParameterOp(Tensor value, bool trainable) : value_(std::move(value)), trainable_(trainable) {}

    std::string name() const override { return trainable_ ? "parameter" : "constant"; }
    Tensor forward(std::span<const Tensor* const>) override { return value_; }
    void backward(std::span<const Tensor* const>, const Tensor&, const Tensor&,
                  std::span<Tensor* const>) override {}

    void set(Tensor v) { value_ = std::move(v); }
    std::size_t size() const noexcept { return value_.size(); }

private:
    Tensor value_;
    bool trainable_;
};

std::string& fault_name() {
    static std::string name;
    return name;
}

[[noreturn]] void rethrow_with_context(NodeId id, const std::string& op) {
    const std::string where = "node " + std::to_string(id) + " (" + op + "): ";
    try {
        throw;
    } catch (const SolverError& e) {
        throw SolverError(where + e.what(), e.residual());
    } catch (const InvalidArgument& e) {
        throw InvalidArgument(where + e.what());
    } catch (const ProtocolError& e) {
        throw ProtocolError(where + e.what());
    } catch (...) {
        throw;
    }
}

}  // namespace

namespace testing {

void set_adjoint_fault(std::string op_name) { fault_name() = std::move(op_name); }
const std::string& adjoint_fault() { return fault_name(); }

}  // namespace testing

const Tape::Node& Tape::node(NodeId id) const {
    if (id >= nodes_.size()) throw InvalidArgument("unknown node id " + std::to_string(id));
    return nodes_[id];
}

Tape::Node& Tape::node(NodeId id) {
    if (id >= nodes_.size()) throw InvalidArgument("unknown node id " + std::to_string(id));
    return nodes_[id];
}

NodeId Tape::record(std::unique_ptr<Op> op, std::vector<NodeId> inputs) {
    for (NodeId in : inputs) {
        if (in >= nodes_.size()) {
            throw InvalidArgument("record: input id " + std::to_string(in) +
                                  " does not exist (tape has " + std::to_string(nodes_.size()) +
                                  " nodes)");
        }
    }
    Node n;
    n.comm = op->is_comm();
    if (n.comm) ++comm_count_;
    n.op = std::move(op);
    n.inputs = std::move(inputs);
    nodes_.push_back(std::move(n));
    forward_done_ = false;
    backward_done_ = false;
    return nodes_.size() - 1;
}

NodeId Tape::constant(Tensor value) {
    return record(std::make_unique<ParameterOp>(std::move(value), false), {});
}

NodeId Tape::parameter(Tensor value) {
    const NodeId id = record(std::make_unique<ParameterOp>(std::move(value), true), {});
    params_.push_back(id);
    return id;
}

void Tape::set_parameter(NodeId id, Tensor value) {
    auto* p = dynamic_cast<ParameterOp*>(node(id).op.get());
    if (p == nullptr) throw InvalidArgument("node " + std::to_string(id) + " is not a parameter");
    if (p->size() != value.size()) throw InvalidArgument("set_parameter: size mismatch");
    p->set(std::move(value));
    forward_done_ = false;
    backward_done_ = false;
}

void Tape::set_loss(NodeId id) {
    node(id);
    loss_ = id;
}

NodeId Tape::loss() const {
    if (loss_ >= nodes_.size()) throw InvalidArgument("tape has no loss node");
    return loss_;
}

comm::Communicator& Tape::comm() const {
    if (comm_ == nullptr) throw InvalidArgument("tape has no communicator");
    return *comm_;
}

const Tensor& Tape::value(NodeId id) const {
    if (!forward_done_) throw InvalidArgument("value requested before forward");
    return node(id).value;
}

const Tensor& Tape::adjoint(NodeId id) const {
    if (!backward_done_) throw InvalidArgument("adjoint requested before backward");
    return node(id).adjoint;
}

std::vector<NodeId> Tape::inject_dependencies() const {
    const std::size_t n = nodes_.size();
    std::vector<std::vector<NodeId>> succ(n);
    std::vector<std::size_t> indegree(n, 0);
    auto add_edge = [&](NodeId from, NodeId to) {
        succ[from].push_back(to);
        ++indegree[to];
    };

    std::optional<NodeId> prev_comm;
    for (NodeId id = 0; id < n; ++id) {
        std::vector<NodeId> preds = nodes_[id].inputs;
        std::sort(preds.begin(), preds.end());
        preds.erase(std::unique(preds.begin(), preds.end()), preds.end());
        for (NodeId p : preds) add_edge(p, id);
        if (nodes_[id].comm) {
            if (schedule_.ghost_dependencies && prev_comm &&
                !std::binary_search(preds.begin(), preds.end(), *prev_comm)) {
                add_edge(*prev_comm, id);
            }
            prev_comm = id;
        }
    }

    std::deque<NodeId> ready;
    for (NodeId id = 0; id < n; ++id) {
        if (indegree[id] == 0) ready.push_back(id);
    }
    std::mt19937_64 rng(schedule_.seed);
    std::vector<NodeId> order;
    order.reserve(n);
    while (!ready.empty()) {
        NodeId next;
        switch (schedule_.policy) {
            case SchedulePolicy::kFifo:
                next = ready.front();
                ready.pop_front();
                break;
            case SchedulePolicy::kLifo:
                next = ready.back();
                ready.pop_back();
                break;
            case SchedulePolicy::kRandom: {
                const auto pick = static_cast<std::size_t>(rng() % ready.size());
                std::swap(ready[pick], ready.back());
                next = ready.back();
                ready.pop_back();
                break;
            }
        }
        order.push_back(next);
        for (NodeId s : succ[next]) {
            if (--indegree[s] == 0) ready.push_back(s);
        }
    }
    if (order.size() != n) throw Error("inject_dependencies: cycle in tape");
    return order;
}

double Tape::forward() {
    const NodeId loss_id = loss();
    order_ = inject_dependencies();
    std::vector<const Tensor*> in;
    for (NodeId id : order_) {
        Node& nd = nodes_[id];
        in.clear();
        for (NodeId i : nd.inputs) in.push_back(&nodes_[i].value);
        try {
            nd.value = nd.op->forward(in);
        } catch (const Aborted&) {
            throw;
        } catch (const DeadlockError&) {
            throw;
        } catch (const Error&) {
            rethrow_with_context(id, nd.op->name());
        }
    }
    forward_done_ = true;
    backward_done_ = false;
    const Tensor& l = nodes_[loss_id].value;
    if (l.size() != 1) throw InvalidArgument("loss node must be scalar");
    return l[0];
}

void Tape::backward() {
    if (!forward_done_) throw InvalidArgument("backward called on a tape that has not run forward");
    const NodeId loss_id = loss();
    if (nodes_[loss_id].value.size() != 1) throw InvalidArgument("loss node must be scalar");

    for (auto& nd : nodes_) nd.adjoint.assign(nd.value.size(), 0.0);
    nodes_[loss_id].adjoint[0] = 1.0;

    const std::string& fault = testing::adjoint_fault();
    std::vector<const Tensor*> in;
    std::vector<Tensor*> slots;
    std::vector<Tensor> scratch;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        Node& nd = nodes_[*it];
        if (nd.inputs.empty() && !nd.comm) continue;
        in.clear();
        slots.clear();
        for (NodeId i : nd.inputs) in.push_back(&nodes_[i].value);
        const bool faulty = !fault.empty() && nd.op->name() == fault;
        if (faulty) {
            scratch.clear();
            for (NodeId i : nd.inputs) scratch.emplace_back(nodes_[i].value.size(), 0.0);
            for (auto& s : scratch) slots.push_back(&s);
        } else {
            for (NodeId i : nd.inputs) slots.push_back(&nodes_[i].adjoint);
        }
        try {
            nd.op->backward(in, nd.value, nd.adjoint, slots);
        } catch (const Aborted&) {
            throw;
        } catch (const DeadlockError&) {
            throw;
        } catch (const Error&) {
            rethrow_with_context(*it, nd.op->name());
        }
        if (faulty) {
            for (std::size_t k = 0; k < nd.inputs.size(); ++k) {
                auto& dst = nodes_[nd.inputs[k]].adjoint;
                for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += (1.0 + 1e-3) * scratch[k][j];
            }
        }
    }
    backward_done_ = true;
}

double Tape::evaluate_with_gradient() {
    const double l = forward();
    backward();
    return l;
}

void Tape::dump(std::ostream& os) const {
    for (NodeId id = 0; id < nodes_.size(); ++id) {
        const Node& nd = nodes_[id];
        os << id << ' ' << nd.op->name() << " comm=" << (nd.comm ? 1 : 0) << " inputs=[";
        for (std::size_t k = 0; k < nd.inputs.size(); ++k) {
            if (k) os << ',';
            os << nd.inputs[k];
        }
        os << "] size=" << nd.value.size() << '\n';
    }
}

}  // namespace distad::graph
