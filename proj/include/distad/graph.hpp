#pragma once

// Reverse-mode AD tape. Communication operations are ordinary nodes flagged
// `is_comm`; the scheduler threads a total order through them so every rank
// issues its communication in the same sequence, forward and backward.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "distad/comm.hpp"

namespace distad::graph {

using NodeId = std::size_t;
using Tensor = std::vector<double>;

class Op {
public:
    virtual ~Op() = default;

    virtual std::string name() const = 0;
    virtual bool is_comm() const { return false; }

    virtual Tensor forward(std::span<const Tensor* const> inputs) = 0;

    // Accumulates (+=) into `in_adjoints`, which are zero-initialised and
    // shaped like the inputs. Slots may alias when an input is repeated.
    virtual void backward(std::span<const Tensor* const> inputs, const Tensor& output,
                          const Tensor& out_adjoint, std::span<Tensor* const> in_adjoints) = 0;
};

enum class SchedulePolicy {
    kFifo,    // ready nodes in discovery order
    kLifo,    // most recently readied first
    kRandom,  // seeded shuffle; models a concurrent executor
};

struct ScheduleOptions {
    SchedulePolicy policy = SchedulePolicy::kFifo;
    std::uint64_t seed = 0;
    // Ghost edges chaining comm nodes in creation order. Disabling them is
    // only useful to demonstrate the mismatch they prevent.
    bool ghost_dependencies = true;
};

class Tape {
public:
    Tape() = default;
    explicit Tape(comm::Communicator& comm) : comm_(&comm) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    NodeId record(std::unique_ptr<Op> op, std::vector<NodeId> inputs);

    NodeId constant(Tensor value);
    NodeId parameter(Tensor value);
    void set_parameter(NodeId id, Tensor value);

    void set_loss(NodeId id);
    NodeId loss() const;

    void set_schedule(ScheduleOptions options) { schedule_ = options; }

    // Topological order with the ghost dependency comm_k -> comm_{k+1}
    // (creation order) added; non-comm nodes are placed by the policy.
    std::vector<NodeId> inject_dependencies() const;

    double forward();
    void backward();

    // Convenience: forward + backward, returns the loss.
    double evaluate_with_gradient();

    std::size_t size() const noexcept { return nodes_.size(); }
    bool is_comm(NodeId id) const { return node(id).comm; }
    // Comm nodes recorded so far; equal on all ranks of a consistent graph.
    std::size_t comm_count() const noexcept { return comm_count_; }
    std::string op_name(NodeId id) const { return node(id).op->name(); }
    const std::vector<NodeId>& inputs(NodeId id) const { return node(id).inputs; }
    const Tensor& value(NodeId id) const;
    const Tensor& adjoint(NodeId id) const;
    const std::vector<NodeId>& parameters() const noexcept { return params_; }
    const std::vector<NodeId>& execution_order() const noexcept { return order_; }

    bool has_comm() const noexcept { return comm_ != nullptr; }
    comm::Communicator& comm() const;

    // One line per node: `<id> <op> comm=<0|1> inputs=[..] size=<n>`.
    void dump(std::ostream& os) const;

private:
    struct Node {
        std::unique_ptr<Op> op;
        std::vector<NodeId> inputs;
        bool comm = false;
        Tensor value;
        Tensor adjoint;
    };

    const Node& node(NodeId id) const;
    Node& node(NodeId id);

    comm::Communicator* comm_ = nullptr;
    std::vector<Node> nodes_;
    std::vector<NodeId> params_;
    std::size_t comm_count_ = 0;
    std::vector<NodeId> order_;
    NodeId loss_ = static_cast<NodeId>(-1);
    ScheduleOptions schedule_{};
    bool forward_done_ = false;
    bool backward_done_ = false;
};

// Basic differentiable elementwise and reduction ops.
namespace ops {

NodeId add(Tape& t, NodeId a, NodeId b);
NodeId sub(Tape& t, NodeId a, NodeId b);
NodeId mul(Tape& t, NodeId a, NodeId b);
NodeId scale(Tape& t, NodeId a, double alpha);
NodeId powi(Tape& t, NodeId a, int exponent);
NodeId square(Tape& t, NodeId a);
NodeId sum(Tape& t, NodeId a);
NodeId add_n(Tape& t, std::vector<NodeId> terms);
NodeId dot(Tape& t, NodeId a, NodeId b);
NodeId slice(Tape& t, NodeId a, std::size_t offset, std::size_t length);

}  // namespace ops

namespace testing {

// Negative-control hook: every backward of an op with this name is scaled by
// (1 + 1e-3). Set before spawning ranks; an empty name disables it.
void set_adjoint_fault(std::string op_name);
const std::string& adjoint_fault();

}  // namespace testing

}  // namespace distad::graph
