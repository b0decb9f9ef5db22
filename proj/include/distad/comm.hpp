#pragma once

// Rank abstraction and raw (non-differentiable) message passing.
//
// Communicator is the only channel between ranks. The in-process backend
// started by spawn_ranks runs every rank on its own thread; upper layers only
// ever see the abstract interface, so another transport can be slotted in.

#include <algorithm>
#include <chrono>
#include <concepts>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "distad/error.hpp"

namespace distad::comm {

template <class T>
concept Scalar = std::same_as<T, double> || std::same_as<T, std::int64_t>;

using Payload = std::variant<std::vector<double>, std::vector<std::int64_t>>;
using MutableBuffer = std::variant<std::span<double>, std::span<std::int64_t>>;
using ConstBuffer = std::variant<std::span<const double>, std::span<const std::int64_t>>;

enum class TransferKind { kSend, kRecv };

// Handle for a nonblocking send or receive. Receive buffers must not be read
// before wait_all completes the transfer.
class PendingTransfer {
public:
    PendingTransfer(TransferKind kind, int peer, int tag, MutableBuffer buffer, bool done)
        : kind_(kind), peer_(peer), tag_(tag), buffer_(buffer), done_(done) {}

    TransferKind kind() const noexcept { return kind_; }
    int peer() const noexcept { return peer_; }
    int tag() const noexcept { return tag_; }
    bool done() const noexcept { return done_; }

    MutableBuffer buffer() const noexcept { return buffer_; }
    void mark_done() noexcept { done_ = true; }

private:
    TransferKind kind_;
    int peer_;
    int tag_;
    MutableBuffer buffer_;
    bool done_;
};

class Communicator {
public:
    virtual ~Communicator() = default;

    virtual int rank() const noexcept = 0;
    virtual int size() const noexcept = 0;

    // Collectives. Every rank must enter them in the same order; a mismatch
    // in kind, root or length raises ProtocolError on all ranks.
    template <Scalar T>
    void bcast(std::span<T> buf, int root) {
        auto out = collective(Kind::kBcast, root, ConstBuffer{std::span<const T>(buf)});
        copy_into(out, buf);
    }

    // Root receives the element-wise sum, accumulated in ascending rank
    // order; other ranks keep their buffer unchanged.
    template <Scalar T>
    void reduce_sum(std::span<T> buf, int root) {
        auto out = collective(Kind::kReduceSum, root, ConstBuffer{std::span<const T>(buf)});
        if (rank() == root) copy_into(out, buf);
    }

    template <Scalar T>
    std::vector<T> gather(std::span<const T> local, int root) {
        return std::get<std::vector<T>>(collective(Kind::kGather, root, ConstBuffer{local}));
    }

    // `full` is only read on root; its length must be divisible by size().
    template <Scalar T>
    std::vector<T> scatter(std::span<const T> full, int root) {
        return std::get<std::vector<T>>(collective(Kind::kScatter, root, ConstBuffer{full}));
    }

    // Rank-ordered concatenation of arbitrary-length pieces, on every rank.
    template <Scalar T>
    std::vector<T> allgatherv(std::span<const T> local) {
        return std::get<std::vector<T>>(collective(Kind::kAllgatherv, 0, ConstBuffer{local}));
    }

    void barrier() { collective(Kind::kBarrier, 0, ConstBuffer{std::span<const double>{}}); }

    // Point to point. Sends are buffered eagerly, so the source buffer may be
    // reused immediately, but the handle still has to go through wait_all.
    template <Scalar T>
    PendingTransfer isend(std::span<const T> buf, int peer, int tag) {
        return post_send(ConstBuffer{buf}, peer, tag);
    }

    template <Scalar T>
    PendingTransfer irecv(std::span<T> buf, int peer, int tag) {
        return post_recv(MutableBuffer{buf}, peer, tag);
    }

    virtual void wait_all(std::span<PendingTransfer> transfers) = 0;

    enum class Kind : int { kBcast, kReduceSum, kGather, kScatter, kAllgatherv, kBarrier };

protected:
    virtual Payload collective(Kind kind, int root, ConstBuffer contribution) = 0;
    virtual PendingTransfer post_send(ConstBuffer buf, int peer, int tag) = 0;
    virtual PendingTransfer post_recv(MutableBuffer buf, int peer, int tag) = 0;

private:
    template <Scalar T>
    static void copy_into(const Payload& from, std::span<T> to) {
        const auto& v = std::get<std::vector<T>>(from);
        std::copy(v.begin(), v.end(), to.begin());
    }
};

std::string_view kind_name(Communicator::Kind kind) noexcept;

// Global sum visible on all ranks: reduce to rank 0, then broadcast.
void allreduce_sum(Communicator& comm, std::span<double> buf);
double allreduce_sum(Communicator& comm, double value);

// Non-differentiable array synchronisation from root; a thin alias of bcast.
inline void sync(Communicator& comm, std::span<double> buf, int root = 0) {
    comm.bcast(buf, root);
}

struct SpawnOptions {
    // A deadlock is declared once every live rank has been blocked without
    // any progress for this long.
    std::chrono::milliseconds watchdog{30000};
};

using RankProgram = std::function<int(Communicator&)>;

// Runs `program` once per rank on the in-process backend and returns the
// per-rank exit statuses. The first rank failure is rethrown after the other
// ranks have been cancelled; a stall raises DeadlockError naming the blocked
// ranks and their last posted operation.
std::vector<int> spawn_ranks(int size, const RankProgram& program, SpawnOptions options = {});

// Number of times the deadlock watchdog has fired in this process.
std::uint64_t watchdog_fire_count() noexcept;

// Rank count from DISTAD_RANKS, or `fallback` when unset.
int ranks_from_env(int fallback);

// Watchdog timeout from DISTAD_WATCHDOG_MS, or `fallback` when unset.
std::chrono::milliseconds watchdog_from_env(std::chrono::milliseconds fallback);

}  // namespace distad::comm
