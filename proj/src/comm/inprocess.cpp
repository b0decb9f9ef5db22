#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <exception>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "distad/comm.hpp"

namespace distad::comm {

namespace {

std::atomic<std::uint64_t> g_watchdog_fires{0};

using Clock = std::chrono::steady_clock;

std::size_t payload_length(const ConstBuffer& b) {
    return std::visit([](auto s) { return s.size(); }, b);
}

std::size_t payload_length(const Payload& p) {
    return std::visit([](const auto& v) { return v.size(); }, p);
}

const char* type_name(std::size_t index) { return index == 0 ? "f64" : "i64"; }

Payload to_payload(const ConstBuffer& b) {
    return std::visit(
        [](auto s) -> Payload {
            using T = std::remove_const_t<typename decltype(s)::element_type>;
            return std::vector<T>(s.begin(), s.end());
        },
        b);
}

struct Message {
    int src;
    int tag;
    Payload data;
};

struct Contribution {
    Communicator::Kind kind;
    int root;
    Payload data;
};

struct Slot {
    std::vector<std::optional<Contribution>> parts;
    int arrived = 0;
    int departed = 0;
};

struct RankState {
    bool finished = false;
    bool blocked = false;
    std::string last_op = "(none)";
};

// Shared state of one in-process run. A single mutex guards everything; the
// rank counts this backend targets keep contention irrelevant.
class World {
public:
    explicit World(int size) : size_(size), inbox_(size), ranks_(size) {}

    int size() const noexcept { return size_; }

    std::mutex mu;
    std::condition_variable cv;

    std::vector<std::deque<Message>>& inbox() { return inbox_; }
    std::map<std::uint64_t, Slot>& slots() { return slots_; }
    std::vector<RankState>& ranks() { return ranks_; }

    void bump() {
        ++progress_;
        cv.notify_all();
    }
    std::uint64_t progress() const noexcept { return progress_; }

    void check_alive() const {
        if (aborted_) throw Aborted(abort_reason_);
    }

    void abort(std::string reason) {
        if (aborted_) return;
        aborted_ = true;
        abort_reason_ = std::move(reason);
        cv.notify_all();
    }
    bool aborted() const noexcept { return aborted_; }

    template <class Pred>
    void block_until(std::unique_lock<std::mutex>& lk, int rank, Pred pred) {
        check_alive();
        if (pred()) return;
        ranks_[rank].blocked = true;
        cv.wait(lk, [&] { return aborted_ || pred(); });
        ranks_[rank].blocked = false;
        check_alive();
    }

    std::string diagnose(std::chrono::milliseconds stalled) const {
        std::ostringstream os;
        os << "deadlock: no communication progress for " << stalled.count() << " ms;";
        for (int r = 0; r < size_; ++r) {
            const auto& st = ranks_[r];
            os << " rank " << r << ' ';
            if (st.finished)
                os << "finished";
            else if (st.blocked)
                os << "blocked in " << st.last_op;
            else
                os << "running (last " << st.last_op << ')';
            os << ';';
        }
        for (int dst = 0; dst < size_; ++dst) {
            for (const auto& m : inbox_[dst]) {
                os << " unmatched message " << m.src << "->" << dst << " tag " << m.tag << ';';
            }
        }
        return os.str();
    }

private:
    int size_;
    std::vector<std::deque<Message>> inbox_;
    std::map<std::uint64_t, Slot> slots_;
    std::vector<RankState> ranks_;
    std::uint64_t progress_ = 0;
    bool aborted_ = false;
    std::string abort_reason_;
};

std::string describe(Communicator::Kind kind, int root, std::size_t len, std::size_t type) {
    std::ostringstream os;
    os << kind_name(kind) << "(root=" << root << ", len=" << len << ", " << type_name(type) << ')';
    return os.str();
}

// Returns an empty string when every rank entered the same collective with
// compatible arguments.
std::string validate(const Slot& slot, std::uint64_t seq, int size) {
    const auto& first = *slot.parts[0];
    std::ostringstream os;
    os << "collective #" << seq << " mismatch:";
    bool bad = false;
    for (int r = 1; r < size; ++r) {
        const auto& c = *slot.parts[r];
        if (c.kind != first.kind || c.root != first.root || c.data.index() != first.data.index()) {
            bad = true;
        }
    }
    const auto kind = first.kind;
    if (!bad) {
        if (kind == Communicator::Kind::kBcast || kind == Communicator::Kind::kReduceSum ||
            kind == Communicator::Kind::kGather) {
            for (int r = 1; r < size; ++r) {
                if (payload_length(slot.parts[r]->data) != payload_length(first.data)) bad = true;
            }
        } else if (kind == Communicator::Kind::kScatter) {
            const auto n = payload_length(slot.parts[first.root]->data);
            if (n % static_cast<std::size_t>(size) != 0) {
                os << " scatter length " << n << " not divisible by " << size;
                return os.str();
            }
        }
    }
    if (first.root < 0 || first.root >= size) {
        os << " root " << first.root << " out of range";
        return os.str();
    }
    if (!bad) return {};
    for (int r = 0; r < size; ++r) {
        const auto& c = *slot.parts[r];
        os << " rank " << r << " entered "
           << describe(c.kind, c.root, payload_length(c.data), c.data.index()) << ';';
    }
    return os.str();
}

template <class T>
Payload combine_typed(const Slot& slot, Communicator::Kind kind, int root, int rank, int size) {
    auto part = [&](int r) -> const std::vector<T>& { return std::get<std::vector<T>>(slot.parts[r]->data); };
    switch (kind) {
        case Communicator::Kind::kBcast:
            return part(root);
        case Communicator::Kind::kReduceSum: {
            if (rank != root) return part(rank);
            std::vector<T> acc = part(0);
            for (int r = 1; r < size; ++r) {
                const auto& p = part(r);
                for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p[i];
            }
            return acc;
        }
        case Communicator::Kind::kGather:
            if (rank != root) return std::vector<T>{};
            [[fallthrough]];
        case Communicator::Kind::kAllgatherv: {
            std::vector<T> out;
            for (int r = 0; r < size; ++r) out.insert(out.end(), part(r).begin(), part(r).end());
            return out;
        }
        case Communicator::Kind::kScatter: {
            const auto& full = part(root);
            const std::size_t m = full.size() / static_cast<std::size_t>(size);
            auto first = full.begin() + static_cast<std::ptrdiff_t>(m * rank);
            return std::vector<T>(first, first + static_cast<std::ptrdiff_t>(m));
        }
        case Communicator::Kind::kBarrier:
            return std::vector<T>{};
    }
    return std::vector<T>{};
}

class InProcessCommunicator final : public Communicator {
public:
    InProcessCommunicator(World& world, int rank) : world_(world), rank_(rank) {}

    int rank() const noexcept override { return rank_; }
    int size() const noexcept override { return world_.size(); }

    void wait_all(std::span<PendingTransfer> transfers) override {
        for (auto& t : transfers) {
            if (t.done()) continue;
            std::unique_lock lk(world_.mu);
            auto& box = world_.inbox()[rank_];
            auto match = box.end();
            {
                std::ostringstream os;
                os << "irecv(peer=" << t.peer() << ", tag=" << t.tag() << ")";
                world_.ranks()[rank_].last_op = os.str();
            }
            world_.block_until(lk, rank_, [&] {
                match = std::find_if(box.begin(), box.end(), [&](const Message& m) {
                    return m.src == t.peer() && m.tag == t.tag();
                });
                return match != box.end();
            });
            Message msg = std::move(*match);
            box.erase(match);
            world_.bump();
            lk.unlock();
            deliver(msg, t);
            t.mark_done();
        }
    }

protected:
    Payload collective(Kind kind, int root, ConstBuffer contribution) override {
        std::unique_lock lk(world_.mu);
        world_.check_alive();
        const std::uint64_t seq = next_seq_++;
        world_.ranks()[rank_].last_op =
            "collective #" + std::to_string(seq) + ' ' +
            describe(kind, root, payload_length(contribution), contribution.index());
        auto& slot = world_.slots()[seq];
        if (slot.parts.empty()) slot.parts.resize(static_cast<std::size_t>(size()));
        slot.parts[rank_] = Contribution{kind, root, to_payload(contribution)};
        ++slot.arrived;
        world_.bump();
        world_.block_until(lk, rank_, [&] { return slot.arrived == size(); });

        std::string error = validate(slot, seq, size());
        Payload result;
        if (error.empty()) {
            result = slot.parts[0]->data.index() == 0
                         ? combine_typed<double>(slot, kind, root, rank_, size())
                         : combine_typed<std::int64_t>(slot, kind, root, rank_, size());
        }
        if (++slot.departed == size()) world_.slots().erase(seq);
        world_.bump();
        if (!error.empty()) throw ProtocolError(error);
        return result;
    }

    PendingTransfer post_send(ConstBuffer buf, int peer, int tag) override {
        check_peer(peer);
        std::unique_lock lk(world_.mu);
        world_.check_alive();
        std::ostringstream os;
        os << "isend(peer=" << peer << ", tag=" << tag << ")";
        world_.ranks()[rank_].last_op = os.str();
        world_.inbox()[peer].push_back(Message{rank_, tag, to_payload(buf)});
        world_.bump();
        return PendingTransfer(TransferKind::kSend, peer, tag, MutableBuffer{std::span<double>{}}, true);
    }

    PendingTransfer post_recv(MutableBuffer buf, int peer, int tag) override {
        check_peer(peer);
        return PendingTransfer(TransferKind::kRecv, peer, tag, buf, false);
    }

private:
    void check_peer(int peer) const {
        if (peer < 0 || peer >= size()) {
            throw InvalidArgument("peer rank " + std::to_string(peer) + " out of range [0, " +
                                  std::to_string(size()) + ")");
        }
    }

    void deliver(const Message& msg, const PendingTransfer& t) const {
        const auto dst = t.buffer();
        const std::size_t want = std::visit([](auto s) { return s.size(); }, dst);
        const std::size_t got = payload_length(msg.data);
        if (msg.data.index() != dst.index() || want != got) {
            std::ostringstream os;
            os << "rank " << rank_ << " irecv from " << t.peer() << " tag " << t.tag() << " expected "
               << want << ' ' << type_name(dst.index()) << ", got " << got << ' '
               << type_name(msg.data.index());
            throw ProtocolError(os.str());
        }
        std::visit(
            [&](auto s) {
                using T = typename decltype(s)::element_type;
                const auto& v = std::get<std::vector<T>>(msg.data);
                std::copy(v.begin(), v.end(), s.begin());
            },
            dst);
    }

    World& world_;
    int rank_;
    std::uint64_t next_seq_ = 0;
};

}  // namespace

std::string_view kind_name(Communicator::Kind kind) noexcept {
    switch (kind) {
        case Communicator::Kind::kBcast: return "bcast";
        case Communicator::Kind::kReduceSum: return "reduce_sum";
        case Communicator::Kind::kGather: return "gather";
        case Communicator::Kind::kScatter: return "scatter";
        case Communicator::Kind::kAllgatherv: return "allgatherv";
        case Communicator::Kind::kBarrier: return "barrier";
    }
    return "unknown";
}

void allreduce_sum(Communicator& comm, std::span<double> buf) {
    comm.reduce_sum(buf, 0);
    comm.bcast(buf, 0);
}

double allreduce_sum(Communicator& comm, double value) {
    allreduce_sum(comm, std::span<double>(&value, 1));
    return value;
}

std::uint64_t watchdog_fire_count() noexcept { return g_watchdog_fires.load(); }

std::vector<int> spawn_ranks(int size, const RankProgram& program, SpawnOptions options) {
    if (size < 1) throw InvalidArgument("spawn_ranks: size must be >= 1");

    World world(size);
    std::vector<int> statuses(static_cast<std::size_t>(size), 0);
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(size));
    std::optional<int> first_failure;
    std::optional<std::string> deadlock;

    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(size));
    for (int r = 0; r < size; ++r) {
        threads.emplace_back([&, r] {
            InProcessCommunicator comm(world, r);
            try {
                statuses[r] = program(comm);
            } catch (const Aborted&) {
                errors[r] = std::current_exception();
            } catch (const std::exception& e) {
                errors[r] = std::current_exception();
                std::lock_guard lk(world.mu);
                if (!first_failure) first_failure = r;
                world.abort("rank " + std::to_string(r) + " failed: " + e.what());
            } catch (...) {
                errors[r] = std::current_exception();
                std::lock_guard lk(world.mu);
                if (!first_failure) first_failure = r;
                world.abort("rank " + std::to_string(r) + " failed");
            }
            std::lock_guard lk(world.mu);
            world.ranks()[r].finished = true;
            world.ranks()[r].blocked = false;
            world.bump();
        });
    }

    {
        std::unique_lock lk(world.mu);
        const auto poll = std::clamp(options.watchdog / 10, std::chrono::milliseconds(1),
                                     std::chrono::milliseconds(100));
        std::optional<std::uint64_t> stall_progress;
        Clock::time_point stall_start;
        for (;;) {
            const auto& ranks = world.ranks();
            bool all_finished = true;
            bool all_blocked = true;
            for (const auto& st : ranks) {
                if (!st.finished) {
                    all_finished = false;
                    if (!st.blocked) all_blocked = false;
                }
            }
            if (all_finished) break;
            if (all_blocked && !world.aborted()) {
                const auto now = Clock::now();
                if (stall_progress != world.progress()) {
                    stall_progress = world.progress();
                    stall_start = now;
                } else if (now - stall_start >= options.watchdog) {
                    deadlock = world.diagnose(
                        std::chrono::duration_cast<std::chrono::milliseconds>(now - stall_start));
                    world.abort(*deadlock);
                    g_watchdog_fires.fetch_add(1);
                }
            } else {
                stall_progress.reset();
            }
            world.cv.wait_for(lk, poll);
        }
    }
    for (auto& t : threads) t.join();

    if (deadlock) throw DeadlockError(*deadlock);
    if (first_failure) std::rethrow_exception(errors[*first_failure]);
    return statuses;
}

int ranks_from_env(int fallback) {
    if (const char* v = std::getenv("DISTAD_RANKS")) {
        const int n = std::atoi(v);
        if (n >= 1) return n;
    }
    return fallback;
}

std::chrono::milliseconds watchdog_from_env(std::chrono::milliseconds fallback) {
    if (const char* v = std::getenv("DISTAD_WATCHDOG_MS")) {
        const long n = std::atol(v);
        if (n > 0) return std::chrono::milliseconds(n);
    }
    return fallback;
}

}  // namespace distad::comm
