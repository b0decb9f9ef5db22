#include <algorithm>

#include "distad/collectives.hpp"

namespace distad::collectives {

namespace {

using graph::Op;
using graph::Tensor;

constexpr int kBackwardTagOffset = 1 << 29;
constexpr int kHaloTagBase = 1 << 25;

void check_tag(int tag) {
    if (tag < 0 || tag >= kMaxUserTag) {
        throw InvalidArgument("tag " + std::to_string(tag) + " outside [0, " +
                              std::to_string(kMaxUserTag) + ")");
    }
}

void accumulate(Tensor& dst, std::span<const double> src) {
    if (dst.size() != src.size()) {
        throw InvalidArgument("adjoint size mismatch " + std::to_string(dst.size()) + " vs " +
                              std::to_string(src.size()));
    }
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

class CommOp : public Op {
public:
    explicit CommOp(comm::Communicator& comm) : comm_(comm) {}
    bool is_comm() const override { return true; }

protected:
    comm::Communicator& comm_;
};

class Bcast final : public CommOp {
public:
    Bcast(comm::Communicator& c, int root) : CommOp(c), root_(root) {}
    std::string name() const override { return "mpi_bcast"; }

    Tensor forward(std::span<const Tensor* const> in) override {
        Tensor out(*in[0]);
        comm_.bcast(std::span<double>(out), root_);
        return out;
    }

    void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> adj) override {
        Tensor buf(g);
        comm_.reduce_sum(std::span<double>(buf), root_);
        if (comm_.rank() == root_) accumulate(*adj[0], buf);
    }

private:
    int root_;
};

class Sum final : public CommOp {
public:
    Sum(comm::Communicator& c, int root) : CommOp(c), root_(root) {}
    std::string name() const override { return "mpi_sum"; }

    Tensor forward(std::span<const Tensor* const> in) override {
        Tensor out(*in[0]);
        comm_.reduce_sum(std::span<double>(out), root_);
        if (comm_.rank() != root_) std::fill(out.begin(), out.end(), 0.0);
        return out;
    }

    void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> adj) override {
        Tensor buf(g);
        comm_.bcast(std::span<double>(buf), root_);
        accumulate(*adj[0], buf);
    }

private:
    int root_;
};

class Gather final : public CommOp {
public:
    Gather(comm::Communicator& c, int root) : CommOp(c), root_(root) {}
    std::string name() const override { return "mpi_gather"; }

    Tensor forward(std::span<const Tensor* const> in) override {
        return comm_.gather(std::span<const double>(*in[0]), root_);
    }

    void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> adj) override {
        accumulate(*adj[0], comm_.scatter(std::span<const double>(g), root_));
    }

private:
    int root_;
};

class Send final : public CommOp {
public:
    Send(comm::Communicator& c, int peer, int tag) : CommOp(c), peer_(peer), tag_(tag) {}
    std::string name() const override { return "mpi_send"; }

    Tensor forward(std::span<const Tensor* const> in) override {
        std::array<comm::PendingTransfer, 1> t{comm_.isend(std::span<const double>(*in[0]), peer_, tag_)};
        comm_.wait_all(t);
        return {};
    }

    void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor&,
                  std::span<Tensor* const> adj) override {
        Tensor buf(in[0]->size());
        std::array<comm::PendingTransfer, 1> t{
            comm_.irecv(std::span<double>(buf), peer_, tag_ + kBackwardTagOffset)};
        comm_.wait_all(t);
        accumulate(*adj[0], buf);
    }

private:
    int peer_;
    int tag_;
};

class Recv final : public CommOp {
public:
    Recv(comm::Communicator& c, std::size_t size, int peer, int tag)
        : CommOp(c), size_(size), peer_(peer), tag_(tag) {}
    std::string name() const override { return "mpi_recv"; }

    Tensor forward(std::span<const Tensor* const>) override {
        Tensor out(size_);
        std::array<comm::PendingTransfer, 1> t{comm_.irecv(std::span<double>(out), peer_, tag_)};
        comm_.wait_all(t);
        return out;
    }

    void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                  std::span<Tensor* const>) override {
        std::array<comm::PendingTransfer, 1> t{
            comm_.isend(std::span<const double>(g), peer_, tag_ + kBackwardTagOffset)};
        comm_.wait_all(t);
    }

private:
    std::size_t size_;
    int peer_;
    int tag_;
};

class SendRecv final : public CommOp {
public:
    SendRecv(comm::Communicator& c, int dest, int src, int tag)
        : CommOp(c), dest_(dest), src_(src), tag_(tag) {}
    std::string name() const override { return "mpi_sendrecv"; }

    Tensor forward(std::span<const Tensor* const> in) override {
        Tensor out(in[0]->size());
        std::array<comm::PendingTransfer, 2> t{
            comm_.irecv(std::span<double>(out), src_, tag_),
            comm_.isend(std::span<const double>(*in[0]), dest_, tag_)};
        comm_.wait_all(t);
        return out;
    }

    void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> adj) override {
        Tensor buf(in[0]->size());
        std::array<comm::PendingTransfer, 2> t{
            comm_.irecv(std::span<double>(buf), dest_, tag_ + kBackwardTagOffset),
            comm_.isend(std::span<const double>(g), src_, tag_ + kBackwardTagOffset)};
        comm_.wait_all(t);
        accumulate(*adj[0], buf);
    }

private:
    int dest_;
    int src_;
    int tag_;
};

constexpr std::array<Side, 4> kSides{Side::kLeft, Side::kRight, Side::kDown, Side::kUp};

Side opposite(Side s) {
    switch (s) {
        case Side::kLeft: return Side::kRight;
        case Side::kRight: return Side::kLeft;
        case Side::kDown: return Side::kUp;
        case Side::kUp: return Side::kDown;
    }
    return s;
}

// Frame indices of the owned boundary strip (ghost = false) or the ghost
// strip (ghost = true) on side s, in the order shared by both partners.
std::vector<std::size_t> strip(const HaloSpec& h, Side s, bool ghost) {
    const auto d = static_cast<std::ptrdiff_t>(h.depth);
    const auto nx = static_cast<std::ptrdiff_t>(h.nx);
    const auto ny = static_cast<std::ptrdiff_t>(h.ny);
    std::vector<std::size_t> idx;
    switch (s) {
        case Side::kLeft:
        case Side::kRight: {
            const std::ptrdiff_t i0 = s == Side::kLeft ? (ghost ? -d : 0) : (ghost ? nx : nx - d);
            for (std::ptrdiff_t j = 0; j < ny; ++j)
                for (std::ptrdiff_t k = 0; k < d; ++k) idx.push_back(h.index(i0 + k, j));
            break;
        }
        case Side::kDown:
        case Side::kUp: {
            const std::ptrdiff_t j0 = s == Side::kDown ? (ghost ? -d : 0) : (ghost ? ny : ny - d);
            for (std::ptrdiff_t k = 0; k < d; ++k)
                for (std::ptrdiff_t i = 0; i < nx; ++i) idx.push_back(h.index(i, j0 + k));
            break;
        }
    }
    return idx;
}

int halo_tag(int tag_base, Side sender_side) { return tag_base + static_cast<int>(sender_side); }

class HaloExchange final : public CommOp {
public:
    HaloExchange(comm::Communicator& c, HaloSpec spec, int tag_base)
        : CommOp(c), spec_(spec), tag_base_(tag_base) {}
    std::string name() const override { return "halo_exchange"; }

    Tensor forward(std::span<const Tensor* const> in) override {
        if (!checked_) {
            check_symmetric(comm_, spec_);
            checked_ = true;
        }
        Tensor out(spec_.frame_size());
        halo_fill(comm_, spec_, *in[0], out, tag_base_);
        return out;
    }

    void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> adj) override {
        halo_fill_adjoint(comm_, spec_, g, *adj[0], tag_base_);
    }

private:
    HaloSpec spec_;
    int tag_base_;
    bool checked_ = false;
};

class PadFrame final : public Op {
public:
    PadFrame(HaloSpec spec, bool extract) : spec_(spec), extract_(extract) {}
    std::string name() const override { return extract_ ? "interior_of" : "pad_frame"; }

    Tensor forward(std::span<const Tensor* const> in) override {
        const Tensor& x = *in[0];
        const std::size_t want = extract_ ? spec_.frame_size() : spec_.nx * spec_.ny;
        if (x.size() != want) {
            throw InvalidArgument(name() + ": expected " + std::to_string(want) + " values, got " +
                                  std::to_string(x.size()));
        }
        Tensor out(extract_ ? spec_.nx * spec_.ny : spec_.frame_size(), 0.0);
        for_each_cell([&](std::size_t interior, std::size_t frame) {
            if (extract_)
                out[interior] = x[frame];
            else
                out[frame] = x[interior];
        });
        return out;
    }

    void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                  std::span<Tensor* const> adj) override {
        Tensor& a = *adj[0];
        for_each_cell([&](std::size_t interior, std::size_t frame) {
            if (extract_)
                a[frame] += g[interior];
            else
                a[interior] += g[frame];
        });
    }

private:
    template <class F>
    void for_each_cell(F&& f) const {
        for (std::size_t j = 0; j < spec_.ny; ++j)
            for (std::size_t i = 0; i < spec_.nx; ++i)
                f(j * spec_.nx + i, spec_.index(static_cast<std::ptrdiff_t>(i), static_cast<std::ptrdiff_t>(j)));
    }

    HaloSpec spec_;
    bool extract_;
};

}  // namespace

NodeId mpi_bcast(Tape& t, NodeId x, int root) {
    return t.record(std::make_unique<Bcast>(t.comm(), root), {x});
}

NodeId mpi_sum(Tape& t, NodeId x, int root) {
    return t.record(std::make_unique<Sum>(t.comm(), root), {x});
}

NodeId mpi_gather(Tape& t, NodeId x, int root) {
    return t.record(std::make_unique<Gather>(t.comm(), root), {x});
}

NodeId mpi_send(Tape& t, NodeId x, int peer, int tag) {
    check_tag(tag);
    return t.record(std::make_unique<Send>(t.comm(), peer, tag), {x});
}

NodeId mpi_recv(Tape& t, std::size_t size, int peer, int tag) {
    check_tag(tag);
    return t.record(std::make_unique<Recv>(t.comm(), size, peer, tag), {});
}

NodeId mpi_sendrecv(Tape& t, NodeId x, int dest, int src, int tag) {
    check_tag(tag);
    return t.record(std::make_unique<SendRecv>(t.comm(), dest, src, tag), {x});
}

void validate(const HaloSpec& spec) {
    if (spec.depth != 1 && spec.depth != 2) {
        throw InvalidArgument("halo depth must be 1 or 2, got " + std::to_string(spec.depth));
    }
    if (static_cast<std::size_t>(spec.depth) > std::min(spec.nx, spec.ny)) {
        throw InvalidArgument("halo depth " + std::to_string(spec.depth) +
                              " exceeds patch dimensions " + std::to_string(spec.nx) + "x" +
                              std::to_string(spec.ny));
    }
}

void check_symmetric(comm::Communicator& comm, const HaloSpec& spec) {
    std::vector<std::int64_t> mine(spec.neighbors.begin(), spec.neighbors.end());
    const auto all = comm.allgatherv(std::span<const std::int64_t>(mine));
    if (all.size() != 4 * static_cast<std::size_t>(comm.size())) {
        throw ProtocolError("halo neighbor tables have inconsistent lengths");
    }
    for (int r = 0; r < comm.size(); ++r) {
        for (Side s : kSides) {
            const auto nb = all[4 * static_cast<std::size_t>(r) + static_cast<std::size_t>(s)];
            if (nb == kNoNeighbor) continue;
            if (nb < 0 || nb >= comm.size()) {
                throw InvalidArgument("halo neighbor " + std::to_string(nb) + " of rank " +
                                      std::to_string(r) + " out of range");
            }
            const auto back = all[4 * static_cast<std::size_t>(nb) + static_cast<std::size_t>(opposite(s))];
            if (back != r) {
                throw InvalidArgument("asymmetric halo neighbors: rank " + std::to_string(r) +
                                      " links to " + std::to_string(nb) +
                                      " but the reverse link is " + std::to_string(back));
            }
        }
    }
}

void halo_fill(comm::Communicator& comm, const HaloSpec& spec, std::span<const double> in,
               std::span<double> out, int tag_base) {
    if (in.size() != spec.frame_size() || out.size() != spec.frame_size()) {
        throw InvalidArgument("halo_exchange: field has " + std::to_string(in.size()) +
                              " values, frame needs " + std::to_string(spec.frame_size()));
    }
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t j = 0; j < spec.ny; ++j) {
        for (std::size_t i = 0; i < spec.nx; ++i) {
            const auto k = spec.index(static_cast<std::ptrdiff_t>(i), static_cast<std::ptrdiff_t>(j));
            out[k] = in[k];
        }
    }

    std::vector<std::vector<double>> recv_buf(4), send_buf(4);
    std::vector<comm::PendingTransfer> transfers;
    for (Side s : kSides) {
        const int nb = spec.neighbor(s);
        if (nb == kNoNeighbor) continue;
        const auto si = static_cast<std::size_t>(s);
        recv_buf[si].resize(strip(spec, s, true).size());
        transfers.push_back(comm.irecv(std::span<double>(recv_buf[si]), nb, halo_tag(tag_base, opposite(s))));
    }
    for (Side s : kSides) {
        const int nb = spec.neighbor(s);
        if (nb == kNoNeighbor) continue;
        const auto si = static_cast<std::size_t>(s);
        for (std::size_t k : strip(spec, s, false)) send_buf[si].push_back(in[k]);
        transfers.push_back(comm.isend(std::span<const double>(send_buf[si]), nb, halo_tag(tag_base, s)));
    }
    comm.wait_all(transfers);
    for (Side s : kSides) {
        if (spec.neighbor(s) == kNoNeighbor) continue;
        const auto ghost = strip(spec, s, true);
        const auto& buf = recv_buf[static_cast<std::size_t>(s)];
        for (std::size_t k = 0; k < ghost.size(); ++k) out[ghost[k]] = buf[k];
    }
}

void halo_fill_adjoint(comm::Communicator& comm, const HaloSpec& spec,
                       std::span<const double> out_adjoint, std::span<double> in_adjoint,
                       int tag_base) {
    if (out_adjoint.size() != spec.frame_size() || in_adjoint.size() != spec.frame_size()) {
        throw InvalidArgument("halo_exchange adjoint: frame size mismatch");
    }
    for (std::size_t j = 0; j < spec.ny; ++j) {
        for (std::size_t i = 0; i < spec.nx; ++i) {
            const auto k = spec.index(static_cast<std::ptrdiff_t>(i), static_cast<std::ptrdiff_t>(j));
            in_adjoint[k] += out_adjoint[k];
        }
    }

    // Reverse of the forward schedule: forward receives become sends of the
    // ghost adjoints, forward sends become receives onto the boundary strip.
    constexpr std::array<Side, 4> reversed{Side::kUp, Side::kDown, Side::kRight, Side::kLeft};
    std::vector<std::vector<double>> recv_buf(4), send_buf(4);
    std::vector<comm::PendingTransfer> transfers;
    for (Side s : reversed) {
        const int nb = spec.neighbor(s);
        if (nb == kNoNeighbor) continue;
        const auto si = static_cast<std::size_t>(s);
        recv_buf[si].resize(strip(spec, s, false).size());
        transfers.push_back(comm.irecv(std::span<double>(recv_buf[si]), nb,
                                       halo_tag(tag_base, s) + kBackwardTagOffset));
    }
    for (Side s : reversed) {
        const int nb = spec.neighbor(s);
        if (nb == kNoNeighbor) continue;
        const auto si = static_cast<std::size_t>(s);
        for (std::size_t k : strip(spec, s, true)) send_buf[si].push_back(out_adjoint[k]);
        transfers.push_back(comm.isend(std::span<const double>(send_buf[si]), nb,
                                       halo_tag(tag_base, opposite(s)) + kBackwardTagOffset));
    }
    comm.wait_all(transfers);
    for (Side s : reversed) {
        if (spec.neighbor(s) == kNoNeighbor) continue;
        const auto own = strip(spec, s, false);
        const auto& buf = recv_buf[static_cast<std::size_t>(s)];
        for (std::size_t k = 0; k < own.size(); ++k) in_adjoint[own[k]] += buf[k];
    }
}

NodeId halo_exchange(Tape& t, NodeId frame, const HaloSpec& spec) {
    validate(spec);
    // Keyed by the comm sequence, not the node id: local nodes may differ
    // between ranks. Wrapping is harmless since exchanges run in order.
    const auto seq = static_cast<int>(t.comm_count() % (std::size_t{1} << 22));
    const int tag_base = kHaloTagBase + seq * 8 + (spec.depth - 1) * 4;
    return t.record(std::make_unique<HaloExchange>(t.comm(), spec, tag_base), {frame});
}

NodeId pad_frame(Tape& t, NodeId interior, const HaloSpec& spec) {
    return t.record(std::make_unique<PadFrame>(spec, false), {interior});
}

NodeId interior_of(Tape& t, NodeId frame, const HaloSpec& spec) {
    return t.record(std::make_unique<PadFrame>(spec, true), {frame});
}

}  // namespace distad::collectives
