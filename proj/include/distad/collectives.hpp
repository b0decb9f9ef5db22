#pragma once

// Differentiable communication operators. Each one records a comm node whose
// backward runs the reversed communication: bcast <-> sum, gather <->
// scatter, send <-> recv, and halo fill <-> ghost accumulation.

#include <array>
#include <cstddef>
#include <span>

#include "distad/graph.hpp"

namespace distad::collectives {

using graph::NodeId;
using graph::Tape;

// User tags for send/recv/sendrecv must lie in [0, kMaxUserTag).
inline constexpr int kMaxUserTag = 1 << 24;

NodeId mpi_bcast(Tape& t, NodeId x, int root = 0);

// Root receives the sum over ranks; the output on other ranks is zero.
NodeId mpi_sum(Tape& t, NodeId x, int root = 0);

// Root receives the rank-ordered concatenation; other ranks get an empty
// tensor.
NodeId mpi_gather(Tape& t, NodeId x, int root = 0);

// The send node's output is empty; it exists to carry the reversed transfer.
NodeId mpi_send(Tape& t, NodeId x, int peer, int tag);
NodeId mpi_recv(Tape& t, std::size_t size, int peer, int tag);

// Sends x to `dest` and returns the same-sized tensor received from `src`.
NodeId mpi_sendrecv(Tape& t, NodeId x, int dest, int src, int tag);

enum class Side : int { kLeft = 0, kRight = 1, kDown = 2, kUp = 3 };

inline constexpr int kNoNeighbor = -1;

// Patch of nx x ny owned cells stored in-band inside a frame of `depth`
// ghost layers. Frames are row-major with rows along y:
//   index(i, j) = (j + depth) * (nx + 2 depth) + (i + depth),  i, j in [-depth, n + depth).
struct HaloSpec {
    std::size_t nx = 0;
    std::size_t ny = 0;
    int depth = 1;
    std::array<int, 4> neighbors{kNoNeighbor, kNoNeighbor, kNoNeighbor, kNoNeighbor};

    std::size_t frame_nx() const noexcept { return nx + 2 * static_cast<std::size_t>(depth); }
    std::size_t frame_ny() const noexcept { return ny + 2 * static_cast<std::size_t>(depth); }
    std::size_t frame_size() const noexcept { return frame_nx() * frame_ny(); }

    std::size_t index(std::ptrdiff_t i, std::ptrdiff_t j) const noexcept {
        return static_cast<std::size_t>(j + depth) * frame_nx() + static_cast<std::size_t>(i + depth);
    }

    int neighbor(Side s) const noexcept { return neighbors[static_cast<int>(s)]; }
};

// Local checks only: depth in {1, 2} and depth <= min(nx, ny).
void validate(const HaloSpec& spec);

// Collective check that neighbor links are mutual across ranks.
void check_symmetric(comm::Communicator& comm, const HaloSpec& spec);

// Fills ghost strips of width depth from the neighbors (corners untouched,
// physical-boundary and corner ghosts zeroed). Backward sends ghost adjoints
// back and adds them onto the owning boundary cells.
NodeId halo_exchange(Tape& t, NodeId frame, const HaloSpec& spec);

// Embeds an nx*ny interior into a zero-ghosted frame, and the inverse
// extraction. Both are local and differentiable.
NodeId pad_frame(Tape& t, NodeId interior, const HaloSpec& spec);
NodeId interior_of(Tape& t, NodeId frame, const HaloSpec& spec);

// Non-differentiable building blocks behind halo_exchange; `tag_base`
// distinguishes concurrent exchanges.
void halo_fill(comm::Communicator& comm, const HaloSpec& spec, std::span<const double> in,
               std::span<double> out, int tag_base);
void halo_fill_adjoint(comm::Communicator& comm, const HaloSpec& spec,
                       std::span<const double> out_adjoint, std::span<double> in_adjoint,
                       int tag_base);

}  // namespace distad::collectives
