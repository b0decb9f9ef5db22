#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>

#include "distad/pde.hpp"

namespace distad::pde {

sparse::RowPartition GridPartition::rows() const {
    return sparse::RowPartition::uniform(static_cast<std::int64_t>(nx * ny), size());
}

collectives::HaloSpec GridPartition::halo(int depth) const {
    collectives::HaloSpec s;
    s.nx = nxl;
    s.ny = nyl;
    s.depth = depth;
    using collectives::Side;
    s.neighbors[static_cast<int>(Side::kLeft)] = rx() > 0 ? rank - 1 : collectives::kNoNeighbor;
    s.neighbors[static_cast<int>(Side::kRight)] = rx() < px - 1 ? rank + 1 : collectives::kNoNeighbor;
    s.neighbors[static_cast<int>(Side::kDown)] = ry() > 0 ? rank - px : collectives::kNoNeighbor;
    s.neighbors[static_cast<int>(Side::kUp)] = ry() < py - 1 ? rank + px : collectives::kNoNeighbor;
    collectives::validate(s);
    return s;
}

std::vector<double> GridPartition::coordinates() const {
    std::vector<double> xy;
    xy.reserve(2 * owned());
    for (std::size_t j = 0; j < nyl; ++j) {
        for (std::size_t i = 0; i < nxl; ++i) {
            xy.push_back(x(i));
            xy.push_back(y(j));
        }
    }
    return xy;
}

GridPartition partition_grid(std::size_t nx, std::size_t ny, int px, int py, int rank, double h) {
    if (nx == 0 || ny == 0) throw InvalidArgument("grid dimensions must be positive");
    if (px < 1 || py < 1) throw InvalidArgument("rank grid dimensions must be positive");
    if (nx % static_cast<std::size_t>(px) != 0 || ny % static_cast<std::size_t>(py) != 0) {
        throw InvalidArgument("grid " + std::to_string(nx) + "x" + std::to_string(ny) +
                              " is not divisible by rank grid " + std::to_string(px) + "x" +
                              std::to_string(py));
    }
    if (rank < 0 || rank >= px * py) throw InvalidArgument("rank outside the rank grid");
    GridPartition p;
    p.nx = nx;
    p.ny = ny;
    p.px = px;
    p.py = py;
    p.rank = rank;
    p.h = h > 0.0 ? h : 1.0 / static_cast<double>(std::max(nx, ny) + 1);
    p.nxl = nx / static_cast<std::size_t>(px);
    p.nyl = ny / static_cast<std::size_t>(py);
    p.x0 = static_cast<std::size_t>(p.rx()) * p.nxl;
    p.y0 = static_cast<std::size_t>(p.ry()) * p.nyl;
    return p;
}

std::array<int, 2> default_rank_grid(int ranks) {
    if (ranks < 1) throw InvalidArgument("rank count must be positive");
    int py = static_cast<int>(std::sqrt(static_cast<double>(ranks)));
    while (py > 1 && ranks % py != 0) --py;
    return {ranks / py, py};
}

std::vector<double> gather_field(comm::Communicator& comm, const GridPartition& part,
                                 std::span<const double> local) {
    if (local.size() != part.owned()) throw InvalidArgument("gather_field: local size mismatch");
    const auto all = comm.allgatherv(local);
    std::vector<double> global(part.nx * part.ny);
    for (int r = 0; r < part.size(); ++r) {
        const auto bx = static_cast<std::size_t>(r % part.px) * part.nxl;
        const auto by = static_cast<std::size_t>(r / part.px) * part.nyl;
        const auto base = static_cast<std::size_t>(r) * part.owned();
        for (std::size_t j = 0; j < part.nyl; ++j)
            for (std::size_t i = 0; i < part.nxl; ++i)
                global[(by + j) * part.nx + bx + i] = all[base + j * part.nxl + i];
    }
    return global;
}

void write_field(std::ostream& os, const std::vector<double>& global, std::size_t nx, std::size_t ny) {
    char buf[40];
    for (std::size_t j = 0; j < ny; ++j) {
        for (std::size_t i = 0; i < nx; ++i) {
            std::snprintf(buf, sizeof buf, "%.17g", global[j * nx + i]);
            if (i) os << ' ';
            os << buf;
        }
        os << '\n';
    }
}

}  // namespace distad::pde
