#include <limits>

#include "distad/sparse.hpp"

namespace distad::sparse {

namespace {

constexpr int kCountTag = (1 << 26) + 0;
constexpr int kIndexTag = (1 << 26) + 1;
constexpr int kValueTag = (1 << 26) + 2;
constexpr int kBackCountTag = (1 << 26) + 3;
constexpr int kBackValueTag = (1 << 26) + 4;

}  // namespace

Transposed dist_transpose(comm::Communicator& comm, const DistCSR& a) {
    const CsrPattern& src = *a.pattern;
    if (src.rows.size() != comm.size() || src.rank != comm.rank()) {
        throw InvalidArgument("dist_transpose: pattern does not belong to this communicator rank");
    }
    src.validate();
    if (a.values.size() != src.nnz()) throw InvalidArgument("dist_transpose: values/pattern size mismatch");
    const int size = comm.size();
    const auto& rows = src.rows;

    // Split the stripe column-wise at every rank's row boundary.
    auto plan = std::make_shared<TransposePlan>();
    plan->source = a.pattern;
    plan->send_positions.assign(static_cast<std::size_t>(size), {});
    plan->recv_positions.assign(static_cast<std::size_t>(size), {});
    for (std::int64_t k = 0; k < static_cast<std::int64_t>(src.nnz()); ++k) {
        const int dest = rows.owner(src.cols[static_cast<std::size_t>(k)]);
        plan->send_positions[static_cast<std::size_t>(dest)].push_back(k);
    }

    // Phase 1: block nonzero counts.
    std::vector<std::int64_t> send_counts(static_cast<std::size_t>(size));
    std::vector<std::int64_t> recv_counts(static_cast<std::size_t>(size));
    std::vector<comm::PendingTransfer> transfers;
    for (int r = 0; r < size; ++r) {
        transfers.push_back(comm.irecv(std::span<std::int64_t>(&recv_counts[static_cast<std::size_t>(r)], 1), r, kCountTag));
    }
    for (int r = 0; r < size; ++r) {
        send_counts[static_cast<std::size_t>(r)] = static_cast<std::int64_t>(plan->send_positions[static_cast<std::size_t>(r)].size());
        transfers.push_back(comm.isend(std::span<const std::int64_t>(&send_counts[static_cast<std::size_t>(r)], 1), r, kCountTag));
    }
    comm.wait_all(transfers);
    transfers.clear();

    std::int64_t total = 0;
    for (auto c : recv_counts) {
        if (c < 0 || total > std::numeric_limits<std::int64_t>::max() - c) {
            throw ProtocolError("dist_transpose: invalid or overflowing block count");
        }
        total += c;
    }

    // Phase 2: (row, col) pairs and values into exactly sized buffers.
    std::vector<std::vector<std::int64_t>> send_idx(static_cast<std::size_t>(size)), recv_idx(static_cast<std::size_t>(size));
    std::vector<std::vector<double>> send_val(static_cast<std::size_t>(size)), recv_val(static_cast<std::size_t>(size));
    for (int r = 0; r < size; ++r) {
        const auto c = static_cast<std::size_t>(recv_counts[static_cast<std::size_t>(r)]);
        if (c == 0) continue;
        recv_idx[static_cast<std::size_t>(r)].resize(2 * c);
        recv_val[static_cast<std::size_t>(r)].resize(c);
        transfers.push_back(comm.irecv(std::span<std::int64_t>(recv_idx[static_cast<std::size_t>(r)]), r, kIndexTag));
        transfers.push_back(comm.irecv(std::span<double>(recv_val[static_cast<std::size_t>(r)]), r, kValueTag));
    }
    for (int r = 0; r < size; ++r) {
        const auto& pos = plan->send_positions[static_cast<std::size_t>(r)];
        if (pos.empty()) continue;
        auto& idx = send_idx[static_cast<std::size_t>(r)];
        auto& val = send_val[static_cast<std::size_t>(r)];
        std::int64_t local_row = 0;
        for (std::int64_t k : pos) {
            while (src.row_ptr[static_cast<std::size_t>(local_row) + 1] <= k) ++local_row;
            idx.push_back(src.row_begin() + local_row);
            idx.push_back(src.cols[static_cast<std::size_t>(k)]);
            val.push_back(a.values[static_cast<std::size_t>(k)]);
        }
        transfers.push_back(comm.isend(std::span<const std::int64_t>(idx), r, kIndexTag));
        transfers.push_back(comm.isend(std::span<const double>(val), r, kValueTag));
    }
    comm.wait_all(transfers);

    // Transpose each received block: (row, col) becomes (col, row). Sources
    // arrive in ascending rank order and each block is row-sorted, so the new
    // columns come out sorted without an explicit sort.
    auto result = std::make_shared<CsrPattern>();
    result->rows = rows;
    result->rank = comm.rank();
    const auto rb = rows.begin(comm.rank());
    const auto lr = static_cast<std::size_t>(rows.count(comm.rank()));
    result->row_ptr.assign(lr + 1, 0);
    for (int r = 0; r < size; ++r) {
        const auto& idx = recv_idx[static_cast<std::size_t>(r)];
        for (std::size_t k = 0; k < idx.size(); k += 2) {
            const auto new_row = idx[k + 1] - rb;
            if (new_row < 0 || new_row >= static_cast<std::int64_t>(lr)) {
                throw ProtocolError("dist_transpose: received entry outside this stripe");
            }
            ++result->row_ptr[static_cast<std::size_t>(new_row) + 1];
        }
    }
    for (std::size_t i = 1; i <= lr; ++i) result->row_ptr[i] += result->row_ptr[i - 1];
    result->cols.resize(static_cast<std::size_t>(total));
    std::vector<double> values(static_cast<std::size_t>(total));
    std::vector<std::int64_t> cursor(result->row_ptr.begin(), result->row_ptr.end() - 1);
    for (int r = 0; r < size; ++r) {
        const auto& idx = recv_idx[static_cast<std::size_t>(r)];
        const auto& val = recv_val[static_cast<std::size_t>(r)];
        auto& landed = plan->recv_positions[static_cast<std::size_t>(r)];
        landed.reserve(val.size());
        for (std::size_t k = 0; k < val.size(); ++k) {
            const auto new_row = static_cast<std::size_t>(idx[2 * k + 1] - rb);
            const auto slot = cursor[new_row]++;
            result->cols[static_cast<std::size_t>(slot)] = idx[2 * k];
            values[static_cast<std::size_t>(slot)] = val[k];
            landed.push_back(slot);
        }
    }
    result->validate();

    plan->result = result;
    Transposed out;
    out.matrix.pattern = std::move(result);
    out.matrix.values = std::move(values);
    out.plan = std::move(plan);
    return out;
}

std::vector<double> transpose_adjoint(comm::Communicator& comm, const TransposePlan& plan,
                                      std::span<const double> result_adjoint) {
    if (result_adjoint.size() != plan.result->nnz()) {
        throw InvalidArgument("transpose_adjoint: adjoint size does not match transposed pattern");
    }
    const int size = comm.size();

    // Reverse of phase 1: the former receivers announce counts to the former
    // senders.
    std::vector<std::int64_t> back_counts(static_cast<std::size_t>(size));
    std::vector<std::int64_t> expect(static_cast<std::size_t>(size));
    std::vector<comm::PendingTransfer> transfers;
    for (int r = size - 1; r >= 0; --r) {
        transfers.push_back(comm.irecv(std::span<std::int64_t>(&expect[static_cast<std::size_t>(r)], 1), r, kBackCountTag));
    }
    for (int r = size - 1; r >= 0; --r) {
        back_counts[static_cast<std::size_t>(r)] = static_cast<std::int64_t>(plan.recv_positions[static_cast<std::size_t>(r)].size());
        transfers.push_back(comm.isend(std::span<const std::int64_t>(&back_counts[static_cast<std::size_t>(r)], 1), r, kBackCountTag));
    }
    comm.wait_all(transfers);
    transfers.clear();
    for (int r = 0; r < size; ++r) {
        if (expect[static_cast<std::size_t>(r)] != static_cast<std::int64_t>(plan.send_positions[static_cast<std::size_t>(r)].size())) {
            throw ProtocolError("transpose_adjoint: block count mismatch with rank " + std::to_string(r));
        }
    }

    // Reverse of phase 2: adjoint values travel back along the same blocks.
    std::vector<std::vector<double>> send_buf(static_cast<std::size_t>(size)), recv_buf(static_cast<std::size_t>(size));
    for (int r = size - 1; r >= 0; --r) {
        const auto n = plan.send_positions[static_cast<std::size_t>(r)].size();
        if (n == 0) continue;
        recv_buf[static_cast<std::size_t>(r)].resize(n);
        transfers.push_back(comm.irecv(std::span<double>(recv_buf[static_cast<std::size_t>(r)]), r, kBackValueTag));
    }
    for (int r = size - 1; r >= 0; --r) {
        const auto& landed = plan.recv_positions[static_cast<std::size_t>(r)];
        if (landed.empty()) continue;
        auto& buf = send_buf[static_cast<std::size_t>(r)];
        buf.reserve(landed.size());
        for (auto slot : landed) buf.push_back(result_adjoint[static_cast<std::size_t>(slot)]);
        transfers.push_back(comm.isend(std::span<const double>(buf), r, kBackValueTag));
    }
    comm.wait_all(transfers);

    std::vector<double> adj(plan.source->nnz(), 0.0);
    for (int r = 0; r < size; ++r) {
        const auto& pos = plan.send_positions[static_cast<std::size_t>(r)];
        const auto& buf = recv_buf[static_cast<std::size_t>(r)];
        for (std::size_t k = 0; k < pos.size(); ++k) adj[static_cast<std::size_t>(pos[k])] += buf[k];
    }
    return adj;
}

std::shared_ptr<const TransposePlan> plan_transpose(comm::Communicator& comm, PatternPtr pattern) {
    DistCSR zero{pattern, std::vector<double>(pattern->nnz(), 0.0)};
    return dist_transpose(comm, zero).plan;
}

}  // namespace distad::sparse
