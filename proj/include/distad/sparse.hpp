#pragma once

// Row-striped distributed CSR matrices: every rank owns a contiguous stripe
// of rows stored as CSR with global column indices.

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <vector>

#include "distad/comm.hpp"
#include "distad/graph.hpp"

namespace distad::sparse {

// Rank r owns rows [offsets[r], offsets[r+1]).
class RowPartition {
public:
    RowPartition() = default;
    explicit RowPartition(std::vector<std::int64_t> offsets);

    // Near-equal contiguous split of n rows over `size` ranks.
    static RowPartition uniform(std::int64_t n, int size);
    // Collective: stripes sized by each rank's local count, in rank order.
    static RowPartition from_local_counts(comm::Communicator& comm, std::int64_t local_rows);

    std::int64_t n() const noexcept { return offsets_.empty() ? 0 : offsets_.back(); }
    int size() const noexcept { return static_cast<int>(offsets_.size()) - 1; }
    std::int64_t begin(int r) const { return offsets_.at(static_cast<std::size_t>(r)); }
    std::int64_t end(int r) const { return offsets_.at(static_cast<std::size_t>(r) + 1); }
    std::int64_t count(int r) const { return end(r) - begin(r); }
    int owner(std::int64_t row) const;
    const std::vector<std::int64_t>& offsets() const noexcept { return offsets_; }

    bool operator==(const RowPartition&) const = default;

private:
    std::vector<std::int64_t> offsets_;
};

// Sparsity of one rank's stripe; shared between matrices with equal structure.
struct CsrPattern {
    RowPartition rows;
    int rank = 0;
    std::vector<std::int64_t> row_ptr;  // local_rows() + 1 entries
    std::vector<std::int64_t> cols;     // global, strictly increasing per row

    std::int64_t n() const noexcept { return rows.n(); }
    std::int64_t row_begin() const { return rows.begin(rank); }
    std::int64_t row_end() const { return rows.end(rank); }
    std::int64_t local_rows() const { return rows.count(rank); }
    std::size_t nnz() const noexcept { return cols.size(); }

    // Throws InvalidArgument on malformed structure.
    void validate() const;
};

using PatternPtr = std::shared_ptr<const CsrPattern>;

struct DistCSR {
    PatternPtr pattern;
    std::vector<double> values;  // aligned with pattern->cols
};

struct DistVector {
    RowPartition partition;
    int rank = 0;
    std::vector<double> values;  // the owned segment

    std::int64_t n() const noexcept { return partition.n(); }
    std::int64_t offset() const { return partition.begin(rank); }
};

struct CooEntry {
    std::int64_t row;
    std::int64_t col;
    double value;
};

// Global square matrix in coordinate form, used for oracles and file IO.
struct CooMatrix {
    std::int64_t n = 0;
    std::vector<CooEntry> entries;
};

// Extracts this rank's stripe (duplicates summed, explicit entries kept even
// if zero).
DistCSR distribute(const CooMatrix& global, const RowPartition& rows, int rank);

// Collective: every rank receives the full matrix in row-major order.
CooMatrix assemble_global(comm::Communicator& comm, const DistCSR& a);

// Plain-text coordinate format:
//   %%MatrixMarket matrix coordinate real general
//   n n nnz
//   row col value      (1-based, %.17g)
void write_matrix_market(std::ostream& os, const CooMatrix& m);
CooMatrix read_matrix_market(std::istream& is);

// Routing of a transpose: which local entries went to which rank, and where
// each received entry landed in the result.
struct TransposePlan {
    PatternPtr source;
    PatternPtr result;
    std::vector<std::vector<std::int64_t>> send_positions;  // [dest] -> source nnz slots
    std::vector<std::vector<std::int64_t>> recv_positions;  // [src]  -> result nnz slots
};

struct Transposed {
    DistCSR matrix;
    std::shared_ptr<const TransposePlan> plan;
};

// Two-phase parallel transpose. Phase 1 exchanges per-block nonzero counts,
// phase 2 ships (row, col, value) triplets into exactly sized buffers; the
// receiver transposes each block and assembles its stripe. The result uses
// the same row stripes as the input.
Transposed dist_transpose(comm::Communicator& comm, const DistCSR& a);

// Adjoint of the value map of dist_transpose: routes adjoints of the
// transposed entries back to their source slots by reversing both phases.
std::vector<double> transpose_adjoint(comm::Communicator& comm, const TransposePlan& plan,
                                      std::span<const double> result_adjoint);

// y = A x. Off-stripe entries of x are obtained with an allgather.
DistVector dist_spmv(comm::Communicator& comm, const DistCSR& a, const DistVector& x);

struct SolveOptions {
    double tol = 1e-10;
    std::int64_t max_iterations = 0;  // 0 means 10 n
};

struct SolveStats {
    std::int64_t iterations = 0;
    double relative_residual = 0.0;
};

// Jacobi-preconditioned conjugate gradient for SPD A until
// ||A u - f|| <= tol ||f||. Throws SolverError past max_iterations and
// InvalidArgument on a zero diagonal.
DistVector dist_solve(comm::Communicator& comm, const DistCSR& a, const DistVector& f,
                      SolveOptions options = {}, SolveStats* stats = nullptr);

// Differentiable wrappers. Matrix nodes hold the stripe's values aligned
// with the pattern; vector nodes hold the owned segment.
graph::NodeId spmv(graph::Tape& t, PatternPtr pattern, graph::NodeId values, graph::NodeId x);
graph::NodeId transpose(graph::Tape& t, std::shared_ptr<const TransposePlan> plan,
                        graph::NodeId values);
graph::NodeId solve(graph::Tape& t, PatternPtr pattern, graph::NodeId values, graph::NodeId f,
                    SolveOptions options = {});

// Collective setup: the transpose routing for a pattern, so the transposed
// structure is known while recording.
std::shared_ptr<const TransposePlan> plan_transpose(comm::Communicator& comm, PatternPtr pattern);

}  // namespace distad::sparse
