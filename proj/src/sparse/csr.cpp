#include <algorithm>
#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>

#include "distad/sparse.hpp"

namespace distad::sparse {

RowPartition::RowPartition(std::vector<std::int64_t> offsets) : offsets_(std::move(offsets)) {
    if (offsets_.size() < 2 || offsets_.front() != 0) {
        throw InvalidArgument("row partition must start at 0 and cover at least one rank");
    }
    for (std::size_t r = 1; r < offsets_.size(); ++r) {
        if (offsets_[r] < offsets_[r - 1]) {
            throw InvalidArgument("row partition offsets must be non-decreasing");
        }
    }
}

RowPartition RowPartition::uniform(std::int64_t n, int size) {
    if (size < 1 || n < 0) throw InvalidArgument("uniform partition needs size >= 1 and n >= 0");
    std::vector<std::int64_t> off(static_cast<std::size_t>(size) + 1, 0);
    const std::int64_t base = n / size;
    const std::int64_t extra = n % size;
    for (int r = 0; r < size; ++r) off[static_cast<std::size_t>(r) + 1] = off[static_cast<std::size_t>(r)] + base + (r < extra ? 1 : 0);
    return RowPartition(std::move(off));
}

RowPartition RowPartition::from_local_counts(comm::Communicator& comm, std::int64_t local_rows) {
    const auto counts = comm.allgatherv(std::span<const std::int64_t>(&local_rows, 1));
    std::vector<std::int64_t> off(counts.size() + 1, 0);
    for (std::size_t r = 0; r < counts.size(); ++r) off[r + 1] = off[r] + counts[r];
    return RowPartition(std::move(off));
}

int RowPartition::owner(std::int64_t row) const {
    if (row < 0 || row >= n()) throw InvalidArgument("row " + std::to_string(row) + " out of range");
    auto it = std::upper_bound(offsets_.begin(), offsets_.end(), row);
    return static_cast<int>(it - offsets_.begin()) - 1;
}

void CsrPattern::validate() const {
    if (rank < 0 || rank >= rows.size()) throw InvalidArgument("pattern rank out of range");
    const auto lr = static_cast<std::size_t>(local_rows());
    if (row_ptr.size() != lr + 1 || row_ptr.front() != 0 ||
        row_ptr.back() != static_cast<std::int64_t>(cols.size())) {
        throw InvalidArgument("malformed CSR row pointer");
    }
    for (std::size_t i = 0; i < lr; ++i) {
        if (row_ptr[i + 1] < row_ptr[i]) throw InvalidArgument("malformed CSR row pointer");
        for (auto k = row_ptr[i]; k < row_ptr[i + 1]; ++k) {
            const auto c = cols[static_cast<std::size_t>(k)];
            if (c < 0 || c >= n()) throw InvalidArgument("CSR column index out of range");
            if (k > row_ptr[i] && c <= cols[static_cast<std::size_t>(k) - 1]) {
                throw InvalidArgument("CSR columns must be strictly increasing within a row");
            }
        }
    }
}

DistCSR distribute(const CooMatrix& global, const RowPartition& rows, int rank) {
    if (rows.n() != global.n) throw InvalidArgument("partition does not match matrix size");
    const auto rb = rows.begin(rank);
    const auto re = rows.end(rank);
    std::map<std::pair<std::int64_t, std::int64_t>, double> local;
    for (const auto& e : global.entries) {
        if (e.row < 0 || e.row >= global.n || e.col < 0 || e.col >= global.n) {
            throw InvalidArgument("coordinate entry out of range");
        }
        if (e.row >= rb && e.row < re) local[{e.row, e.col}] += e.value;
    }
    auto pattern = std::make_shared<CsrPattern>();
    pattern->rows = rows;
    pattern->rank = rank;
    pattern->row_ptr.assign(static_cast<std::size_t>(re - rb) + 1, 0);
    DistCSR out;
    for (const auto& [rc, v] : local) {
        ++pattern->row_ptr[static_cast<std::size_t>(rc.first - rb) + 1];
        pattern->cols.push_back(rc.second);
        out.values.push_back(v);
    }
    for (std::size_t i = 1; i < pattern->row_ptr.size(); ++i) pattern->row_ptr[i] += pattern->row_ptr[i - 1];
    out.pattern = std::move(pattern);
    return out;
}

CooMatrix assemble_global(comm::Communicator& comm, const DistCSR& a) {
    const auto& p = *a.pattern;
    std::vector<std::int64_t> idx;
    idx.reserve(2 * p.nnz());
    for (std::int64_t i = 0; i < p.local_rows(); ++i) {
        for (auto k = p.row_ptr[static_cast<std::size_t>(i)]; k < p.row_ptr[static_cast<std::size_t>(i) + 1]; ++k) {
            idx.push_back(p.row_begin() + i);
            idx.push_back(p.cols[static_cast<std::size_t>(k)]);
        }
    }
    const auto all_idx = comm.allgatherv(std::span<const std::int64_t>(idx));
    const auto all_val = comm.allgatherv(std::span<const double>(a.values));
    CooMatrix m;
    m.n = p.n();
    m.entries.reserve(all_val.size());
    for (std::size_t k = 0; k < all_val.size(); ++k) {
        m.entries.push_back({all_idx[2 * k], all_idx[2 * k + 1], all_val[k]});
    }
    return m;
}

void write_matrix_market(std::ostream& os, const CooMatrix& m) {
    os << "%%MatrixMarket matrix coordinate real general\n";
    os << m.n << ' ' << m.n << ' ' << m.entries.size() << '\n';
    char buf[64];
    for (const auto& e : m.entries) {
        std::snprintf(buf, sizeof buf, "%.17g", e.value);
        os << e.row + 1 << ' ' << e.col + 1 << ' ' << buf << '\n';
    }
}

CooMatrix read_matrix_market(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line.rfind("%%MatrixMarket", 0) != 0) {
        throw IoError("missing %%MatrixMarket header");
    }
    do {
        if (!std::getline(is, line)) throw IoError("missing size line");
    } while (!line.empty() && line[0] == '%');
    std::istringstream size_line(line);
    std::int64_t rows = 0, cols = 0, nnz = 0;
    if (!(size_line >> rows >> cols >> nnz) || rows != cols || rows < 0 || nnz < 0) {
        throw IoError("bad size line: " + line);
    }
    CooMatrix m;
    m.n = rows;
    m.entries.reserve(static_cast<std::size_t>(nnz));
    for (std::int64_t k = 0; k < nnz; ++k) {
        CooEntry e{};
        if (!(is >> e.row >> e.col >> e.value)) throw IoError("truncated entry list");
        --e.row;
        --e.col;
        if (e.row < 0 || e.row >= m.n || e.col < 0 || e.col >= m.n) throw IoError("entry out of range");
        m.entries.push_back(e);
    }
    return m;
}

}  // namespace distad::sparse
