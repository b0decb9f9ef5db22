#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>

#include "distad/app.hpp"
#include "distad/error.hpp"
#include "distad/nn.hpp"
#include "distad/pde.hpp"

namespace distad::app {

namespace {

// About `per_row` random entries per row plus the diagonal.
sparse::CooMatrix random_matrix(std::int64_t n, int per_row, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> v(-1.0, 1.0);
    sparse::CooMatrix m;
    m.n = n;
    for (std::int64_t i = 0; i < n; ++i) {
        m.entries.push_back({i, i, 4.0 + v(rng)});
        for (int k = 0; k < per_row; ++k) {
            const auto j = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(n));
            if (j != i) m.entries.push_back({i, j, v(rng)});
        }
    }
    return m;
}

struct Row {
    std::string op;
    int ranks;
    std::int64_t size;
    std::string mode;
    int repeats;
    double mean, stddev;
};

// `setup` runs once per rank and returns the timed body.
using Setup = std::function<std::function<void()>(comm::Communicator&)>;

Row time_op(const std::string& op, const std::string& mode, int ranks, std::int64_t size, int repeats,
            const Setup& setup, int watchdog_ms) {
    std::vector<double> samples;
    comm::SpawnOptions so;
    so.watchdog = std::chrono::milliseconds(watchdog_ms);
    comm::spawn_ranks(
        ranks,
        [&](comm::Communicator& c) {
            auto body = setup(c);
            body();  // warm-up
            for (int k = 0; k < repeats; ++k) {
                c.barrier();
                const auto t0 = std::chrono::steady_clock::now();
                body();
                c.barrier();
                const auto t1 = std::chrono::steady_clock::now();
                if (c.rank() == 0) samples.push_back(std::chrono::duration<double>(t1 - t0).count());
            }
            return 0;
        },
        so);
    double mean = 0.0, var = 0.0;
    for (double s : samples) mean += s;
    mean /= static_cast<double>(samples.size());
    for (double s : samples) var += (s - mean) * (s - mean);
    const double sd = samples.size() > 1 ? std::sqrt(var / static_cast<double>(samples.size() - 1)) : 0.0;
    return {op, ranks, size, mode, repeats, mean, sd};
}

Setup transpose_setup(std::shared_ptr<const sparse::CooMatrix> m) {
    return [m](comm::Communicator& c) {
        auto a = std::make_shared<sparse::DistCSR>(sparse::distribute(*m, sparse::RowPartition::uniform(m->n, c.size()), c.rank()));
        return std::function<void()>([&c, a] { sparse::dist_transpose(c, *a); });
    };
}

Setup spmv_setup(std::shared_ptr<const sparse::CooMatrix> m) {
    return [m](comm::Communicator& c) {
        const auto rows = sparse::RowPartition::uniform(m->n, c.size());
        auto a = std::make_shared<sparse::DistCSR>(sparse::distribute(*m, rows, c.rank()));
        auto x = std::make_shared<sparse::DistVector>(sparse::DistVector{rows, c.rank(), std::vector<double>(static_cast<std::size_t>(rows.count(c.rank())), 1.0)});
        return std::function<void()>([&c, a, x] { sparse::dist_spmv(c, *a, *x); });
    };
}

Setup solve_setup(std::size_t nx, std::size_t ny) {
    return [nx, ny](comm::Communicator& c) {
        const auto g = pde::default_rank_grid(c.size());
        const auto part = pde::partition_grid(nx, ny, g[0], g[1], c.rank());
        return std::function<void()>([&c, part] {
            pde::solve_poisson(c, part, std::vector<double>(part.owned(), 1.0), {1e-10, 0});
        });
    };
}

Setup halo_setup(std::size_t nx, std::size_t ny) {
    return [nx, ny](comm::Communicator& c) {
        const auto g = pde::default_rank_grid(c.size());
        const auto hs = pde::partition_grid(nx, ny, g[0], g[1], c.rank()).halo(1);
        auto in = std::make_shared<std::vector<double>>(hs.frame_size(), 1.0);
        auto out = std::make_shared<std::vector<double>>(hs.frame_size());
        return std::function<void()>([&c, hs, in, out] { collectives::halo_fill(c, hs, *in, *out, 1 << 27); });
    };
}

Setup forward_backward_setup(std::size_t nx, std::size_t ny) {
    return [nx, ny](comm::Communicator& c) {
        const auto g = pde::default_rank_grid(c.size());
        const auto part = pde::partition_grid(nx, ny, g[0], g[1], c.rank());
        auto prob = std::make_shared<pde::PoissonProblem>(pde::make_poisson_problem(
            c, part, 0.8, 1, pde::SamplingMode::kGlobal, {1e-10, 0}, nn::default_layers()));
        auto tape = std::make_shared<graph::Tape>(c);
        pde::build_poisson_graph(*tape, *prob, nn::xavier_init(prob->layers, 1).theta);
        return std::function<void()>([tape, prob] { tape->evaluate_with_gradient(); });
    };
}

}  // namespace

RunResult cmd_bench(const RunConfig& cfg) {
    RunResult r;
    std::error_code ec;
    std::filesystem::create_directories(cfg.out, ec);
    if (!std::filesystem::is_directory(cfg.out)) throw IoError("cannot create output directory '" + cfg.out + "'");

    const int reps = cfg.bench_repeats;
    std::vector<Row> rows;
    const std::vector<std::int64_t> transpose_sizes{2000, 8000, 32000};
    std::vector<std::shared_ptr<const sparse::CooMatrix>> mats;
    for (auto n : transpose_sizes) mats.push_back(std::make_shared<const sparse::CooMatrix>(random_matrix(n, 8, cfg.seed)));

    for (int p : {1, 2, 4}) {
        // Fixed total size.
        for (std::size_t k = 0; k < mats.size(); ++k)
            rows.push_back(time_op("transpose", "strong", p, transpose_sizes[k], reps, transpose_setup(mats[k]), cfg.watchdog_ms));
        rows.push_back(time_op("spmv", "strong", p, mats[1]->n, reps, spmv_setup(mats[1]), cfg.watchdog_ms));
        rows.push_back(time_op("solve", "strong", p, 32 * 32, reps, solve_setup(32, 32), cfg.watchdog_ms));
        rows.push_back(time_op("halo_exchange", "strong", p, 64 * 64, reps, halo_setup(64, 64), cfg.watchdog_ms));
        rows.push_back(time_op("forward_backward", "strong", p, 16 * 16, reps, forward_backward_setup(16, 16), cfg.watchdog_ms));
        // Fixed size per rank.
        const auto g = pde::default_rank_grid(p);
        const auto wx = static_cast<std::size_t>(g[0]), wy = static_cast<std::size_t>(g[1]);
        auto wm = std::make_shared<const sparse::CooMatrix>(random_matrix(2000 * p, 8, cfg.seed));
        rows.push_back(time_op("transpose", "weak", p, wm->n, reps, transpose_setup(wm), cfg.watchdog_ms));
        rows.push_back(time_op("spmv", "weak", p, wm->n, reps, spmv_setup(wm), cfg.watchdog_ms));
        rows.push_back(time_op("solve", "weak", p, static_cast<std::int64_t>(256 * wx * wy), reps, solve_setup(16 * wx, 16 * wy), cfg.watchdog_ms));
        rows.push_back(time_op("halo_exchange", "weak", p, static_cast<std::int64_t>(1024 * wx * wy), reps, halo_setup(32 * wx, 32 * wy), cfg.watchdog_ms));
        rows.push_back(time_op("forward_backward", "weak", p, static_cast<std::int64_t>(64 * wx * wy), reps, forward_backward_setup(8 * wx, 8 * wy), cfg.watchdog_ms));
    }

    const auto path = (std::filesystem::path(cfg.out) / "bench.csv").string();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write '" + path + "'");
    os << "op,ranks,size,mode,repeats,mean_seconds,stddev_seconds\n";
    for (const auto& row : rows) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "%s,%d,%lld,%s,%d,%.6e,%.6e\n", row.op.c_str(), row.ranks,
                      static_cast<long long>(row.size), row.mode.c_str(), row.repeats, row.mean, row.stddev);
        os << buf;
    }
    os.flush();
    if (!os) throw IoError("write to '" + path + "' failed");
    r.files.push_back(path);

    // Transpose time should grow with nnz at every rank count.
    int monotone = 1;
    for (int p : {1, 2, 4}) {
        std::vector<double> t;
        for (const auto& row : rows)
            if (row.op == "transpose" && row.mode == "strong" && row.ranks == p) t.push_back(row.mean);
        for (std::size_t k = 1; k < t.size(); ++k)
            if (!(t[k] > t[k - 1])) monotone = 0;
    }
    r.metrics["rows"] = static_cast<double>(rows.size());
    r.metrics["transpose_monotone"] = monotone;
    std::ostringstream s;
    s << "bench: " << rows.size() << " timings written to " << path << "; transpose time "
      << (monotone ? "grows" : "does not grow") << " with nnz at every rank count\n";
    r.summary = s.str();
    return r;
}

}  // namespace distad::app
