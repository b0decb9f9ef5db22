#include <cstring>
#include <exception>
#include <new>
#include <string>
#include <vector>

#include "distad/app.hpp"
#include "distad/collectives.hpp"
#include "distad/distad.h"
#include "distad/error.hpp"

struct distad_config {
    distad::app::RunConfig cfg;
};

struct distad_result {
    distad::app::RunResult result;
    std::vector<std::string> names;
};

namespace {

thread_local std::string t_last_error;

distad_status fail(distad_status s, const std::string& msg) {
    t_last_error = msg;
    return s;
}

// Maps the active exception to a status code.
distad_status translate() {
    try {
        throw;
    } catch (const distad::InvalidArgument& e) {
        return fail(DISTAD_ERR_INVALID_ARGUMENT, e.what());
    } catch (const distad::ProtocolError& e) {
        return fail(DISTAD_ERR_PROTOCOL, e.what());
    } catch (const distad::DeadlockError& e) {
        return fail(DISTAD_ERR_DEADLOCK, e.what());
    } catch (const distad::SolverError& e) {
        return fail(DISTAD_ERR_SOLVER, e.what());
    } catch (const distad::IoError& e) {
        return fail(DISTAD_ERR_IO, e.what());
    } catch (const std::bad_alloc&) {
        return fail(DISTAD_ERR_INTERNAL, "out of memory");
    } catch (const std::exception& e) {
        return fail(DISTAD_ERR_INTERNAL, e.what());
    } catch (...) {
        return fail(DISTAD_ERR_INTERNAL, "unknown error");
    }
}

template <class F>
distad_status guarded(F&& f) {
    try {
        t_last_error.clear();
        return f();
    } catch (...) {
        return translate();
    }
}

}  // namespace

extern "C" {

const char* distad_version(void) { return DISTAD_VERSION_STRING; }

const char* distad_status_string(distad_status s) {
    switch (s) {
        case DISTAD_OK: return "ok";
        case DISTAD_ERR_INVALID_ARGUMENT: return "invalid argument";
        case DISTAD_ERR_PROTOCOL: return "protocol error";
        case DISTAD_ERR_DEADLOCK: return "deadlock";
        case DISTAD_ERR_SOLVER: return "solver error";
        case DISTAD_ERR_IO: return "i/o error";
        case DISTAD_ERR_CHECK_FAILED: return "check failed";
        case DISTAD_ERR_INTERNAL: return "internal error";
    }
    return "unknown status";
}

const char* distad_last_error(void) { return t_last_error.c_str(); }

distad_status distad_config_create(distad_config** out) {
    return guarded([&] {
        if (out == nullptr) return fail(DISTAD_ERR_INVALID_ARGUMENT, "null output pointer");
        *out = new distad_config{};
        return DISTAD_OK;
    });
}

void distad_config_destroy(distad_config* config) { delete config; }

distad_status distad_config_set(distad_config* config, const char* key, const char* value) {
    return guarded([&] {
        if (!config || !key || !value) return fail(DISTAD_ERR_INVALID_ARGUMENT, "null argument");
        config->cfg.set(key, value);
        return DISTAD_OK;
    });
}

distad_status distad_config_get(const distad_config* config, const char* key, char* buf, size_t size,
                                size_t* needed) {
    return guarded([&] {
        if (!config || !key) return fail(DISTAD_ERR_INVALID_ARGUMENT, "null argument");
        const auto v = config->cfg.get(key);
        if (needed) *needed = v.size() + 1;
        if (buf == nullptr || size < v.size() + 1) {
            return fail(DISTAD_ERR_INVALID_ARGUMENT, "buffer too small for value of " + std::string(key));
        }
        std::memcpy(buf, v.c_str(), v.size() + 1);
        return DISTAD_OK;
    });
}

distad_status distad_config_load(distad_config* config, const char* path) {
    return guarded([&] {
        if (!config || !path) return fail(DISTAD_ERR_INVALID_ARGUMENT, "null argument");
        config->cfg.load(path);
        return DISTAD_OK;
    });
}

distad_status distad_config_validate(const distad_config* config, const char* command) {
    return guarded([&] {
        if (!config || !command) return fail(DISTAD_ERR_INVALID_ARGUMENT, "null argument");
        config->cfg.validate(command);
        return DISTAD_OK;
    });
}

distad_status distad_run(const distad_config* config, const char* command, distad_result** out) {
    return guarded([&] {
        if (!config || !command || !out) return fail(DISTAD_ERR_INVALID_ARGUMENT, "null argument");
        *out = nullptr;
        auto* r = new distad_result{distad::app::run_command(command, config->cfg), {}};
        for (const auto& [k, v] : r->result.metrics) r->names.push_back(k);
        *out = r;
        if (!r->result.passed) return fail(DISTAD_ERR_CHECK_FAILED, r->result.summary);
        return DISTAD_OK;
    });
}

int distad_result_passed(const distad_result* r) { return r && r->result.passed ? 1 : 0; }

const char* distad_result_summary(const distad_result* r) { return r ? r->result.summary.c_str() : ""; }

size_t distad_result_metric_count(const distad_result* r) { return r ? r->names.size() : 0; }

const char* distad_result_metric_name(const distad_result* r, size_t i) {
    return r && i < r->names.size() ? r->names[i].c_str() : nullptr;
}

distad_status distad_result_metric(const distad_result* r, const char* name, double* value) {
    return guarded([&] {
        if (!r || !name || !value) return fail(DISTAD_ERR_INVALID_ARGUMENT, "null argument");
        const auto it = r->result.metrics.find(name);
        if (it == r->result.metrics.end()) return fail(DISTAD_ERR_INVALID_ARGUMENT, "no metric named " + std::string(name));
        *value = it->second;
        return DISTAD_OK;
    });
}

size_t distad_result_file_count(const distad_result* r) { return r ? r->result.files.size() : 0; }

const char* distad_result_file(const distad_result* r, size_t i) {
    return r && i < r->result.files.size() ? r->result.files[i].c_str() : nullptr;
}

void distad_result_destroy(distad_result* r) { delete r; }

distad_status distad_cubic_demo(int ranks, double theta, double* loss, double* gradient) {
    return guarded([&] {
        if (!loss || !gradient) return fail(DISTAD_ERR_INVALID_ARGUMENT, "null argument");
        if (ranks < 1) return fail(DISTAD_ERR_INVALID_ARGUMENT, "ranks must be at least 1");
        distad::comm::spawn_ranks(ranks, [&](distad::comm::Communicator& c) {
            distad::graph::Tape t(c);
            const auto th0 = t.parameter({c.rank() == 0 ? theta : 0.0});
            const auto th = distad::collectives::mpi_bcast(t, th0);
            t.set_loss(distad::collectives::mpi_sum(t, distad::graph::ops::powi(t, th, c.rank())));
            const double l = t.evaluate_with_gradient();
            if (c.rank() == 0) {
                *loss = l;
                *gradient = t.adjoint(th0)[0];
            }
            return 0;
        });
        return DISTAD_OK;
    });
}

uint64_t distad_watchdog_fires(void) { return distad::comm::watchdog_fire_count(); }

}  // extern "C"
