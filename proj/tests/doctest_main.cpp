#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include <cstdio>

#include "distad/comm.hpp"
#include "support.hpp"

// A run only passes if the deadlock watchdog fired exactly where a test asked for it.
int main(int argc, char** argv) {
    doctest::Context ctx(argc, argv);
    const int rc = ctx.run();
    if (ctx.shouldExit()) return rc;
    const auto fired = distad::comm::watchdog_fire_count();
    const auto expected = testsupport::expected_watchdog_fires.load();
    if (fired != expected) {
        std::fprintf(stderr, "deadlock watchdog fired %llu times, expected %llu\n",
                     static_cast<unsigned long long>(fired), static_cast<unsigned long long>(expected));
        return rc == 0 ? 1 : rc;
    }
    return rc;
}
