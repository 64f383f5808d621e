#pragma once

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace gradshift {

inline int hardware_threads() {
    if (const char* env = std::getenv("GRADSHIFT_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    const unsigned n = std::thread::hardware_concurrency();
    return n == 0 ? 1 : static_cast<int>(n);
}

// Static contiguous partition of [0, n). Each worker owns one chunk, so any
// per-worker accumulation can be reduced in worker order afterwards, keeping
// results independent of scheduling.
inline void parallel_for(long n, const std::function<void(long, long, int)>& body,
                         int max_workers = 0) {
    if (n <= 0) return;
    int workers = max_workers > 0 ? max_workers : hardware_threads();
    workers = static_cast<int>(std::min<long>(workers, n));
    if (workers <= 1) {
        body(0, n, 0);
        return;
    }
    const long chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        const long lo = w * chunk;
        const long hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&body, &errors, lo, hi, w] {
            try {
                body(lo, hi, w);
            } catch (...) {
                errors[static_cast<size_t>(w)] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

} // namespace gradshift
