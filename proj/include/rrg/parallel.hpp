#pragma once

#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace rrg {

// Splits [0, n) into contiguous chunks across `workers` threads and runs
// body(begin, end) on each. The first exception thrown by any worker is
// rethrown on the caller's thread after all workers join.
inline void run_partitioned(std::size_t n, std::size_t workers,
                            const std::function<void(std::size_t, std::size_t)>& body) {
    if (n == 0) return;
    if (workers <= 1) {
        body(0, n);
        return;
    }
    std::exception_ptr first_error;
    std::mutex error_mutex;
    auto guarded = [&](std::size_t begin, std::size_t end) {
        try {
            body(begin, end);
        } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
        }
    };
    std::vector<std::thread> pool;
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t begin = w * chunk;
        const std::size_t end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back(guarded, begin, end);
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

} // namespace rrg
