#pragma once

#include <atomic>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#include "qdg/errors.hpp"

namespace qdg {

// Runs fn(0..n-1) across up to jobs threads. Each index writes only its own
// result slot, so results stay deterministic regardless of scheduling. The
// first exception wins and is rethrown after all workers drain.
inline void run_parallel(std::size_t n, std::size_t jobs,
                         const std::function<void(std::size_t)>& fn) {
    if (jobs == 0) throw contract_error("jobs must be >= 1");
    if (n == 0) return;
    jobs = std::min(jobs, n);
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }

    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> workers;
    workers.reserve(jobs);
    for (std::size_t t = 0; t < jobs; ++t)
        workers.emplace_back([&] {
            while (true) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    for (std::thread& w : workers) w.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace qdg
