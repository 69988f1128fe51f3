#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace mergelab {

// Runs fn(i) for i in [0, n) on up to `threads` workers. Work items must write
// to disjoint outputs; the first exception thrown (lowest index) is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn && fn) {
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n)));
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex mu;
    std::size_t err_index = n;
    std::exception_ptr err;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(mu);
                if (i < err_index) {
                    err_index = i;
                    err = std::current_exception();
                }
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto & t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

} // namespace mergelab
