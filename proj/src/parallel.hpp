#pragma once

#include <atomic>
#include <functional>
#include <thread>
#include <vector>

namespace mega::cli {

// Runs fn(0..n) across up to `threads` workers. fn must confine its writes to
// its own index slot and must not throw.
inline void parallel_for(size_t n, size_t threads, const std::function<void(size_t)>& fn) {
    threads = std::max<size_t>(1, std::min(threads, n));
    if (threads <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    }
    for (std::thread& th : pool) th.join();
}

} // namespace mega::cli
