#pragma once

// Deterministic data parallelism: workers write into per-index slots and the
// caller reduces sequentially, so results never depend on the thread count.
// PROTO_MARGIN_THREADS caps the pool size.

#include <atomic>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace protomargin {

inline int resolve_threads(int requested = 0) {
    int n = requested;
    if (n <= 0) {
        const unsigned hw = std::thread::hardware_concurrency();
        n = hw == 0 ? 1 : static_cast<int>(hw);
    }
    if (const char* env = std::getenv("PROTO_MARGIN_THREADS")) {
        const int cap = std::atoi(env);
        if (cap > 0 && cap < n) n = cap;
    }
    return n < 1 ? 1 : n;
}

template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
    threads = resolve_threads(threads);
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n) break;
            fn(i);
        }
    };
    std::vector<std::thread> pool;
    const int spawn = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
    pool.reserve(static_cast<std::size_t>(spawn));
    for (int t = 0; t < spawn - 1; ++t) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
}

}  // namespace protomargin
