#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace millilabel {

namespace detail {
inline std::atomic<unsigned>& thread_setting() {
    static std::atomic<unsigned> n{0};
    return n;
}
}  // namespace detail

// 0 means "use hardware concurrency".
inline void set_num_threads(unsigned n) { detail::thread_setting().store(n); }

inline unsigned num_threads() {
    unsigned n = detail::thread_setting().load();
    if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
    return n;
}

// Runs body(begin, end) over [0, n) split into contiguous ranges, one per worker.
// Callers that reduce must write per-index or per-chunk results and combine them
// in a fixed order afterwards; the split itself depends on the thread count.
template <class Body>
void parallel_ranges(std::size_t n, Body&& body) {
    const std::size_t workers = std::min<std::size_t>(num_threads(), n);
    if (workers <= 1) {
        if (n > 0) body(std::size_t{0}, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    std::exception_ptr first_error;
    std::mutex error_mutex;
    const std::size_t step = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t begin = w * step;
        const std::size_t end = std::min(n, begin + step);
        if (begin >= end) break;
        pool.emplace_back([&, begin, end] {
            try {
                body(begin, end);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

template <class Body>
void parallel_for(std::size_t n, Body&& body) {
    parallel_ranges(n, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) body(i);
    });
}

// Fixed-size chunking for reductions: chunk boundaries never depend on the
// number of threads, so combining per-chunk partials in chunk order is
// bit-stable.
inline constexpr std::size_t kReduceChunk = 4096;

inline std::size_t num_chunks(std::size_t n) { return (n + kReduceChunk - 1) / kReduceChunk; }

}  // namespace millilabel
