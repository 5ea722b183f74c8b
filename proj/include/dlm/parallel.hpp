// Copyright 2026 The dlmsparse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace dlm {

namespace detail {

inline std::size_t threads_from_env() {
    if (const char* env = std::getenv("FOCUS_THREADS")) {
        try {
            const long value = std::stol(env);
            if (value >= 1) {
                return static_cast<std::size_t>(value);
            }
        } catch (const std::exception&) {
        }
    }
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

inline std::atomic<std::size_t>& thread_cap() {
    static std::atomic<std::size_t> cap{threads_from_env()};
    return cap;
}

}  // namespace detail

/// Upper bound on worker threads used by the numeric kernels.
/// Initialised from FOCUS_THREADS, falling back to the hardware concurrency.
inline std::size_t num_threads() { return detail::thread_cap().load(std::memory_order_relaxed); }

inline void set_num_threads(std::size_t n) {
    detail::thread_cap().store(std::max<std::size_t>(1, n), std::memory_order_relaxed);
}

/// Splits [0, count) into contiguous chunks and runs fn(begin, end) on each.
/// Work items must write disjoint outputs; each item is computed identically
/// regardless of how the range is split, so results do not depend on the
/// thread count. `min_chunk` keeps small loops on the calling thread.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t min_chunk, Fn&& fn) {
    if (count == 0) {
        return;
    }
    const std::size_t by_size = std::max<std::size_t>(1, count / std::max<std::size_t>(1, min_chunk));
    const std::size_t workers = std::min(num_threads(), by_size);
    if (workers <= 1) {
        fn(std::size_t{0}, count);
        return;
    }
    const std::size_t chunk = (count + workers - 1) / workers;
    std::vector<std::exception_ptr> errors(workers);
    {
        std::vector<std::jthread> pool;
        pool.reserve(workers - 1);
        for (std::size_t w = 1; w < workers; ++w) {
            const std::size_t begin = w * chunk;
            const std::size_t end = std::min(count, begin + chunk);
            if (begin >= end) {
                break;
            }
            pool.emplace_back([&, w, begin, end] {
                try {
                    fn(begin, end);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        try {
            fn(std::size_t{0}, std::min(count, chunk));
        } catch (...) {
            errors[0] = std::current_exception();
        }
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

}  // namespace dlm
