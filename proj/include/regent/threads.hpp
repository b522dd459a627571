#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace regent {

// Process-wide worker count for the few scans that parallelize (calibration,
// preprocessing, rollout sweeps). 1 = sequential. Results must not depend on
// this value; parallel users write into preallocated slots indexed by item.
inline int& worker_threads() {
    static int n = 1;
    return n;
}

template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn) {
    const int workers = std::min<int>(worker_threads(), static_cast<int>(count));
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = static_cast<std::size_t>(w); i < count;
                     i += static_cast<std::size_t>(workers))
                    fn(i);
            } catch (...) {
                errors[static_cast<std::size_t>(w)] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

} // namespace regent
