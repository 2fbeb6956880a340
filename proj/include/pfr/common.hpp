#pragma once

#include <stdexcept>
#include <string>

namespace pfr {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct InvalidArgument : Error {
    explicit InvalidArgument(const std::string& msg) : Error(msg) {}
};

struct EmptyDataset : Error {
    explicit EmptyDataset(const std::string& msg) : Error(msg) {}
};

struct InvalidRecord : Error {
    explicit InvalidRecord(const std::string& msg) : Error(msg) {}
};

struct InvalidPrompt : Error {
    explicit InvalidPrompt(const std::string& msg) : Error(msg) {}
};

struct DegenerateMap : Error {
    explicit DegenerateMap(const std::string& msg) : Error(msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

inline void check(bool cond, const std::string& msg) {
    if (!cond) {
        throw InvalidArgument(msg);
    }
}

inline constexpr const char* kVersion = "0.1.0";

}  // namespace pfr

#include <atomic>
#include <functional>
#include <thread>
#include <vector>

namespace pfr {

// Deterministic parallel map: f(i) must not depend on call order. Results
// land at fixed indices, so output is identical for any worker count.
inline void parallel_for(int n, int jobs, const std::function<void(int)>& f) {
    jobs = std::max(1, jobs);
    if (jobs == 1 || n <= 1) {
        for (int i = 0; i < n; ++i) f(i);
        return;
    }
    std::vector<std::thread> workers;
    std::atomic<int> next{0};
    const int count = std::min(jobs, n);
    workers.reserve(static_cast<size_t>(count));
    for (int w = 0; w < count; ++w) {
        workers.emplace_back([&] {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
                f(i);
            }
        });
    }
    for (auto& t : workers) t.join();
}

}  // namespace pfr
