#include "dp/common.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace dp {

int thread_count() {
    static const int cached = [] {
        int hw = static_cast<int>(std::thread::hardware_concurrency());
        if (hw <= 0) hw = 1;
        if (const char* env = std::getenv("DP_THREADS")) {
            const int cap = std::atoi(env);
            if (cap >= 1) hw = std::min(hw, cap);
        }
        return hw;
    }();
    return cached;
}

void parallel_for(std::int64_t n, std::int64_t min_grain,
                  const std::function<void(std::int64_t, std::int64_t)>& body) {
    if (n <= 0) return;
    const int workers = thread_count();
    if (workers <= 1 || min_grain <= 0 || n < 2 * min_grain) {
        body(0, n);
        return;
    }
    const std::int64_t max_chunks = std::min<std::int64_t>(workers, n / min_grain);
    const std::int64_t chunks = std::max<std::int64_t>(1, max_chunks);
    if (chunks == 1) {
        body(0, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(chunks) - 1);
    const std::int64_t step = (n + chunks - 1) / chunks;
    for (std::int64_t c = 1; c < chunks; ++c) {
        const std::int64_t begin = c * step;
        const std::int64_t end = std::min(n, begin + step);
        if (begin >= end) break;
        pool.emplace_back([&body, begin, end] { body(begin, end); });
    }
    body(0, std::min(n, step));
    for (auto& t : pool) t.join();
}

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

namespace {
std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}
}  // namespace

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
    return splitmix64(splitmix64(master) ^ splitmix64(stream * 0x9e3779b97f4a7c15ull + 1));
}

std::string version_string() { return "dp 0.1.0"; }

}  // namespace dp
