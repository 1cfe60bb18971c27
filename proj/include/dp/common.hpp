#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace dp {

// Error taxonomy. The CLI maps these onto exit codes:
//   UsageError (and subclasses) -> 1, DataError/SimulationError -> 2,
//   InvariantError -> 3.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DimensionError : UsageError {
    using UsageError::UsageError;
};
struct IndexError : UsageError {
    using UsageError::UsageError;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct SimulationError : DataError {
    using DataError::DataError;
};
struct InvariantError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Worker parallelism cap: min(DP_THREADS, hardware_concurrency), at least 1.
int thread_count();

// Runs body(begin, end) over [0, n) split into contiguous ranges. Ranges are
// disjoint, so writes to per-index slots stay deterministic for any thread
// count. Work items below min_grain run on the calling thread.
void parallel_for(std::int64_t n, std::int64_t min_grain,
                  const std::function<void(std::int64_t, std::int64_t)>& body);

// FNV-1a over raw bytes; used for parameter freeze checksums.
std::uint64_t fnv1a64(const void* data, std::size_t len,
                      std::uint64_t seed = 14695981039346656037ull);

// Derives an independent seed for stream `stream` from a master seed
// (splitmix64 finalizer over the pair).
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream);

std::string version_string();

}  // namespace dp
