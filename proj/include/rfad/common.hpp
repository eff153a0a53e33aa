#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>

namespace rfad {

// Error taxonomy. Shape and dimension problems name the offending axis,
// numeric failures carry enough context to locate the failing step.
class ShapeError : public std::runtime_error {
public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
public:
  explicit NumericError(const std::string& msg, int pivot = -1)
      : std::runtime_error(msg), pivot_(pivot) {}
  // Index of the failing Cholesky pivot, or -1 when not applicable.
  int pivot() const { return pivot_; }

private:
  int pivot_;
};

class UsageError : public std::runtime_error {
public:
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

class ProvenanceError : public std::runtime_error {
public:
  explicit ProvenanceError(const std::string& msg) : std::runtime_error(msg) {}
};

class DataError : public std::runtime_error {
public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Process-wide worker count for parallel_for. 0 = hardware concurrency.
void set_thread_count(int n);
int thread_count();

// Runs fn(begin, end) over a static contiguous partition of [0, n).
// Each index is processed by exactly one worker in ascending order, so
// results do not depend on the worker count.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn);

// SplitMix64-style seed mixing: derives independent named streams from a
// master seed without correlated low bits.
std::uint64_t mix_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index = 0);

// Deterministic standard-normal sampler (polar Box-Muller over
// mt19937_64). std::normal_distribution is implementation-defined, which
// would break bit-reproducibility of sampled networks across toolchains.
class GaussianSampler {
public:
  explicit GaussianSampler(std::uint64_t seed) : gen_(seed) {}
  double operator()();

private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// FNV-1a 64-bit over raw bytes; used for dataset/config content hashes.
std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed = 14695981039346656037ull);

}  // namespace rfad
