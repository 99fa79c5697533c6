#pragma once

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <string_view>

namespace autoshard {

inline constexpr std::string_view kVersion = "0.1.0";

// Error taxonomy. Everything user-facing throws one of these; the message
// carries the offending entity (table id, layer name, shard index, ...).
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
  using Error::Error;
};
// File/stream decoding problems (bad header, truncation).
struct ParseError : Error {
  using Error::Error;
};
struct OffsetError : ParseError {
  using ParseError::ParseError;
};
struct IndexError : ParseError {
  using ParseError::ParseError;
};
// Task cannot be satisfied (aggregate memory deficit).
struct InfeasibleError : Error {
  using Error::Error;
};
// Tensor/vector dimension mismatch.
struct ShapeError : Error {
  using Error::Error;
};
// A referenced entity is missing (table absent from workload, ...).
struct LookupError : Error {
  using Error::Error;
};
// Instance exceeds a hard resource guard (brute-force enumeration cap).
struct GuardError : Error {
  using Error::Error;
};
// Operation invoked in an invalid state (step after done, checkpoint mismatch).
struct StateError : Error {
  using Error::Error;
};

inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), h);
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Child seed for a named stream. Streams with distinct (name, index) are
// statistically independent; the same triple always yields the same seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view stream,
                                 std::uint64_t index = 0) {
  std::uint64_t h = fnv1a64(stream);
  return splitmix64(master ^ splitmix64(h + 0x9e3779b97f4a7c15ull * (index + 1)));
}

}  // namespace autoshard
