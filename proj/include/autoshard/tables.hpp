#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "autoshard/common.hpp"
#include "autoshard/rng.hpp"

namespace autoshard {

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Static description of one embedding table.
struct TableDesc {
  int id = 0;
  int dim = 16;                 // embedding vector length
  std::int64_t hash_size = 1;   // row count
  double pooling_mean = 0.0;    // mean lookup indices per query
  double access_ratio = 1.0;    // fraction of rows ever accessed, in (0, 1]
  int bytes_per_param = 2;

  std::int64_t size_bytes() const {
    return static_cast<std::int64_t>(dim) * hash_size * bytes_per_param;
  }
  double size_gb() const {
    return static_cast<double>(size_bytes()) / (1024.0 * 1024.0 * 1024.0);
  }
};

/// Per-table lookup streams for one batch, tables in ascending id order.
/// offsets has batch_size + 1 entries; indices for query q live in
/// [offsets[q], offsets[q+1]).
struct TableStream {
  int table_id = 0;
  std::vector<std::int64_t> indices;
  std::vector<std::int64_t> offsets;
};

struct Workload {
  std::int64_t batch_size = 0;
  std::vector<TableStream> per_table;  // ascending table_id

  const TableStream* find(int table_id) const {
    auto it = std::lower_bound(
        per_table.begin(), per_table.end(), table_id,
        [](const TableStream& s, int id) { return s.table_id < id; });
    if (it == per_table.end() || it->table_id != table_id) return nullptr;
    return &*it;
  }
};

/// A sharding task: a set of tables, K shards, per-shard memory budgets.
struct ShardingTask {
  std::vector<TableDesc> tables;
  int num_shards = 1;
  std::vector<std::int64_t> mem_budget;

  // Device-count rule: one shard per ten tables, rounded up.
  static int default_num_shards(std::size_t n_tables) {
    return static_cast<int>((n_tables + 9) / 10);
  }

  std::int64_t total_bytes() const {
    std::int64_t s = 0;
    for (const auto& t : tables) s += t.size_bytes();
    return s;
  }
  std::int64_t total_budget() const {
    return std::accumulate(mem_budget.begin(), mem_budget.end(),
                           std::int64_t{0});
  }

  void validate() const {
    if (num_shards < 1) throw ConfigError("task: num_shards must be >= 1");
    if (static_cast<int>(mem_budget.size()) != num_shards)
      throw ConfigError("task: mem_budget size must equal num_shards");
    for (auto b : mem_budget)
      if (b <= 0) throw ConfigError("task: all memory budgets must be > 0");
  }
};

/// Mapping table -> shard id, stored positionally against task.tables.
struct ShardingPlan {
  std::vector<int> assignment;

  void validate(const ShardingTask& task) const {
    if (assignment.size() != task.tables.size())
      throw ConfigError("plan: assignment length " +
                        std::to_string(assignment.size()) +
                        " does not match task table count " +
                        std::to_string(task.tables.size()));
    for (std::size_t i = 0; i < assignment.size(); ++i) {
      if (assignment[i] < 0 || assignment[i] >= task.num_shards)
        throw ConfigError("plan: table index " + std::to_string(i) +
                          " assigned to invalid shard " +
                          std::to_string(assignment[i]));
    }
  }

  /// Member table ids per shard.
  std::vector<std::vector<int>> shard_members(const ShardingTask& task) const {
    validate(task);
    std::vector<std::vector<int>> members(task.num_shards);
    for (std::size_t i = 0; i < assignment.size(); ++i)
      members[assignment[i]].push_back(task.tables[i].id);
    return members;
  }

  /// Member positions (indices into task.tables) per shard.
  std::vector<std::vector<int>> shard_member_indices(
      const ShardingTask& task) const {
    validate(task);
    std::vector<std::vector<int>> members(task.num_shards);
    for (std::size_t i = 0; i < assignment.size(); ++i)
      members[assignment[i]].push_back(static_cast<int>(i));
    return members;
  }

  std::vector<std::int64_t> mem_used(const ShardingTask& task) const {
    validate(task);
    std::vector<std::int64_t> used(task.num_shards, 0);
    for (std::size_t i = 0; i < assignment.size(); ++i)
      used[assignment[i]] += task.tables[i].size_bytes();
    return used;
  }

  bool feasible(const ShardingTask& task) const {
    auto used = mem_used(task);
    for (int k = 0; k < task.num_shards; ++k)
      if (used[k] > task.mem_budget[k]) return false;
    return true;
  }
};

// ---------------------------------------------------------------------------
// Synthetic pool generation
// ---------------------------------------------------------------------------

struct GeneratorConfig {
  double hash_size_min = 1e3;   // log-uniform range for row counts
  double hash_size_max = 1e7;
  double pooling_mean_target = 15.0;  // Lomax mean before capping
  double pooling_shape = 2.0;         // Lomax alpha for table-level means
  double pooling_cap = 193.0;
  std::vector<int> dim_choices = {16, 32};
  double access_ratio_min = 1e-3;  // log-uniform range
  double access_ratio_max = 1.0;
  int bytes_per_param = 2;

  void validate() const {
    if (hash_size_min < 1.0 || hash_size_max < hash_size_min)
      throw ConfigError("generator: hash_size range empty or inverted");
    if (dim_choices.empty())
      throw ConfigError("generator: dim_choices must be non-empty");
    if (access_ratio_min <= 0.0 || access_ratio_max < access_ratio_min ||
        access_ratio_max > 1.0)
      throw ConfigError("generator: access_ratio range empty or inverted");
    if (pooling_mean_target < 0.0 || pooling_shape <= 1.0 ||
        pooling_cap <= 0.0)
      throw ConfigError("generator: bad pooling parameters");
    if (bytes_per_param < 1)
      throw ConfigError("generator: bytes_per_param must be >= 1");
  }
};

/// Deterministic synthetic table pool with MetaSyn-shaped marginals.
/// Per-table rng streams make the pool prefix-stable in n_tables.
inline std::vector<TableDesc> generate_pool(std::uint64_t seed, int n_tables,
                                            const GeneratorConfig& cfg = {}) {
  cfg.validate();
  if (n_tables < 1) throw ConfigError("generate_pool: n_tables must be >= 1");
  std::vector<TableDesc> pool;
  pool.reserve(static_cast<std::size_t>(n_tables));
  const double lambda = cfg.pooling_mean_target * (cfg.pooling_shape - 1.0);
  for (int i = 0; i < n_tables; ++i) {
    Rng rng(derive_seed(seed, "pool-table", static_cast<std::uint64_t>(i)));
    TableDesc t;
    t.id = i;
    t.hash_size = static_cast<std::int64_t>(
        std::llround(rng.log_uniform(cfg.hash_size_min, cfg.hash_size_max)));
    t.hash_size = std::max<std::int64_t>(t.hash_size, 1);
    t.pooling_mean =
        std::min(sample_lomax(rng, cfg.pooling_shape, lambda), cfg.pooling_cap);
    t.dim = cfg.dim_choices[rng.below(cfg.dim_choices.size())];
    t.access_ratio = rng.log_uniform(cfg.access_ratio_min, cfg.access_ratio_max);
    t.bytes_per_param = cfg.bytes_per_param;
    pool.push_back(t);
  }
  return pool;
}

// ---------------------------------------------------------------------------
// Synthetic workload generation
// ---------------------------------------------------------------------------

namespace detail {

// Pseudorandom warm-row map: j -> (a*j + b) mod hash with gcd(a, hash) = 1,
// so the first n_accessible slots are distinct, scattered row ids.
struct WarmRowMap {
  std::int64_t a = 1, b = 0, hash = 1;
  std::int64_t row(std::int64_t j) const { return (a * j + b) % hash; }
};

inline WarmRowMap make_warm_row_map(Rng& rng, std::int64_t hash_size) {
  WarmRowMap m;
  m.hash = hash_size;
  if (hash_size == 1) {
    m.a = 1;
    m.b = 0;
    return m;
  }
  do {
    m.a = 1 + static_cast<std::int64_t>(
                  rng.below(static_cast<std::uint64_t>(hash_size - 1)));
  } while (std::gcd(m.a, hash_size) != 1);
  m.b = static_cast<std::int64_t>(
      rng.below(static_cast<std::uint64_t>(hash_size)));
  return m;
}

}  // namespace detail

/// Per-query lookup counts follow a Lomax(3, 2*pooling_mean) law with
/// stochastic rounding (mean-exact); indices are Zipf-skewed over the first
/// ceil(access_ratio * hash_size) rows of a seeded row permutation.
inline Workload generate_workload(std::uint64_t seed,
                                  const std::vector<TableDesc>& tables,
                                  std::int64_t batch_size,
                                  double zipf_exponent = 1.05) {
  if (batch_size < 1)
    throw ConfigError("generate_workload: batch_size must be >= 1");
  std::vector<const TableDesc*> sorted;
  sorted.reserve(tables.size());
  for (const auto& t : tables) {
    if (t.hash_size < 1)
      throw ConfigError("generate_workload: table " + std::to_string(t.id) +
                        " has invalid hash_size");
    sorted.push_back(&t);
  }
  std::sort(sorted.begin(), sorted.end(),
            [](const TableDesc* a, const TableDesc* b) { return a->id < b->id; });

  Workload wl;
  wl.batch_size = batch_size;
  wl.per_table.reserve(sorted.size());
  for (const TableDesc* t : sorted) {
    // Streams are seeded per (seed, table id): a sub-pool workload equals the
    // restriction of the full-pool workload.
    Rng rng(derive_seed(seed, "workload-table",
                        static_cast<std::uint64_t>(t->id)));
    TableStream s;
    s.table_id = t->id;
    s.offsets.reserve(static_cast<std::size_t>(batch_size) + 1);
    s.offsets.push_back(0);

    const std::int64_t accessible = std::clamp<std::int64_t>(
        static_cast<std::int64_t>(
            std::ceil(t->access_ratio * static_cast<double>(t->hash_size))),
        1, t->hash_size);
    const auto warm = detail::make_warm_row_map(rng, t->hash_size);
    ZipfSampler zipf(static_cast<std::uint64_t>(accessible), zipf_exponent);

    for (std::int64_t q = 0; q < batch_size; ++q) {
      const double x = sample_lomax(rng, 3.0, 2.0 * t->pooling_mean);
      std::int64_t count = static_cast<std::int64_t>(std::floor(x));
      if (rng.uniform() < x - std::floor(x)) ++count;
      for (std::int64_t j = 0; j < count; ++j) {
        const std::int64_t rank =
            static_cast<std::int64_t>(zipf(rng)) - 1;  // 0-based warm slot
        s.indices.push_back(warm.row(rank));
      }
      s.offsets.push_back(static_cast<std::int64_t>(s.indices.size()));
    }
    wl.per_table.push_back(std::move(s));
  }
  return wl;
}

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

inline constexpr int kNumBins = 17;
inline constexpr int kNumFeatures = 4 + kNumBins;  // 21

using FeatureArray = std::array<double, kNumFeatures>;

/// Raw layout: [dim, hash_size, pooling, size_gb, bin_1..bin_17].
struct FeatureVector {
  FeatureArray raw{};
  FeatureArray normalized{};
};

/// Pool-level z-scoring stats for the first three features.
struct NormStats {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};

  bool operator==(const NormStats&) const = default;
};

/// Feature-group selector for ablations; disabled groups are zeroed.
struct FeatureMask {
  bool dim = true;
  bool hash_size = true;
  bool pooling = true;
  bool size = true;
  bool bins = true;

  bool operator==(const FeatureMask&) const = default;
};

namespace detail {

// Bin index for a per-row occurrence count c >= 1. Bins:
// (0,1], (1,2], (2,4], ..., (16384,32768], (32768,inf).
inline int frequency_bin(std::int64_t c) {
  if (c <= 1) return 0;
  const int b = std::bit_width(static_cast<std::uint64_t>(c - 1));
  return std::min(b, kNumBins - 1);
}

}  // namespace detail

/// Observed pooling factor: total indices over batch size (0 if absent).
inline double observed_pooling(const TableDesc& t, const Workload& wl) {
  const TableStream* s = wl.find(t.id);
  if (s == nullptr || wl.batch_size == 0) return 0.0;
  return static_cast<double>(s->indices.size()) /
         static_cast<double>(wl.batch_size);
}

inline FeatureVector extract_features(const TableDesc& t, const Workload& wl,
                                      const NormStats& norm,
                                      const FeatureMask& mask = {}) {
  FeatureVector f;
  f.raw[0] = static_cast<double>(t.dim);
  f.raw[1] = static_cast<double>(t.hash_size);
  f.raw[2] = observed_pooling(t, wl);
  f.raw[3] = t.size_gb();

  const TableStream* s = wl.find(t.id);
  if (s != nullptr && !s->indices.empty()) {
    std::unordered_map<std::int64_t, std::int64_t> counts;
    counts.reserve(s->indices.size());
    for (auto idx : s->indices) ++counts[idx];
    const double distinct = static_cast<double>(counts.size());
    for (const auto& [row, c] : counts)
      f.raw[4 + detail::frequency_bin(c)] += 1.0;
    for (int b = 0; b < kNumBins; ++b) f.raw[4 + b] /= distinct;
  }

  f.normalized = f.raw;
  for (int i = 0; i < 3; ++i) {
    f.normalized[i] -= norm.mean[i];
    if (norm.stddev[i] > 0.0) f.normalized[i] /= norm.stddev[i];
    // zero stddev: centered only
  }
  // size_gb is deliberately left unnormalized.

  const bool keep[4] = {mask.dim, mask.hash_size, mask.pooling, mask.size};
  for (int i = 0; i < 4; ++i) {
    if (!keep[i]) {
      f.raw[i] = 0.0;
      f.normalized[i] = 0.0;
    }
  }
  if (!mask.bins) {
    for (int b = 0; b < kNumBins; ++b) {
      f.raw[4 + b] = 0.0;
      f.normalized[4 + b] = 0.0;
    }
  }
  return f;
}

/// Population mean/std of (dim, hash_size, observed pooling) over the pool.
inline NormStats compute_norm_stats(const std::vector<TableDesc>& pool,
                                    const Workload& wl) {
  if (pool.empty())
    throw ConfigError("compute_norm_stats: pool must be non-empty");
  NormStats ns;
  const double n = static_cast<double>(pool.size());
  std::array<double, 3> sum{0, 0, 0}, sum2{0, 0, 0};
  for (const auto& t : pool) {
    const double v[3] = {static_cast<double>(t.dim),
                         static_cast<double>(t.hash_size),
                         observed_pooling(t, wl)};
    for (int i = 0; i < 3; ++i) {
      sum[i] += v[i];
      sum2[i] += v[i] * v[i];
    }
  }
  for (int i = 0; i < 3; ++i) {
    ns.mean[i] = sum[i] / n;
    const double var = std::max(0.0, sum2[i] / n - ns.mean[i] * ns.mean[i]);
    ns.stddev[i] = std::sqrt(var);
  }
  return ns;
}

// ---------------------------------------------------------------------------
// Fingerprints
// ---------------------------------------------------------------------------

inline std::uint64_t fingerprint(const TableDesc& t,
                                 std::uint64_t h = 0xcbf29ce484222325ull) {
  auto mix = [&h](const void* p, std::size_t n) { h = fnv1a64(p, n, h); };
  mix(&t.id, sizeof(t.id));
  mix(&t.dim, sizeof(t.dim));
  mix(&t.hash_size, sizeof(t.hash_size));
  mix(&t.pooling_mean, sizeof(t.pooling_mean));
  mix(&t.access_ratio, sizeof(t.access_ratio));
  mix(&t.bytes_per_param, sizeof(t.bytes_per_param));
  return h;
}

inline std::uint64_t fingerprint(const std::vector<TableDesc>& pool) {
  std::uint64_t h = fnv1a64("pool");
  for (const auto& t : pool) h = fingerprint(t, h);
  return h;
}

inline std::uint64_t fingerprint(const ShardingTask& task) {
  std::uint64_t h = fnv1a64("task");
  h = fingerprint(task.tables) ^ h;
  h = fnv1a64(&task.num_shards, sizeof(task.num_shards), h);
  for (auto b : task.mem_budget) h = fnv1a64(&b, sizeof(b), h);
  return h;
}

inline std::uint64_t fingerprint(const NormStats& ns) {
  std::uint64_t h = fnv1a64("norm");
  h = fnv1a64(ns.mean.data(), sizeof(double) * 3, h);
  h = fnv1a64(ns.stddev.data(), sizeof(double) * 3, h);
  return h;
}

}  // namespace autoshard
