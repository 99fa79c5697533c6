#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <unordered_set>
#include <vector>

#include "autoshard/rng.hpp"
#include "autoshard/tables.hpp"

// Deterministic latency oracle standing in for the GPU embedding operator.
// Absolute milliseconds are synthetic; what the model preserves is the
// qualitative structure: dimension dominates, hash size enters weakly
// (log10), access skew buys a cache discount, and co-located tables cost
// less than the sum of their parts but never less than the largest member.

namespace autoshard {

struct SimParams {
  double c0 = 0.05;            // fixed launch overhead, ms
  double a = 2e-6;             // ms per element-access
  double b = 0.001;            // ms per dim * log10-unit of hash size
  double rho = 0.5;            // parallelism share, [0, 1)
  double cache_floor = 0.5;    // min cache multiplier, (0, 1]
  double noise_sigma = 0.03;   // relative lognormal std of one measurement
  double outlier_prob = 0.05;
  double outlier_scale = 3.0;

  void validate() const {
    if (c0 < 0 || a < 0 || b < 0 || noise_sigma < 0 || outlier_prob < 0 ||
        outlier_prob > 1 || outlier_scale < 0)
      throw ConfigError("sim: parameters must be non-negative");
    if (rho < 0 || rho >= 1) throw ConfigError("sim: rho must be in [0, 1)");
    if (cache_floor <= 0 || cache_floor > 1)
      throw ConfigError("sim: cache_floor must be in (0, 1]");
  }

  bool operator==(const SimParams&) const = default;
};

/// One (feature set, measured latency) regression pair.
struct CostSample {
  enum class Provenance { kExact, kTrimmedNoisy };
  std::vector<FeatureArray> table_features;
  double latency_ms = 0.0;
  Provenance provenance = Provenance::kExact;
};

namespace detail {

inline double cache_multiplier(double u, const SimParams& p) {
  return p.cache_floor + (1.0 - p.cache_floor) * u;
}

}  // namespace detail

/// Single-table kernel latency. With L total lookups and u the distinct
/// fraction of accessed rows: c0 + a*L*dim*cache(u) + b*dim*log10(1+hash).
inline double single_latency(const TableDesc& t, const Workload& wl,
                             const SimParams& p) {
  const TableStream* s = wl.find(t.id);
  if (s == nullptr)
    throw LookupError("single_latency: table " + std::to_string(t.id) +
                      " absent from workload");
  const double L = static_cast<double>(s->indices.size());
  double access_term = 0.0;
  if (!s->indices.empty()) {
    std::unordered_set<std::int64_t> distinct(s->indices.begin(),
                                              s->indices.end());
    const double u =
        std::min(1.0, static_cast<double>(distinct.size()) / L);
    access_term = p.a * L * t.dim * detail::cache_multiplier(u, p);
  }
  const double hash_term =
      p.b * t.dim * std::log10(1.0 + static_cast<double>(t.hash_size));
  return p.c0 + access_term + hash_term;
}

/// Marginal cost w_t = single_latency - c0, the reusable per-table part.
inline double marginal_cost(const TableDesc& t, const Workload& wl,
                            const SimParams& p) {
  return single_latency(t, wl, p) - p.c0;
}

inline std::vector<double> marginal_costs(const std::vector<TableDesc>& tables,
                                          const Workload& wl,
                                          const SimParams& p) {
  std::vector<double> w;
  w.reserve(tables.size());
  for (const auto& t : tables) w.push_back(marginal_cost(t, wl, p));
  return w;
}

/// Batched shard latency from precomputed marginals:
/// c0 + max(max_t w_t, (1-rho)*sum_t w_t + rho*max_t w_t).
/// A rho share of the work overlaps behind the largest member, so the cost
/// is strictly below the single-sum for n >= 2 yet never drops when a table
/// is added, and the batch is never faster than its largest member.
inline double shard_cost_from_marginals(const std::vector<double>& w,
                                        const SimParams& p) {
  if (w.empty()) return p.c0;
  double sum = 0.0, mx = 0.0;
  for (double v : w) {
    sum += v;
    mx = std::max(mx, v);
  }
  return p.c0 + std::max(mx, (1.0 - p.rho) * sum + p.rho * mx);
}

/// Ground-truth multi-table latency of one shard.
inline double shard_latency(const std::vector<TableDesc>& shard,
                            const Workload& wl, const SimParams& p) {
  return shard_cost_from_marginals(marginal_costs(shard, wl, p), p);
}

/// Applies one measurement's noise to a base latency: lognormal(0, sigma)
/// scaled by outlier_scale with probability outlier_prob. `was_outlier`,
/// when given, reports whether the outlier branch fired.
inline double noisy_measurement(double base, const SimParams& p, Rng& rng,
                                bool* was_outlier = nullptr) {
  const bool outlier = rng.uniform() < p.outlier_prob;
  const double noise = rng.lognormal(p.noise_sigma);
  if (was_outlier != nullptr) *was_outlier = outlier;
  return base * noise * (outlier ? p.outlier_scale : 1.0);
}

/// One noisy measurement of a shard. The warm-up/cache-clearing steps of the
/// hardware protocol have no state here; the noise model is the only thing a
/// single call adds.
inline double benchmark_op(const std::vector<TableDesc>& shard,
                           const Workload& wl, const SimParams& p, Rng& rng,
                           bool* was_outlier = nullptr) {
  return noisy_measurement(shard_latency(shard, wl, p), p, rng, was_outlier);
}

/// Warmup + trimmed-mean window over a fixed base latency: W discarded
/// warmup measurements, B kept, drop the R highest and R lowest, mean the
/// rest.
inline double trimmed_window(double base, const SimParams& p, int warmup,
                             int measure, int trim, Rng& rng) {
  if (warmup < 0 || measure < 1 || trim < 0 || measure - 2 * trim < 1)
    throw ConfigError("micro_benchmark: need measure - 2*trim >= 1, got B=" +
                      std::to_string(measure) + " R=" + std::to_string(trim));
  for (int i = 0; i < warmup; ++i) noisy_measurement(base, p, rng);
  std::vector<double> costs;
  costs.reserve(static_cast<std::size_t>(measure));
  for (int i = 0; i < measure; ++i)
    costs.push_back(noisy_measurement(base, p, rng));
  std::sort(costs.begin(), costs.end());
  double sum = 0.0;
  for (int i = trim; i < measure - trim; ++i) sum += costs[i];
  return sum / static_cast<double>(measure - 2 * trim);
}

inline double micro_benchmark(const std::vector<TableDesc>& shard,
                              const Workload& wl, const SimParams& p,
                              int warmup, int measure, int trim, Rng& rng) {
  return trimmed_window(shard_latency(shard, wl, p), p, warmup, measure, trim,
                        rng);
}

struct BenchConfig {
  int warmup = 5;   // W
  int measure = 10; // B
  int trim = 2;     // R
  bool exact = false;
  std::uint64_t seed = 0;

  bool operator==(const BenchConfig&) const = default;
};

/// Per-shard cost vector from per-table marginals grouped by shard. Exact
/// mode returns the analytic shard cost; noisy mode runs one trimmed window
/// per shard with an independent rng stream per shard index.
inline std::vector<double> measure_costs_from_marginals(
    const std::vector<std::vector<double>>& shard_marginals,
    const SimParams& p, const BenchConfig& bench) {
  std::vector<double> costs(shard_marginals.size(), 0.0);
  for (std::size_t k = 0; k < shard_marginals.size(); ++k) {
    const double base = shard_cost_from_marginals(shard_marginals[k], p);
    if (bench.exact) {
      costs[k] = base;
    } else {
      Rng rng(derive_seed(bench.seed, "bench-shard", k));
      costs[k] =
          trimmed_window(base, p, bench.warmup, bench.measure, bench.trim, rng);
    }
  }
  return costs;
}

/// Per-shard cost vector for a plan under a task.
inline std::vector<double> measure_plan(const ShardingPlan& plan,
                                        const ShardingTask& task,
                                        const Workload& wl, const SimParams& p,
                                        const BenchConfig& bench) {
  plan.validate(task);
  const std::vector<double> w = marginal_costs(task.tables, wl, p);
  std::vector<std::vector<double>> grouped(task.num_shards);
  for (std::size_t i = 0; i < plan.assignment.size(); ++i)
    grouped[plan.assignment[i]].push_back(w[i]);
  return measure_costs_from_marginals(grouped, p, bench);
}

}  // namespace autoshard
