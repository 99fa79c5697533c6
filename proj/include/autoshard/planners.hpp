#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "autoshard/rng.hpp"
#include "autoshard/simcost.hpp"
#include "autoshard/tables.hpp"

// Non-learned baselines: greedy heuristics over scalar table costs, random
// sharding, random search, and an exhaustive enumerator for tiny instances.

namespace autoshard {

enum class HeuristicKind { kSizeGreedy, kDimGreedy, kLookupGreedy, kRandom };

inline const char* heuristic_name(HeuristicKind k) {
  switch (k) {
    case HeuristicKind::kSizeGreedy: return "size-greedy";
    case HeuristicKind::kDimGreedy: return "dim-greedy";
    case HeuristicKind::kLookupGreedy: return "lookup-greedy";
    case HeuristicKind::kRandom: return "rand";
  }
  return "?";
}

inline double heuristic_cost(const TableDesc& t, HeuristicKind kind) {
  switch (kind) {
    case HeuristicKind::kSizeGreedy:
      return static_cast<double>(t.dim) * static_cast<double>(t.hash_size);
    case HeuristicKind::kDimGreedy:
      return static_cast<double>(t.dim);
    case HeuristicKind::kLookupGreedy:
      return static_cast<double>(t.dim) * t.pooling_mean;
    case HeuristicKind::kRandom:
      throw ConfigError("heuristic_cost: rand has no cost function");
  }
  return 0.0;
}

namespace detail {

inline void check_aggregate_feasibility(const ShardingTask& task) {
  const std::int64_t total = task.total_bytes();
  const std::int64_t budget = task.total_budget();
  if (total > budget)
    throw InfeasibleError(
        "task infeasible: total table bytes " + std::to_string(total) +
        " exceed total budget " + std::to_string(budget) + " by " +
        std::to_string(total - budget));
}

// Shard with the most free memory; ties break to the lowest shard id.
inline int most_free_shard(const std::vector<std::int64_t>& free_bytes) {
  int best = 0;
  for (int k = 1; k < static_cast<int>(free_bytes.size()); ++k)
    if (free_bytes[k] > free_bytes[best]) best = k;
  return best;
}

}  // namespace detail

/// Greedy: sort tables by descending heuristic cost (ties: lower id first),
/// then place each on the shard with the smallest running cost sum that still
/// has memory for it (ties: lowest shard id). If no shard admits the table,
/// it goes to the shard with the most free memory and the plan is reported
/// infeasible by the caller's budget check.
inline ShardingPlan greedy_shard(const ShardingTask& task, HeuristicKind kind) {
  if (kind == HeuristicKind::kRandom)
    throw ConfigError("greedy_shard: use random_shard for kind=rand");
  task.validate();
  detail::check_aggregate_feasibility(task);

  const std::size_t n = task.tables.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> cost(n);
  for (std::size_t i = 0; i < n; ++i)
    cost[i] = heuristic_cost(task.tables[i], kind);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (cost[a] != cost[b]) return cost[a] > cost[b];
    return task.tables[a].id < task.tables[b].id;
  });

  ShardingPlan plan;
  plan.assignment.assign(n, 0);
  std::vector<double> running(task.num_shards, 0.0);
  std::vector<std::int64_t> free_bytes = task.mem_budget;
  for (std::size_t i : order) {
    const std::int64_t sz = task.tables[i].size_bytes();
    int chosen = -1;
    for (int k = 0; k < task.num_shards; ++k) {
      if (free_bytes[k] < sz) continue;
      if (chosen < 0 || running[k] < running[chosen]) chosen = k;
    }
    if (chosen < 0) chosen = detail::most_free_shard(free_bytes);
    plan.assignment[i] = chosen;
    running[chosen] += cost[i];
    free_bytes[chosen] -= sz;
  }
  return plan;
}

/// Uniform shard draw per table, retried while the drawn shard lacks memory;
/// falls back to the most-free shard after kMaxDraws attempts.
inline ShardingPlan random_shard(const ShardingTask& task, std::uint64_t seed) {
  constexpr int kMaxDraws = 16;
  task.validate();
  detail::check_aggregate_feasibility(task);
  Rng rng(derive_seed(seed, "random-shard"));

  ShardingPlan plan;
  plan.assignment.assign(task.tables.size(), 0);
  std::vector<std::int64_t> free_bytes = task.mem_budget;
  for (std::size_t i = 0; i < task.tables.size(); ++i) {
    const std::int64_t sz = task.tables[i].size_bytes();
    int chosen = -1;
    for (int attempt = 0; attempt < kMaxDraws; ++attempt) {
      const int k = static_cast<int>(
          rng.below(static_cast<std::uint64_t>(task.num_shards)));
      if (free_bytes[k] >= sz) {
        chosen = k;
        break;
      }
    }
    if (chosen < 0) chosen = detail::most_free_shard(free_bytes);
    plan.assignment[i] = chosen;
    free_bytes[chosen] -= sz;
  }
  return plan;
}

/// Degree of balance of a cost vector: min/max, 1.0 for a single shard.
inline double degree_of_balance(const std::vector<double>& costs) {
  if (costs.empty()) throw ConfigError("degree_of_balance: empty cost vector");
  const auto [mn, mx] = std::minmax_element(costs.begin(), costs.end());
  if (*mx <= 0.0) return 1.0;
  return *mn / *mx;
}

using PlanEvaluator = std::function<double(const ShardingPlan&)>;

/// Exact-mode balance evaluator (the one random search is defined against).
inline PlanEvaluator exact_balance_evaluator(const ShardingTask& task,
                                             const Workload& wl,
                                             const SimParams& p) {
  // Marginals are reused across the many candidate plans.
  auto w = std::make_shared<std::vector<double>>(
      marginal_costs(task.tables, wl, p));
  const int k_shards = task.num_shards;
  return [w, k_shards, p](const ShardingPlan& plan) {
    std::vector<std::vector<double>> per_shard(k_shards);
    for (std::size_t i = 0; i < plan.assignment.size(); ++i)
      per_shard[plan.assignment[i]].push_back((*w)[i]);
    std::vector<double> costs(k_shards);
    for (int k = 0; k < k_shards; ++k)
      costs[k] = shard_cost_from_marginals(per_shard[k], p);
    return degree_of_balance(costs);
  };
}

struct SearchResult {
  ShardingPlan best;
  double best_balance = 0.0;
  std::vector<double> history;  // best-so-far after each sample
};

/// Samples n random feasible plans, keeps the best balance.
inline SearchResult random_search(const ShardingTask& task,
                                  const PlanEvaluator& evaluate, int n_samples,
                                  std::uint64_t seed) {
  if (n_samples < 1)
    throw ConfigError("random_search: n_samples must be >= 1");
  SearchResult res;
  res.history.reserve(static_cast<std::size_t>(n_samples));
  for (int s = 0; s < n_samples; ++s) {
    ShardingPlan cand =
        random_shard(task, derive_seed(seed, "search-sample",
                                       static_cast<std::uint64_t>(s)));
    const double bal = evaluate(cand);
    if (res.history.empty() || bal > res.best_balance) {
      res.best_balance = bal;
      res.best = std::move(cand);
    }
    res.history.push_back(res.best_balance);
  }
  return res;
}

struct BruteForceResult {
  ShardingPlan best;
  double best_max_cost = 0.0;
  std::vector<double> best_costs;
};

/// Exhaustive enumeration of all K^N assignments; minimizes the maximum
/// exact shard cost over feasible plans, ties to the lexicographically
/// smallest assignment. Guarded to K^N <= 1e7.
inline BruteForceResult brute_force(const ShardingTask& task,
                                    const Workload& wl, const SimParams& p) {
  task.validate();
  const std::size_t n = task.tables.size();
  const int K = task.num_shards;
  double combos = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    combos *= K;
    if (combos > 1e7)
      throw GuardError("brute_force: K^N exceeds 1e7 for K=" +
                       std::to_string(K) + ", N=" + std::to_string(n));
  }

  const std::vector<double> w = marginal_costs(task.tables, wl, p);
  std::vector<std::int64_t> sizes(n);
  for (std::size_t i = 0; i < n; ++i) sizes[i] = task.tables[i].size_bytes();

  std::vector<int> assign(n, 0);
  BruteForceResult best;
  bool found = false;
  std::vector<double> sum(K), mx(K);
  std::vector<int> cnt(K);
  std::vector<std::int64_t> used(K);
  for (;;) {
    std::fill(sum.begin(), sum.end(), 0.0);
    std::fill(mx.begin(), mx.end(), 0.0);
    std::fill(cnt.begin(), cnt.end(), 0);
    std::fill(used.begin(), used.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const int k = assign[i];
      sum[k] += w[i];
      mx[k] = std::max(mx[k], w[i]);
      ++cnt[k];
      used[k] += sizes[i];
    }
    bool feasible = true;
    for (int k = 0; k < K; ++k)
      if (used[k] > task.mem_budget[k]) {
        feasible = false;
        break;
      }
    if (feasible) {
      double worst = 0.0;
      std::vector<double> costs(K);
      for (int k = 0; k < K; ++k) {
        costs[k] = cnt[k] == 0
                       ? p.c0
                       : p.c0 + std::max(mx[k], (1.0 - p.rho) * sum[k] +
                                                    p.rho * mx[k]);
        worst = std::max(worst, costs[k]);
      }
      // Ascending lexicographic enumeration + strict improvement keeps the
      // lexicographically smallest optimum.
      if (!found || worst < best.best_max_cost) {
        found = true;
        best.best_max_cost = worst;
        best.best.assignment = assign;
        best.best_costs = std::move(costs);
      }
    }
    // Odometer increment, most-significant digit first so the enumeration
    // order is lexicographic on the assignment vector.
    std::size_t pos = n;
    while (pos > 0) {
      --pos;
      if (++assign[pos] < K) break;
      assign[pos] = 0;
      if (pos == 0) {
        if (!found)
          throw InfeasibleError(
              "brute_force: no feasible assignment exists for this task");
        return best;
      }
    }
  }
}

}  // namespace autoshard
