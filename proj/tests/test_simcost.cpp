#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "autoshard/simcost.hpp"
#include "autoshard/tables.hpp"

using namespace autoshard;

namespace {

// One stream whose L lookups hit `distinct` different rows, spread evenly
// over `batch` queries.
Workload synthetic_stream(const TableDesc& t, std::int64_t lookups,
                          std::int64_t distinct, std::int64_t batch) {
  Workload wl;
  wl.batch_size = batch;
  TableStream s;
  s.table_id = t.id;
  for (std::int64_t i = 0; i < lookups; ++i)
    s.indices.push_back(distinct > 0 ? i % distinct : 0);
  s.offsets.push_back(0);
  for (std::int64_t q = 1; q <= batch; ++q)
    s.offsets.push_back(lookups * q / batch);
  wl.per_table.push_back(std::move(s));
  return wl;
}

Workload merge(const Workload& a, const Workload& b) {
  Workload wl = a;
  for (const auto& s : b.per_table) wl.per_table.push_back(s);
  std::sort(wl.per_table.begin(), wl.per_table.end(),
            [](const TableStream& x, const TableStream& y) {
              return x.table_id < y.table_id;
            });
  return wl;
}

const TableDesc kRef{.id = 0, .dim = 16, .hash_size = 999'999,
                     .pooling_mean = 8.0, .access_ratio = 1.0};

}  // namespace

TEST_CASE("single latency matches the hand-evaluated formula") {
  // L = 8192, u = 1, hash = 999,999:
  // 0.05 + 2e-6*8192*16 + 0.001*16*log10(1e6) = 0.408144
  const auto wl = synthetic_stream(kRef, 8192, 8192, 1024);
  REQUIRE(single_latency(kRef, wl, SimParams{}) ==
          Catch::Approx(0.408144).epsilon(1e-12));

  TableDesc wide = kRef;
  wide.dim = 32;
  REQUIRE(single_latency(wide, wl, SimParams{}) ==
          Catch::Approx(0.766288).epsilon(1e-12));
}

TEST_CASE("zero lookups leave only overhead and the hash term") {
  const auto wl = synthetic_stream(kRef, 0, 0, 4);
  const SimParams p;
  REQUIRE(single_latency(kRef, wl, p) ==
          Catch::Approx(p.c0 + p.b * 16 * std::log10(1.0 + 999'999.0)));
}

TEST_CASE("absent table raises a lookup error") {
  Workload wl;
  wl.batch_size = 4;
  REQUIRE_THROWS_AS(single_latency(kRef, wl, SimParams{}), LookupError);
}

TEST_CASE("shard latency combines marginals as specified") {
  TableDesc t2 = kRef;
  t2.id = 1;
  const auto wl = merge(synthetic_stream(kRef, 8192, 8192, 1024),
                        synthetic_stream(t2, 8192, 8192, 1024));
  const SimParams p;

  SECTION("two identical tables land below the single-sum") {
    const double lat = shard_latency({kRef, t2}, wl, p);
    REQUIRE(lat == Catch::Approx(0.587216).epsilon(1e-12));
    REQUIRE(lat < 2 * 0.408144 - p.c0);  // single-sum of marginals
  }
  SECTION("one table reduces to its single latency") {
    REQUIRE(shard_latency({kRef}, wl, p) ==
            Catch::Approx(single_latency(kRef, wl, p)).epsilon(1e-15));
  }
  SECTION("empty shard costs the overhead only") {
    REQUIRE(shard_latency({}, wl, p) == Catch::Approx(p.c0));
  }
}

TEST_CASE("simulator properties hold on randomized shards") {
  Rng rng(99);
  const SimParams p;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(6));
    std::vector<double> w;
    for (int i = 0; i < n; ++i) w.push_back(rng.uniform(0.01, 2.0));
    const double lat = shard_cost_from_marginals(w, p);
    double sum = 0.0, mx = 0.0;
    for (double v : w) {
      sum += v;
      mx = std::max(mx, v);
    }
    REQUIRE(lat < p.c0 + sum);       // sub-additivity, strict
    REQUIRE(lat >= p.c0 + mx);       // dominance
    // monotonicity under one added table
    std::vector<double> w2 = w;
    w2.push_back(rng.uniform(0.001, 2.0));
    REQUIRE(shard_cost_from_marginals(w2, p) >= lat);
  }
}

TEST_CASE("cache discount and load terms are monotone") {
  const SimParams p;
  TableDesc t = kRef;
  // decreasing distinct rows (more skew) never increases latency
  double prev = std::numeric_limits<double>::max();
  for (std::int64_t distinct : {8192, 4096, 1024, 64, 1}) {
    const auto wl = synthetic_stream(t, 8192, distinct, 1024);
    const double lat = single_latency(t, wl, p);
    REQUIRE(lat <= prev);
    prev = lat;
  }
  // increasing L never decreases latency
  prev = 0.0;
  for (std::int64_t lookups : {0, 64, 1024, 8192, 65536}) {
    const auto wl = synthetic_stream(t, lookups, std::min<std::int64_t>(lookups, 512), 1024);
    const double lat = single_latency(t, wl, p);
    REQUIRE(lat >= prev);
    prev = lat;
  }
}

TEST_CASE("benchmark_op reduces to the exact latency without noise") {
  const auto wl = synthetic_stream(kRef, 1024, 512, 128);
  SimParams p;
  p.noise_sigma = 0.0;
  p.outlier_prob = 0.0;
  Rng rng(1);
  REQUIRE(benchmark_op({kRef}, wl, p, rng) ==
          Catch::Approx(shard_latency({kRef}, wl, p)).epsilon(1e-15));
}

TEST_CASE("benchmark_op is deterministic per seed") {
  const auto wl = synthetic_stream(kRef, 1024, 512, 128);
  const SimParams p;
  Rng a(7), b(7);
  for (int i = 0; i < 16; ++i)
    REQUIRE(benchmark_op({kRef}, wl, p, a) == benchmark_op({kRef}, wl, p, b));
}

TEST_CASE("forced outliers scale the measurement") {
  const auto wl = synthetic_stream(kRef, 1024, 512, 128);
  SimParams p;
  p.noise_sigma = 0.0;
  p.outlier_prob = 1.0;
  p.outlier_scale = 3.0;
  Rng rng(7);
  REQUIRE(benchmark_op({kRef}, wl, p, rng) ==
          Catch::Approx(3.0 * shard_latency({kRef}, wl, p)).epsilon(1e-15));
}

TEST_CASE("micro benchmark equals the exact latency when noise is off") {
  const auto wl = synthetic_stream(kRef, 1024, 512, 128);
  SimParams p;
  p.noise_sigma = 0.0;
  p.outlier_prob = 0.0;
  Rng rng(3);
  const double exact = shard_latency({kRef}, wl, p);
  for (auto [w, b, r] : {std::tuple{5, 10, 2}, {0, 1, 0}, {2, 7, 3}}) {
    REQUIRE(micro_benchmark({kRef}, wl, p, w, b, r, rng) ==
            Catch::Approx(exact).epsilon(1e-12));
  }
}

TEST_CASE("micro benchmark validates the trim window") {
  const auto wl = synthetic_stream(kRef, 64, 32, 8);
  Rng rng(3);
  REQUIRE_THROWS_AS(micro_benchmark({kRef}, wl, SimParams{}, 5, 4, 2, rng),
                    ConfigError);
}

TEST_CASE("trimming removes injected spikes") {
  // sigma small, guaranteed <= 2 outliers by construction: count them first
  // with a replayed rng, then check the trimmed estimate.
  const auto wl = synthetic_stream(kRef, 2048, 700, 256);
  SimParams p;
  p.noise_sigma = 0.02;
  p.outlier_prob = 0.08;
  const double exact = shard_latency({kRef}, wl, p);
  int checked = 0;
  for (std::uint64_t seed = 0; seed < 400 && checked < 200; ++seed) {
    Rng probe(seed);
    int outliers = 0;
    for (int i = 0; i < 15; ++i) {
      bool flag = false;
      noisy_measurement(exact, p, probe, &flag);
      if (i >= 5 && flag) ++outliers;  // measured window only
    }
    if (outliers > 2) continue;
    Rng rng(seed);
    const double est = micro_benchmark({kRef}, wl, p, 5, 10, 2, rng);
    REQUIRE(std::abs(est - exact) / exact < 3.0 * p.noise_sigma);
    ++checked;
  }
  REQUIRE(checked >= 200);
}

TEST_CASE("measure_plan covers empty shards and exact mode") {
  const auto pool = generate_pool(21, 5);
  const auto wl = generate_workload(21, pool, 128);
  ShardingTask task;
  task.tables = pool;
  task.num_shards = 4;
  task.mem_budget.assign(4, task.total_bytes() + 1);
  ShardingPlan plan;
  plan.assignment.assign(5, 2);  // everything on shard 2

  const SimParams p;
  const auto costs =
      measure_plan(plan, task, wl, p, BenchConfig{.exact = true});
  REQUIRE(costs.size() == 4);
  for (int k = 0; k < 4; ++k) {
    if (k == 2) continue;
    REQUIRE(costs[k] == Catch::Approx(p.c0));
  }

  // noisy mode with sigma=0 and outliers off equals exact mode
  SimParams quiet = p;
  quiet.noise_sigma = 0.0;
  quiet.outlier_prob = 0.0;
  const auto noisy =
      measure_plan(plan, task, wl, quiet, BenchConfig{.exact = false});
  const auto exact =
      measure_plan(plan, task, wl, quiet, BenchConfig{.exact = true});
  for (int k = 0; k < 4; ++k)
    REQUIRE(noisy[k] == Catch::Approx(exact[k]).epsilon(1e-12));

  ShardingPlan bad;
  bad.assignment.assign(4, 0);
  REQUIRE_THROWS_AS(measure_plan(bad, task, wl, p, BenchConfig{}),
                    ConfigError);
}

TEST_CASE("figure-style cost vectors give the expected balance and speedup") {
  const std::vector<double> naive{15, 9, 6};
  const std::vector<double> balanced{10, 10, 10};
  REQUIRE(degree_of_balance(naive) == Catch::Approx(0.4));
  REQUIRE(degree_of_balance(balanced) == Catch::Approx(1.0));
  // speedup = max(random) / max(ours)
  REQUIRE(15.0 / 10.0 == Catch::Approx(1.5));
}

TEST_CASE("sim params are validated") {
  SimParams p;
  p.rho = 1.0;
  REQUIRE_THROWS_AS(p.validate(), ConfigError);
  SimParams q;
  q.cache_floor = 0.0;
  REQUIRE_THROWS_AS(q.validate(), ConfigError);
}
