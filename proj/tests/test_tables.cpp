#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <sstream>

#include "autoshard/tables.hpp"
#include "autoshard/workload_io.hpp"

using namespace autoshard;

namespace {

Workload single_stream_workload(int table_id, std::vector<std::int64_t> indices,
                                std::int64_t batch_size = 1) {
  Workload wl;
  wl.batch_size = batch_size;
  TableStream s;
  s.table_id = table_id;
  s.offsets.push_back(0);
  // all lookups in one query, remaining queries empty
  s.indices = std::move(indices);
  s.offsets.push_back(static_cast<std::int64_t>(s.indices.size()));
  for (std::int64_t q = 1; q < batch_size; ++q)
    s.offsets.push_back(s.offsets.back());
  wl.per_table.push_back(std::move(s));
  return wl;
}

std::string serialize_workload(const Workload& wl,
                               const std::vector<TableDesc>& tables) {
  std::ostringstream os;
  save_workload(os, wl, tables);
  return os.str();
}

}  // namespace

TEST_CASE("size_bytes is exact") {
  TableDesc t{.id = 0, .dim = 32, .hash_size = 1'000'000, .pooling_mean = 5,
              .access_ratio = 1.0, .bytes_per_param = 2};
  REQUIRE(t.size_bytes() == 32LL * 1'000'000 * 2);
}

TEST_CASE("device count rule rounds up") {
  REQUIRE(ShardingTask::default_num_shards(80) == 8);
  REQUIRE(ShardingTask::default_num_shards(81) == 9);
  REQUIRE(ShardingTask::default_num_shards(1) == 1);
}

TEST_CASE("generate_pool matches the target statistics") {
  const auto pool = generate_pool(0, 856);
  REQUIRE(pool.size() == 856);
  double pool_sum = 0.0, pool_max = 0.0;
  for (const auto& t : pool) {
    REQUIRE((t.dim == 16 || t.dim == 32));
    REQUIRE(t.hash_size >= 1000);
    REQUIRE(t.hash_size <= 10'000'000);
    REQUIRE(t.access_ratio >= 1e-3);
    REQUIRE(t.access_ratio <= 1.0);
    pool_sum += t.pooling_mean;
    pool_max = std::max(pool_max, t.pooling_mean);
  }
  const double mean = pool_sum / 856.0;
  REQUIRE(pool_max <= 193.0);
  REQUIRE(mean >= 10.0);
  REQUIRE(mean <= 20.0);
}

TEST_CASE("generate_pool honors forced dim choice") {
  GeneratorConfig cfg;
  cfg.dim_choices = {16};
  const auto pool = generate_pool(0, 1, cfg);
  REQUIRE(pool.size() == 1);
  REQUIRE(pool[0].dim == 16);
}

TEST_CASE("generate_pool is deterministic and prefix-stable") {
  const auto a = generate_pool(7, 100);
  const auto b = generate_pool(7, 100);
  REQUIRE(fingerprint(a) == fingerprint(b));
  const auto longer = generate_pool(7, 120);
  for (int i = 0; i < 100; ++i)
    REQUIRE(fingerprint(a[i]) == fingerprint(longer[i]));
}

TEST_CASE("generate_pool rejects bad config") {
  GeneratorConfig cfg;
  cfg.hash_size_min = 100.0;
  cfg.hash_size_max = 10.0;
  REQUIRE_THROWS_AS(generate_pool(0, 4, cfg), ConfigError);
  GeneratorConfig cfg2;
  cfg2.dim_choices.clear();
  REQUIRE_THROWS_AS(generate_pool(0, 4, cfg2), ConfigError);
}

TEST_CASE("generate_workload invariants hold") {
  const auto pool = generate_pool(3, 20);
  const auto wl = generate_workload(11, pool, 1024);
  REQUIRE(wl.per_table.size() == pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const auto& s = wl.per_table[i];
    REQUIRE(s.table_id == pool[i].id);
    REQUIRE(s.offsets.size() == 1025);
    REQUIRE(s.offsets.front() == 0);
    for (std::size_t q = 1; q < s.offsets.size(); ++q)
      REQUIRE(s.offsets[q] >= s.offsets[q - 1]);
    REQUIRE(s.offsets.back() == static_cast<std::int64_t>(s.indices.size()));
    for (auto idx : s.indices) {
      REQUIRE(idx >= 0);
      REQUIRE(idx < pool[i].hash_size);
    }
    // observed pooling factor within 25% of the table parameter
    const double observed =
        static_cast<double>(s.indices.size()) / 1024.0;
    if (pool[i].pooling_mean > 0.5) {
      REQUIRE(observed >= 0.75 * pool[i].pooling_mean);
      REQUIRE(observed <= 1.25 * pool[i].pooling_mean);
    }
  }
}

TEST_CASE("zero pooling mean yields an empty stream") {
  TableDesc t{.id = 0, .dim = 16, .hash_size = 100, .pooling_mean = 0.0,
              .access_ratio = 1.0};
  const auto wl = generate_workload(5, {t}, 64);
  REQUIRE(wl.per_table[0].indices.empty());
  for (auto o : wl.per_table[0].offsets) REQUIRE(o == 0);
}

TEST_CASE("tiny access ratio pins all lookups to one row") {
  TableDesc t{.id = 0, .dim = 16, .hash_size = 10, .pooling_mean = 4.0,
              .access_ratio = 0.1};
  const auto wl = generate_workload(5, {t}, 256);
  REQUIRE_FALSE(wl.per_table[0].indices.empty());
  const auto first = wl.per_table[0].indices.front();
  for (auto idx : wl.per_table[0].indices) REQUIRE(idx == first);
}

TEST_CASE("total lookups stay in the 25% band around the mean") {
  TableDesc t{.id = 0, .dim = 16, .hash_size = 1000, .pooling_mean = 8.0,
              .access_ratio = 1.0};
  const auto wl = generate_workload(17, {t}, 1024);
  const auto total = static_cast<std::int64_t>(wl.per_table[0].indices.size());
  REQUIRE(total >= 6144);
  REQUIRE(total <= 10240);
}

TEST_CASE("generate_workload is deterministic and subset-stable") {
  const auto pool = generate_pool(2, 12);
  const auto a = generate_workload(9, pool, 128);
  const auto b = generate_workload(9, pool, 128);
  REQUIRE(serialize_workload(a, pool) == serialize_workload(b, pool));
  // restriction to a sub-pool reproduces the same streams
  std::vector<TableDesc> sub(pool.begin() + 4, pool.begin() + 8);
  const auto c = generate_workload(9, sub, 128);
  for (std::size_t i = 0; i < sub.size(); ++i) {
    REQUIRE(c.per_table[i].indices == a.per_table[i + 4].indices);
    REQUIRE(c.per_table[i].offsets == a.per_table[i + 4].offsets);
  }
}

TEST_CASE("generate_workload rejects invalid tables") {
  TableDesc t{.id = 0, .dim = 16, .hash_size = 0, .pooling_mean = 1.0,
              .access_ratio = 1.0};
  REQUIRE_THROWS_AS(generate_workload(0, {t}, 16), ConfigError);
}

TEST_CASE("frequency bins classify a hand counted example") {
  // occurrence counts {a:1, b:1, c:2, d:5} over 4 distinct rows
  TableDesc t{.id = 0, .dim = 16, .hash_size = 100, .pooling_mean = 9.0,
              .access_ratio = 1.0};
  const auto wl =
      single_stream_workload(0, {10, 20, 30, 30, 40, 40, 40, 40, 40}, 1);
  const auto f = extract_features(t, wl, NormStats{});
  REQUIRE(f.raw[4 + 0] == Catch::Approx(0.5));    // (0,1]
  REQUIRE(f.raw[4 + 1] == Catch::Approx(0.25));   // (1,2]
  REQUIRE(f.raw[4 + 2] == Catch::Approx(0.0));    // (2,4]
  REQUIRE(f.raw[4 + 3] == Catch::Approx(0.25));   // (4,8]
  for (int b = 4; b < kNumBins; ++b) REQUIRE(f.raw[4 + b] == 0.0);
  REQUIRE(f.raw[2] == Catch::Approx(9.0));  // observed pooling, batch 1
}

TEST_CASE("empty stream produces all-zero bins") {
  TableDesc t{.id = 3, .dim = 16, .hash_size = 100, .pooling_mean = 0.0,
              .access_ratio = 1.0};
  Workload wl;
  wl.batch_size = 4;
  const auto f = extract_features(t, wl, NormStats{});
  for (int b = 0; b < kNumBins; ++b) REQUIRE(f.raw[4 + b] == 0.0);
  REQUIRE(f.raw[2] == 0.0);
}

TEST_CASE("bin ratios sum to one or are all zero") {
  const auto pool = generate_pool(4, 30);
  const auto wl = generate_workload(4, pool, 256);
  const NormStats ns = compute_norm_stats(pool, wl);
  for (const auto& t : pool) {
    const auto f = extract_features(t, wl, ns);
    double sum = 0.0;
    for (int b = 0; b < kNumBins; ++b) sum += f.raw[4 + b];
    if (wl.find(t.id)->indices.empty()) {
      REQUIRE(sum == 0.0);
    } else {
      REQUIRE(std::abs(sum - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("masking zeroes groups and the full vector is the group sum") {
  const auto pool = generate_pool(6, 8);
  const auto wl = generate_workload(6, pool, 128);
  const NormStats ns = compute_norm_stats(pool, wl);
  const auto& t = pool[3];

  FeatureMask no_pooling;
  no_pooling.pooling = false;
  REQUIRE(extract_features(t, wl, ns, no_pooling).normalized[2] == 0.0);
  REQUIRE(extract_features(t, wl, ns, no_pooling).raw[2] == 0.0);

  const auto full = extract_features(t, wl, ns).normalized;
  FeatureMask none{false, false, false, false, false};
  FeatureArray sum{};
  for (int g = 0; g < 5; ++g) {
    FeatureMask one = none;
    if (g == 0) one.dim = true;
    if (g == 1) one.hash_size = true;
    if (g == 2) one.pooling = true;
    if (g == 3) one.size = true;
    if (g == 4) one.bins = true;
    const auto part = extract_features(t, wl, ns, one).normalized;
    for (int i = 0; i < kNumFeatures; ++i) sum[i] += part[i];
  }
  for (int i = 0; i < kNumFeatures; ++i)
    REQUIRE(sum[i] == Catch::Approx(full[i]).margin(1e-12));
}

TEST_CASE("norm stats of identical tables have zero stddev") {
  TableDesc t{.id = 0, .dim = 16, .hash_size = 500, .pooling_mean = 2.0,
              .access_ratio = 1.0};
  TableDesc t2 = t;
  t2.id = 1;
  const std::vector<TableDesc> pool{t, t2};
  const auto wl = generate_workload(1, pool, 64);
  const auto ns = compute_norm_stats(pool, wl);
  REQUIRE(ns.stddev[0] == 0.0);
  REQUIRE(ns.stddev[1] == 0.0);
  // centered passthrough when stddev is zero
  const auto f = extract_features(pool[0], wl, ns);
  REQUIRE(f.normalized[0] == Catch::Approx(0.0));
  REQUIRE(f.normalized[1] == Catch::Approx(0.0));
}

TEST_CASE("norm stats mean of dims 16 and 32 is 24") {
  auto pool = generate_pool(8, 10);
  for (std::size_t i = 0; i < pool.size(); ++i)
    pool[i].dim = (i % 2 == 0) ? 16 : 32;
  const auto wl = generate_workload(8, pool, 32);
  const auto ns = compute_norm_stats(pool, wl);
  REQUIRE(ns.mean[0] == Catch::Approx(24.0));
  REQUIRE_THROWS_AS(compute_norm_stats({}, wl), ConfigError);
}

TEST_CASE("norm stats track generator targets on a MetaSyn-shaped pool") {
  const auto pool = generate_pool(0, 400);
  const auto wl = generate_workload(0, pool, 256);
  const auto ns = compute_norm_stats(pool, wl);
  // log-uniform hash sizes over [1e3, 1e7]: E[X] = (b-a)/ln(b/a), ~1.09e6
  REQUIRE(ns.mean[1] > 3e5);
  REQUIRE(ns.mean[1] < 3e6);
  // observed pooling tracks the table-level mean (~13.9 after capping)
  REQUIRE(ns.mean[2] > 8.0);
  REQUIRE(ns.mean[2] < 20.0);
}

TEST_CASE("plan memory accounting is exact") {
  const auto pool = generate_pool(9, 25);
  ShardingTask task;
  task.tables = pool;
  task.num_shards = 4;
  task.mem_budget.assign(4, std::numeric_limits<std::int64_t>::max() / 8);
  Rng rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    ShardingPlan plan;
    for (std::size_t i = 0; i < pool.size(); ++i)
      plan.assignment.push_back(static_cast<int>(rng.below(4)));
    const auto used = plan.mem_used(task);
    const auto total = std::accumulate(used.begin(), used.end(),
                                       std::int64_t{0});
    REQUIRE(total == task.total_bytes());
    // every table in exactly one shard
    const auto members = plan.shard_members(task);
    std::size_t count = 0;
    for (const auto& m : members) count += m.size();
    REQUIRE(count == pool.size());
  }
}

TEST_CASE("pool files round trip") {
  const auto pool = generate_pool(12, 17);
  std::ostringstream os;
  save_pool(os, pool);
  std::istringstream is(os.str());
  const auto loaded = load_pool(is);
  REQUIRE(fingerprint(loaded) == fingerprint(pool));
  // second serialization is byte-identical
  std::ostringstream os2;
  save_pool(os2, loaded);
  REQUIRE(os2.str() == os.str());
}

TEST_CASE("workload files round trip") {
  const auto pool = generate_pool(13, 6);
  const auto wl = generate_workload(13, pool, 64);
  const std::string bytes = serialize_workload(wl, pool);
  std::istringstream is(bytes);
  const auto loaded = load_workload(is);
  REQUIRE(loaded.workload.batch_size == wl.batch_size);
  REQUIRE(loaded.tables.size() == pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    REQUIRE(loaded.workload.per_table[i].indices == wl.per_table[i].indices);
    REQUIRE(loaded.workload.per_table[i].offsets == wl.per_table[i].offsets);
  }
  REQUIRE(serialize_workload(loaded.workload, loaded.tables) == bytes);
}

TEST_CASE("truncated workload file fails to parse") {
  const auto pool = generate_pool(14, 3);
  const auto wl = generate_workload(14, pool, 32);
  const std::string bytes = serialize_workload(wl, pool);
  std::istringstream is(bytes.substr(0, bytes.size() - 9));
  REQUIRE_THROWS_AS(load_workload(is), ParseError);
}

TEST_CASE("offset and index violations raise distinct errors naming the table") {
  const auto pool = generate_pool(15, 1);
  const auto wl = generate_workload(15, pool, 16);
  std::string bytes = serialize_workload(wl, pool);
  const auto header_end = bytes.find("end_header\n") + 11;

  SECTION("offsets must start at zero") {
    std::string bad = bytes;
    bad[header_end + 8] = 1;  // offsets[0] low byte
    std::istringstream is(bad);
    try {
      load_workload(is);
      FAIL("expected OffsetError");
    } catch (const OffsetError& e) {
      REQUIRE(std::string(e.what()).find("table 0") != std::string::npos);
      REQUIRE(std::string(e.what()).find("start at 0") != std::string::npos);
    }
  }

  SECTION("indices must stay below hash_size") {
    // rewrite the first index to hash_size
    const std::size_t n_off = wl.per_table[0].offsets.size();
    const std::size_t idx_pos = header_end + 8 + 8 * n_off + 8;
    std::string bad = bytes;
    const std::uint64_t big =
        static_cast<std::uint64_t>(pool[0].hash_size);
    for (int i = 0; i < 8; ++i)
      bad[idx_pos + i] = static_cast<char>((big >> (8 * i)) & 0xff);
    std::istringstream is(bad);
    try {
      load_workload(is);
      FAIL("expected IndexError");
    } catch (const IndexError& e) {
      REQUIRE(std::string(e.what()).find("table 0") != std::string::npos);
      REQUIRE(std::string(e.what()).find("out of range") != std::string::npos);
    }
  }

  SECTION("bad magic") {
    std::string bad = "autoshard-workload 9\n" + bytes.substr(21);
    std::istringstream is(bad);
    REQUIRE_THROWS_AS(load_workload(is), ParseError);
  }
}
