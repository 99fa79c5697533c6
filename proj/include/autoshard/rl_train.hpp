#pragma once

#include <chrono>
#include <cstdint>
#include <fstream>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "autoshard/rl.hpp"

// Joint training driver: synchronous actor lanes collect fixed-length
// unrolls with parameter snapshots, one learner applies the V-trace update,
// then the cost model takes its regression steps on the shared buffer.
// Snapshots are refreshed right after the policy update, so the cost-model
// steps in between are what the V-trace correction has to absorb.

namespace autoshard::rl {

/// Live models bound to one parameter store. The init rng is a member so
/// the cost model and policy net draw from one deterministic stream.
struct ModelBundle {
  net::ParamStore store;
  Rng init_rng;
  cost::CostModel cost;
  PolicyValueNet net;

  ModelBundle(std::uint64_t init_seed, const NetDims& dims,
              const cost::CostModelDims& cost_dims, bool use_cost_model)
      : store(init_seed),
        init_rng(init_seed),
        cost(store, init_rng, cost_dims),
        net(store, cost, init_rng, dims, use_cost_model) {}
};

struct TrainConfig {
  VTraceConfig vtrace;
  net::AdamConfig adam;                  // lr 1e-3, clip 40
  net::AdamConfig cost_adam{1e-3, 0.9, 0.999, 1e-8, 0.0};
  int batch_unrolls = 8;                 // B1
  std::size_t cost_batch = 512;          // B2
  int cost_iters = 20;                   // I
  std::size_t buffer_capacity = 5000;
  int bootstrap_samples = 500;           // random shards seeding the buffer
  int cost_warmup_iters = 100;           // MSE steps right after bootstrap
  int n_actors = 2;
  std::uint64_t seed = 0;
  int max_updates = 500;
  double max_seconds = 1e18;
  int eval_every = 10;
  int plateau_evals = 0;                 // 0 disables plateau stopping
  double target_train_balance = 2.0;     // > 1 disables early stop
  BenchConfig reward_bench{.exact = true};
  bool select_best = true;
  NetDims dims;
  cost::CostModelDims cost_dims;
  bool use_cost_model = true;
  bool train_cost_model = true;          // false in the no-cost-model ablation
};

/// Self-contained model + everything needed to reuse it on new tasks.
struct Checkpoint {
  NetDims dims;
  cost::CostModelDims cost_dims;
  bool use_cost_model = true;
  std::uint64_t init_seed = 0;
  NormStats norm;
  FeatureMask mask;
  SimParams sim;
  VTraceConfig vtrace;
  double target_mean = 0.0;
  double target_scale = 1.0;
  std::uint64_t pool_fingerprint = 0;
  std::int64_t batch_size = 0;
  std::shared_ptr<ModelBundle> bundle;
};

namespace detail {

inline void put_bool(std::ostream& os, bool b) { os.put(b ? 1 : 0); }
inline bool get_bool(std::istream& is) {
  const int c = is.get();
  if (c < 0) throw ParseError("checkpoint: truncated stream");
  return c != 0;
}

}  // namespace detail

inline void save_checkpoint(std::ostream& os, const Checkpoint& ck) {
  os.write("ASHCKPT1", 8);
  using net::detail::put_f64;
  using net::detail::put_u64;
  put_u64(os, ck.dims.repr);
  put_u64(os, ck.dims.step_embed);
  put_u64(os, ck.dims.lstm_hidden);
  put_u64(os, ck.dims.lstm_layers);
  put_u64(os, ck.dims.cost_embed);
  put_u64(os, ck.dims.policy_hidden.size());
  for (auto h : ck.dims.policy_hidden) put_u64(os, h);
  put_u64(os, ck.dims.value_hidden);
  put_u64(os, ck.cost_dims.feat);
  put_u64(os, ck.cost_dims.enc_hidden);
  put_u64(os, ck.cost_dims.repr);
  put_u64(os, ck.cost_dims.head_hidden);
  detail::put_bool(os, ck.use_cost_model);
  put_u64(os, ck.init_seed);
  for (double v : ck.norm.mean) put_f64(os, v);
  for (double v : ck.norm.stddev) put_f64(os, v);
  detail::put_bool(os, ck.mask.dim);
  detail::put_bool(os, ck.mask.hash_size);
  detail::put_bool(os, ck.mask.pooling);
  detail::put_bool(os, ck.mask.size);
  detail::put_bool(os, ck.mask.bins);
  put_f64(os, ck.sim.c0);
  put_f64(os, ck.sim.a);
  put_f64(os, ck.sim.b);
  put_f64(os, ck.sim.rho);
  put_f64(os, ck.sim.cache_floor);
  put_f64(os, ck.sim.noise_sigma);
  put_f64(os, ck.sim.outlier_prob);
  put_f64(os, ck.sim.outlier_scale);
  put_f64(os, ck.vtrace.gamma);
  put_f64(os, ck.vtrace.rho_bar);
  put_f64(os, ck.vtrace.c_bar);
  put_u64(os, static_cast<std::uint64_t>(ck.vtrace.unroll_len));
  put_f64(os, ck.vtrace.entropy_weight);
  put_f64(os, ck.vtrace.baseline_weight);
  put_f64(os, ck.target_mean);
  put_f64(os, ck.target_scale);
  put_u64(os, ck.pool_fingerprint);
  put_u64(os, static_cast<std::uint64_t>(ck.batch_size));
  ck.bundle->store.save(os);
}

inline Checkpoint load_checkpoint(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::string(magic, 8) != "ASHCKPT1")
    throw ParseError("checkpoint: bad magic");
  using net::detail::get_f64;
  using net::detail::get_u64;
  Checkpoint ck;
  ck.dims.repr = get_u64(is);
  ck.dims.step_embed = get_u64(is);
  ck.dims.lstm_hidden = get_u64(is);
  ck.dims.lstm_layers = get_u64(is);
  ck.dims.cost_embed = get_u64(is);
  ck.dims.policy_hidden.resize(get_u64(is));
  for (auto& h : ck.dims.policy_hidden) h = get_u64(is);
  ck.dims.value_hidden = get_u64(is);
  ck.cost_dims.feat = get_u64(is);
  ck.cost_dims.enc_hidden = get_u64(is);
  ck.cost_dims.repr = get_u64(is);
  ck.cost_dims.head_hidden = get_u64(is);
  ck.use_cost_model = detail::get_bool(is);
  ck.init_seed = get_u64(is);
  for (double& v : ck.norm.mean) v = get_f64(is);
  for (double& v : ck.norm.stddev) v = get_f64(is);
  ck.mask.dim = detail::get_bool(is);
  ck.mask.hash_size = detail::get_bool(is);
  ck.mask.pooling = detail::get_bool(is);
  ck.mask.size = detail::get_bool(is);
  ck.mask.bins = detail::get_bool(is);
  ck.sim.c0 = get_f64(is);
  ck.sim.a = get_f64(is);
  ck.sim.b = get_f64(is);
  ck.sim.rho = get_f64(is);
  ck.sim.cache_floor = get_f64(is);
  ck.sim.noise_sigma = get_f64(is);
  ck.sim.outlier_prob = get_f64(is);
  ck.sim.outlier_scale = get_f64(is);
  ck.vtrace.gamma = get_f64(is);
  ck.vtrace.rho_bar = get_f64(is);
  ck.vtrace.c_bar = get_f64(is);
  ck.vtrace.unroll_len = static_cast<int>(get_u64(is));
  ck.vtrace.entropy_weight = get_f64(is);
  ck.vtrace.baseline_weight = get_f64(is);
  ck.target_mean = get_f64(is);
  ck.target_scale = get_f64(is);
  ck.pool_fingerprint = get_u64(is);
  ck.batch_size = static_cast<std::int64_t>(get_u64(is));
  ck.bundle = std::make_shared<ModelBundle>(ck.init_seed, ck.dims,
                                            ck.cost_dims, ck.use_cost_model);
  ck.bundle->store.load(is);
  ck.bundle->cost.set_target_stats(ck.target_mean, ck.target_scale);
  return ck;
}

inline void save_checkpoint_file(const std::string& path,
                                 const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ParseError("cannot open for writing: " + path);
  save_checkpoint(os, ck);
}

inline Checkpoint load_checkpoint_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open: " + path);
  return load_checkpoint(is);
}

// ---------------------------------------------------------------------------
// Policy evaluation and inference
// ---------------------------------------------------------------------------

/// One deterministic (argmax) episode; returns the plan.
inline ShardingPlan run_argmax_episode(const PolicyValueNet& net,
                                       const TaskContext& ctx) {
  EnvState env = env_reset(ctx);
  auto rec = net.initial_state();
  const auto reprs = net.encode_tables(ctx);
  while (!env.done()) {
    const ActResult a = net.act(env, reprs, rec, ActMode::kArgmax);
    env_step(env, a.action, BenchConfig{.exact = true});
  }
  ShardingPlan plan;
  plan.assignment = env.assignment;
  return plan;
}

/// Mean exact balance of argmax plans over a task set.
inline double mean_argmax_balance(const PolicyValueNet& net,
                                  const std::vector<TaskContext>& tasks) {
  if (tasks.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& ctx : tasks) {
    const ShardingPlan plan = run_argmax_episode(net, ctx);
    const auto costs = measure_plan(plan, ctx.task, *ctx.workload, ctx.sim,
                                    BenchConfig{.exact = true});
    sum += degree_of_balance(costs);
  }
  return sum / static_cast<double>(tasks.size());
}

/// Applies a checkpoint to a new task. The context is built with the
/// checkpoint's own normalization stats and feature mask; the workload must
/// match the batch size and simulator the checkpoint was trained against.
inline ShardingPlan shard_with_checkpoint(
    const Checkpoint& ck, const ShardingTask& task, const Workload& wl,
    std::vector<double>* predicted_costs = nullptr) {
  if (wl.batch_size != ck.batch_size)
    throw StateError(
        "shard: workload batch size " + std::to_string(wl.batch_size) +
        " does not match checkpoint batch size " +
        std::to_string(ck.batch_size) +
        "; features would drift from the training distribution");
  TaskContext ctx = make_task_context(0, task, wl, ck.norm, ck.mask, ck.sim);
  const ShardingPlan plan = run_argmax_episode(ck.bundle->net, ctx);
  if (predicted_costs != nullptr) {
    predicted_costs->assign(task.num_shards, 0.0);
    const auto members = plan.shard_member_indices(task);
    for (int k = 0; k < task.num_shards; ++k) {
      std::vector<FeatureArray> feats;
      feats.reserve(members[k].size());
      for (int idx : members[k]) feats.push_back(ctx.features[idx]);
      (*predicted_costs)[k] = ck.bundle->cost.predict(feats);
    }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<std::pair<std::int64_t, double>> curve;  // (plans, test balance)
  double best_train_balance = 0.0;
  double final_test_balance = 0.0;
  int updates = 0;
  std::int64_t episodes = 0;
  double seconds = 0.0;
};

namespace detail {

// One synchronous actor lane: owns a snapshot, an in-flight episode, and an
// rng stream. collect() emits exactly one unroll of T steps.
struct ActorLane {
  std::unique_ptr<ModelBundle> snapshot;
  Rng rng;
  int task_id = -1;
  EnvState env;
  LstmStack::State rec;
  std::vector<Vec> reprs;
  std::uint64_t episodes_started = 0;

  ActorLane(std::uint64_t seed, const TrainConfig& cfg)
      : snapshot(std::make_unique<ModelBundle>(derive_seed(seed, "snap"),
                                               cfg.dims, cfg.cost_dims,
                                               cfg.use_cost_model)),
        rng(seed) {}
};

inline void lane_begin_episode(ActorLane& lane,
                               const std::vector<TaskContext>& tasks,
                               const BenchConfig& reward_bench,
                               std::uint64_t lane_seed) {
  lane.task_id = static_cast<int>(lane.rng.below(tasks.size()));
  const std::uint64_t ep_seed = reward_bench.exact
                                    ? 0
                                    : derive_seed(lane_seed, "episode-bench",
                                                  lane.episodes_started);
  lane.env = env_reset(tasks[lane.task_id], std::nullopt, ep_seed);
  lane.rec = lane.snapshot->net.initial_state();
  lane.reprs = lane.snapshot->net.encode_tables(tasks[lane.task_id]);
  ++lane.episodes_started;
}

struct CollectStats {
  int episodes = 0;
  double reward_sum = 0.0;
};

inline Unroll lane_collect(ActorLane& lane,
                           const std::vector<TaskContext>& tasks,
                           const TrainConfig& cfg, std::uint64_t lane_seed,
                           cost::CostBuffer& buffer, CollectStats& stats) {
  if (lane.task_id < 0)
    lane_begin_episode(lane, tasks, cfg.reward_bench, lane_seed);
  Unroll un;
  un.carry_task_id = lane.task_id;
  un.carry_pos = lane.env.pos;
  if (lane.env.pos > 0) un.carry_assignment = lane.env.assignment;
  un.init_state = lane.rec;
  un.steps.reserve(static_cast<std::size_t>(cfg.vtrace.unroll_len));
  while (static_cast<int>(un.steps.size()) < cfg.vtrace.unroll_len) {
    StepRecord sr;
    sr.task_id = lane.task_id;
    sr.pos = lane.env.pos;
    const ActResult a = lane.snapshot->net.act(lane.env, lane.reprs, lane.rec,
                                               ActMode::kSample, &lane.rng);
    const EnvStepResult step = env_step(lane.env, a.action, cfg.reward_bench);
    sr.action = a.action;
    sr.behavior_prob = a.prob;
    sr.reward = step.reward;
    sr.done = step.done;
    un.steps.push_back(sr);
    if (step.done) {
      ++stats.episodes;
      stats.reward_sum += step.reward;
      if (step.feasible) {
        const TaskContext& ctx = tasks[lane.task_id];
        for (int k = 0; k < ctx.task.num_shards; ++k) {
          CostSample cs;
          cs.latency_ms = step.shard_costs[k];
          cs.provenance = cfg.reward_bench.exact
                              ? CostSample::Provenance::kExact
                              : CostSample::Provenance::kTrimmedNoisy;
          cs.table_features.reserve(lane.env.shard_tables[k].size());
          for (int idx : lane.env.shard_tables[k])
            cs.table_features.push_back(ctx.features[idx]);
          buffer.push(std::move(cs));
        }
      }
      lane_begin_episode(lane, tasks, cfg.reward_bench, lane_seed);
    }
  }
  return un;
}

// Random shards of varied sizes seed the buffer so the cost model covers
// the partial-shard sizes the policy asks about mid-episode.
inline void bootstrap_buffer(const std::vector<TaskContext>& tasks,
                             const TrainConfig& cfg,
                             cost::CostBuffer& buffer) {
  Rng rng(derive_seed(cfg.seed, "bootstrap"));
  for (int s = 0; s < cfg.bootstrap_samples; ++s) {
    const TaskContext& ctx = tasks[rng.below(tasks.size())];
    const int n = ctx.table_count();
    const int avg_shard =
        std::max(1, n / std::max(1, ctx.task.num_shards));
    const int size = 1 + static_cast<int>(rng.below(
                             static_cast<std::uint64_t>(2 * avg_shard)));
    std::vector<int> pick(static_cast<std::size_t>(n));
    std::iota(pick.begin(), pick.end(), 0);
    rng.shuffle(pick.begin(), pick.end());
    pick.resize(static_cast<std::size_t>(std::min(size, n)));
    CostSample cs;
    std::vector<double> w;
    for (int idx : pick) {
      cs.table_features.push_back(ctx.features[idx]);
      w.push_back(ctx.marginal_w[idx]);
    }
    cs.latency_ms = shard_cost_from_marginals(w, ctx.sim);
    cs.provenance = CostSample::Provenance::kExact;
    buffer.push(std::move(cs));
  }
}

}  // namespace detail

/// Joint training: collect B1 unrolls, one policy-value update, snapshot
/// refresh, then I cost-model steps. Deterministic for a fixed seed as long
/// as the run is bounded by updates rather than wall-clock.
inline TrainResult train(const std::vector<TaskContext>& train_tasks,
                         const std::vector<TaskContext>& test_tasks,
                         const NormStats& norm, const FeatureMask& mask,
                         const SimParams& sim, std::int64_t batch_size,
                         std::uint64_t pool_fingerprint,
                         const TrainConfig& cfg, std::ostream* log = nullptr) {
  if (train_tasks.empty()) throw ConfigError("train: no training tasks");
  cfg.vtrace.validate();
  const auto t_start = std::chrono::steady_clock::now();
  auto elapsed = [&]() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         t_start)
        .count();
  };

  TrainResult result;
  const std::uint64_t init_seed = derive_seed(cfg.seed, "model-init");
  auto bundle = std::make_shared<ModelBundle>(init_seed, cfg.dims,
                                              cfg.cost_dims,
                                              cfg.use_cost_model);

  cost::CostBuffer buffer(cfg.buffer_capacity);
  Rng cost_rng(derive_seed(cfg.seed, "cost-sampling"));
  if (cfg.train_cost_model) {
    detail::bootstrap_buffer(train_tasks, cfg, buffer);
    bundle->cost.calibrate_targets(buffer);
    for (int i = 0; i < cfg.cost_warmup_iters; ++i)
      bundle->cost.train_step(bundle->store, buffer, cfg.cost_batch, cost_rng,
                              cfg.cost_adam);
  }

  std::vector<detail::ActorLane> lanes;
  std::vector<std::uint64_t> lane_seeds;
  lanes.reserve(static_cast<std::size_t>(cfg.n_actors));
  for (int i = 0; i < cfg.n_actors; ++i) {
    lane_seeds.push_back(
        derive_seed(cfg.seed, "actor", static_cast<std::uint64_t>(i)));
    lanes.emplace_back(lane_seeds.back(), cfg);
    lanes.back().snapshot->store.copy_values_from(bundle->store);
    lanes.back().snapshot->cost.set_target_stats(
        bundle->cost.target_mean(), bundle->cost.target_scale());
  }

  // Best-by-train-balance snapshot; test tasks are never used for selection.
  std::unique_ptr<ModelBundle> best(nullptr);
  double best_train = -1.0;
  double best_target_mean = 0.0, best_target_scale = 1.0;
  int evals_since_improvement = 0;
  std::int64_t plans_evaluated = 0;
  bool stop = false;

  for (int update = 1; update <= cfg.max_updates && !stop; ++update) {
    std::vector<Unroll> batch;
    batch.reserve(static_cast<std::size_t>(cfg.batch_unrolls));
    detail::CollectStats cstats;
    for (int u = 0; u < cfg.batch_unrolls; ++u) {
      const std::size_t lane_idx =
          static_cast<std::size_t>(u) % lanes.size();
      batch.push_back(detail::lane_collect(lanes[lane_idx], train_tasks, cfg,
                                           lane_seeds[lane_idx], buffer,
                                           cstats));
    }
    plans_evaluated += cstats.episodes;

    const LearnerMetrics m = learner_update(bundle->store, bundle->net,
                                            train_tasks, batch, cfg.vtrace,
                                            cfg.adam);
    for (auto& lane : lanes) {
      lane.snapshot->store.copy_values_from(bundle->store);
      lane.snapshot->cost.set_target_stats(bundle->cost.target_mean(),
                                           bundle->cost.target_scale());
    }
    double cost_loss = 0.0;
    if (cfg.train_cost_model) {
      for (int i = 0; i < cfg.cost_iters; ++i)
        cost_loss = bundle->cost.train_step(bundle->store, buffer,
                                            cfg.cost_batch, cost_rng,
                                            cfg.cost_adam);
    }

    result.updates = update;
    result.episodes += cstats.episodes;

    const bool eval_now =
        update % cfg.eval_every == 0 || update == cfg.max_updates;
    if (eval_now) {
      const double train_bal = mean_argmax_balance(bundle->net, train_tasks);
      const double test_bal = mean_argmax_balance(bundle->net, test_tasks);
      result.curve.emplace_back(plans_evaluated, test_bal);
      if (log) {
        (*log) << "update=" << update << " plans=" << plans_evaluated
               << " loss=" << m.total_loss << " pg=" << m.pg_loss
               << " baseline=" << m.baseline_loss << " entropy=" << m.entropy
               << " grad_norm=" << m.grad_norm
               << " cost_mse=" << cost_loss
               << " train_reward=" << m.mean_episode_reward
               << " train_balance=" << train_bal
               << " test_balance=" << test_bal << "\n";
      }
      if (train_bal > best_train) {
        best_train = train_bal;
        evals_since_improvement = 0;
        if (cfg.select_best) {
          if (!best)
            best = std::make_unique<ModelBundle>(init_seed, cfg.dims,
                                                 cfg.cost_dims,
                                                 cfg.use_cost_model);
          best->store.copy_values_from(bundle->store);
          best_target_mean = bundle->cost.target_mean();
          best_target_scale = bundle->cost.target_scale();
        }
      } else {
        ++evals_since_improvement;
      }
      if (train_bal >= cfg.target_train_balance) stop = true;
      if (cfg.plateau_evals > 0 &&
          evals_since_improvement >= cfg.plateau_evals)
        stop = true;
    }
    if (elapsed() > cfg.max_seconds) stop = true;
  }

  if (cfg.select_best && best) {
    bundle->store.copy_values_from(best->store);
    bundle->cost.set_target_stats(best_target_mean, best_target_scale);
  }

  Checkpoint ck;
  ck.dims = cfg.dims;
  ck.cost_dims = cfg.cost_dims;
  ck.use_cost_model = cfg.use_cost_model;
  ck.init_seed = init_seed;
  ck.norm = norm;
  ck.mask = mask;
  ck.sim = sim;
  ck.vtrace = cfg.vtrace;
  ck.target_mean = bundle->cost.target_mean();
  ck.target_scale = bundle->cost.target_scale();
  ck.pool_fingerprint = pool_fingerprint;
  ck.batch_size = batch_size;
  ck.bundle = bundle;

  result.best_train_balance = best_train;
  result.final_test_balance = mean_argmax_balance(bundle->net, test_tasks);
  result.seconds = elapsed();
  result.checkpoint = std::move(ck);
  return result;
}

}  // namespace autoshard::rl
