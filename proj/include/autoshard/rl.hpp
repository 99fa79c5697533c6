#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "autoshard/costmodel.hpp"
#include "autoshard/netcore.hpp"
#include "autoshard/planners.hpp"
#include "autoshard/simcost.hpp"
#include "autoshard/tables.hpp"

// Sharding as an MDP: one table is placed per step, rewards are terminal
// (degree of balance when the plan fits, negated worst overflow ratio when
// it does not), and the policy-value LSTM is trained off-policy with
// V-trace-corrected actor-critic updates while the cost model learns from
// the same measurement stream.

namespace autoshard::rl {

using net::LstmStack;
using net::Mlp;
using net::ParamStore;
using net::Vec;

// ---------------------------------------------------------------------------
// Task context and environment
// ---------------------------------------------------------------------------

/// Everything episodes need about one task, precomputed once: normalized
/// features, simulator marginals, and the default visitation order
/// (descending lookup cost, ties by table id).
struct TaskContext {
  int id = 0;
  ShardingTask task;
  const Workload* workload = nullptr;
  SimParams sim;
  std::vector<FeatureArray> features;
  std::vector<double> marginal_w;
  std::vector<int> default_order;

  int table_count() const { return static_cast<int>(task.tables.size()); }
};

inline TaskContext make_task_context(int id, ShardingTask task,
                                     const Workload& wl, const NormStats& norm,
                                     const FeatureMask& mask,
                                     const SimParams& sim) {
  TaskContext ctx;
  ctx.id = id;
  ctx.task = std::move(task);
  ctx.workload = &wl;
  ctx.sim = sim;
  const std::size_t n = ctx.task.tables.size();
  ctx.features.reserve(n);
  for (const auto& t : ctx.task.tables)
    ctx.features.push_back(extract_features(t, wl, norm, mask).normalized);
  ctx.marginal_w = marginal_costs(ctx.task.tables, wl, sim);
  ctx.default_order.resize(n);
  std::iota(ctx.default_order.begin(), ctx.default_order.end(), 0);
  std::sort(ctx.default_order.begin(), ctx.default_order.end(),
            [&](int a, int b) {
              const double ca = heuristic_cost(ctx.task.tables[a],
                                               HeuristicKind::kLookupGreedy);
              const double cb = heuristic_cost(ctx.task.tables[b],
                                               HeuristicKind::kLookupGreedy);
              if (ca != cb) return ca > cb;
              return ctx.task.tables[a].id < ctx.task.tables[b].id;
            });
  return ctx;
}

struct EnvState {
  const TaskContext* ctx = nullptr;
  std::vector<int> order;  // visitation order, indices into task.tables
  int pos = 0;
  std::vector<int> assignment;                 // -1 while unassigned
  std::vector<std::vector<int>> shard_tables;  // member indices, placement order
  std::vector<std::int64_t> shard_bytes;
  std::uint64_t episode_seed = 0;  // stream for noisy terminal measurement

  bool done() const { return pos >= static_cast<int>(order.size()); }
  int upcoming_table() const { return order[pos]; }
  double step_aware() const {
    return static_cast<double>(pos) / static_cast<double>(order.size());
  }
};

/// Fresh episode over a task. The default visitation order is descending
/// lookup cost; a shuffle seed exposes the randomized-order ablation.
inline EnvState env_reset(const TaskContext& ctx,
                          std::optional<std::uint64_t> order_shuffle_seed = {},
                          std::uint64_t episode_seed = 0) {
  if (ctx.task.total_bytes() > ctx.task.total_budget())
    throw InfeasibleError(
        "env_reset: aggregate table bytes exceed aggregate budget");
  EnvState s;
  s.ctx = &ctx;
  s.order = ctx.default_order;
  if (order_shuffle_seed) {
    Rng rng(derive_seed(*order_shuffle_seed, "episode-order"));
    rng.shuffle(s.order.begin(), s.order.end());
  }
  s.assignment.assign(ctx.task.tables.size(), -1);
  s.shard_tables.assign(ctx.task.num_shards, {});
  s.shard_bytes.assign(ctx.task.num_shards, 0);
  s.episode_seed = episode_seed;
  return s;
}

struct EnvStepResult {
  double reward = 0.0;
  bool done = false;
  bool feasible = true;
  std::vector<double> shard_costs;  // populated on feasible terminal steps
};

/// Assigns the upcoming table to shard `action`. Intermediate rewards are
/// zero; the terminal reward is min(C)/max(C) when all budgets hold and the
/// negated worst overflow ratio otherwise (no measurement in that case).
inline EnvStepResult env_step(EnvState& s, int action,
                              const BenchConfig& bench) {
  if (s.done()) throw StateError("env_step: episode already finished");
  if (action < 0 || action >= s.ctx->task.num_shards)
    throw ConfigError("env_step: action " + std::to_string(action) +
                      " out of range [0, " +
                      std::to_string(s.ctx->task.num_shards) + ")");
  const int idx = s.upcoming_table();
  s.assignment[idx] = action;
  s.shard_tables[action].push_back(idx);
  s.shard_bytes[action] += s.ctx->task.tables[idx].size_bytes();
  ++s.pos;

  EnvStepResult res;
  if (!s.done()) return res;
  res.done = true;

  double worst_overflow = 0.0;
  bool any_violation = false;
  for (int k = 0; k < s.ctx->task.num_shards; ++k) {
    const double ratio =
        static_cast<double>(s.shard_bytes[k] - s.ctx->task.mem_budget[k]) /
        static_cast<double>(s.ctx->task.mem_budget[k]);
    worst_overflow = std::max(worst_overflow, ratio);
    if (s.shard_bytes[k] > s.ctx->task.mem_budget[k]) any_violation = true;
  }
  if (any_violation) {
    res.feasible = false;
    res.reward = -worst_overflow;
    return res;
  }

  std::vector<std::vector<double>> grouped(s.ctx->task.num_shards);
  for (int k = 0; k < s.ctx->task.num_shards; ++k)
    for (int t : s.shard_tables[k]) grouped[k].push_back(s.ctx->marginal_w[t]);
  BenchConfig b = bench;
  b.seed = s.episode_seed;
  res.shard_costs = measure_costs_from_marginals(grouped, s.ctx->sim, b);
  res.reward = degree_of_balance(res.shard_costs);
  return res;
}

// ---------------------------------------------------------------------------
// Policy-value network
// ---------------------------------------------------------------------------

struct NetDims {
  std::size_t repr = 32;        // shared table representation size
  std::size_t step_embed = 32;
  std::size_t lstm_hidden = 64;
  std::size_t lstm_layers = 2;
  std::size_t cost_embed = 32;
  std::vector<std::size_t> policy_hidden = {128, 128, 64};
  std::size_t value_hidden = 64;

  void validate(const cost::CostModelDims& cd) const {
    if (repr != cd.repr)
      throw ConfigError("net: repr must match the cost model encoder output");
    if (repr + cost_embed != lstm_hidden)
      throw ConfigError(
          "net: action representation (repr + cost_embed) must equal "
          "lstm_hidden for the elementwise product");
  }
};

struct VTraceConfig {
  double gamma = 1.0;
  double rho_bar = 1.0;
  double c_bar = 1.0;
  int unroll_len = 100;  // T
  double entropy_weight = 0.001;
  double baseline_weight = 0.5;

  void validate() const {
    if (rho_bar < c_bar)
      throw ConfigError("vtrace: rho_bar must be >= c_bar");
    if (unroll_len < 1) throw ConfigError("vtrace: unroll_len must be >= 1");
  }
};

enum class ActMode { kSample, kArgmax };

struct ActResult {
  int action = 0;
  double prob = 1.0;
  Vec probs;
  double value = 0.0;
};

/// Two-layer LSTM policy over state features with per-shard action scoring
/// through a shared head; the table encoder is the cost model's.
class PolicyValueNet {
 public:
  PolicyValueNet(ParamStore& store, cost::CostModel& cost, Rng& init,
                 NetDims dims = {}, bool use_cost_predictions = true)
      : cost_(&cost), dims_(dims), use_cost_(use_cost_predictions) {
    dims_.validate(cost.dims());
    step_mlp_ = Mlp(store, "step_embed", {1, dims_.step_embed}, init);
    lstm_ = LstmStack(store, "lstm", dims_.repr + dims_.step_embed,
                      dims_.lstm_hidden, dims_.lstm_layers, init);
    cost_embed_ = Mlp(store, "cost_embed", {1, dims_.cost_embed}, init);
    std::vector<std::size_t> pdims;
    pdims.push_back(3 * dims_.lstm_hidden);
    for (auto h : dims_.policy_hidden) pdims.push_back(h);
    pdims.push_back(1);
    policy_mlp_ = Mlp(store, "policy_head", pdims, init);
    value_mlp_ = Mlp(store, "value_head",
                     {dims_.lstm_hidden, dims_.value_hidden, 1}, init);
  }

  const NetDims& dims() const { return dims_; }
  bool uses_cost_model() const { return use_cost_; }
  cost::CostModel& cost_model() { return *cost_; }
  const cost::CostModel& cost_model() const { return *cost_; }
  Mlp& policy_head() { return policy_mlp_; }
  Mlp& value_head() { return value_mlp_; }

  LstmStack::State initial_state() const { return lstm_.zero_state(); }

  /// Encoder outputs for every table of a task, in table order.
  std::vector<Vec> encode_tables(const TaskContext& ctx) const {
    std::vector<Vec> reprs;
    reprs.reserve(ctx.features.size());
    for (const auto& f : ctx.features) reprs.push_back(cost_->encode(f));
    return reprs;
  }

  /// Inference/rollout step: scores every shard, samples or takes argmax,
  /// and advances the recurrent state in place.
  ActResult act(const EnvState& s, const std::vector<Vec>& table_reprs,
                LstmStack::State& rec, ActMode mode,
                Rng* sampler = nullptr) const {
    const int K = s.ctx->task.num_shards;
    const int up = s.upcoming_table();
    const Vec& r = table_reprs[up];

    const Vec e = step_mlp_.forward({s.step_aware()});
    Vec z;
    z.reserve(r.size() + e.size());
    z.insert(z.end(), r.begin(), r.end());
    z.insert(z.end(), e.begin(), e.end());
    LstmStack::State next;
    const Vec h = lstm_.step(rec, z, next, nullptr);
    rec = std::move(next);

    Vec scores(K);
    for (int k = 0; k < K; ++k) {
      Vec m(dims_.repr, 0.0);
      for (int t : s.shard_tables[k]) {
        const Vec& tr = table_reprs[t];
        for (std::size_t i = 0; i < m.size(); ++i) m[i] += tr[i];
      }
      for (std::size_t i = 0; i < m.size(); ++i) m[i] += r[i];
      const double pred = use_cost_ ? cost_->predict_from_repr(m) : 0.0;
      const Vec ce = cost_embed_.forward({pred});
      scores[k] = score_action(h, m, ce, nullptr, nullptr);
    }
    ActResult res;
    res.probs = net::softmax(scores);
    res.value = value_mlp_.forward(h)[0];
    if (mode == ActMode::kArgmax) {
      res.action = static_cast<int>(
          std::max_element(res.probs.begin(), res.probs.end()) -
          res.probs.begin());
    } else {
      if (sampler == nullptr)
        throw ConfigError("act: sample mode requires an rng");
      const double u = sampler->uniform();
      double acc = 0.0;
      res.action = K - 1;
      for (int k = 0; k < K; ++k) {
        acc += res.probs[k];
        if (u < acc) {
          res.action = k;
          break;
        }
      }
    }
    res.prob = res.probs[res.action];
    return res;
  }

  // -- pieces shared by act() and the learner replay --

  /// Policy-head score for one (state h, action repr) pair. Caches, when
  /// given, are filled for the backward pass.
  double score_action(const Vec& h, const Vec& m, const Vec& ce,
                      Mlp::Cache* cache, Vec* action_repr_out) const {
    Vec a;
    a.reserve(m.size() + ce.size());
    a.insert(a.end(), m.begin(), m.end());
    a.insert(a.end(), ce.begin(), ce.end());
    Vec in;
    in.reserve(3 * a.size());
    in.insert(in.end(), h.begin(), h.end());
    in.insert(in.end(), a.begin(), a.end());
    for (std::size_t i = 0; i < a.size(); ++i) in.push_back(h[i] * a[i]);
    const double score = policy_mlp_.forward(in, cache)[0];
    if (action_repr_out) *action_repr_out = std::move(a);
    return score;
  }

  const Mlp& step_mlp() const { return step_mlp_; }
  const LstmStack& lstm() const { return lstm_; }
  const Mlp& cost_embed() const { return cost_embed_; }
  const Mlp& policy_mlp() const { return policy_mlp_; }
  const Mlp& value_mlp() const { return value_mlp_; }
  Mlp& step_mlp() { return step_mlp_; }
  LstmStack& lstm() { return lstm_; }
  Mlp& cost_embed() { return cost_embed_; }
  Mlp& policy_mlp() { return policy_mlp_; }
  Mlp& value_mlp() { return value_mlp_; }

 private:
  cost::CostModel* cost_;
  NetDims dims_;
  bool use_cost_ = true;
  Mlp step_mlp_;
  LstmStack lstm_;
  Mlp cost_embed_;
  Mlp policy_mlp_;
  Mlp value_mlp_;
};

// ---------------------------------------------------------------------------
// V-trace targets
// ---------------------------------------------------------------------------

struct VTraceResult {
  std::vector<double> vs;            // value targets
  std::vector<double> pg_advantage;  // rho_t * (r + gamma*vs_{t+1} - V_t)
};

/// Truncated-importance-sampling value targets over one unroll. `dones`
/// cut both the bootstrap and the recursion at episode boundaries;
/// `bootstrap_value` is V of the state after the last step (0 if terminal).
inline VTraceResult vtrace_targets(const std::vector<double>& rewards,
                                   const std::vector<bool>& dones,
                                   const std::vector<double>& values,
                                   double bootstrap_value,
                                   const std::vector<double>& target_probs,
                                   const std::vector<double>& behavior_probs,
                                   const VTraceConfig& cfg) {
  cfg.validate();
  const std::size_t T = rewards.size();
  if (dones.size() != T || values.size() != T || target_probs.size() != T ||
      behavior_probs.size() != T)
    throw ShapeError("vtrace: input arrays must share one length");
  VTraceResult out;
  out.vs.assign(T, 0.0);
  out.pg_advantage.assign(T, 0.0);
  double acc = 0.0;  // vs_{t+1} - V(s_{t+1}), zero beyond horizon/episode
  for (std::size_t ti = T; ti-- > 0;) {
    if (behavior_probs[ti] <= 0.0)
      throw Error("vtrace: corrupt behavior probability at step " +
                  std::to_string(ti));
    const double ratio = target_probs[ti] / behavior_probs[ti];
    const double rho = std::min(cfg.rho_bar, ratio);
    const double c = std::min(cfg.c_bar, ratio);
    const double next_v =
        dones[ti] ? 0.0 : (ti + 1 == T ? bootstrap_value : values[ti + 1]);
    if (dones[ti] || ti + 1 == T) acc = 0.0;
    const double delta = rho * (rewards[ti] + cfg.gamma * next_v - values[ti]);
    const double cur = delta + cfg.gamma * c * acc;
    out.vs[ti] = values[ti] + cur;
    acc = cur;
  }
  for (std::size_t ti = 0; ti < T; ++ti) {
    const double ratio = target_probs[ti] / behavior_probs[ti];
    const double rho = std::min(cfg.rho_bar, ratio);
    const double next_vs =
        dones[ti] ? 0.0
                  : (ti + 1 == T ? bootstrap_value : out.vs[ti + 1]);
    out.pg_advantage[ti] =
        rho * (rewards[ti] + cfg.gamma * next_vs - values[ti]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Unrolls and the learner
// ---------------------------------------------------------------------------

struct StepRecord {
  int task_id = 0;
  int pos = 0;
  int action = 0;
  double reward = 0.0;
  double behavior_prob = 1.0;
  bool done = false;
};

/// A fixed-length slice of an actor's experience stream. Episodes may span
/// unroll boundaries; the carry fields restore the in-flight episode and
/// the recurrent state so the learner can replay exactly.
struct Unroll {
  LstmStack::State init_state;
  int carry_task_id = 0;
  int carry_pos = 0;
  std::vector<int> carry_assignment;  // empty means fresh episode
  std::vector<StepRecord> steps;
};

struct LearnerMetrics {
  double total_loss = 0.0;
  double pg_loss = 0.0;
  double baseline_loss = 0.0;
  double entropy = 0.0;  // mean per step
  double grad_norm = 0.0;
  double mean_episode_reward = 0.0;
  int episodes = 0;
  int steps = 0;
};

namespace detail {

// One forward cache + accumulated output gradient per distinct
// (task, table): the encoder sees the same input wherever that table
// appears in the batch, so a single invocation serves them all.
struct EncoderBank {
  const cost::CostModel* cost;
  std::map<std::pair<int, int>, std::size_t> index;
  std::vector<Mlp::Cache> caches;
  std::vector<Vec> reprs;
  std::vector<Vec> dreprs;

  const Vec& repr(const TaskContext& ctx, int table_idx) {
    const auto key = std::make_pair(ctx.id, table_idx);
    auto it = index.find(key);
    if (it == index.end()) {
      caches.emplace_back();
      reprs.push_back(cost->encode(ctx.features[table_idx], &caches.back()));
      dreprs.emplace_back(reprs.back().size(), 0.0);
      it = index.emplace(key, reprs.size() - 1).first;
    }
    return reprs[it->second];
  }

  Vec& drepr(const TaskContext& ctx, int table_idx) {
    return dreprs[index.at(std::make_pair(ctx.id, table_idx))];
  }

  void backprop_all(cost::CostModel& cost_model) {
    for (std::size_t i = 0; i < caches.size(); ++i)
      cost_model.encoder().backward(caches[i], dreprs[i]);
  }
};

// Replayed episode cursor for one unroll.
struct ReplayEnv {
  const TaskContext* ctx = nullptr;
  int pos = 0;
  std::vector<std::vector<int>> members;

  void reset(const TaskContext& c) {
    ctx = &c;
    pos = 0;
    members.assign(c.task.num_shards, {});
  }

  void restore(const TaskContext& c, int position,
               const std::vector<int>& assignment) {
    reset(c);
    pos = position;
    // Placement order equals visitation order of the already-placed prefix.
    for (int j = 0; j < position; ++j) {
      const int idx = c.default_order[j];
      const int k = assignment[idx];
      if (k < 0)
        throw StateError("unroll replay: carry assignment is inconsistent");
      members[k].push_back(idx);
    }
  }

  void apply(int action) {
    members[action].push_back(ctx->default_order[pos]);
    ++pos;
  }
};

struct StepTape {
  const TaskContext* ctx = nullptr;
  int upcoming = -1;
  int action = 0;
  std::vector<std::vector<int>> members_incl;  // per shard, incl. candidate
  Mlp::Cache step_cache;
  LstmStack::Cache lstm_cache;
  Mlp::Cache value_cache;
  std::vector<Mlp::Cache> policy_caches;
  std::vector<Mlp::Cache> cost_embed_caches;
  std::vector<Mlp::Cache> cost_head_caches;
  std::vector<Vec> action_reprs;
  Vec h;
  Vec probs;
  double value = 0.0;
  double entropy = 0.0;
  double logp_a = 0.0;
};

}  // namespace detail

/// One V-trace actor-critic update over a batch of unrolls. Targets and
/// advantages are computed from the replayed (current-parameter) values and
/// then frozen; gradients flow through log-probs, entropy, the baseline,
/// and — via state/action representations — the shared encoder and cost
/// head. Returns loss components and rollout statistics.
inline LearnerMetrics learner_update(ParamStore& store, PolicyValueNet& net,
                                     const std::vector<TaskContext>& tasks,
                                     const std::vector<Unroll>& batch,
                                     const VTraceConfig& vcfg,
                                     const net::AdamConfig& adam) {
  LearnerMetrics metrics;
  if (batch.empty()) return metrics;
  vcfg.validate();
  cost::CostModel& cost_model = net.cost_model();
  detail::EncoderBank bank;
  bank.cost = &cost_model;

  double loss_total = 0.0, loss_pg = 0.0, loss_baseline = 0.0;
  double entropy_sum = 0.0, reward_sum = 0.0;
  int episode_count = 0, step_count = 0;

  struct UnrollTape {
    std::vector<detail::StepTape> steps;
    std::vector<LstmStack::State> in_states;  // lstm state entering each step
    VTraceResult vtrace;
    std::vector<double> values;
  };
  std::vector<UnrollTape> tapes(batch.size());

  // ---- forward ----
  for (std::size_t ui = 0; ui < batch.size(); ++ui) {
    const Unroll& un = batch[ui];
    UnrollTape& tape = tapes[ui];
    const std::size_t T = un.steps.size();
    tape.steps.resize(T);
    tape.in_states.resize(T);
    tape.values.resize(T);

    detail::ReplayEnv env;
    {
      const TaskContext& ctx0 = tasks.at(un.carry_task_id);
      if (un.carry_assignment.empty()) {
        env.reset(ctx0);
      } else {
        env.restore(ctx0, un.carry_pos, un.carry_assignment);
      }
    }
    LstmStack::State rec = un.init_state;

    std::vector<double> rewards(T), behavior(T), target(T);
    std::vector<bool> dones(T);

    for (std::size_t t = 0; t < T; ++t) {
      const StepRecord& sr = un.steps[t];
      const TaskContext& ctx = tasks.at(sr.task_id);
      if (env.ctx != &ctx || env.pos != sr.pos)
        throw StateError("unroll replay: cursor desync at step " +
                         std::to_string(t));
      detail::StepTape& st = tape.steps[t];
      st.ctx = &ctx;
      st.action = sr.action;
      st.upcoming = ctx.default_order[sr.pos];
      tape.in_states[t] = rec;

      const Vec& r = bank.repr(ctx, st.upcoming);
      const double step_aware = static_cast<double>(sr.pos) /
                                static_cast<double>(ctx.table_count());
      const Vec e = net.step_mlp().forward({step_aware}, &st.step_cache);
      Vec z;
      z.reserve(r.size() + e.size());
      z.insert(z.end(), r.begin(), r.end());
      z.insert(z.end(), e.begin(), e.end());
      LstmStack::State next;
      st.h = net.lstm().step(rec, z, next, &st.lstm_cache);
      rec = std::move(next);

      const int K = ctx.task.num_shards;
      st.members_incl.resize(K);
      st.policy_caches.resize(K);
      st.cost_embed_caches.resize(K);
      st.cost_head_caches.resize(K);
      st.action_reprs.resize(K);
      Vec scores(K);
      for (int k = 0; k < K; ++k) {
        st.members_incl[k] = env.members[k];
        st.members_incl[k].push_back(st.upcoming);
        Vec m(net.dims().repr, 0.0);
        for (int idx : st.members_incl[k]) {
          const Vec& tr = bank.repr(ctx, idx);
          for (std::size_t i = 0; i < m.size(); ++i) m[i] += tr[i];
        }
        double pred = 0.0;
        if (net.uses_cost_model())
          pred = cost_model.predict_from_repr(m, &st.cost_head_caches[k]);
        const Vec ce =
            net.cost_embed().forward({pred}, &st.cost_embed_caches[k]);
        scores[k] = net.score_action(st.h, m, ce, &st.policy_caches[k],
                                     &st.action_reprs[k]);
      }
      st.probs = net::softmax(scores);
      double ent = 0.0;
      for (double p : st.probs)
        if (p > 0.0) ent -= p * std::log(p);
      st.entropy = ent;
      st.logp_a = std::log(std::max(st.probs[sr.action], 1e-300));
      st.value = net.value_mlp().forward(st.h, &st.value_cache)[0];

      tape.values[t] = st.value;
      rewards[t] = sr.reward;
      dones[t] = sr.done;
      behavior[t] = sr.behavior_prob;
      target[t] = st.probs[sr.action];
      entropy_sum += ent;
      ++step_count;
      if (sr.done) {
        reward_sum += sr.reward;
        ++episode_count;
      }

      // advance replay cursor
      env.apply(sr.action);
      if (sr.done) {
        if (env.pos != env.ctx->table_count())
          throw StateError("unroll replay: done flag before episode end");
        if (t + 1 < T) {
          env.reset(tasks.at(un.steps[t + 1].task_id));
          rec = net.initial_state();
        }
      }
    }

    // bootstrap value (frozen; no gradient)
    double bootstrap = 0.0;
    if (!un.steps.back().done) {
      const TaskContext& ctx = *env.ctx;
      const int up = ctx.default_order[env.pos];
      const Vec& r = bank.repr(ctx, up);
      const double step_aware = static_cast<double>(env.pos) /
                                static_cast<double>(ctx.table_count());
      const Vec e = net.step_mlp().forward({step_aware});
      Vec z;
      z.insert(z.end(), r.begin(), r.end());
      z.insert(z.end(), e.begin(), e.end());
      LstmStack::State next;
      const Vec h = net.lstm().step(rec, z, next, nullptr);
      bootstrap = net.value_mlp().forward(h)[0];
    }

    tape.vtrace = vtrace_targets(rewards, dones, tape.values, bootstrap,
                                 target, behavior, vcfg);
  }

  // ---- backward ----
  for (std::size_t ui = 0; ui < batch.size(); ++ui) {
    const Unroll& un = batch[ui];
    UnrollTape& tape = tapes[ui];
    const std::size_t T = un.steps.size();
    LstmStack::State dstate;  // empty until first use

    for (std::size_t t = T; t-- > 0;) {
      detail::StepTape& st = tape.steps[t];
      const int K = static_cast<int>(st.probs.size());
      const double adv = tape.vtrace.pg_advantage[t];
      const double vs = tape.vtrace.vs[t];

      loss_pg += -adv * st.logp_a;
      loss_baseline +=
          vcfg.baseline_weight * (vs - st.value) * (vs - st.value);
      loss_total += -adv * st.logp_a +
                    vcfg.baseline_weight * (vs - st.value) * (vs - st.value) -
                    vcfg.entropy_weight * st.entropy;

      // d loss / d score_k
      Vec dscores(K);
      for (int k = 0; k < K; ++k) {
        const double indicator = (k == st.action) ? 1.0 : 0.0;
        const double d_pg = -adv * (indicator - st.probs[k]);
        const double d_ent = vcfg.entropy_weight * st.probs[k] *
                             (std::log(std::max(st.probs[k], 1e-300)) +
                              st.entropy);
        dscores[k] = d_pg + d_ent;
      }
      const double dvalue =
          2.0 * vcfg.baseline_weight * (st.value - vs);

      Vec dh = net.value_mlp().backward(st.value_cache, {dvalue});
      const std::size_t H = st.h.size();
      for (int k = 0; k < K; ++k) {
        const Vec din =
            net.policy_mlp().backward(st.policy_caches[k], {dscores[k]});
        const Vec& a = st.action_reprs[k];
        Vec da(a.size(), 0.0);
        for (std::size_t i = 0; i < H; ++i) {
          dh[i] += din[i] + din[2 * H + i] * a[i];
          da[i] = din[H + i] + din[2 * H + i] * st.h[i];
        }
        // split action repr grad into multi-table part and cost-embed part
        const std::size_t R = net.dims().repr;
        Vec dce(da.begin() + static_cast<std::ptrdiff_t>(R), da.end());
        const Vec dpred =
            net.cost_embed().backward(st.cost_embed_caches[k], dce);
        Vec dm(da.begin(), da.begin() + static_cast<std::ptrdiff_t>(R));
        if (net.uses_cost_model()) {
          // pred = head_out * scale + mean
          const double dhead =
              dpred[0] * net.cost_model().target_scale();
          const Vec dm_head = net.cost_model().head().backward(
              st.cost_head_caches[k], {dhead});
          for (std::size_t i = 0; i < R; ++i) dm[i] += dm_head[i];
        }
        for (int idx : st.members_incl[k]) {
          Vec& dr = bank.drepr(*st.ctx, idx);
          for (std::size_t i = 0; i < R; ++i) dr[i] += dm[i];
        }
      }

      if (dstate.empty() || un.steps[t].done) dstate = net.initial_state();
      Vec dz;
      net.lstm().backward_step(st.lstm_cache, dh, dstate, dz);
      const std::size_t R = net.dims().repr;
      Vec dr(dz.begin(), dz.begin() + static_cast<std::ptrdiff_t>(R));
      Vec de(dz.begin() + static_cast<std::ptrdiff_t>(R), dz.end());
      {
        Vec& acc = bank.drepr(*st.ctx, st.upcoming);
        for (std::size_t i = 0; i < R; ++i) acc[i] += dr[i];
      }
      net.step_mlp().backward(st.step_cache, de);
    }
  }

  bank.backprop_all(cost_model);
  metrics.grad_norm = net::adam_step(store, adam);

  metrics.total_loss = loss_total;
  metrics.pg_loss = loss_pg;
  metrics.baseline_loss = loss_baseline;
  metrics.entropy = step_count > 0 ? entropy_sum / step_count : 0.0;
  metrics.episodes = episode_count;
  metrics.steps = step_count;
  metrics.mean_episode_reward =
      episode_count > 0 ? reward_sum / episode_count : 0.0;
  return metrics;
}

}  // namespace autoshard::rl
