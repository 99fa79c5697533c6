#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "autoshard/netcore.hpp"
#include "autoshard/simcost.hpp"
#include "autoshard/tables.hpp"

// Neural multi-table cost model: encode each table with a shared MLP, sum
// the representations (sum beats max/mean here: it keeps table count and
// magnitudes), and regress the latency with a small head. The encoder
// tensors are shared with the RL policy network.

namespace autoshard::cost {

using net::Mlp;
using net::ParamStore;
using net::Vec;

/// FIFO ring buffer of regression samples.
class CostBuffer {
 public:
  explicit CostBuffer(std::size_t capacity = 5000) : capacity_(capacity) {
    if (capacity_ < 1) throw ConfigError("cost buffer: capacity must be >= 1");
  }

  void push(CostSample sample) {
    if (data_.size() < capacity_) {
      data_.push_back(std::move(sample));
    } else {
      data_[next_] = std::move(sample);
    }
    next_ = (next_ + 1) % capacity_;
  }

  std::size_t size() const { return data_.size(); }
  std::size_t capacity() const { return capacity_; }
  const CostSample& operator[](std::size_t i) const { return data_[i]; }

  /// Uniform sample with replacement.
  std::vector<const CostSample*> sample(std::size_t n, Rng& rng) const {
    std::vector<const CostSample*> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
      out.push_back(&data_[rng.below(data_.size())]);
    return out;
  }

 private:
  std::vector<CostSample> data_;
  std::size_t capacity_;
  std::size_t next_ = 0;
};

struct CostModelDims {
  std::size_t feat = kNumFeatures;  // 21
  std::size_t enc_hidden = 128;
  std::size_t repr = 32;
  std::size_t head_hidden = 64;
};

class CostModel {
 public:
  CostModel(ParamStore& store, Rng& init, CostModelDims dims = {})
      : dims_(dims),
        encoder_(store, "encoder", {dims.feat, dims.enc_hidden, dims.repr},
                 init),
        head_(store, "cost_head", {dims.repr, dims.head_hidden, 1}, init) {}

  const CostModelDims& dims() const { return dims_; }
  Mlp& encoder() { return encoder_; }
  const Mlp& encoder() const { return encoder_; }
  Mlp& head() { return head_; }
  const Mlp& head() const { return head_; }

  // Regression targets are standardized by a recorded affine transform and
  // mapped back at prediction time; both scalars live in the checkpoint.
  double target_mean() const { return target_mean_; }
  double target_scale() const { return target_scale_; }
  void set_target_stats(double mean, double scale) {
    if (scale <= 0.0) throw ConfigError("cost model: target scale must be > 0");
    target_mean_ = mean;
    target_scale_ = scale;
  }

  void calibrate_targets(const CostBuffer& buffer) {
    if (buffer.size() == 0) return;
    double sum = 0.0, sum2 = 0.0;
    for (std::size_t i = 0; i < buffer.size(); ++i) {
      sum += buffer[i].latency_ms;
      sum2 += buffer[i].latency_ms * buffer[i].latency_ms;
    }
    const double n = static_cast<double>(buffer.size());
    const double mean = sum / n;
    const double var = std::max(0.0, sum2 / n - mean * mean);
    set_target_stats(mean, std::max(std::sqrt(var), 1e-6));
  }

  Vec encode(const FeatureArray& f, Mlp::Cache* cache = nullptr) const {
    Vec x(f.begin(), f.end());
    return encoder_.forward(x, cache);
  }

  /// Predicted latency from an already-summed multi-table representation.
  double predict_from_repr(const Vec& sum_repr,
                           Mlp::Cache* cache = nullptr) const {
    const Vec out = head_.forward(sum_repr, cache);
    return out[0] * target_scale_ + target_mean_;
  }

  /// Predicted latency for a set of tables. Empty sets go through the head
  /// on a zero representation.
  double predict(const std::vector<FeatureArray>& features) const {
    Vec sum(dims_.repr, 0.0);
    for (const auto& f : features) {
      const Vec r = encode(f);
      for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += r[i];
    }
    return predict_from_repr(sum);
  }

  /// Checked variant for externally supplied feature rows.
  double predict_checked(const std::vector<std::vector<double>>& rows) const {
    std::vector<FeatureArray> feats;
    feats.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != kNumFeatures)
        throw ShapeError("cost model: feature row " + std::to_string(i) +
                         " has length " + std::to_string(rows[i].size()) +
                         ", expected " + std::to_string(kNumFeatures));
      FeatureArray f{};
      std::copy(rows[i].begin(), rows[i].end(), f.begin());
      feats.push_back(f);
    }
    return predict(feats);
  }

  std::vector<net::Tensor*> tensors() {
    std::vector<net::Tensor*> out;
    for (std::size_t l = 0; l < encoder_.layer_count(); ++l) {
      out.push_back(&encoder_.weight(l));
      out.push_back(&encoder_.bias(l));
    }
    for (std::size_t l = 0; l < head_.layer_count(); ++l) {
      out.push_back(&head_.weight(l));
      out.push_back(&head_.bias(l));
    }
    return out;
  }

  /// Accumulates gradients of the standardized MSE loss for one batch and
  /// returns the raw-scale pre-update MSE. Call adam over tensors() after.
  double accumulate_mse_gradients(
      const std::vector<const CostSample*>& batch) {
    if (batch.empty()) return 0.0;
    double raw_mse = 0.0;
    const double bn = static_cast<double>(batch.size());
    for (const CostSample* s : batch) {
      Vec sum(dims_.repr, 0.0);
      std::vector<Mlp::Cache> enc_caches(s->table_features.size());
      for (std::size_t t = 0; t < s->table_features.size(); ++t) {
        const Vec r = encode(s->table_features[t], &enc_caches[t]);
        for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += r[i];
      }
      Mlp::Cache head_cache;
      const Vec out = head_.forward(sum, &head_cache);
      const double y_std = (s->latency_ms - target_mean_) / target_scale_;
      const double err_std = out[0] - y_std;
      const double err_raw = err_std * target_scale_;
      raw_mse += err_raw * err_raw;
      const double dout = 2.0 * err_std / bn;
      const Vec dsum = head_.backward(head_cache, {dout});
      for (auto& c : enc_caches) encoder_.backward(c, dsum);
    }
    return raw_mse / bn;
  }

  /// One optimizer step on a uniformly sampled batch. Empty buffers are a
  /// logged no-op per the training contract.
  double train_step(ParamStore& store, CostBuffer& buffer,
                    std::size_t batch_size, Rng& rng, const net::AdamConfig& adam,
                    std::ostream* warn_log = nullptr) {
    if (buffer.size() == 0) {
      if (warn_log) (*warn_log) << "cost model: skip update, empty buffer\n";
      return 0.0;
    }
    const auto batch = buffer.sample(batch_size, rng);
    const double loss = accumulate_mse_gradients(batch);
    net::adam_step(store, adam, tensors());
    return loss;
  }

 private:
  CostModelDims dims_;
  Mlp encoder_;
  Mlp head_;
  double target_mean_ = 0.0;
  double target_scale_ = 1.0;
};

}  // namespace autoshard::cost
