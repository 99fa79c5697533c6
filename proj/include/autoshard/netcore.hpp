#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <deque>
#include <istream>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "autoshard/common.hpp"
#include "autoshard/rng.hpp"

// Minimal differentiable kernel: dense stacks, a two-layer LSTM, softmax,
// and Adam with global-norm clipping. 64-bit floats throughout; every
// backward is exact and audited against central differences in the tests.

namespace autoshard::net {

using Vec = std::vector<double>;

struct Tensor {
  std::string name;
  std::vector<std::size_t> shape;
  Vec value;
  Vec grad;
  Vec m;  // Adam first moment
  Vec v;  // Adam second moment

  std::size_t size() const { return value.size(); }
};

/// Named parameter arrays plus their gradient slots and optimizer moments.
/// Tensor addresses are stable for the lifetime of the store, so layers
/// bind raw pointers at construction.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t init_seed = 0) : init_seed_(init_seed) {}

  Tensor& add(const std::string& name, std::vector<std::size_t> shape) {
    if (index_.count(name))
      throw ConfigError("ParamStore: duplicate tensor '" + name + "'");
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    tensors_.emplace_back();
    Tensor& t = tensors_.back();
    t.name = name;
    t.shape = std::move(shape);
    t.value.assign(n, 0.0);
    t.grad.assign(n, 0.0);
    t.m.assign(n, 0.0);
    t.v.assign(n, 0.0);
    index_[name] = tensors_.size() - 1;
    return t;
  }

  Tensor& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end())
      throw LookupError("ParamStore: no tensor '" + name + "'");
    return tensors_[it->second];
  }
  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw LookupError("ParamStore: no tensor '" + name + "'");
    return tensors_[it->second];
  }

  std::size_t tensor_count() const { return tensors_.size(); }
  Tensor& tensor(std::size_t i) { return tensors_[i]; }
  const Tensor& tensor(std::size_t i) const { return tensors_[i]; }

  std::uint64_t init_seed() const { return init_seed_; }
  std::int64_t adam_steps() const { return adam_t_; }
  std::int64_t& adam_steps() { return adam_t_; }

  void zero_grad() {
    for (auto& t : tensors_) std::fill(t.grad.begin(), t.grad.end(), 0.0);
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  /// Copies parameter values (not grads/moments) from a store with an
  /// identical layout. Used for actor snapshots.
  void copy_values_from(const ParamStore& other) {
    if (other.tensors_.size() != tensors_.size())
      throw StateError("ParamStore: snapshot layout mismatch");
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      if (other.tensors_[i].name != tensors_[i].name ||
          other.tensors_[i].size() != tensors_[i].size())
        throw StateError("ParamStore: snapshot tensor mismatch at '" +
                         tensors_[i].name + "'");
      tensors_[i].value = other.tensors_[i].value;
    }
  }

  void save(std::ostream& os) const;
  void load(std::istream& is);  // into an already-constructed layout

 private:
  std::deque<Tensor> tensors_;  // stable addresses
  std::unordered_map<std::string, std::size_t> index_;
  std::uint64_t init_seed_ = 0;
  std::int64_t adam_t_ = 0;
};

// --------------------------------------------------------------------------
// Serialization (binary, little-endian, bit-exact round trip)
// --------------------------------------------------------------------------

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8))
    throw ParseError("param store: truncated stream");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void put_f64(std::ostream& os, double d) {
  put_u64(os, std::bit_cast<std::uint64_t>(d));
}

inline double get_f64(std::istream& is) {
  return std::bit_cast<double>(get_u64(is));
}

inline void put_str(std::ostream& os, const std::string& s) {
  put_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_str(std::istream& is) {
  const std::uint64_t n = get_u64(is);
  std::string s(n, '\0');
  if (!is.read(s.data(), static_cast<std::streamsize>(n)))
    throw ParseError("param store: truncated string");
  return s;
}

inline void put_vec(std::ostream& os, const Vec& v) {
  for (double d : v) put_f64(os, d);
}

inline void get_vec(std::istream& is, Vec& v) {
  for (double& d : v) d = get_f64(is);
}

}  // namespace detail

inline void ParamStore::save(std::ostream& os) const {
  os.write("ASHPARM1", 8);
  detail::put_u64(os, init_seed_);
  detail::put_u64(os, static_cast<std::uint64_t>(adam_t_));
  detail::put_u64(os, tensors_.size());
  for (const auto& t : tensors_) {
    detail::put_str(os, t.name);
    detail::put_u64(os, t.shape.size());
    for (auto d : t.shape) detail::put_u64(os, d);
    detail::put_vec(os, t.value);
    detail::put_vec(os, t.m);
    detail::put_vec(os, t.v);
  }
  if (!os) throw ParseError("param store: write failed");
}

inline void ParamStore::load(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::string(magic, 8) != "ASHPARM1")
    throw ParseError("param store: bad magic");
  init_seed_ = detail::get_u64(is);
  adam_t_ = static_cast<std::int64_t>(detail::get_u64(is));
  const std::uint64_t n = detail::get_u64(is);
  if (n != tensors_.size())
    throw ParseError("param store: tensor count mismatch (" +
                     std::to_string(n) + " in stream, " +
                     std::to_string(tensors_.size()) + " expected)");
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::string name = detail::get_str(is);
    Tensor& t = at(name);
    const std::uint64_t ndim = detail::get_u64(is);
    std::vector<std::size_t> shape(ndim);
    for (auto& d : shape) d = detail::get_u64(is);
    if (shape != t.shape)
      throw ParseError("param store: shape mismatch for '" + name + "'");
    detail::get_vec(is, t.value);
    detail::get_vec(is, t.m);
    detail::get_vec(is, t.v);
    std::fill(t.grad.begin(), t.grad.end(), 0.0);
  }
}

// --------------------------------------------------------------------------
// Initialization
// --------------------------------------------------------------------------

/// Fan-in-scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline void init_uniform_fanin(Tensor& t, std::size_t fan_in, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  for (auto& x : t.value) x = rng.uniform(-s, s);
}

// --------------------------------------------------------------------------
// Dense stack
// --------------------------------------------------------------------------

enum class Activation { kRelu, kTanh, kIdentity };

inline double apply_act(Activation a, double x) {
  switch (a) {
    case Activation::kRelu: return x > 0.0 ? x : 0.0;
    case Activation::kTanh: return std::tanh(x);
    case Activation::kIdentity: return x;
  }
  return x;
}

// Derivative expressed through the post-activation value.
inline double act_grad_from_post(Activation a, double post) {
  switch (a) {
    case Activation::kRelu: return post > 0.0 ? 1.0 : 0.0;
    case Activation::kTanh: return 1.0 - post * post;
    case Activation::kIdentity: return 1.0;
  }
  return 1.0;
}

/// Affine + nonlinearity stack. Hidden layers use `hidden_act`; the output
/// layer is linear. Forward caches per invocation, so one Mlp object can be
/// applied to many inputs inside a single graph.
class Mlp {
 public:
  struct Cache {
    std::vector<Vec> acts;  // acts[0] = input, acts[l+1] = output of layer l
  };

  Mlp() = default;

  Mlp(ParamStore& store, std::string prefix, std::vector<std::size_t> dims,
      Rng& init, Activation hidden_act = Activation::kRelu)
      : prefix_(std::move(prefix)), dims_(std::move(dims)),
        hidden_act_(hidden_act) {
    if (dims_.size() < 2)
      throw ConfigError("mlp '" + prefix_ + "': need at least 2 dims");
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      Tensor& W = store.add(prefix_ + ".l" + std::to_string(l) + ".W",
                            {dims_[l + 1], dims_[l]});
      Tensor& b = store.add(prefix_ + ".l" + std::to_string(l) + ".b",
                            {dims_[l + 1]});
      init_uniform_fanin(W, dims_[l], init);
      (void)b;  // zero-initialized
      weights_.push_back(&W);
      biases_.push_back(&b);
    }
  }

  std::size_t in_dim() const { return dims_.front(); }
  std::size_t out_dim() const { return dims_.back(); }
  std::size_t layer_count() const { return weights_.size(); }
  const std::string& prefix() const { return prefix_; }
  Tensor& weight(std::size_t l) { return *weights_[l]; }
  Tensor& bias(std::size_t l) { return *biases_[l]; }

  Vec forward(const Vec& x, Cache* cache = nullptr) const {
    if (x.size() != dims_.front())
      throw ShapeError("mlp '" + prefix_ + "' layer 0: expected input " +
                       std::to_string(dims_.front()) + ", got " +
                       std::to_string(x.size()));
    Vec cur = x;
    if (cache) {
      cache->acts.clear();
      cache->acts.push_back(cur);
    }
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      const Tensor& W = *weights_[l];
      const Tensor& b = *biases_[l];
      const std::size_t out = dims_[l + 1], in = dims_[l];
      Vec next(out);
      const bool last = (l + 1 == weights_.size());
      for (std::size_t o = 0; o < out; ++o) {
        double s = b.value[o];
        const double* wrow = &W.value[o * in];
        for (std::size_t i = 0; i < in; ++i) s += wrow[i] * cur[i];
        next[o] = last ? s : apply_act(hidden_act_, s);
      }
      cur = std::move(next);
      if (cache) cache->acts.push_back(cur);
    }
    return cur;
  }

  /// Accumulates parameter gradients for one cached invocation and returns
  /// the gradient w.r.t. the input.
  Vec backward(const Cache& cache, const Vec& dy) const {
    if (cache.acts.size() != dims_.size())
      throw StateError("mlp '" + prefix_ + "': stale cache");
    if (dy.size() != dims_.back())
      throw ShapeError("mlp '" + prefix_ + "': bad output grad size");
    Vec d = dy;
    for (std::size_t li = weights_.size(); li-- > 0;) {
      Tensor& W = *weights_[li];
      Tensor& b = *biases_[li];
      const std::size_t out = dims_[li + 1], in = dims_[li];
      const Vec& x = cache.acts[li];
      const Vec& post = cache.acts[li + 1];
      const bool last = (li + 1 == weights_.size());
      Vec dx(in, 0.0);
      for (std::size_t o = 0; o < out; ++o) {
        const double dpre =
            last ? d[o] : d[o] * act_grad_from_post(hidden_act_, post[o]);
        if (dpre == 0.0) continue;
        b.grad[o] += dpre;
        double* wgrow = &W.grad[o * in];
        const double* wrow = &W.value[o * in];
        for (std::size_t i = 0; i < in; ++i) {
          wgrow[i] += dpre * x[i];
          dx[i] += wrow[i] * dpre;
        }
      }
      d = std::move(dx);
    }
    return d;
  }

 private:
  std::string prefix_;
  std::vector<std::size_t> dims_;
  Activation hidden_act_ = Activation::kRelu;
  std::vector<Tensor*> weights_;
  std::vector<Tensor*> biases_;
};

// --------------------------------------------------------------------------
// LSTM
// --------------------------------------------------------------------------

/// One LSTM layer; gate order i, f, g, o in the stacked weight rows.
class LstmCell {
 public:
  struct Cache {
    Vec x, h_prev, c_prev;
    Vec i, f, g, o, c, tanh_c;
  };

  LstmCell() = default;

  LstmCell(ParamStore& store, const std::string& prefix, std::size_t in,
           std::size_t hidden, Rng& init)
      : in_(in), hidden_(hidden) {
    Wx_ = &store.add(prefix + ".Wx", {4 * hidden, in});
    Wh_ = &store.add(prefix + ".Wh", {4 * hidden, hidden});
    b_ = &store.add(prefix + ".b", {4 * hidden});
    init_uniform_fanin(*Wx_, in + hidden, init);
    init_uniform_fanin(*Wh_, in + hidden, init);
  }

  std::size_t input_dim() const { return in_; }
  std::size_t hidden_dim() const { return hidden_; }

  void forward(const Vec& x, const Vec& h_prev, const Vec& c_prev, Vec& h_out,
               Vec& c_out, Cache* cache) const {
    if (x.size() != in_ || h_prev.size() != hidden_ || c_prev.size() != hidden_)
      throw ShapeError("lstm cell: state/input dimension mismatch");
    const std::size_t H = hidden_;
    Vec pre(4 * H);
    for (std::size_t r = 0; r < 4 * H; ++r) {
      double s = b_->value[r];
      const double* wx = &Wx_->value[r * in_];
      for (std::size_t i = 0; i < in_; ++i) s += wx[i] * x[i];
      const double* wh = &Wh_->value[r * H];
      for (std::size_t i = 0; i < H; ++i) s += wh[i] * h_prev[i];
      pre[r] = s;
    }
    auto sigmoid = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    Vec ig(H), fg(H), gg(H), og(H);
    for (std::size_t j = 0; j < H; ++j) {
      ig[j] = sigmoid(pre[j]);
      fg[j] = sigmoid(pre[H + j]);
      gg[j] = std::tanh(pre[2 * H + j]);
      og[j] = sigmoid(pre[3 * H + j]);
    }
    c_out.resize(H);
    h_out.resize(H);
    Vec tc(H);
    for (std::size_t j = 0; j < H; ++j) {
      c_out[j] = fg[j] * c_prev[j] + ig[j] * gg[j];
      tc[j] = std::tanh(c_out[j]);
      h_out[j] = og[j] * tc[j];
    }
    if (cache) {
      cache->x = x;
      cache->h_prev = h_prev;
      cache->c_prev = c_prev;
      cache->i = std::move(ig);
      cache->f = std::move(fg);
      cache->g = std::move(gg);
      cache->o = std::move(og);
      cache->c = c_out;
      cache->tanh_c = std::move(tc);
    }
  }

  /// dh/dc are gradients flowing into this step's outputs; outputs are the
  /// gradients w.r.t. the inputs of the step.
  void backward(const Cache& cc, const Vec& dh, const Vec& dc_in, Vec& dx,
                Vec& dh_prev, Vec& dc_prev) const {
    const std::size_t H = hidden_;
    Vec dpre(4 * H);
    dc_prev.assign(H, 0.0);
    for (std::size_t j = 0; j < H; ++j) {
      const double do_ = dh[j] * cc.tanh_c[j];
      const double dc =
          dc_in[j] + dh[j] * cc.o[j] * (1.0 - cc.tanh_c[j] * cc.tanh_c[j]);
      const double di = dc * cc.g[j];
      const double df = dc * cc.c_prev[j];
      const double dg = dc * cc.i[j];
      dc_prev[j] = dc * cc.f[j];
      dpre[j] = di * cc.i[j] * (1.0 - cc.i[j]);
      dpre[H + j] = df * cc.f[j] * (1.0 - cc.f[j]);
      dpre[2 * H + j] = dg * (1.0 - cc.g[j] * cc.g[j]);
      dpre[3 * H + j] = do_ * cc.o[j] * (1.0 - cc.o[j]);
    }
    dx.assign(in_, 0.0);
    dh_prev.assign(H, 0.0);
    for (std::size_t r = 0; r < 4 * H; ++r) {
      const double d = dpre[r];
      if (d == 0.0) continue;
      b_->grad[r] += d;
      double* wxg = &Wx_->grad[r * in_];
      const double* wx = &Wx_->value[r * in_];
      for (std::size_t i = 0; i < in_; ++i) {
        wxg[i] += d * cc.x[i];
        dx[i] += wx[i] * d;
      }
      double* whg = &Wh_->grad[r * H];
      const double* wh = &Wh_->value[r * H];
      for (std::size_t i = 0; i < H; ++i) {
        whg[i] += d * cc.h_prev[i];
        dh_prev[i] += wh[i] * d;
      }
    }
  }

 private:
  std::size_t in_ = 0, hidden_ = 0;
  Tensor* Wx_ = nullptr;
  Tensor* Wh_ = nullptr;
  Tensor* b_ = nullptr;
};

/// Stacked recurrent encoder; layer l feeds layer l+1.
class LstmStack {
 public:
  struct State {
    std::vector<Vec> h, c;  // per layer

    bool empty() const { return h.empty(); }
  };
  struct Cache {
    std::vector<LstmCell::Cache> layers;
  };

  LstmStack() = default;

  LstmStack(ParamStore& store, const std::string& prefix, std::size_t input,
            std::size_t hidden, std::size_t layers, Rng& init) {
    if (layers < 1) throw ConfigError("lstm stack: need >= 1 layer");
    for (std::size_t l = 0; l < layers; ++l) {
      cells_.emplace_back(store, prefix + ".layer" + std::to_string(l),
                          l == 0 ? input : hidden, hidden, init);
    }
  }

  std::size_t layer_count() const { return cells_.size(); }
  std::size_t hidden_dim() const { return cells_.front().hidden_dim(); }
  std::size_t input_dim() const { return cells_.front().input_dim(); }

  State zero_state() const {
    State s;
    s.h.assign(cells_.size(), Vec(hidden_dim(), 0.0));
    s.c.assign(cells_.size(), Vec(hidden_dim(), 0.0));
    return s;
  }

  /// Advances one step; returns the top layer's hidden output.
  Vec step(const State& in, const Vec& x, State& out, Cache* cache) const {
    out.h.resize(cells_.size());
    out.c.resize(cells_.size());
    if (cache) cache->layers.resize(cells_.size());
    Vec cur = x;
    for (std::size_t l = 0; l < cells_.size(); ++l) {
      Vec h, c;
      cells_[l].forward(cur, in.h[l], in.c[l], h, c,
                        cache ? &cache->layers[l] : nullptr);
      out.h[l] = h;
      out.c[l] = c;
      cur = std::move(h);
    }
    return cur;
  }

  /// Reverse of one step. `dstate` carries future gradients in and returns
  /// the gradients w.r.t. the incoming state; `d_top` is the gradient of the
  /// step's returned hidden output.
  void backward_step(const Cache& cache, const Vec& d_top, State& dstate,
                     Vec& dx) const {
    Vec d_upper = d_top;
    for (std::size_t l = cells_.size(); l-- > 0;) {
      Vec dh = dstate.h[l];
      for (std::size_t j = 0; j < dh.size(); ++j) dh[j] += d_upper[j];
      Vec dxl, dh_prev, dc_prev;
      cells_[l].backward(cache.layers[l], dh, dstate.c[l], dxl, dh_prev,
                         dc_prev);
      dstate.h[l] = std::move(dh_prev);
      dstate.c[l] = std::move(dc_prev);
      d_upper = std::move(dxl);  // grad w.r.t. lower layer's hidden output
    }
    dx = std::move(d_upper);
  }

 private:
  std::vector<LstmCell> cells_;
};

// --------------------------------------------------------------------------
// Softmax and Adam
// --------------------------------------------------------------------------

/// Max-subtracted softmax; output sums to 1 for any finite scores.
inline Vec softmax(const Vec& scores) {
  if (scores.empty()) throw ShapeError("softmax: empty score vector");
  const double mx = *std::max_element(scores.begin(), scores.end());
  Vec p(scores.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(scores[i] - mx);
    sum += p[i];
  }
  for (auto& x : p) x /= sum;
  return p;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 40.0;  // global-norm threshold; <= 0 disables clipping

  bool operator==(const AdamConfig&) const = default;
};

/// Global-norm clip then Adam over `subset` (all tensors when empty).
/// Consumes (zeroes) the gradients it applied; returns the pre-clip norm.
inline double adam_step(ParamStore& store, const AdamConfig& cfg,
                        const std::vector<Tensor*>& subset = {}) {
  std::vector<Tensor*> tensors = subset;
  if (tensors.empty()) {
    for (std::size_t i = 0; i < store.tensor_count(); ++i)
      tensors.push_back(&store.tensor(i));
  }
  double norm2 = 0.0;
  for (const Tensor* t : tensors)
    for (double g : t->grad) norm2 += g * g;
  const double norm = std::sqrt(norm2);
  const double scale =
      (cfg.clip > 0.0 && norm > cfg.clip) ? cfg.clip / norm : 1.0;

  const std::int64_t t_step = ++store.adam_steps();
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_step));
  for (Tensor* t : tensors) {
    for (std::size_t i = 0; i < t->size(); ++i) {
      const double g = t->grad[i] * scale;
      t->m[i] = cfg.beta1 * t->m[i] + (1.0 - cfg.beta1) * g;
      t->v[i] = cfg.beta2 * t->v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = t->m[i] / bc1;
      const double vhat = t->v[i] / bc2;
      t->value[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      t->grad[i] = 0.0;
    }
  }
  return norm;
}

}  // namespace autoshard::net
