#pragma once

// Scheduling maps p = psi(x, u, d): a one-block ResNet (tanh hidden stack plus
// a linear bypass) whose summed output is saturated by tanh, so ||p||_inf < 1.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "lpvlfr/linalg.hpp"

namespace lpvlfr {

struct NetShape {
  std::size_t n_x = 0;
  std::size_t n_u = 0;
  std::size_t n_d = 0;
  std::size_t n_p = 0;
  std::vector<std::size_t> hidden;  // empty => linear map with saturation

  std::size_t input_dim() const noexcept { return n_x + n_u + n_d; }
  friend bool operator==(const NetShape&, const NetShape&) = default;
};

/// Scheduling network with all weights in one flat vector. Layout, in order:
/// for each hidden layer (W_l row-major, b_l); head (n_p x last hidden);
/// bypass [W_x W_u W_d] as one n_p x input_dim block; bypass bias b.
class SchedulingNet {
 public:
  /// Largest double below 1; the output saturation never reaches the box boundary.
  static constexpr double kOpenBound = 1.0 - 0x1p-53;

  SchedulingNet() = default;
  explicit SchedulingNet(NetShape shape) : shape_(std::move(shape)) {
    std::size_t off = 0;
    std::size_t in = shape_.input_dim();
    for (std::size_t h : shape_.hidden) {
      if (h == 0) throw DimensionMismatch("SchedulingNet: hidden layer of size 0");
      layers_.push_back({off, off + h * in, h, in});
      off += h * in + h;
      in = h;
    }
    head_off_ = off;
    off += shape_.hidden.empty() ? 0 : shape_.n_p * in;
    bypass_off_ = off;
    off += shape_.n_p * shape_.input_dim();
    bias_off_ = off;
    off += shape_.n_p;
    params_.assign(off, 0.0);
    act_size_ = 0;
    for (std::size_t h : shape_.hidden) act_size_ += h;
  }

  const NetShape& shape() const noexcept { return shape_; }
  std::size_t param_count() const noexcept { return params_.size(); }
  std::span<double> params() noexcept { return params_; }
  std::span<const double> params() const noexcept { return params_; }
  /// Scratch length needed by forward/backward for the hidden activations.
  std::size_t activation_size() const noexcept { return act_size_; }

  std::size_t hidden_layers() const noexcept { return layers_.size(); }
  Mat hidden_weight(std::size_t l) const { return read(layers_.at(l).w_off, layers_[l].out, layers_[l].in); }
  std::vector<double> hidden_bias(std::size_t l) const {
    const auto& L = layers_.at(l);
    return {params_.begin() + L.b_off, params_.begin() + L.b_off + L.out};
  }
  Mat head() const { return shape_.hidden.empty() ? Mat() : read(head_off_, shape_.n_p, shape_.hidden.back()); }
  Mat bypass() const { return read(bypass_off_, shape_.n_p, shape_.input_dim()); }
  std::vector<double> bias() const {
    return {params_.begin() + bias_off_, params_.begin() + bias_off_ + shape_.n_p};
  }

  void set_hidden(std::size_t l, const Mat& w, std::span<const double> b) {
    const auto& L = layers_.at(l);
    write(L.w_off, L.out, L.in, w);
    check_len(b.size(), L.out);
    std::copy(b.begin(), b.end(), params_.begin() + L.b_off);
  }
  void set_head(const Mat& h) {
    if (shape_.hidden.empty()) {
      if (!h.empty()) throw DimensionMismatch("SchedulingNet: head given for net without hidden layers");
      return;
    }
    write(head_off_, shape_.n_p, shape_.hidden.back(), h);
  }
  void set_bypass(const Mat& w) { write(bypass_off_, shape_.n_p, shape_.input_dim(), w); }
  void set_bias(std::span<const double> b) {
    check_len(b.size(), shape_.n_p);
    std::copy(b.begin(), b.end(), params_.begin() + bias_off_);
  }

  /// p = tanh(W_x x + W_u u + W_d d + b + head(hidden_stack([x; u; d]))).
  /// `act` receives the hidden activations (activation_size() entries).
  void forward(const double* x, const double* u, const double* d, double* p, double* act) const noexcept {
    const double* w = params_.data();
    const std::size_t nin = shape_.input_dim();
    auto input = [&](std::size_t j) {
      return j < shape_.n_x ? x[j] : (j < shape_.n_x + shape_.n_u ? u[j - shape_.n_x] : d[j - shape_.n_x - shape_.n_u]);
    };
    const double* prev = nullptr;
    double* cur = act;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      for (std::size_t i = 0; i < L.out; ++i) {
        double s = w[L.b_off + i];
        const double* row = w + L.w_off + i * L.in;
        if (l == 0)
          for (std::size_t j = 0; j < L.in; ++j) s += row[j] * input(j);
        else
          for (std::size_t j = 0; j < L.in; ++j) s += row[j] * prev[j];
        cur[i] = std::tanh(s);
      }
      prev = cur;
      cur += L.out;
    }
    for (std::size_t i = 0; i < shape_.n_p; ++i) {
      double s = w[bias_off_ + i];
      const double* row = w + bypass_off_ + i * nin;
      for (std::size_t j = 0; j < nin; ++j) s += row[j] * input(j);
      if (!layers_.empty()) {
        const std::size_t hl = layers_.back().out;
        const double* hrow = w + head_off_ + i * hl;
        for (std::size_t j = 0; j < hl; ++j) s += hrow[j] * prev[j];
      }
      // Double-precision tanh rounds to +-1 beyond |s| ~ 19; keep p strictly inside.
      p[i] = std::clamp(std::tanh(s), -kOpenBound, kOpenBound);
    }
  }

  /// Reverse pass. Accumulates dL/dparams into `grad` (param_count() long) and
  /// dL/dx, dL/du, dL/dd into the given buffers (any may be null). `scratch`
  /// needs 2 * max(hidden, n_p) entries.
  void backward(const double* x, const double* u, const double* d, const double* act, const double* p,
                const double* p_bar, double* grad, double* x_bar, double* u_bar, double* d_bar,
                double* scratch) const noexcept {
    const double* w = params_.data();
    const std::size_t nin = shape_.input_dim();
    const std::size_t width = scratch_width();
    double* g = scratch;          // gradient wrt current layer pre-activation
    double* hbar = scratch + width;  // gradient wrt current layer output
    auto input = [&](std::size_t j) {
      return j < shape_.n_x ? x[j] : (j < shape_.n_x + shape_.n_u ? u[j - shape_.n_x] : d[j - shape_.n_x - shape_.n_u]);
    };
    auto add_input_bar = [&](std::size_t j, double v) {
      if (j < shape_.n_x) {
        if (x_bar) x_bar[j] += v;
      } else if (j < shape_.n_x + shape_.n_u) {
        if (u_bar) u_bar[j - shape_.n_x] += v;
      } else if (d_bar) {
        d_bar[j - shape_.n_x - shape_.n_u] += v;
      }
    };

    for (std::size_t i = 0; i < shape_.n_p; ++i) g[i] = p_bar[i] * (1.0 - p[i] * p[i]);
    for (std::size_t i = 0; i < shape_.n_p; ++i) {
      const double gi = g[i];
      if (gi == 0.0) continue;
      grad[bias_off_ + i] += gi;
      const double* row = w + bypass_off_ + i * nin;
      double* grow = grad + bypass_off_ + i * nin;
      for (std::size_t j = 0; j < nin; ++j) {
        grow[j] += gi * input(j);
        add_input_bar(j, gi * row[j]);
      }
    }
    if (layers_.empty()) return;

    // Hidden activations are laid out consecutively in `act`.
    std::size_t act_off = act_size_;
    std::size_t hl = layers_.back().out;
    act_off -= hl;
    const double* h = act + act_off;
    for (std::size_t j = 0; j < hl; ++j) hbar[j] = 0.0;
    for (std::size_t i = 0; i < shape_.n_p; ++i) {
      const double gi = g[i];
      if (gi == 0.0) continue;
      const double* hrow = w + head_off_ + i * hl;
      double* ghrow = grad + head_off_ + i * hl;
      for (std::size_t j = 0; j < hl; ++j) {
        ghrow[j] += gi * h[j];
        hbar[j] += gi * hrow[j];
      }
    }
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const auto& L = layers_[l];
      h = act + act_off;
      for (std::size_t i = 0; i < L.out; ++i) g[i] = hbar[i] * (1.0 - h[i] * h[i]);
      const double* hprev = nullptr;
      if (l > 0) {
        act_off -= L.in;
        hprev = act + act_off;
        for (std::size_t j = 0; j < L.in; ++j) hbar[j] = 0.0;
      }
      for (std::size_t i = 0; i < L.out; ++i) {
        const double gi = g[i];
        if (gi == 0.0) continue;
        grad[L.b_off + i] += gi;
        const double* row = w + L.w_off + i * L.in;
        double* grow = grad + L.w_off + i * L.in;
        if (l > 0) {
          for (std::size_t j = 0; j < L.in; ++j) {
            grow[j] += gi * hprev[j];
            hbar[j] += gi * row[j];
          }
        } else {
          for (std::size_t j = 0; j < L.in; ++j) {
            grow[j] += gi * input(j);
            add_input_bar(j, gi * row[j]);
          }
        }
      }
    }
  }

  std::size_t scratch_width() const noexcept {
    std::size_t m = shape_.n_p;
    for (std::size_t h : shape_.hidden) m = std::max(m, h);
    return m;
  }

  friend bool operator==(const SchedulingNet& a, const SchedulingNet& b) {
    return a.shape_ == b.shape_ && a.params_ == b.params_;
  }

 private:
  struct Layer {
    std::size_t w_off, b_off, out, in;
  };
  Mat read(std::size_t off, std::size_t r, std::size_t c) const {
    return Mat(r, c, std::vector<double>(params_.begin() + off, params_.begin() + off + r * c));
  }
  void write(std::size_t off, std::size_t r, std::size_t c, const Mat& m) {
    if (m.rows() != r || m.cols() != c) throw DimensionMismatch("SchedulingNet: weight shape mismatch");
    std::copy(m.values().begin(), m.values().end(), params_.begin() + off);
  }
  static void check_len(std::size_t got, std::size_t want) {
    if (got != want) throw DimensionMismatch("SchedulingNet: bias length mismatch");
  }

  NetShape shape_;
  std::vector<Layer> layers_;
  std::size_t head_off_ = 0, bypass_off_ = 0, bias_off_ = 0, act_size_ = 0;
  std::vector<double> params_;
};

inline std::vector<double> forward(const SchedulingNet& net, std::span<const double> x, std::span<const double> u,
                                   std::span<const double> d) {
  const auto& s = net.shape();
  if (x.size() != s.n_x || u.size() != s.n_u || d.size() != s.n_d)
    throw DimensionMismatch("sched::forward: input dimension mismatch");
  std::vector<double> p(s.n_p), act(net.activation_size());
  net.forward(x.data(), u.data(), d.data(), p.data(), act.data());
  return p;
}

/// Uniform Xavier weights, zero biases. The bypass [W_x W_u W_d] is one layer
/// with fan_in = input_dim.
template <class Rng>
SchedulingNet xavier_init(const NetShape& shape, Rng& rng) {
  SchedulingNet net(shape);
  auto fill = [&](std::size_t rows, std::size_t cols) {
    Mat w(rows, cols);
    if (rows + cols == 0) return w;
    const double lim = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::uniform_real_distribution<double> dist(-lim, lim);
    for (double& v : w.values()) v = dist(rng);
    return w;
  };
  std::size_t in = shape.input_dim();
  for (std::size_t l = 0; l < shape.hidden.size(); ++l) {
    const std::size_t out = shape.hidden[l];
    net.set_hidden(l, fill(out, in), std::vector<double>(out, 0.0));
    in = out;
  }
  if (!shape.hidden.empty()) net.set_head(fill(shape.n_p, in));
  net.set_bypass(fill(shape.n_p, shape.input_dim()));
  net.set_bias(std::vector<double>(shape.n_p, 0.0));
  return net;
}

}  // namespace lpvlfr
