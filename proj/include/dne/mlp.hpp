// Dense layers with hand-written reverse-mode gradients.
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dne/linalg.hpp"
#include "dne/rng.hpp"

namespace dne {

enum class Act { None, Relu };

struct Layer {
  Mat w;                  // out x in
  std::vector<double> b;  // out
  Act act = Act::None;
};

struct Mlp {
  std::vector<Layer> layers;

  int in_dim() const { return layers.empty() ? 0 : layers.front().w.cols(); }
  int out_dim() const { return layers.empty() ? 0 : layers.back().w.rows(); }
};

// Xavier-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases. Draws
// are indexed by (tag, layer, i, j) so initialization is order-independent.
inline Mlp make_mlp(const std::vector<int>& dims, Act hidden_act, std::uint64_t seed,
                    std::uint64_t tag = 0) {
  if (dims.size() < 2) throw std::invalid_argument("make_mlp: need at least two dims");
  const CounterRng rng(seed);
  Mlp mlp;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    Layer layer;
    layer.w = Mat(dims[l + 1], dims[l]);
    layer.b.assign(dims[l + 1], 0.0);
    layer.act = l + 2 < dims.size() ? hidden_act : Act::None;  // last layer stays linear
    const double a = std::sqrt(6.0 / (dims[l] + dims[l + 1]));
    for (int i = 0; i < layer.w.rows(); ++i)
      for (int j = 0; j < layer.w.cols(); ++j)
        layer.w(i, j) = rng.uniform_in(-a, a, 0xee0u, tag, l, i, j);
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

// Activations recorded during a forward pass; replaying the pass with the
// same input reproduces them bitwise.
struct GradTape {
  std::vector<double> input;
  std::vector<std::vector<double>> pre;   // pre-activation per layer
  std::vector<std::vector<double>> post;  // post-activation per layer
};

inline void forward_into(const Mlp& mlp, std::span<const double> x, std::vector<double>& out,
                         GradTape* tape = nullptr) {
  if (mlp.layers.empty()) throw std::invalid_argument("forward: empty mlp");
  if (static_cast<int>(x.size()) != mlp.in_dim())
    throw std::invalid_argument("forward: input dimension mismatch");
  if (tape) {
    tape->input.assign(x.begin(), x.end());
    tape->pre.resize(mlp.layers.size());
    tape->post.resize(mlp.layers.size());
  }
  std::vector<double> cur(x.begin(), x.end());
  std::vector<double> next;
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    const Layer& layer = mlp.layers[l];
    const int rows = layer.w.rows();
    const int cols = layer.w.cols();
    next.assign(rows, 0.0);
    for (int i = 0; i < rows; ++i) {
      const double* wr = layer.w.row(i);
      double acc = layer.b[i];
      for (int j = 0; j < cols; ++j) acc += wr[j] * cur[j];
      next[i] = acc;
    }
    if (tape) tape->pre[l] = next;
    if (layer.act == Act::Relu)
      for (double& v : next) v = v > 0.0 ? v : 0.0;
    if (tape) tape->post[l] = next;
    cur.swap(next);
  }
  out = std::move(cur);
}

inline std::vector<double> forward(const Mlp& mlp, std::span<const double> x) {
  std::vector<double> out;
  forward_into(mlp, x, out);
  return out;
}

struct MlpGrad {
  std::vector<Mat> w;
  std::vector<std::vector<double>> b;

  void init_like(const Mlp& mlp) {
    w.clear();
    b.clear();
    for (const Layer& l : mlp.layers) {
      w.emplace_back(l.w.rows(), l.w.cols());
      b.emplace_back(l.b.size(), 0.0);
    }
  }

  void accumulate(const MlpGrad& o) {
    for (std::size_t l = 0; l < w.size(); ++l) {
      w[l] += o.w[l];
      add_scaled(b[l], o.b[l], 1.0);
    }
  }
};

// Exact reverse-mode gradients; accumulates into `grad` and optionally
// returns dL/d(input).
inline void backward(const Mlp& mlp, const GradTape& tape, std::span<const double> upstream,
                     MlpGrad& grad, std::vector<double>* input_grad = nullptr) {
  if (static_cast<int>(upstream.size()) != mlp.out_dim())
    throw std::invalid_argument("backward: upstream dimension mismatch");
  std::vector<double> delta(upstream.begin(), upstream.end());
  std::vector<double> prev;
  for (int l = static_cast<int>(mlp.layers.size()) - 1; l >= 0; --l) {
    const Layer& layer = mlp.layers[l];
    if (layer.act == Act::Relu) {
      const std::vector<double>& pre = tape.pre[l];
      for (std::size_t i = 0; i < delta.size(); ++i)
        if (pre[i] <= 0.0) delta[i] = 0.0;
    }
    const std::vector<double>& below = l == 0 ? tape.input : tape.post[l - 1];
    Mat& gw = grad.w[l];
    std::vector<double>& gb = grad.b[l];
    for (int i = 0; i < layer.w.rows(); ++i) {
      const double d = delta[i];
      if (d != 0.0) {
        double* gwr = gw.row(i);
        for (int j = 0; j < layer.w.cols(); ++j) gwr[j] += d * below[j];
      }
      gb[i] += d;
    }
    if (l > 0 || input_grad) {
      prev.assign(layer.w.cols(), 0.0);
      for (int i = 0; i < layer.w.rows(); ++i) {
        const double d = delta[i];
        if (d == 0.0) continue;
        const double* wr = layer.w.row(i);
        for (int j = 0; j < layer.w.cols(); ++j) prev[j] += d * wr[j];
      }
      delta.swap(prev);
    }
  }
  if (input_grad) *input_grad = std::move(delta);
}

// Row-batched evaluation: x is N x in_dim, every row passes through the
// same network. Semantically identical to N forward() calls.
struct BatchTape {
  Mat input;
  std::vector<Mat> pre;
  std::vector<Mat> post;
};

inline void forward_batch(const Mlp& mlp, const Mat& x, Mat& out, BatchTape* tape = nullptr) {
  if (x.cols() != mlp.in_dim()) throw std::invalid_argument("forward_batch: dim mismatch");
  const int n = x.rows();
  if (tape) {
    tape->input = x;
    tape->pre.resize(mlp.layers.size());
    tape->post.resize(mlp.layers.size());
  }
  Mat cur = x;
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    const Layer& layer = mlp.layers[l];
    const int rows = layer.w.rows();
    const int cols = layer.w.cols();
    Mat next(n, rows);
    for (int r = 0; r < n; ++r) {
      const double* xi = cur.row(r);
      double* yo = next.row(r);
      for (int i = 0; i < rows; ++i) {
        const double* wr = layer.w.row(i);
        double acc = layer.b[i];
        for (int j = 0; j < cols; ++j) acc += wr[j] * xi[j];
        yo[i] = acc;
      }
    }
    if (tape) tape->pre[l] = next;
    if (layer.act == Act::Relu) {
      double* d = next.data();
      for (std::size_t i = 0; i < next.size(); ++i) d[i] = d[i] > 0.0 ? d[i] : 0.0;
    }
    if (tape) tape->post[l] = next;
    cur = std::move(next);
  }
  out = std::move(cur);
}

inline void backward_batch(const Mlp& mlp, const BatchTape& tape, const Mat& upstream,
                            MlpGrad& grad, Mat* input_grad = nullptr) {
  const int n = upstream.rows();
  Mat delta = upstream;
  for (int l = static_cast<int>(mlp.layers.size()) - 1; l >= 0; --l) {
    const Layer& layer = mlp.layers[l];
    if (layer.act == Act::Relu) {
      const double* pre = tape.pre[l].data();
      double* d = delta.data();
      for (std::size_t i = 0; i < delta.size(); ++i)
        if (pre[i] <= 0.0) d[i] = 0.0;
    }
    const Mat& below = l == 0 ? tape.input : tape.post[l - 1];
    Mat& gw = grad.w[l];
    std::vector<double>& gb = grad.b[l];
    for (int r = 0; r < n; ++r) {
      const double* dr = delta.row(r);
      const double* br = below.row(r);
      for (int i = 0; i < layer.w.rows(); ++i) {
        const double d = dr[i];
        if (d == 0.0) continue;
        double* gwr = gw.row(i);
        for (int j = 0; j < layer.w.cols(); ++j) gwr[j] += d * br[j];
        gb[i] += d;
      }
    }
    if (l > 0 || input_grad) {
      Mat prev(n, layer.w.cols());
      for (int r = 0; r < n; ++r) {
        const double* dr = delta.row(r);
        double* pr = prev.row(r);
        for (int i = 0; i < layer.w.rows(); ++i) {
          const double d = dr[i];
          if (d == 0.0) continue;
          const double* wr = layer.w.row(i);
          for (int j = 0; j < layer.w.cols(); ++j) pr[j] += d * wr[j];
        }
      }
      delta = std::move(prev);
    }
  }
  if (input_grad) *input_grad = std::move(delta);
}

// Plain gradient descent with a step-decay schedule.
struct LrSchedule {
  double lr0 = 1e-2;
  double decay = 0.5;
  int step_epochs = 4;

  double at(int epoch) const {
    if (step_epochs <= 0) return lr0;
    return lr0 * std::pow(decay, static_cast<double>(epoch / step_epochs));
  }
};

inline void sgd_step(std::span<double> params, std::span<const double> grads, double lr) {
  if (params.size() != grads.size()) throw std::invalid_argument("sgd_step: size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
}

inline void sgd_step(Mlp& mlp, const MlpGrad& grad, double lr) {
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    sgd_step(std::span<double>(mlp.layers[l].w.data(), mlp.layers[l].w.size()),
             std::span<const double>(grad.w[l].data(), grad.w[l].size()), lr);
    sgd_step(mlp.layers[l].b, grad.b[l], lr);
  }
}

}  // namespace dne
