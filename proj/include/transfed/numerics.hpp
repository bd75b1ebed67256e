#pragma once

// Dense math and the differentiable layer set. Every layer has an explicit
// forward that may record a cache and a hand-written backward that consumes
// it. All functions are templated on the scalar type; the model uses double.

#include "transfed/tensor.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

namespace transfed::numerics {

template <typename Derived>
using PlainOf = Matrix<typename Derived::Scalar>;

enum class Activation { identity, gelu, softmax };

// ---------------------------------------------------------------------------
// Pure operations

template <typename A, typename B>
PlainOf<A> matmul(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(a) + " x " + shape_string(b));
  PlainOf<A> out(a.rows(), b.cols());
  out.noalias() = a * b;
  return out;
}

/// Row-wise softmax with max subtraction.
template <typename Derived>
PlainOf<Derived> softmax_rows(const Eigen::MatrixBase<Derived>& x) {
  using S = typename Derived::Scalar;
  PlainOf<Derived> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const S peak = x.row(i).maxCoeff();
    out.row(i) = (x.row(i).array() - peak).exp().matrix();
    const S total = out.row(i).sum();
    out.row(i) /= total;
  }
  return out;
}

/// Backward of row softmax given its output `probs` and upstream `grad`.
template <typename P, typename G>
PlainOf<P> softmax_rows_backward(const Eigen::MatrixBase<P>& probs, const Eigen::MatrixBase<G>& grad) {
  using S = typename P::Scalar;
  PlainOf<P> out(probs.rows(), probs.cols());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const S inner = probs.row(i).dot(grad.row(i));
    out.row(i) = (probs.row(i).array() * (grad.row(i).array() - inner)).matrix();
  }
  return out;
}

template <typename S>
S gelu(S z) {
  using std::erf;
  using std::sqrt;
  return S(0.5) * z * (S(1) + erf(z / sqrt(S(2))));
}

template <typename S>
S gelu_derivative(S z) {
  using std::erf;
  using std::exp;
  using std::sqrt;
  const S pdf = exp(S(-0.5) * z * z) / sqrt(S(2) * S(M_PI));
  return S(0.5) * (S(1) + erf(z / sqrt(S(2)))) + z * pdf;
}

template <typename Derived>
PlainOf<Derived> apply_activation(const Eigen::MatrixBase<Derived>& z, Activation act) {
  using S = typename Derived::Scalar;
  switch (act) {
    case Activation::identity:
      return z;
    case Activation::gelu:
      return z.unaryExpr([](S v) { return gelu(v); });
    case Activation::softmax:
      return softmax_rows(z);
  }
  return z;
}

template <typename X, typename G, typename B>
PlainOf<X> layer_norm(const Eigen::MatrixBase<X>& x, const Eigen::MatrixBase<G>& gain,
                      const Eigen::MatrixBase<B>& bias, typename X::Scalar eps = 1e-6) {
  using S = typename X::Scalar;
  if (gain.size() != x.cols() || bias.size() != x.cols())
    throw DimensionError("layer_norm: gain/bias " + shape_string(gain) + "/" + shape_string(bias) +
                         " do not match input " + shape_string(x));
  if (!(eps > S(0))) throw ConfigError("layer_norm: eps must be positive");
  const auto n = static_cast<S>(x.cols());
  PlainOf<X> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const S mean = x.row(i).sum() / n;
    const auto centered = (x.row(i).array() - mean).eval();
    const S var = centered.square().sum() / n;
    const S inv = S(1) / std::sqrt(var + eps);
    out.row(i) = (centered * inv * gain.reshaped().transpose().array() + bias.reshaped().transpose().array()).matrix();
  }
  return out;
}

template <typename X, typename K, typename B>
PlainOf<X> dense(const Eigen::MatrixBase<X>& x, const Eigen::MatrixBase<K>& kernel,
                 const Eigen::MatrixBase<B>& bias, Activation act) {
  if (x.cols() != kernel.rows() || bias.size() != kernel.cols())
    throw DimensionError("dense: input " + shape_string(x) + ", kernel " + shape_string(kernel) + ", bias " +
                         shape_string(bias));
  PlainOf<X> z = matmul(x, kernel);
  z.rowwise() += bias.reshaped().transpose();
  return apply_activation(z, act);
}

template <typename S>
struct AttentionResult {
  Matrix<S> output;
  Matrix<S> weights;
};

/// softmax(q kᵀ / sqrt(d_k)) v. Set `scale` to false for the unscaled
/// dot-product weighting.
template <typename Q, typename K, typename V>
AttentionResult<typename Q::Scalar> scaled_dot_attention(const Eigen::MatrixBase<Q>& q,
                                                         const Eigen::MatrixBase<K>& k,
                                                         const Eigen::MatrixBase<V>& v, bool scale = true) {
  using S = typename Q::Scalar;
  if (q.cols() != k.cols() || q.rows() != k.rows() || k.rows() != v.rows())
    throw DimensionError("scaled_dot_attention: q " + shape_string(q) + ", k " + shape_string(k) + ", v " +
                         shape_string(v));
  Matrix<S> scores = matmul(q, k.transpose());
  if (scale) scores /= std::sqrt(static_cast<S>(q.cols()));
  AttentionResult<S> r;
  r.weights = softmax_rows(scores);
  r.output = matmul(r.weights, v);
  return r;
}

template <typename S>
struct AttentionGrads {
  Matrix<S> q, k, v;
};

template <typename S>
AttentionGrads<S> scaled_dot_attention_backward(const Matrix<S>& q, const Matrix<S>& k, const Matrix<S>& v,
                                                const Matrix<S>& weights, const Matrix<S>& grad_output,
                                                bool scale = true) {
  AttentionGrads<S> g;
  g.v = matmul(weights.transpose(), grad_output);
  const Matrix<S> grad_weights = matmul(grad_output, v.transpose());
  Matrix<S> grad_scores = softmax_rows_backward(weights, grad_weights);
  if (scale) grad_scores /= std::sqrt(static_cast<S>(q.cols()));
  g.q = matmul(grad_scores, k);
  g.k = matmul(grad_scores.transpose(), q);
  return g;
}

/// Mean negative log-likelihood of the labelled class, with probabilities
/// clamped below at 1e-12.
template <typename Derived>
typename Derived::Scalar cross_entropy(const Eigen::MatrixBase<Derived>& probs, std::span<const int> labels) {
  using S = typename Derived::Scalar;
  if (static_cast<Eigen::Index>(labels.size()) != probs.rows())
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for probabilities " +
                         shape_string(probs));
  if (labels.empty()) return S(0);
  S total = 0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const int label = labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= probs.cols())
      throw DimensionError("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                           std::to_string(probs.cols()) + ")");
    total -= std::log(std::max(probs(i, label), S(1e-12)));
  }
  return total / static_cast<S>(probs.rows());
}

/// Gradient of mean cross-entropy with respect to the logits feeding a
/// softmax: (probs - one_hot) / m.
template <typename Derived>
PlainOf<Derived> softmax_cross_entropy_backward(const Eigen::MatrixBase<Derived>& probs,
                                                std::span<const int> labels) {
  using S = typename Derived::Scalar;
  PlainOf<Derived> g = probs;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) g(i, labels[static_cast<std::size_t>(i)]) -= S(1);
  return g / static_cast<S>(probs.rows());
}

/// Sinusoidal position table, rows x width.
template <typename S>
Matrix<S> sinusoidal_positions(Eigen::Index rows, Eigen::Index width) {
  Matrix<S> pe(rows, width);
  for (Eigen::Index pos = 0; pos < rows; ++pos)
    for (Eigen::Index j = 0; j < width; ++j) {
      const S angle = static_cast<S>(pos) / std::pow(S(10000), static_cast<S>(2 * (j / 2)) / static_cast<S>(width));
      pe(pos, j) = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  return pe;
}

// ---------------------------------------------------------------------------
// Layers with cached forward state

/// Parameter gradients in the layer's parameter order, plus the gradient with
/// respect to the layer input.
template <typename S>
struct LayerGrads {
  std::vector<Matrix<S>> params;
  Matrix<S> input;
};

struct MissingCacheError : Error {
  using Error::Error;
};

template <typename S>
class DenseLayer {
 public:
  /// Parameter order: kernel, bias.
  Matrix<S> forward(const Matrix<S>& x, const Matrix<S>& kernel, const Matrix<S>& bias, Activation act,
                    bool record = true) {
    if (x.cols() != kernel.rows() || bias.size() != kernel.cols())
      throw DimensionError("dense: input " + shape_string(x) + ", kernel " + shape_string(kernel) + ", bias " +
                           shape_string(bias));
    Matrix<S> z = matmul(x, kernel);
    z.rowwise() += bias.reshaped().transpose();
    Matrix<S> y = apply_activation(z, act);
    if (record) cache_ = Cache{x, kernel, act, act == Activation::identity ? Matrix<S>() : z,
                               act == Activation::softmax ? y : Matrix<S>()};
    else cache_.reset();
    return y;
  }

  LayerGrads<S> backward(const Matrix<S>& grad_output) const {
    if (!cache_) throw MissingCacheError("dense backward called without a recorded forward");
    const Cache& c = *cache_;
    if (grad_output.rows() != c.x.rows() || grad_output.cols() != c.kernel.cols())
      throw DimensionError("dense backward: upstream " + shape_string(grad_output) + " does not match output " +
                           shape_string(c.x.rows(), c.kernel.cols()));
    Matrix<S> grad_z;
    switch (c.act) {
      case Activation::identity:
        grad_z = grad_output;
        break;
      case Activation::gelu:
        grad_z = grad_output.cwiseProduct(c.pre.unaryExpr([](S v) { return gelu_derivative(v); }));
        break;
      case Activation::softmax:
        grad_z = softmax_rows_backward(c.out, grad_output);
        break;
    }
    LayerGrads<S> g;
    g.params.push_back(matmul(c.x.transpose(), grad_z));
    g.params.push_back(grad_z.colwise().sum());
    g.input = matmul(grad_z, c.kernel.transpose());
    return g;
  }

  bool has_cache() const { return cache_.has_value(); }
  void clear() { cache_.reset(); }

 private:
  struct Cache {
    Matrix<S> x;
    Matrix<S> kernel;
    Activation act;
    Matrix<S> pre;
    Matrix<S> out;
  };
  std::optional<Cache> cache_;
};

template <typename S>
class LayerNormLayer {
 public:
  explicit LayerNormLayer(S eps = S(1e-6)) : eps_(eps) {
    if (!(eps > S(0))) throw ConfigError("layer_norm: eps must be positive");
  }

  /// Parameter order: gain, bias.
  Matrix<S> forward(const Matrix<S>& x, const Matrix<S>& gain, const Matrix<S>& bias, bool record = true) {
    if (gain.size() != x.cols() || bias.size() != x.cols())
      throw DimensionError("layer_norm: gain/bias " + shape_string(gain) + "/" + shape_string(bias) +
                           " do not match input " + shape_string(x));
    const auto n = static_cast<S>(x.cols());
    Matrix<S> normalized(x.rows(), x.cols());
    Matrix<S> inv_std(x.rows(), 1);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const S mean = x.row(i).sum() / n;
      normalized.row(i) = x.row(i).array() - mean;
      const S var = normalized.row(i).squaredNorm() / n;
      inv_std(i) = S(1) / std::sqrt(var + eps_);
      normalized.row(i) *= inv_std(i);
    }
    Matrix<S> y = normalized.array().rowwise() * gain.reshaped().transpose().array();
    y.rowwise() += bias.reshaped().transpose();
    if (record) cache_ = Cache{std::move(normalized), std::move(inv_std), gain};
    else cache_.reset();
    return y;
  }

  LayerGrads<S> backward(const Matrix<S>& grad_output) const {
    if (!cache_) throw MissingCacheError("layer_norm backward called without a recorded forward");
    const Cache& c = *cache_;
    if (grad_output.rows() != c.normalized.rows() || grad_output.cols() != c.normalized.cols())
      throw DimensionError("layer_norm backward: upstream " + shape_string(grad_output) +
                           " does not match output " + shape_string(c.normalized));
    LayerGrads<S> g;
    g.params.push_back(grad_output.cwiseProduct(c.normalized).colwise().sum());
    g.params.push_back(grad_output.colwise().sum());
    const Matrix<S> grad_norm = grad_output.array().rowwise() * c.gain.reshaped().transpose().array();
    const auto n = static_cast<S>(grad_output.cols());
    g.input.resize(grad_output.rows(), grad_output.cols());
    for (Eigen::Index i = 0; i < grad_output.rows(); ++i) {
      const S sum_g = grad_norm.row(i).sum();
      const S sum_gx = grad_norm.row(i).dot(c.normalized.row(i));
      g.input.row(i) =
          (c.inv_std(i) / n) * (n * grad_norm.row(i).array() - sum_g - c.normalized.row(i).array() * sum_gx);
    }
    return g;
  }

  bool has_cache() const { return cache_.has_value(); }
  void clear() { cache_.reset(); }

 private:
  struct Cache {
    Matrix<S> normalized;
    Matrix<S> inv_std;
    Matrix<S> gain;
  };
  S eps_;
  std::optional<Cache> cache_;
};

/// Projection weights for multi-head self-attention. Each kernel is
/// d_model x d_model; head h uses columns [h*d_h, (h+1)*d_h) of the query, key
/// and value projections.
template <typename S>
struct MultiHeadParams {
  Matrix<S> query_kernel, query_bias;
  Matrix<S> key_kernel, key_bias;
  Matrix<S> value_kernel, value_bias;
  Matrix<S> output_kernel, output_bias;
};

/// Self-attention over the rows (tokens) of each window. A stack of `windows`
/// windows of `tokens` rows each is processed in one call; attention never
/// crosses window boundaries.
template <typename S>
class MultiHeadAttentionLayer {
 public:
  MultiHeadAttentionLayer(int heads, bool scale = true) : heads_(heads), scale_(scale) {
    if (heads < 1) throw ConfigError("multi_head_attention: heads must be >= 1");
  }

  /// Parameter order: query kernel/bias, key kernel/bias, value kernel/bias,
  /// output kernel/bias.
  Matrix<S> forward(const Matrix<S>& x, const MultiHeadParams<S>& p, Eigen::Index tokens, bool record = true) {
    const Eigen::Index d_model = x.cols();
    if (d_model % heads_ != 0)
      throw ConfigError("multi_head_attention: d_model " + std::to_string(d_model) + " not divisible by " +
                        std::to_string(heads_) + " heads");
    if (tokens < 1 || x.rows() % tokens != 0)
      throw DimensionError("multi_head_attention: " + std::to_string(x.rows()) + " rows is not a multiple of " +
                           std::to_string(tokens) + " tokens");
    Cache c;
    c.tokens = tokens;
    c.query = query_.forward(x, p.query_kernel, p.query_bias, Activation::identity, record);
    c.key = key_.forward(x, p.key_kernel, p.key_bias, Activation::identity, record);
    c.value = value_.forward(x, p.value_kernel, p.value_bias, Activation::identity, record);
    const Eigen::Index head_dim = d_model / heads_;
    const Eigen::Index windows = x.rows() / tokens;
    Matrix<S> concat(x.rows(), d_model);
    if (record) c.weights.reserve(static_cast<std::size_t>(windows * heads_));
    for (Eigen::Index w = 0; w < windows; ++w)
      for (int h = 0; h < heads_; ++h) {
        const auto rows = Eigen::seqN(w * tokens, tokens);
        const auto cols = Eigen::seqN(h * head_dim, head_dim);
        auto r = scaled_dot_attention(c.query(rows, cols), c.key(rows, cols), c.value(rows, cols), scale_);
        concat(rows, cols) = r.output;
        if (record) c.weights.push_back(std::move(r.weights));
      }
    Matrix<S> y = output_.forward(concat, p.output_kernel, p.output_bias, Activation::identity, record);
    if (record) cache_ = std::move(c);
    else cache_.reset();
    return y;
  }

  LayerGrads<S> backward(const Matrix<S>& grad_output) const {
    if (!cache_) throw MissingCacheError("multi_head_attention backward called without a recorded forward");
    const Cache& c = *cache_;
    LayerGrads<S> out_grads = output_.backward(grad_output);
    const Matrix<S>& grad_concat = out_grads.input;
    const Eigen::Index d_model = grad_concat.cols();
    const Eigen::Index head_dim = d_model / heads_;
    const Eigen::Index windows = grad_concat.rows() / c.tokens;
    Matrix<S> grad_q(grad_concat.rows(), d_model), grad_k(grad_concat.rows(), d_model),
        grad_v(grad_concat.rows(), d_model);
    std::size_t idx = 0;
    for (Eigen::Index w = 0; w < windows; ++w)
      for (int h = 0; h < heads_; ++h, ++idx) {
        const auto rows = Eigen::seqN(w * c.tokens, c.tokens);
        const auto cols = Eigen::seqN(h * head_dim, head_dim);
        auto g = scaled_dot_attention_backward<S>(c.query(rows, cols), c.key(rows, cols), c.value(rows, cols),
                                                  c.weights[idx], grad_concat(rows, cols), scale_);
        grad_q(rows, cols) = g.q;
        grad_k(rows, cols) = g.k;
        grad_v(rows, cols) = g.v;
      }
    LayerGrads<S> gq = query_.backward(grad_q);
    LayerGrads<S> gk = key_.backward(grad_k);
    LayerGrads<S> gv = value_.backward(grad_v);
    LayerGrads<S> g;
    g.params = {std::move(gq.params[0]), std::move(gq.params[1]), std::move(gk.params[0]),
                std::move(gk.params[1]),  std::move(gv.params[0]), std::move(gv.params[1]),
                std::move(out_grads.params[0]), std::move(out_grads.params[1])};
    g.input = gq.input + gk.input + gv.input;
    return g;
  }

  int heads() const { return heads_; }
  bool has_cache() const { return cache_.has_value(); }
  void clear() {
    cache_.reset();
    query_.clear();
    key_.clear();
    value_.clear();
    output_.clear();
  }

 private:
  struct Cache {
    Eigen::Index tokens = 0;
    Matrix<S> query, key, value;
    std::vector<Matrix<S>> weights;
  };
  int heads_;
  bool scale_;
  DenseLayer<S> query_, key_, value_, output_;
  std::optional<Cache> cache_;
};

/// Stateless multi-head self-attention over a single t x d_model sequence.
template <typename S>
Matrix<S> multi_head_attention(const Matrix<S>& x, const MultiHeadParams<S>& params, int heads) {
  MultiHeadAttentionLayer<S> layer(heads);
  return layer.forward(x, params, x.rows(), false);
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.001;
};

struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  ParameterSet first_moment;
  ParameterSet second_moment;

  /// Fresh state with zero accumulators shaped like `params`.
  static AdamState for_params(const ParameterSet& params, AdamConfig config = {});
};

/// One bias-corrected Adam update followed by decoupled weight decay
/// (p <- p - lr * weight_decay * p).
void adam_step(ParameterSet& params, const ParameterSet& grads, AdamState& state);

}  // namespace transfed::numerics
