#include "transfed/model.hpp"

#include "transfed/wire.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <random>

namespace transfed::model {

using numerics::Activation;
using numerics::DenseLayer;
using numerics::LayerNormLayer;
using numerics::MultiHeadAttentionLayer;
using numerics::MultiHeadParams;

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw ConfigError(std::string("model config: ") + name + " must be positive, got " + std::to_string(v));
  };
  positive(window_rows, "window_rows");
  positive(features, "features");
  positive(d_model, "d_model");
  positive(heads, "heads");
  positive(layers, "layers");
  if (ffn_dim < 0) throw ConfigError("model config: ffn_dim must be non-negative");
  if (n_classes < 2) throw ConfigError("model config: n_classes must be >= 2, got " + std::to_string(n_classes));
  if (d_model % heads != 0)
    throw ConfigError("model config: d_model " + std::to_string(d_model) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  if (!(norm_eps > 0.0)) throw ConfigError("model config: norm_eps must be positive");
  if (augmentation.jitter < 0.0 || augmentation.scale_range < 0.0 || augmentation.scale_range >= 1.0)
    throw ConfigError("model config: augmentation jitter must be >= 0 and scale_range in [0, 1)");
}

std::size_t expected_param_count(const ModelConfig& c) {
  const std::size_t W = static_cast<std::size_t>(c.window_rows);
  const std::size_t F = static_cast<std::size_t>(c.features);
  const std::size_t d = static_cast<std::size_t>(c.d_model);
  const std::size_t f = static_cast<std::size_t>(c.effective_ffn_dim());
  const std::size_t C = static_cast<std::size_t>(c.n_classes);
  const std::size_t ffn = (f == d) ? d * d + d : (d * f + f) + (f * d + d);
  const std::size_t block = 2 * (2 * d) + 4 * (d * d + d) + ffn;
  const std::size_t head_in = c.pooling ? d : W * d;
  return (F * d + d) + static_cast<std::size_t>(c.layers) * block + head_in * C + C;
}

namespace {

std::string block_prefix(int l) { return "block" + std::to_string(l) + "/"; }

bool ffn_is_single(const ModelConfig& c) { return c.effective_ffn_dim() == c.d_model; }

}  // namespace

ParameterSet init_params(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  ParameterSet p;
  auto kernel = [&](const std::string& name, int fan_in, int fan_out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    MatrixXd k(fan_in, fan_out);
    for (Eigen::Index i = 0; i < k.size(); ++i) k.data()[i] = dist(rng);
    p.add(name, std::move(k));
  };
  auto vec = [&](const std::string& name, int n, double fill) { p.add(name, MatrixXd::Constant(1, n, fill), 1); };

  const int d = config.d_model;
  kernel("input/kernel", config.features, d);
  vec("input/bias", d, 0.0);
  for (int l = 0; l < config.layers; ++l) {
    const std::string b = block_prefix(l);
    vec(b + "norm1/gain", d, 1.0);
    vec(b + "norm1/bias", d, 0.0);
    for (const char* proj : {"query", "key", "value", "output"}) {
      kernel(b + "attention/" + proj + "/kernel", d, d);
      vec(b + "attention/" + proj + "/bias", d, 0.0);
    }
    vec(b + "norm2/gain", d, 1.0);
    vec(b + "norm2/bias", d, 0.0);
    if (ffn_is_single(config)) {
      kernel(b + "ffn/kernel", d, d);
      vec(b + "ffn/bias", d, 0.0);
    } else {
      const int f = config.effective_ffn_dim();
      kernel(b + "ffn/expand/kernel", d, f);
      vec(b + "ffn/expand/bias", f, 0.0);
      kernel(b + "ffn/project/kernel", f, d);
      vec(b + "ffn/project/bias", d, 0.0);
    }
  }
  kernel("head/kernel", config.pooling ? d : config.window_rows * d, config.n_classes);
  vec("head/bias", config.n_classes, 0.0);
  return p;
}

Model::Model(ModelConfig config, ParameterSet params) : config_(std::move(config)) {
  config_.validate();
  set_params(std::move(params));
  if (config_.positional_encoding)
    positions_ = numerics::sinusoidal_positions<double>(config_.window_rows, config_.d_model);
  for (int l = 0; l < config_.layers; ++l)
    blocks_.emplace_back(config_.heads, config_.norm_eps);
}

void Model::set_params(ParameterSet params) {
  const ParameterSet reference = init_params([&] {
    ModelConfig c = config_;
    c.seed = 0;
    return c;
  }());
  require_same_layout(reference, params, "model parameters");
  params_ = std::move(params);
}

MatrixXd Model::stack(std::span<const MatrixXd> batch) const {
  const Eigen::Index W = config_.window_rows;
  const Eigen::Index F = config_.features;
  MatrixXd stacked(static_cast<Eigen::Index>(batch.size()) * W, F);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].rows() != W || batch[i].cols() != F)
      throw DimensionError("model input window " + std::to_string(i) + " has shape " + shape_string(batch[i]) +
                           ", expected " + shape_string(W, F));
    stacked.middleRows(static_cast<Eigen::Index>(i) * W, W) = batch[i];
  }
  return stacked;
}

namespace {

MultiHeadParams<double> attention_params(const ParameterSet& p, const std::string& b) {
  const std::string a = b + "attention/";
  return {p.at(a + "query/kernel"), p.at(a + "query/bias"),  p.at(a + "key/kernel"),    p.at(a + "key/bias"),
          p.at(a + "value/kernel"), p.at(a + "value/bias"), p.at(a + "output/kernel"), p.at(a + "output/bias")};
}

}  // namespace

MatrixXd Model::run_encoder(const MatrixXd& stacked, bool record) {
  const Eigen::Index W = config_.window_rows;
  MatrixXd h = input_.forward(stacked, params_.at("input/kernel"), params_.at("input/bias"),
                              Activation::identity, record);
  if (config_.positional_encoding) {
    for (Eigen::Index w = 0; w < h.rows() / W; ++w) h.middleRows(w * W, W) += positions_;
  }
  for (int l = 0; l < config_.layers; ++l) {
    Block& blk = blocks_[static_cast<std::size_t>(l)];
    const std::string b = block_prefix(l);
    const MatrixXd n1 = blk.norm1.forward(h, params_.at(b + "norm1/gain"), params_.at(b + "norm1/bias"), record);
    MatrixXd r = blk.attention.forward(n1, attention_params(params_, b), W, record);
    r += n1;
    const MatrixXd n2 = blk.norm2.forward(r, params_.at(b + "norm2/gain"), params_.at(b + "norm2/bias"), record);
    if (ffn_is_single(config_)) {
      h = blk.ffn.forward(n2, params_.at(b + "ffn/kernel"), params_.at(b + "ffn/bias"), Activation::gelu, record);
    } else {
      const MatrixXd e = blk.ffn.forward(n2, params_.at(b + "ffn/expand/kernel"),
                                         params_.at(b + "ffn/expand/bias"), Activation::gelu, record);
      h = blk.ffn_project.forward(e, params_.at(b + "ffn/project/kernel"), params_.at(b + "ffn/project/bias"),
                                  Activation::identity, record);
    }
    h += r;
  }
  return h;
}

MatrixXd Model::encode(std::span<const MatrixXd> batch) const {
  // Encoding does not record; a scratch copy keeps this const.
  Model scratch(config_, params_);
  return scratch.run_encoder(stack(batch), false);
}

MatrixXd Model::forward(std::span<const MatrixXd> batch, bool record) {
  const Eigen::Index b = static_cast<Eigen::Index>(batch.size());
  const Eigen::Index W = config_.window_rows;
  const Eigen::Index d = config_.d_model;
  const MatrixXd h = run_encoder(stack(batch), record);
  MatrixXd features;
  if (config_.pooling) {
    features.resize(b, d);
    for (Eigen::Index i = 0; i < b; ++i) features.row(i) = h.middleRows(i * W, W).colwise().mean();
  } else {
    features = Eigen::Map<const MatrixXd>(h.data(), b, W * d);
  }
  const MatrixXd logits =
      head_.forward(features, params_.at("head/kernel"), params_.at("head/bias"), Activation::identity, record);
  recorded_batch_ = record ? b : 0;
  return numerics::softmax_rows(logits);
}

ParameterSet Model::backward(const MatrixXd& probs, std::span<const int> labels) {
  if (recorded_batch_ == 0 || !head_.has_cache())
    throw numerics::MissingCacheError("model backward called without a recorded forward");
  if (probs.rows() != recorded_batch_ || static_cast<Eigen::Index>(labels.size()) != recorded_batch_)
    throw DimensionError("model backward: batch of " + std::to_string(recorded_batch_) + " but got " +
                         std::to_string(labels.size()) + " labels");
  for (int label : labels)
    if (label < 0 || label >= config_.n_classes)
      throw DimensionError("model backward: label " + std::to_string(label) + " out of range");

  const Eigen::Index b = recorded_batch_;
  const Eigen::Index W = config_.window_rows;
  const Eigen::Index d = config_.d_model;
  ParameterSet grads = params_.zeros_like();

  auto head = head_.backward(numerics::softmax_cross_entropy_backward(probs, labels));
  grads.at("head/kernel") = std::move(head.params[0]);
  grads.at("head/bias") = std::move(head.params[1]);

  MatrixXd grad_h(b * W, d);
  if (config_.pooling) {
    for (Eigen::Index i = 0; i < b; ++i)
      grad_h.middleRows(i * W, W).rowwise() = head.input.row(i) / static_cast<double>(W);
  } else {
    grad_h = Eigen::Map<const MatrixXd>(head.input.data(), b * W, d);
  }

  for (int l = config_.layers - 1; l >= 0; --l) {
    Block& blk = blocks_[static_cast<std::size_t>(l)];
    const std::string bp = block_prefix(l);
    // h = ffn(norm2(r)) + r
    MatrixXd grad_n2;
    if (ffn_is_single(config_)) {
      auto g = blk.ffn.backward(grad_h);
      grads.at(bp + "ffn/kernel") = std::move(g.params[0]);
      grads.at(bp + "ffn/bias") = std::move(g.params[1]);
      grad_n2 = std::move(g.input);
    } else {
      auto gp = blk.ffn_project.backward(grad_h);
      grads.at(bp + "ffn/project/kernel") = std::move(gp.params[0]);
      grads.at(bp + "ffn/project/bias") = std::move(gp.params[1]);
      auto ge = blk.ffn.backward(gp.input);
      grads.at(bp + "ffn/expand/kernel") = std::move(ge.params[0]);
      grads.at(bp + "ffn/expand/bias") = std::move(ge.params[1]);
      grad_n2 = std::move(ge.input);
    }
    auto gn2 = blk.norm2.backward(grad_n2);
    grads.at(bp + "norm2/gain") = std::move(gn2.params[0]);
    grads.at(bp + "norm2/bias") = std::move(gn2.params[1]);
    const MatrixXd grad_r = grad_h + gn2.input;
    // r = mha(n1) + n1
    auto ga = blk.attention.backward(grad_r);
    const char* names[] = {"query/kernel", "query/bias", "key/kernel",    "key/bias",
                           "value/kernel", "value/bias", "output/kernel", "output/bias"};
    for (std::size_t i = 0; i < 8; ++i) grads.at(bp + "attention/" + names[i]) = std::move(ga.params[i]);
    const MatrixXd grad_n1 = grad_r + ga.input;
    auto gn1 = blk.norm1.backward(grad_n1);
    grads.at(bp + "norm1/gain") = std::move(gn1.params[0]);
    grads.at(bp + "norm1/bias") = std::move(gn1.params[1]);
    grad_h = std::move(gn1.input);
  }

  auto gi = input_.backward(grad_h);
  grads.at("input/kernel") = std::move(gi.params[0]);
  grads.at("input/bias") = std::move(gi.params[1]);
  return grads;
}

LossAndGradients Model::loss_and_gradients(std::span<const MatrixXd> batch, std::span<const int> labels) {
  LossAndGradients out;
  out.probs = forward(batch, true);
  out.loss = numerics::cross_entropy(out.probs, labels);
  out.grads = backward(out.probs, labels);
  return out;
}

Model build(const ModelConfig& config) { return Model(config, init_params(config)); }

int argmax(const Eigen::Ref<const RowVectorXd>& row) {
  int best = 0;
  for (Eigen::Index i = 1; i < row.size(); ++i)
    if (row(i) > row(best)) best = static_cast<int>(i);
  return best;
}

int predict(Model& model, const MatrixXd& window) {
  const MatrixXd probs = model.forward(std::span<const MatrixXd>(&window, 1));
  return argmax(probs.row(0));
}

std::vector<int> predict_batch(Model& model, std::span<const MatrixXd> windows) {
  std::vector<int> out;
  out.reserve(windows.size());
  constexpr std::size_t chunk = 64;
  for (std::size_t start = 0; start < windows.size(); start += chunk) {
    const auto part = windows.subspan(start, std::min(chunk, windows.size() - start));
    const MatrixXd probs = model.forward(part);
    for (Eigen::Index i = 0; i < probs.rows(); ++i) out.push_back(argmax(probs.row(i)));
  }
  return out;
}

std::vector<std::uint8_t> serialize_params(const ParameterSet& params) {
  return wire::encode({wire::MessageType::global_params, 0, 0, wire::encode_params(params)});
}

ParameterSet deserialize_params(std::span<const std::uint8_t> bytes, const ModelConfig& config) {
  const wire::Message m = wire::decode(bytes);
  if (m.type != wire::MessageType::global_params)
    throw FormatError(std::string("parameter buffer holds a ") + wire::to_string(m.type) + " frame");
  ParameterSet p = wire::decode_params(m.payload);
  ModelConfig c = config;
  c.seed = 0;
  require_same_layout(init_params(c), p, "checkpoint");
  return p;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params) {
  const auto bytes = serialize_params(params);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

ParameterSet load_checkpoint(const std::filesystem::path& path, const ModelConfig& config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_params(bytes, config);
}

}  // namespace transfed::model
