#pragma once

#include "transfed/numerics.hpp"
#include "transfed/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace transfed::model {

/// Training-time input perturbation: Gaussian jitter scaled by the per-feature
/// standard deviation of the training set, then one uniform scale factor per
/// window drawn from [1 - scale_range, 1 + scale_range].
struct AugmentConfig {
  bool enabled = true;
  double jitter = 0.01;
  double scale_range = 0.1;
};

struct ModelConfig {
  int window_rows = 140;
  int features = 9;
  int d_model = 20;
  int heads = 5;
  int ffn_dim = 0;  // 0 means d_model
  int layers = 2;
  int n_classes = 15;
  AugmentConfig augmentation;
  bool positional_encoding = false;
  bool pooling = false;  // mean-pool tokens instead of flattening before the head
  double norm_eps = 1e-6;
  std::uint64_t seed = 1;

  int effective_ffn_dim() const { return ffn_dim == 0 ? d_model : ffn_dim; }

  /// Throws ConfigError on any violated invariant.
  void validate() const;
};

/// Closed-form scalar parameter count:
///   input     F*d + d
///   per block 2*(2d) + 4*(d*d + d) + ffn
///             ffn = d*d + d                      when ffn_dim == d
///             ffn = (d*f + f) + (f*d + d)        otherwise
///   head      (pooling ? d : W*d) * C + C
std::size_t expected_param_count(const ModelConfig& config);

/// Parameters initialized from config.seed: Glorot-uniform kernels, zero
/// biases, unit gains.
ParameterSet init_params(const ModelConfig& config);

struct LossAndGradients {
  double loss = 0.0;
  MatrixXd probs;
  ParameterSet grads;
};

/// The one-patch transformer: every window is a single patch whose rows are
/// the attention tokens.
///
///   x -> dense(F->d) [+ positions] -> L x [ n1 = norm(h); r = mha(n1) + n1;
///        h = ffn(norm(r)) + r ] -> flatten (or pool) -> dense softmax head
class Model {
 public:
  Model(ModelConfig config, ParameterSet params);

  const ModelConfig& config() const { return config_; }
  const ParameterSet& params() const { return params_; }
  ParameterSet& params() { return params_; }
  void set_params(ParameterSet params);

  /// Class probabilities, one row per window. With `record` set, layer inputs
  /// are cached for a following backward(). Augmentation is not applied here;
  /// training loops perturb the batch before calling forward.
  MatrixXd forward(std::span<const MatrixXd> batch, bool record = false);

  /// Gradient of the mean cross-entropy of the last recorded forward.
  ParameterSet backward(const MatrixXd& probs, std::span<const int> labels);

  LossAndGradients loss_and_gradients(std::span<const MatrixXd> batch, std::span<const int> labels);

  /// Pre-flatten representation: stacked (b*W) x d_model rows.
  MatrixXd encode(std::span<const MatrixXd> batch) const;

  std::size_t param_count() const { return params_.total_count(); }

 private:
  struct Block {
    Block(int heads, double eps) : norm1(eps), attention(heads), norm2(eps) {}
    numerics::LayerNormLayer<double> norm1;
    numerics::MultiHeadAttentionLayer<double> attention;
    numerics::LayerNormLayer<double> norm2;
    numerics::DenseLayer<double> ffn;
    numerics::DenseLayer<double> ffn_project;
  };
  MatrixXd stack(std::span<const MatrixXd> batch) const;
  MatrixXd run_encoder(const MatrixXd& stacked, bool record);

  ModelConfig config_;
  ParameterSet params_;
  MatrixXd positions_;
  numerics::DenseLayer<double> input_;
  std::vector<Block> blocks_;
  numerics::DenseLayer<double> head_;
  Eigen::Index recorded_batch_ = 0;
};

Model build(const ModelConfig& config);

inline std::size_t param_count(const Model& m) { return m.param_count(); }

/// Index of the largest entry; ties go to the smallest index.
int argmax(const Eigen::Ref<const RowVectorXd>& row);

int predict(Model& model, const MatrixXd& window);
std::vector<int> predict_batch(Model& model, std::span<const MatrixXd> windows);

/// Parameter checkpoint: one GLOBAL_PARAMS wire frame.
std::vector<std::uint8_t> serialize_params(const ParameterSet& params);
/// Throws FormatError (framing, version) or DimensionError (layout vs config).
ParameterSet deserialize_params(std::span<const std::uint8_t> bytes, const ModelConfig& config);

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params);
ParameterSet load_checkpoint(const std::filesystem::path& path, const ModelConfig& config);

}  // namespace transfed::model
