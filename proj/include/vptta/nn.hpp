// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "vptta/autodiff.hpp"
#include "vptta/tensor.hpp"

namespace vptta {

/// How a batch-norm layer normalizes.
enum class BnMode {
  TrainSource,  // batch statistics; caller folds them into running stats
  Adapt,        // fuse batch and source statistics, normalize with the fused pair
  FrozenEval,   // normalize with the stored source statistics
};

/// Which batch-norm layers contribute to the alignment loss.
enum class LossScope { All, EncoderOnly };

/// Stored source statistics of one batch-norm layer.
struct BnSource {
  Tensor running_mean;  // mu_s
  Tensor running_var;   // sigma_s = sqrt(running_var + eps)
  double eps = 1e-5;

  Tensor sigma() const;
};

/// Statistics of one batch-norm layer for one forward pass. mu_t/sigma_t
/// and the fused mu_w/sigma_w stay in the graph so that losses built on
/// them differentiate back to the input.
struct BnLayerState {
  std::size_t ordinal = 0;
  bool in_encoder = false;
  bool in_loss = true;
  double lambda = 0.0;
  Tensor mu_s, sigma_s;
  ad::Var mu_t, sigma_t;
  ad::Var mu_w, sigma_w;  // equal to mu_t/sigma_t in TrainSource mode, mu_s/sigma_s in FrozenEval
  Tensor batch_var;       // biased variance, for running-stat updates
  std::uint64_t input_fingerprint = 0;  // checksum of the network input that produced these statistics
};

/// Batch normalization over all but the last axis. `state` receives the
/// statistics of this call.
ad::Var bn_forward(const ad::Var& x, const BnSource& source, const ad::Var& gamma, const ad::Var& beta, BnMode mode,
                   double lambda, BnLayerState* state = nullptr);

struct Conv2dLayer {
  std::size_t weight = 0;  // index into the parameter store, (k, k, Cin, Cout)
  std::size_t bias = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
};
struct BatchNormLayer {
  std::size_t gamma = 0;
  std::size_t beta = 0;
  std::size_t source = 0;  // index into the BnSource list
};
struct ReluLayer {};
struct UpsampleLayer {};
struct SigmoidLayer {};

using Layer = std::variant<Conv2dLayer, BatchNormLayer, ReluLayer, UpsampleLayer, SigmoidLayer>;

struct ForwardOptions {
  BnMode mode = BnMode::FrozenEval;
  double lambda = 0.0;
  LossScope scope = LossScope::All;
};

struct ForwardResult {
  ad::Var logits;         // pre-sigmoid output, (N, H, W, 1)
  ad::Var probabilities;  // sigmoid(logits)
  std::vector<BnLayerState> bn;
};

/// Convolutional segmentation network with an explicit parameter store.
/// Forward passes never modify the model; only training code mutates
/// parameters or running statistics.
class Model {
 public:
  Model() = default;
  Model(std::vector<Layer> layers, std::vector<Tensor> params, std::vector<BnSource> bn,
        std::optional<std::size_t> encoder_end);

  const std::vector<Layer>& layers() const { return layers_; }
  const std::vector<Tensor>& params() const { return params_; }
  std::vector<Tensor>& mutable_params() { return params_; }
  const std::vector<BnSource>& bn_sources() const { return bn_; }
  std::vector<BnSource>& mutable_bn_sources() { return bn_; }
  /// Layers [0, encoder_end) form the encoder.
  std::optional<std::size_t> encoder_end() const { return encoder_end_; }
  std::size_t bn_count() const { return bn_.size(); }
  std::size_t encoder_bn_count() const;
  std::size_t in_channels() const;
  std::size_t param_count() const;

  /// Parameters wrapped as graph constants (adaptation) or trainable leaves.
  std::vector<ad::Var> bind_constants() const;
  std::vector<ad::Var> bind_trainable() const;

  ForwardResult forward(const ad::Var& input, const ForwardOptions& options, std::span<const ad::Var> bound) const;
  /// Convenience: constant-bound forward of an (H, W, C) or NHWC tensor.
  ForwardResult forward(const Tensor& input, const ForwardOptions& options) const;

  /// Folds the batch statistics of a TrainSource forward into the running
  /// statistics.
  void update_running_stats(const ForwardResult& result, double momentum);

  /// Hash over every parameter and stored source statistic.
  std::uint64_t checksum() const;

  void save(const std::filesystem::path& dir) const;
  static Model load(const std::filesystem::path& dir);

 private:
  std::vector<Layer> layers_;
  std::vector<Tensor> params_;
  std::vector<BnSource> bn_;
  std::optional<std::size_t> encoder_end_;
};

/// Per-BN in_loss flags for a scope. EncoderOnly needs an encoder boundary.
std::vector<bool> select_loss_layers(const Model& model, LossScope scope);

/// conv3x3(C->8)+BN+ReLU, conv3x3/2(8->16)+BN+ReLU, conv3x3(16->16)+BN+ReLU |
/// upsample x2, conv3x3(16->8)+BN+ReLU, conv1x1(8->1), sigmoid.
Model make_toy_model(std::size_t in_channels, std::uint64_t seed);

/// Central differences (f(p + h e_i) - f(p - h e_i)) / 2h per coordinate.
Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& params, double h);

/// Adds a leading batch axis to an (H, W, C) tensor.
Tensor as_batch(const Tensor& image);

}  // namespace vptta
