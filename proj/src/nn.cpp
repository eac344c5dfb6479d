// SPDX-License-Identifier: Apache-2.0
#include "vptta/nn.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <string>

#include "json.hpp"

namespace vptta {

using ad::Var;

Tensor BnSource::sigma() const {
  Tensor s(running_var.shape());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::sqrt(running_var[i] + eps);
  return s;
}

Var bn_forward(const Var& x, const BnSource& source, const Var& gamma, const Var& beta, BnMode mode, double lambda,
               BnLayerState* state) {
  const std::size_t c = x.shape().back();
  if (source.running_mean.size() != c || gamma.value().size() != c || beta.value().size() != c) {
    throw ConfigError("bn_forward: " + std::to_string(c) + " channels do not match layer state");
  }
  if (mode == BnMode::Adapt && !(lambda >= 0.0 && lambda <= 1.0)) {
    throw ConfigError("bn_forward: lambda must lie in [0, 1]");
  }

  const Tensor mu_s = source.running_mean;
  const Tensor sigma_s = source.sigma();
  const Var mu_t = ad::channel_mean(x);
  const Var var_t = ad::channel_var(x, mu_t);
  const Var sigma_t = ad::sqrt(ad::add_scalar(var_t, source.eps));

  Var mu_n, sigma_n;
  switch (mode) {
    case BnMode::TrainSource:
      mu_n = mu_t;
      sigma_n = sigma_t;
      break;
    case BnMode::FrozenEval:
      mu_n = Var::constant(mu_s);
      sigma_n = Var::constant(sigma_s);
      break;
    case BnMode::Adapt: {
      Tensor mu_rest = mu_s, sigma_rest = sigma_s;
      for (std::size_t i = 0; i < c; ++i) {
        mu_rest[i] *= 1.0 - lambda;
        sigma_rest[i] *= 1.0 - lambda;
      }
      mu_n = ad::add(ad::scale(mu_t, lambda), Var::constant(std::move(mu_rest)));
      sigma_n = ad::add(ad::scale(sigma_t, lambda), Var::constant(std::move(sigma_rest)));
      break;
    }
  }

  Var y = ad::normalize(x, mu_n, sigma_n, gamma, beta);

  if (state) {
    state->lambda = mode == BnMode::Adapt ? lambda : (mode == BnMode::TrainSource ? 1.0 : 0.0);
    state->mu_s = mu_s;
    state->sigma_s = sigma_s;
    state->mu_t = mu_t;
    state->sigma_t = sigma_t;
    state->mu_w = mu_n;
    state->sigma_w = sigma_n;
    state->batch_var = var_t.value();
  }
  return y;
}

Model::Model(std::vector<Layer> layers, std::vector<Tensor> params, std::vector<BnSource> bn,
             std::optional<std::size_t> encoder_end)
    : layers_(std::move(layers)), params_(std::move(params)), bn_(std::move(bn)), encoder_end_(encoder_end) {
  std::size_t seen = 0;
  for (const auto& layer : layers_) {
    if (const auto* b = std::get_if<BatchNormLayer>(&layer)) {
      if (b->source != seen++) throw ConfigError("batch-norm layers must own consecutive source statistics");
    }
  }
  if (seen != bn_.size()) throw ConfigError("every batch-norm layer must own exactly one statistics state");
  if (encoder_end_ && *encoder_end_ > layers_.size()) throw ConfigError("encoder boundary past the last layer");
}

std::size_t Model::encoder_bn_count() const {
  if (!encoder_end_) return 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < *encoder_end_; ++i) n += std::holds_alternative<BatchNormLayer>(layers_[i]);
  return n;
}

std::size_t Model::in_channels() const {
  for (const auto& layer : layers_) {
    if (const auto* conv = std::get_if<Conv2dLayer>(&layer)) return params_[conv->weight].dim(2);
  }
  throw ConfigError("model has no convolution");
}

std::size_t Model::param_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

std::vector<Var> Model::bind_constants() const {
  std::vector<Var> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(Var::constant(p));
  return out;
}

std::vector<Var> Model::bind_trainable() const {
  std::vector<Var> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(Var::parameter(p));
  return out;
}

std::vector<bool> select_loss_layers(const Model& model, LossScope scope) {
  std::vector<bool> mask(model.bn_count(), true);
  if (scope == LossScope::EncoderOnly) {
    if (!model.encoder_end()) throw ConfigError("encoder-only loss scope needs an encoder/decoder boundary");
    const auto enc = model.encoder_bn_count();
    for (std::size_t i = enc; i < mask.size(); ++i) mask[i] = false;
  }
  return mask;
}

ForwardResult Model::forward(const Var& input, const ForwardOptions& options, std::span<const Var> bound) const {
  if (bound.size() != params_.size()) throw ConfigError("forward: parameter binding has the wrong size");
  if (input.value().rank() != 4 || input.shape().back() != in_channels()) {
    throw ConfigError("forward: expected NHWC input with " + std::to_string(in_channels()) + " channels, got " +
                      shape_str(input.shape()));
  }
  const auto in_loss = select_loss_layers(*this, options.scope);
  const std::uint64_t fingerprint = vptta::checksum(input.value().data());
  ForwardResult result;
  Var x = input;
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const auto& layer = layers_[li];
    if (const auto* conv = std::get_if<Conv2dLayer>(&layer)) {
      x = ad::conv2d(x, bound[conv->weight], &bound[conv->bias], conv->stride, conv->pad);
    } else if (const auto* bn = std::get_if<BatchNormLayer>(&layer)) {
      BnLayerState st;
      st.ordinal = bn->source;
      st.in_encoder = encoder_end_ && li < *encoder_end_;
      st.in_loss = in_loss[bn->source];
      st.input_fingerprint = fingerprint;
      x = bn_forward(x, bn_[bn->source], bound[bn->gamma], bound[bn->beta], options.mode, options.lambda, &st);
      result.bn.push_back(std::move(st));
    } else if (std::holds_alternative<ReluLayer>(layer)) {
      x = ad::relu(x);
    } else if (std::holds_alternative<UpsampleLayer>(layer)) {
      x = ad::upsample2x(x);
    } else {
      result.logits = x;
      x = ad::sigmoid(x);
    }
  }
  if (!result.logits.valid()) result.logits = x;
  result.probabilities = x;
  return result;
}

ForwardResult Model::forward(const Tensor& input, const ForwardOptions& options) const {
  const auto bound = bind_constants();
  return forward(Var::constant(input.rank() == 3 ? as_batch(input) : input), options, bound);
}

void Model::update_running_stats(const ForwardResult& result, double momentum) {
  if (result.bn.size() != bn_.size()) throw ContractViolation("running-stat update from a foreign forward");
  for (std::size_t i = 0; i < bn_.size(); ++i) {
    auto& src = bn_[i];
    const auto& mu = result.bn[i].mu_t.value();
    const auto& var = result.bn[i].batch_var;
    for (std::size_t c = 0; c < src.running_mean.size(); ++c) {
      src.running_mean[c] = (1.0 - momentum) * src.running_mean[c] + momentum * mu[c];
      src.running_var[c] = (1.0 - momentum) * src.running_var[c] + momentum * var[c];
    }
  }
}

std::uint64_t Model::checksum() const {
  std::uint64_t h = vptta::checksum({});
  for (const auto& p : params_) h = vptta::checksum(p.data(), h);
  for (const auto& b : bn_) {
    h = vptta::checksum(b.running_mean.data(), h);
    h = vptta::checksum(b.running_var.data(), h);
    h = vptta::checksum(std::span<const double>(&b.eps, 1), h);
  }
  return h;
}

void Model::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& layer : layers_) {
    nlohmann::json j;
    if (const auto* c = std::get_if<Conv2dLayer>(&layer)) {
      j = {{"type", "conv2d"}, {"weight", c->weight}, {"bias", c->bias}, {"stride", c->stride}, {"pad", c->pad}};
    } else if (const auto* b = std::get_if<BatchNormLayer>(&layer)) {
      j = {{"type", "batchnorm"}, {"gamma", b->gamma}, {"beta", b->beta}, {"source", b->source}};
    } else if (std::holds_alternative<ReluLayer>(layer)) {
      j = {{"type", "relu"}};
    } else if (std::holds_alternative<UpsampleLayer>(layer)) {
      j = {{"type", "upsample2x"}};
    } else {
      j = {{"type", "sigmoid"}};
    }
    layers.push_back(j);
  }
  nlohmann::json eps = nlohmann::json::array();
  for (const auto& b : bn_) eps.push_back(b.eps);
  nlohmann::json manifest = {{"format", "vptta-model-1"},
                             {"layers", layers},
                             {"param_count", params_.size()},
                             {"bn_count", bn_.size()},
                             {"bn_eps", eps}};
  if (encoder_end_) manifest["encoder_end"] = *encoder_end_;
  std::ofstream(dir / "model.json") << manifest.dump(2) << '\n';
  for (std::size_t i = 0; i < params_.size(); ++i) write_vpt(dir / ("param_" + std::to_string(i) + ".vpt"), params_[i]);
  for (std::size_t i = 0; i < bn_.size(); ++i) {
    write_vpt(dir / ("bn_" + std::to_string(i) + "_mean.vpt"), bn_[i].running_mean);
    write_vpt(dir / ("bn_" + std::to_string(i) + "_var.vpt"), bn_[i].running_var);
  }
}

Model Model::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "model.json");
  if (!in) throw ConfigError("no model found at " + dir.string() + " (run `vptta pretrain` first)");
  const auto manifest = nlohmann::json::parse(in);
  if (manifest.value("format", "") != "vptta-model-1") throw ConfigError("unrecognized model format in " + dir.string());
  std::vector<Layer> layers;
  for (const auto& j : manifest.at("layers")) {
    const auto type = j.at("type").get<std::string>();
    if (type == "conv2d") {
      layers.emplace_back(Conv2dLayer{j.at("weight"), j.at("bias"), j.at("stride"), j.at("pad")});
    } else if (type == "batchnorm") {
      layers.emplace_back(BatchNormLayer{j.at("gamma"), j.at("beta"), j.at("source")});
    } else if (type == "relu") {
      layers.emplace_back(ReluLayer{});
    } else if (type == "upsample2x") {
      layers.emplace_back(UpsampleLayer{});
    } else if (type == "sigmoid") {
      layers.emplace_back(SigmoidLayer{});
    } else {
      throw ConfigError("unknown layer type " + type);
    }
  }
  std::vector<Tensor> params;
  for (std::size_t i = 0; i < manifest.at("param_count").get<std::size_t>(); ++i) {
    params.push_back(read_vpt(dir / ("param_" + std::to_string(i) + ".vpt")));
  }
  std::vector<BnSource> bn;
  for (std::size_t i = 0; i < manifest.at("bn_count").get<std::size_t>(); ++i) {
    bn.push_back({read_vpt(dir / ("bn_" + std::to_string(i) + "_mean.vpt")),
                  read_vpt(dir / ("bn_" + std::to_string(i) + "_var.vpt")), manifest.at("bn_eps").at(i).get<double>()});
  }
  std::optional<std::size_t> enc;
  if (manifest.contains("encoder_end")) enc = manifest.at("encoder_end").get<std::size_t>();
  return Model(std::move(layers), std::move(params), std::move(bn), enc);
}

Model make_toy_model(std::size_t in_channels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Layer> layers;
  std::vector<Tensor> params;
  std::vector<BnSource> bn;

  auto conv = [&](std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride) {
    Tensor w({k, k, cin, cout});
    std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / static_cast<double>(k * k * cin)));
    for (auto& v : w.data()) v = nd(rng);
    params.push_back(std::move(w));
    params.push_back(Tensor::zeros({cout}));
    layers.emplace_back(Conv2dLayer{params.size() - 2, params.size() - 1, stride, k / 2});
  };
  auto batchnorm = [&](std::size_t ch) {
    params.push_back(Tensor::ones({ch}));
    params.push_back(Tensor::zeros({ch}));
    bn.push_back({Tensor::zeros({ch}), Tensor::ones({ch}), 1e-5});
    layers.emplace_back(BatchNormLayer{params.size() - 2, params.size() - 1, bn.size() - 1});
  };

  conv(in_channels, 8, 3, 1);
  batchnorm(8);
  layers.emplace_back(ReluLayer{});
  conv(8, 16, 3, 2);
  batchnorm(16);
  layers.emplace_back(ReluLayer{});
  conv(16, 16, 3, 1);
  batchnorm(16);
  layers.emplace_back(ReluLayer{});
  const std::size_t encoder_end = layers.size();
  layers.emplace_back(UpsampleLayer{});
  conv(16, 8, 3, 1);
  batchnorm(8);
  layers.emplace_back(ReluLayer{});
  conv(8, 1, 1, 1);
  layers.emplace_back(SigmoidLayer{});
  return Model(std::move(layers), std::move(params), std::move(bn), encoder_end);
}

Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& params, double h) {
  Tensor grad(params.shape());
  Tensor probe = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    probe[i] = params[i] + h;
    const double up = f(probe);
    probe[i] = params[i] - h;
    const double down = f(probe);
    probe[i] = params[i];
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

Tensor as_batch(const Tensor& image) {
  if (image.rank() != 3) throw ConfigError("as_batch expects (H, W, C), got " + shape_str(image.shape()));
  Shape s{1};
  s.insert(s.end(), image.shape().begin(), image.shape().end());
  return image.reshaped(std::move(s));
}

}  // namespace vptta
