// SPDX-License-Identifier: Apache-2.0
#include "vptta/prompt.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"
#include "vptta/fft.hpp"

namespace vptta {

PromptShape prompt_shape(std::size_t height, std::size_t width, std::size_t channels, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1), got " + std::to_string(alpha));
  if (height < 1 || width < 1 || channels < 1) throw ConfigError("prompt_shape needs H, W, C >= 1");
  // The 1e-9 slack keeps products like 0.29 * 100 from flooring to 28.
  auto side = [alpha](std::size_t n) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(alpha * static_cast<double>(n) + 1e-9)));
  };
  return {side(height), side(width), channels};
}

namespace {

void require_image(const Shape& s, const char* what) {
  if (s.size() != 3) throw ConfigError(std::string(what) + ": expected an (H, W, C) image, got " + shape_str(s));
}

}  // namespace

LowFrequencyPrompt LowFrequencyPrompt::ones(const Shape& image_shape, double alpha) {
  require_image(image_shape, "LowFrequencyPrompt::ones");
  const auto ps = prompt_shape(image_shape[0], image_shape[1], image_shape[2], alpha);
  return {Tensor::ones(ps.shape()), alpha, image_shape};
}

std::size_t LowRankPrompt::param_count(std::size_t height, std::size_t width, std::size_t channels, std::size_t rank) {
  return rank * channels * (height + width);
}

LowRankPrompt LowRankPrompt::identity(const Shape& image_shape, std::size_t rank, std::mt19937_64& rng) {
  require_image(image_shape, "LowRankPrompt::identity");
  const std::size_t h = image_shape[0], w = image_shape[1], c = image_shape[2];
  if (rank < 1 || rank >= std::min(h, w)) {
    throw ConfigError("low-rank prompt rank must lie in [1, min(H, W)), got " + std::to_string(rank));
  }
  LowRankPrompt p{Tensor::zeros({h, rank, c}), Tensor({rank, w, c})};
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& v : p.a.data()) v = 1e-3 * nd(rng);
  return p;
}

Tensor one_pad(const LowFrequencyPrompt& prompt) {
  require_image(prompt.target_shape, "one_pad");
  return ad::one_pad(ad::Var::constant(prompt.values), prompt.target_shape[0], prompt.target_shape[1]).value();
}

ad::Var apply_prompt(const ad::Var& image, const ad::Var& prompt_values) {
  require_image(image.shape(), "apply_prompt");
  const std::size_t h = image.shape()[0], w = image.shape()[1];
  if (prompt_values.value().rank() != 3 || prompt_values.shape()[2] != image.shape()[2]) {
    throw ConfigError("apply_prompt: prompt " + shape_str(prompt_values.shape()) + " does not fit image " +
                      shape_str(image.shape()));
  }
  const ad::Var spectrum = ad::fftshift(ad::fft2(image), false);
  const auto [amplitude, phase] = ad::amplitude_phase(spectrum);
  const ad::Var scaled = ad::mul(ad::one_pad(prompt_values, h, w), amplitude);
  return ad::ifft2_real(ad::fftshift(ad::recompose(scaled, phase), true));
}

double prompt_imag_residue(const Tensor& image, const Tensor& prompt_values) {
  const auto s = fft2(image, true);
  const auto ap = amplitude_phase(s);
  const Tensor mask = ad::one_pad(ad::Var::constant(prompt_values), image.dim(0), image.dim(1)).value();
  Tensor amp = ap.amplitude;
  for (std::size_t i = 0; i < amp.size(); ++i) amp[i] *= mask[i];
  double residue = 0.0;
  ifft2_real(recompose(amp, ap.phase, true), &residue);
  return residue;
}

PromptedImage apply_prompt(const Tensor& image, const LowFrequencyPrompt& prompt) {
  if (image.shape() != prompt.target_shape) {
    throw ConfigError("apply_prompt: image " + shape_str(image.shape()) + " vs prompt target " +
                      shape_str(prompt.target_shape));
  }
  PromptedImage out;
  out.image = apply_prompt(ad::Var::constant(image), ad::Var::constant(prompt.values)).value();
  out.imag_residue = prompt_imag_residue(image, prompt.values);
  return out;
}

FrequencyKey extract_key(const Tensor& image, double alpha, std::uint64_t source_id) {
  require_image(image.shape(), "extract_key");
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  const auto ps = prompt_shape(h, w, c, alpha);
  const auto amp = amplitude_phase(fft2(image, true)).amplitude;
  const std::size_t y0 = centered_window_start(h, ps.height);
  const std::size_t x0 = centered_window_start(w, ps.width);
  FrequencyKey key{Tensor(ps.shape()), source_id};
  for (std::size_t y = 0; y < ps.height; ++y)
    for (std::size_t x = 0; x < ps.width; ++x)
      for (std::size_t k = 0; k < c; ++k) key.values.at(y, x, k) = amp.at(y0 + y, x0 + x, k);
  return key;
}

ad::Var apply_lowrank(const ad::Var& image, const ad::Var& b, const ad::Var& a) {
  require_image(image.shape(), "apply_lowrank");
  const std::size_t rank = b.value().rank() == 3 ? b.shape()[1] : 0;
  if (rank < 1 || rank >= std::min(image.shape()[0], image.shape()[1])) {
    throw ConfigError("apply_lowrank: rank must lie in [1, min(H, W))");
  }
  const ad::Var delta = ad::channel_matmul(b, a);
  if (delta.shape() != image.shape()) {
    throw ConfigError("apply_lowrank: B @ A is " + shape_str(delta.shape()) + ", image is " + shape_str(image.shape()));
  }
  return ad::add(image, delta);
}

Tensor apply_lowrank(const Tensor& image, const LowRankPrompt& prompt) {
  return apply_lowrank(ad::Var::constant(image), ad::Var::constant(prompt.b), ad::Var::constant(prompt.a)).value();
}

namespace {

void write_sidecar(const std::filesystem::path& stem, double alpha, const Shape& target, const char* kind) {
  nlohmann::json j = {{"alpha", alpha}, {"target_shape", target}, {"kind", kind}};
  std::ofstream(stem.string() + ".json") << j.dump(2) << '\n';
}

nlohmann::json read_sidecar(const std::filesystem::path& stem, const char* kind) {
  std::ifstream in(stem.string() + ".json");
  if (!in) throw ConfigError("missing prompt sidecar " + stem.string() + ".json");
  auto j = nlohmann::json::parse(in);
  if (j.at("kind").get<std::string>() != kind) throw ConfigError("prompt at " + stem.string() + " is not " + kind);
  return j;
}

}  // namespace

void save_prompt(const std::filesystem::path& stem, const LowFrequencyPrompt& prompt) {
  write_vpt(stem.string() + ".vpt", prompt.values);
  write_sidecar(stem, prompt.alpha, prompt.target_shape, "lowfreq");
}

void save_prompt(const std::filesystem::path& stem, const LowRankPrompt& prompt, double alpha) {
  write_vpt(stem.string() + ".vpt", prompt.b);
  write_vpt(stem.string() + "_a.vpt", prompt.a);
  write_sidecar(stem, alpha, {prompt.b.dim(0), prompt.a.dim(1), prompt.b.dim(2)}, "lowrank");
}

LowFrequencyPrompt load_lowfreq_prompt(const std::filesystem::path& stem) {
  const auto j = read_sidecar(stem, "lowfreq");
  LowFrequencyPrompt p{read_vpt(stem.string() + ".vpt"), j.at("alpha").get<double>(), j.at("target_shape").get<Shape>()};
  const auto ps = prompt_shape(p.target_shape.at(0), p.target_shape.at(1), p.target_shape.at(2), p.alpha);
  if (p.values.shape() != ps.shape()) throw ConfigError("prompt payload does not match its sidecar");
  return p;
}

LowRankPrompt load_lowrank_prompt(const std::filesystem::path& stem) {
  read_sidecar(stem, "lowrank");
  return {read_vpt(stem.string() + ".vpt"), read_vpt(stem.string() + "_a.vpt")};
}

}  // namespace vptta
