// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "vptta/autodiff.hpp"
#include "vptta/tensor.hpp"

namespace vptta {

struct PromptShape {
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t channels = 1;

  std::size_t count() const { return height * width * channels; }
  Shape shape() const { return {height, width, channels}; }
  friend bool operator==(const PromptShape&, const PromptShape&) = default;
};

/// Low-frequency window for an (H, W, C) image: max(1, floor(alpha * H))
/// by max(1, floor(alpha * W)) bins per channel. alpha must lie in (0, 1).
PromptShape prompt_shape(std::size_t height, std::size_t width, std::size_t channels, double alpha);

/// Multiplicative amplitude patch over the centered low-frequency window.
struct LowFrequencyPrompt {
  Tensor values;       // (h', w', C)
  double alpha = 0.01;
  Shape target_shape;  // (H, W, C)

  static LowFrequencyPrompt ones(const Shape& image_shape, double alpha);
  std::size_t param_count() const { return values.size(); }
};

/// Additive spatial prompt B @ A, per channel.
struct LowRankPrompt {
  Tensor b;  // (H, r, C)
  Tensor a;  // (r, W, C)

  /// B = 0, A ~ N(0, 1) * 1e-3. Throws if rank >= min(H, W).
  static LowRankPrompt identity(const Shape& image_shape, std::size_t rank, std::mt19937_64& rng);
  std::size_t rank() const { return b.dim(1); }
  std::size_t param_count() const { return b.size() + a.size(); }
  static std::size_t param_count(std::size_t height, std::size_t width, std::size_t channels, std::size_t rank);
};

/// Centered low-frequency amplitude crop used as the memory-bank key.
struct FrequencyKey {
  Tensor values;  // (h', w', C), nonnegative
  std::uint64_t source_id = 0;
};

/// Plane of ones with the prompt written into the centered window.
Tensor one_pad(const LowFrequencyPrompt& prompt);

/// Scales the centered low-frequency amplitude of every channel by the
/// one-padded prompt, keeps the phase, and returns the real part of the
/// inverse transform. Differentiable w.r.t. `prompt_values`.
ad::Var apply_prompt(const ad::Var& image, const ad::Var& prompt_values);

struct PromptedImage {
  Tensor image;
  double imag_residue = 0.0;  // largest |imag| discarded by the real projection
};
PromptedImage apply_prompt(const Tensor& image, const LowFrequencyPrompt& prompt);

/// Largest imaginary component of the inverse transform after prompting.
double prompt_imag_residue(const Tensor& image, const Tensor& prompt_values);

FrequencyKey extract_key(const Tensor& image, double alpha, std::uint64_t source_id = 0);

/// image + B @ A; differentiable w.r.t. b and a.
ad::Var apply_lowrank(const ad::Var& image, const ad::Var& b, const ad::Var& a);
Tensor apply_lowrank(const Tensor& image, const LowRankPrompt& prompt);

// A prompt is stored as "<stem>.vpt" (+ "<stem>_a.vpt" for low-rank) and a
// JSON sidecar "<stem>.json" {alpha, target_shape, kind}.
void save_prompt(const std::filesystem::path& stem, const LowFrequencyPrompt& prompt);
void save_prompt(const std::filesystem::path& stem, const LowRankPrompt& prompt, double alpha);
LowFrequencyPrompt load_lowfreq_prompt(const std::filesystem::path& stem);
LowRankPrompt load_lowrank_prompt(const std::filesystem::path& stem);

}  // namespace vptta
