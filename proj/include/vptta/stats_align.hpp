// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "vptta/autodiff.hpp"
#include "vptta/nn.hpp"

namespace vptta {

/// 1 / (sqrt(i) / tau + 1), i the 1-based stream index.
double warmup_lambda(std::int64_t i, double tau);

/// lambda * target + (1 - lambda) * source, per channel, for mean and sigma.
std::pair<Tensor, Tensor> fuse_statistics(const Tensor& mu_s, const Tensor& sigma_s, const Tensor& mu_t,
                                          const Tensor& sigma_t, double lambda);

enum class AlignMode {
  Source,  // |mu_s - mu_t| + |sigma_s - sigma_t|
  Warmup,  // |mu_w - mu_t| + |sigma_w - sigma_t|
};

struct AlignmentReport {
  std::vector<double> layer_terms;  // channel-summed term of each contributing layer
  std::size_t layers = 0;           // J
  double total = 0.0;               // mean of layer_terms
  double lambda = 0.0;
  ad::Var loss;                     // differentiable total
};

/// Mean over the in_loss layers of the channel-summed absolute gaps.
/// `expected_input` guards against statistics left over from an earlier
/// forward: every layer must carry that input fingerprint.
AlignmentReport alignment_loss(std::span<const BnLayerState> layers, AlignMode mode,
                               std::optional<std::uint64_t> expected_input = std::nullopt);

}  // namespace vptta
