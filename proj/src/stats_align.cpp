// SPDX-License-Identifier: Apache-2.0
#include "vptta/stats_align.hpp"

#include <cmath>
#include <string>

namespace vptta {

double warmup_lambda(std::int64_t i, double tau) {
  if (i < 1) throw ConfigError("warm-up step index must be >= 1, got " + std::to_string(i));
  if (!(tau > 0.0)) throw ConfigError("warm-up temperature tau must be positive");
  return 1.0 / (std::sqrt(static_cast<double>(i)) / tau + 1.0);
}

std::pair<Tensor, Tensor> fuse_statistics(const Tensor& mu_s, const Tensor& sigma_s, const Tensor& mu_t,
                                          const Tensor& sigma_t, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
  require_same_shape(mu_s, mu_t, "fuse_statistics");
  require_same_shape(sigma_s, sigma_t, "fuse_statistics");
  require_same_shape(mu_s, sigma_s, "fuse_statistics");
  Tensor mu_w(mu_s.shape()), sigma_w(mu_s.shape());
  for (std::size_t c = 0; c < mu_s.size(); ++c) {
    mu_w[c] = lambda * mu_t[c] + (1.0 - lambda) * mu_s[c];
    sigma_w[c] = lambda * sigma_t[c] + (1.0 - lambda) * sigma_s[c];
  }
  return {std::move(mu_w), std::move(sigma_w)};
}

AlignmentReport alignment_loss(std::span<const BnLayerState> layers, AlignMode mode,
                               std::optional<std::uint64_t> expected_input) {
  AlignmentReport report;
  ad::Var total;
  for (const auto& st : layers) {
    if (!st.in_loss) continue;
    if (!st.mu_t.valid() || !st.sigma_t.valid()) {
      throw ContractViolation("alignment_loss: layer " + std::to_string(st.ordinal) + " has no target statistics");
    }
    if (expected_input && st.input_fingerprint != *expected_input) {
      throw ContractViolation("alignment_loss: statistics of layer " + std::to_string(st.ordinal) +
                              " come from a stale forward");
    }
    ad::Var mu_ref, sigma_ref;
    if (mode == AlignMode::Warmup) {
      if (!st.mu_w.valid() || !st.sigma_w.valid()) {
        throw ContractViolation("alignment_loss: layer " + std::to_string(st.ordinal) + " has no warm-up statistics");
      }
      mu_ref = st.mu_w;
      sigma_ref = st.sigma_w;
    } else {
      mu_ref = ad::Var::constant(st.mu_s);
      sigma_ref = ad::Var::constant(st.sigma_s);
    }
    const ad::Var term = ad::add(ad::sum(ad::abs(ad::sub(mu_ref, st.mu_t))),
                                 ad::sum(ad::abs(ad::sub(sigma_ref, st.sigma_t))));
    report.layer_terms.push_back(term.value()[0]);
    report.lambda = st.lambda;
    total = total.valid() ? ad::add(total, term) : term;
  }
  report.layers = report.layer_terms.size();
  if (report.layers == 0) throw ConfigError("alignment_loss: no layer contributes to the loss");
  report.loss = ad::scale(total, 1.0 / static_cast<double>(report.layers));
  report.total = report.loss.value()[0];
  return report;
}

}  // namespace vptta
