// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vptta/memory_bank.hpp"
#include "vptta/nn.hpp"
#include "vptta/stats_align.hpp"

namespace vptta {

enum class PromptKind { LowFrequency, LowRank };
enum class InferenceStats { Warmup, Source };

struct AdapterConfig {
  double alpha = 0.01;
  std::size_t capacity = 40;  // S
  int support = 16;           // K
  double tau = 5.0;
  double learning_rate = 0.05;
  int iterations = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  LossScope loss_scope = LossScope::EncoderOnly;
  InferenceStats inference_stats = InferenceStats::Warmup;
  PromptKind prompt_kind = PromptKind::LowFrequency;
  std::size_t rank = 3;
  std::uint64_t seed = 0;
  // Ablation switches. Without warm-up the loss compares against the source
  // statistics and normalization uses them unchanged (lambda = 0).
  bool use_memory_bank = true;
  bool use_warmup = true;

  /// Throws ConfigError on out-of-range fields.
  void validate() const;
};

void to_json(nlohmann::json& j, const AdapterConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
void from_json(const nlohmann::json& j, AdapterConfig& c);

/// Adam over a list of tensors, state zeroed at construction.
class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  /// Updates `params` in place from `grads` and returns the applied deltas.
  std::vector<Tensor> step(std::vector<Tensor>& params, const std::vector<Tensor>& grads);
  int steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<Tensor> m_, v_;
};

/// Update produced by the first Adam step from zero state.
double adam_single_step(double grad, double lr, double eps = 1e-8);

struct StreamRecord {
  std::int64_t i = 0;
  std::string domain;
  double lambda = 0.0;
  double loss_pre = 0.0;
  double loss_post = 0.0;
  double dice_pre = 0.0;   // frozen-eval prediction on the unprompted image
  double dice_post = 0.0;  // adapted prediction
  std::size_t bank_size = 0;
  double prompt_dist = 0.0;  // L2 distance of the effective prompt from the identity
  double imag_residue = 0.0;
  bool has_mask = false;
  bool aborted = false;
  // Step diagnostics: largest |p - p0| and, over coordinates with |g| > 1e-4,
  // the largest deviation of |p - p0| from the learning rate.
  double max_displacement = 0.0;
  double max_step_error = 0.0;
};

struct StepResult {
  Tensor probabilities;  // (H, W, 1)
  PromptParams prompt;   // updated prompt (initial one if aborted)
  PromptParams initial;  // prompt before the update
  Tensor adapted_image;  // input after applying the updated prompt
  StreamRecord record;
};

/// The per-image prompt for this config at the cold start: all ones for the
/// low-frequency prompt, B = 0 with a seeded small A for the low-rank one.
PromptParams identity_prompt(const AdapterConfig& config, const Shape& image_shape, std::int64_t i);

/// Applies prompt parameters to an (H, W, C) image.
ad::Var apply_prompt_params(const ad::Var& image, const std::vector<ad::Var>& params, PromptKind kind);

/// One stream step on an (H, W, C) image with 1-based index i: initialize
/// from the bank, optimize the prompt against the alignment loss, predict
/// with the updated prompt, then store the original image's key with the
/// updated prompt. The model is never modified.
StepResult adapt_step(const Tensor& image, const std::optional<Tensor>& mask, const Model& model, MemoryBank& bank,
                      const AdapterConfig& config, std::int64_t i);

/// 2|A & B| / (|A| + |B|) after thresholding `prediction` at 0.5; 1 when
/// both masks are empty.
double dice(const Tensor& prediction, const Tensor& mask);

struct StreamItem {
  Tensor image;
  std::optional<Tensor> mask;
  std::string domain;
};

struct MeanDice {
  double pre = 0.0;
  double post = 0.0;
  double loss_pre = 0.0;
  double loss_post = 0.0;
  std::size_t steps = 0;
};

struct StreamResult {
  std::vector<StreamRecord> records;
  std::vector<std::string> domain_order;
  std::map<std::string, MeanDice> per_domain;
  std::vector<MeanDice> per_round;
  MeanDice overall;
  std::size_t aborted = 0;
  std::uint64_t checksum_before = 0;
  std::uint64_t checksum_after = 0;
};

struct StreamOptions {
  int rounds = 1;
  std::optional<std::filesystem::path> dump_dir;
};

/// Sequential adapt_step over `rounds` replays of the stream with one bank.
StreamResult run_stream(const std::vector<StreamItem>& items, const Model& model, const AdapterConfig& config,
                        const StreamOptions& options = {});

inline constexpr const char* kRecordHeader =
    "i,domain,lambda,loss_pre,loss_post,dice_pre,dice_post,bank_size,prompt_dist,imag_residue";

void write_records_csv(std::ostream& out, const std::vector<StreamRecord>& records);
nlohmann::json stream_summary(const StreamResult& result);

/// Shortest round-trip text for a double.
std::string format_double(double v);

}  // namespace vptta
