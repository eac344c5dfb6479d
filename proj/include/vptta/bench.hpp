// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "vptta/adapter.hpp"
#include "vptta/nn.hpp"

namespace vptta {

/// splitmix64 of (base, tag): independent seeds for datasets, noise, runs.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag);

struct SyntheticSample {
  Tensor image;  // (H, W, C) in [0, 1]
  Tensor mask;   // (H, W, 1), binary
  std::string domain = "source";
  std::uint64_t seed = 0;
};

/// Ellipses and polygons on smooth textured backgrounds. Foreground fraction
/// of every mask lies in [0.02, 0.6]. Deterministic per seed.
std::vector<SyntheticSample> generate_dataset(std::uint64_t seed, std::size_t n, std::size_t height = 64,
                                              std::size_t width = 64, std::size_t channels = 3);

/// Appearance shift applied as gain, per-channel tint, gamma, Gaussian blur,
/// low-frequency amplitude gain, additive noise, then clamping to [0, 1].
struct DomainSpec {
  std::string name = "identity";
  double gain = 1.0;          // [0.25, 4]
  double gamma = 1.0;         // [0.25, 4]
  std::vector<double> tint;   // per channel, [0.25, 4]; empty means none
  double blur_sigma = 0.0;    // [0, 5] pixels
  double noise_sigma = 0.0;   // [0, 0.2]
  double lf_gain = 1.0;       // [0.25, 4], centered amplitude band
  double lf_alpha = 0.05;     // band size as a fraction of H and W

  void validate() const;
};

void to_json(nlohmann::json& j, const DomainSpec& d);
void from_json(const nlohmann::json& j, DomainSpec& d);

SyntheticSample shift_domain(const SyntheticSample& sample, const DomainSpec& spec);

/// The four target domains of the synthetic benchmark.
std::vector<DomainSpec> default_target_domains();

struct PretrainConfig {
  int epochs = 30;
  double learning_rate = 0.05;
  std::size_t batch = 8;
  double bn_momentum = 0.1;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PretrainReport {
  std::vector<double> epoch_loss;
  double train_dice = 0.0;  // frozen-eval mean Dice on the training set
};

/// Dice + BCE with plain SGD; running statistics follow the batch
/// statistics with `bn_momentum`. Throws TrainingDiverged on a non-finite loss.
Model pretrain_source(const std::vector<SyntheticSample>& data, const PretrainConfig& config, std::uint64_t seed,
                      PretrainReport* report = nullptr, std::ostream* log = nullptr);

/// Mean frozen-eval Dice.
double frozen_dice(const Model& model, const std::vector<SyntheticSample>& data);

struct BenchmarkConfig {
  AdapterConfig adapter;
  std::uint64_t seed = 7;
  std::size_t seed_count = 3;  // seeds seed, seed + 1, ...
  std::size_t source_images = 200;
  std::size_t target_images = 100;  // per domain
  std::size_t height = 64, width = 64, channels = 3;
  int rounds = 1;
  PretrainConfig pretrain;
  std::vector<DomainSpec> domains = default_target_domains();

  BenchmarkConfig();
  std::vector<std::uint64_t> seeds() const;
  void validate() const;
};

/// Top-level keys are AdapterConfig fields; a nested "benchmark" object
/// holds the remaining fields.
void to_json(nlohmann::json& j, const BenchmarkConfig& c);
void from_json(const nlohmann::json& j, BenchmarkConfig& c);
BenchmarkConfig load_benchmark_config(const std::filesystem::path& path);

/// Trained model and target stream for one seed.
struct SeedContext {
  std::uint64_t seed = 0;
  Model model;
  std::vector<StreamItem> stream;
};

/// Loads `<model_root>/seed_<s>` when present, otherwise pretrains (and
/// saves when a root is given).
Model obtain_model(const BenchmarkConfig& config, std::uint64_t seed, const std::optional<std::filesystem::path>& model_root,
                   std::ostream* log);
/// Like obtain_model but never trains: a missing model is a ConfigError.
Model require_model(const std::filesystem::path& model_root, std::uint64_t seed);

std::vector<StreamItem> build_target_stream(const BenchmarkConfig& config, std::uint64_t seed);
SeedContext prepare_seed(const BenchmarkConfig& config, std::uint64_t seed,
                         const std::optional<std::filesystem::path>& model_root, std::ostream* log);

/// Frozen-eval Dice of every stream image, in stream order, for `rounds`
/// replays.
double source_only_dice(const Model& model, const std::vector<StreamItem>& stream);

/// Fraction of records with index > warmup whose post-update loss is below
/// the initial one.
double loss_efficacy(const std::vector<StreamRecord>& records, std::int64_t warmup = 10);

struct MethodRow {
  std::string method;
  std::vector<double> seed_dice;  // mean Dice per seed
  double mean = 0.0;
};

/// The ablation configurations: none / prompt / +bank / +warm-up / both.
std::vector<std::pair<std::string, std::optional<AdapterConfig>>> ablation_rows(const AdapterConfig& base);

/// Runs source-only, prompt-only and full adaptation for every seed; writes
/// per-seed CSVs and summary.json under `out`.
nlohmann::json run_benchmark(const BenchmarkConfig& config, const std::filesystem::path& out,
                             const std::optional<std::filesystem::path>& model_root,
                             const std::optional<std::filesystem::path>& dump_dir, std::ostream* log);

/// Five ablation rows averaged over seeds; writes ablation.csv.
std::vector<MethodRow> run_ablation(const BenchmarkConfig& config, const std::filesystem::path& out,
                                    const std::optional<std::filesystem::path>& model_root, std::ostream* log);

/// One full-adaptation run per grid value of alpha, S, K or tau; writes
/// sweep_<param>.csv with (value, mean_dice) rows.
std::vector<std::pair<double, double>> run_sweep(const BenchmarkConfig& config, const std::string& param,
                                                 const std::vector<double>& grid, const std::filesystem::path& out,
                                                 const std::optional<std::filesystem::path>& model_root,
                                                 std::ostream* log);

/// Sets one sweepable field; throws ConfigError for unknown names.
void set_sweep_param(AdapterConfig& config, const std::string& param, double value);

}  // namespace vptta
