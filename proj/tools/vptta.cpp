// SPDX-License-Identifier: Apache-2.0
// vptta: synthetic benchmark, ablation, sweeps and single-image adaptation.
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "vptta/adapter.hpp"
#include "vptta/bench.hpp"
#include "vptta/image_io.hpp"
#include "vptta/prompt.hpp"

using namespace vptta;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> rounds;
  std::optional<std::size_t> seed_count;
  std::string out = "vptta_out";
  std::string model_dir;
  bool require_model = false;
  std::optional<std::string> inference_stats, prompt_kind, loss_scope;
  std::optional<int> iterations;
  std::optional<double> learning_rate;
  std::optional<std::size_t> rank;
  std::optional<int> epochs;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "JSON config (adapter fields + \"benchmark\" object)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "base seed");
  cmd->add_option("--seeds", c.seed_count, "number of consecutive seeds");
  cmd->add_option("--rounds", c.rounds, "replays of the target stream");
  cmd->add_option("--out", c.out, "output directory")->capture_default_str();
  cmd->add_option("--model-dir", c.model_dir, "pretrained models (default: <out>/models)");
  cmd->add_flag("--require-model", c.require_model, "fail instead of pretraining a missing model");
  cmd->add_option("--inference-stats", c.inference_stats, "warmup | source");
  cmd->add_option("--prompt-kind", c.prompt_kind, "lowfreq | lowrank");
  cmd->add_option("--loss-scope", c.loss_scope, "all | encoder_only");
  cmd->add_option("--iterations", c.iterations, "prompt updates per image");
  cmd->add_option("--learning-rate", c.learning_rate, "Adam learning rate");
  cmd->add_option("--rank", c.rank, "low-rank prompt rank");
  cmd->add_option("--epochs", c.epochs, "source pretraining epochs");
}

BenchmarkConfig resolve(const Common& c) {
  nlohmann::json j = c.config_path.empty() ? nlohmann::json(BenchmarkConfig{}) : [&] {
    std::ifstream in(c.config_path);
    try {
      return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config " + c.config_path + ": " + e.what());
    }
  }();
  auto& b = j["benchmark"];
  if (c.seed) b["seed"] = *c.seed;
  if (c.seed_count) b["seed_count"] = *c.seed_count;
  if (c.rounds) b["rounds"] = *c.rounds;
  if (c.epochs) b["pretrain"]["epochs"] = *c.epochs;
  if (c.inference_stats) j["inference_stats"] = *c.inference_stats;
  if (c.prompt_kind) j["prompt_kind"] = *c.prompt_kind;
  if (c.loss_scope) j["loss_scope"] = *c.loss_scope;
  if (c.iterations) j["iterations"] = *c.iterations;
  if (c.learning_rate) j["learning_rate"] = *c.learning_rate;
  if (c.rank) j["rank"] = *c.rank;
  if (b.is_null()) j.erase("benchmark");
  return j.get<BenchmarkConfig>();
}

fs::path model_root(const Common& c) { return c.model_dir.empty() ? fs::path(c.out) / "models" : fs::path(c.model_dir); }

// Fails early with an instructive message when --require-model is set.
void check_models(const Common& c, const BenchmarkConfig& cfg) {
  if (!c.require_model) return;
  for (auto s : cfg.seeds()) require_model(model_root(c), s);
}

void print_round_table(const nlohmann::json& summary) {
  const auto& seeds = summary["seeds"];
  const std::size_t rounds = seeds[0]["vptta"]["per_round"].size();
  if (rounds < 2) return;
  std::printf("\n%-12s", "round");
  for (std::size_t r = 1; r <= rounds; ++r) std::printf(" %8zu", r);
  std::printf(" %8s %8s\n", "average", "degra.");
  for (const char* method : {"prompt_only", "vptta"}) {
    std::vector<double> per(rounds, 0.0);
    double avg = 0.0, degr = 0.0;
    for (const auto& s : seeds) {
      for (std::size_t r = 0; r < rounds; ++r) per[r] += s[method]["per_round"][r]["dice_post"].get<double>();
      avg += s[method]["overall"]["dice_post"].get<double>();
      degr += s[method]["degradation"].get<double>();
    }
    const double n = static_cast<double>(seeds.size());
    std::printf("%-12s", method);
    for (double v : per) std::printf(" %8.4f", v / n);
    std::printf(" %8.4f %8.4f\n", avg / n, degr / n);
  }
}

std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigError("bad grid value '" + item + "'");
    }
  }
  return out;
}

std::string default_grid(const std::string& param) {
  if (param == "alpha") return "0.005,0.01,0.05,0.1";
  if (param == "S") return "0,10,20,40,80";
  if (param == "K") return "1,4,8,16,32";
  if (param == "tau") return "1,2,5,10,20,50";
  throw ConfigError("sweep parameter must be one of alpha, S, K, tau; got '" + param + "'");
}

Tensor read_image(const fs::path& path) {
  if (path.extension() == ".vpt") return read_vpt(path);
  return read_png(path);
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Training allocates and frees multi-megabyte activations every batch;
  // keep them on the heap instead of round-tripping through mmap.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
  CLI::App app{"Test-time visual prompt adaptation on a synthetic segmentation benchmark"};
  app.require_subcommand(1);

  Common common;

  auto* pretrain = app.add_subcommand("pretrain", "train source models for every configured seed");
  add_common(pretrain, common);

  auto* benchmark = app.add_subcommand("benchmark", "source-only vs prompt-only vs full adaptation");
  add_common(benchmark, common);
  std::string dump_dir;
  benchmark->add_option("--dump-dir", dump_dir, "write per-step adapted image and prompt PNGs");

  auto* ablate = app.add_subcommand("ablate", "none / prompt / +bank / +warm-up / both");
  add_common(ablate, common);

  auto* sweep = app.add_subcommand("sweep", "mean Dice over a grid of one hyperparameter");
  add_common(sweep, common);
  std::string param, grid;
  sweep->add_option("--param", param, "alpha | S | K | tau")->required();
  sweep->add_option("--grid", grid, "comma-separated values (default grid per parameter)");

  auto* one = app.add_subcommand("adapt-one", "adapt a single image (PNG or .vpt) and write the prediction");
  add_common(one, common);
  std::string input, output, mask_path, bank_dir, prompt_out;
  std::int64_t index = 1;
  one->add_option("--input", input, "image")->required()->check(CLI::ExistingFile);
  one->add_option("--output", output, "prediction PNG")->required();
  one->add_option("--mask", mask_path, "ground-truth mask PNG for Dice")->check(CLI::ExistingFile);
  one->add_option("--bank", bank_dir, "memory-bank snapshot directory, loaded if present and saved after");
  one->add_option("--index", index, "1-based stream index i")->capture_default_str();
  one->add_option("--prompt-out", prompt_out, "save the updated prompt under this stem");

  CLI11_PARSE(app, argc, argv);

  try {
    const BenchmarkConfig cfg = resolve(common);
    const auto models = model_root(common);
    const auto started = std::chrono::steady_clock::now();

    if (pretrain->parsed()) {
      for (auto seed : cfg.seeds()) {
        const auto data = generate_dataset(derive_seed(seed, 10), cfg.source_images, cfg.height, cfg.width, cfg.channels);
        PretrainReport report;
        std::cerr << "pretraining seed " << seed << '\n';
        const Model m = pretrain_source(data, cfg.pretrain, seed, &report, &std::cerr);
        const auto held = generate_dataset(derive_seed(seed, 11), 100, cfg.height, cfg.width, cfg.channels);
        m.save(models / ("seed_" + std::to_string(seed)));
        std::printf("seed %llu: train dice %.4f, held-out dice %.4f -> %s\n", static_cast<unsigned long long>(seed),
                    report.train_dice, frozen_dice(m, held), (models / ("seed_" + std::to_string(seed))).c_str());
      }
    } else if (benchmark->parsed()) {
      check_models(common, cfg);
      const auto summary = run_benchmark(cfg, common.out, models,
                                         dump_dir.empty() ? std::nullopt : std::optional<fs::path>(dump_dir), &std::cerr);
      std::printf("%-12s %10s", "method", "mean dice");
      for (auto s : cfg.seeds()) std::printf(" %9s%llu", "seed ", static_cast<unsigned long long>(s));
      std::printf("\n");
      for (const auto& m : summary["methods"]) {
        std::printf("%-12s %10.4f", m["method"].get<std::string>().c_str(), m["mean_dice"].get<double>());
        for (const auto& d : m["seed_dice"]) std::printf(" %10.4f", d.get<double>());
        std::printf("\n");
      }
      std::printf("gap vs source-only: %+.4f  loss efficacy (i > 10): %.3f  model frozen: %s\n",
                  summary["gap_vs_source"].get<double>(), summary["loss_efficacy"].get<double>(),
                  summary["model_frozen"].get<bool>() ? "yes" : "NO");
      print_round_table(summary);
      std::printf("records and summary.json in %s\n", common.out.c_str());
    } else if (ablate->parsed()) {
      check_models(common, cfg);
      const auto rows = run_ablation(cfg, common.out, models, &std::cerr);
      std::printf("%-20s %10s\n", "configuration", "mean dice");
      for (const auto& r : rows) std::printf("%-20s %10.4f\n", r.method.c_str(), r.mean);
    } else if (sweep->parsed()) {
      check_models(common, cfg);
      const auto rows = run_sweep(cfg, param, parse_grid(grid.empty() ? default_grid(param) : grid), common.out,
                                  models, &std::cerr);
      std::printf("%-8s %10s\n", param.c_str(), "mean dice");
      for (const auto& [v, d] : rows) std::printf("%-8g %10.4f\n", v, d);
    } else if (one->parsed()) {
      const Model model = require_model(models, cfg.seed);
      const Tensor image = read_image(input);
      std::optional<Tensor> mask;
      if (!mask_path.empty()) mask = read_png(mask_path);
      MemoryBank bank = !bank_dir.empty() && fs::exists(fs::path(bank_dir) / "manifest.json")
                            ? MemoryBank::load(bank_dir)
                            : MemoryBank(cfg.adapter.capacity);
      AdapterConfig a = cfg.adapter;
      a.seed = cfg.seed;
      const auto step = adapt_step(image, mask, model, bank, a, index);
      write_png(output, step.probabilities);
      if (!bank_dir.empty()) bank.save(bank_dir);
      if (!prompt_out.empty()) {
        if (a.prompt_kind == PromptKind::LowFrequency) {
          save_prompt(prompt_out, LowFrequencyPrompt{step.prompt[0], a.alpha, image.shape()});
        } else {
          save_prompt(prompt_out, LowRankPrompt{step.prompt[0], step.prompt[1]}, a.alpha);
        }
      }
      const auto& r = step.record;
      nlohmann::json j = {{"i", r.i},         {"lambda", r.lambda},         {"loss_pre", r.loss_pre},
                          {"loss_post", r.loss_post}, {"bank_size", r.bank_size}, {"prompt_dist", r.prompt_dist},
                          {"imag_residue", r.imag_residue}, {"aborted", r.aborted}};
      if (mask) {
        j["dice_pre"] = r.dice_pre;
        j["dice_post"] = r.dice_post;
      }
      std::cout << j.dump(2) << '\n';
    }
    std::cerr << "elapsed " << std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count()
              << " s\n";
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
