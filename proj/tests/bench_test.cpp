// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "test_util.hpp"
#include "vptta/bench.hpp"
#include "vptta/fft.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

using namespace vptta;
namespace fs = std::filesystem;

namespace {

BenchmarkConfig tiny_config() {
  BenchmarkConfig c;
  c.seed_count = 1;
  c.source_images = 24;
  c.target_images = 6;
  c.height = c.width = 32;
  c.pretrain.epochs = 2;
  c.adapter.alpha = 0.1;
  c.adapter.support = 4;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("derived seeds differ per tag") {
  std::set<std::uint64_t> seen;
  for (std::uint64_t base = 0; base < 20; ++base)
    for (std::uint64_t tag = 0; tag < 20; ++tag) seen.insert(derive_seed(base, tag));
  CHECK(seen.size() == 400);
  CHECK(derive_seed(7, 3) == derive_seed(7, 3));
}

TEST_CASE("synthetic datasets are deterministic and non-degenerate") {
  const auto a = generate_dataset(5, 200), b = generate_dataset(5, 200);
  REQUIRE(a.size() == 200);
  bool same = true, ranges = true, masks = true;
  for (std::size_t k = 0; k < a.size(); ++k) {
    same = same && a[k].image == b[k].image && a[k].mask == b[k].mask && a[k].seed == b[k].seed;
    ranges = ranges && a[k].image.shape() == Shape{64, 64, 3} && a[k].mask.shape() == Shape{64, 64, 1};
    for (double v : a[k].image.data()) ranges = ranges && v >= 0.0 && v <= 1.0;
    for (double v : a[k].mask.data()) masks = masks && (v == 0.0 || v == 1.0);
  }
  CHECK(same);
  CHECK(ranges);
  CHECK(masks);
  CHECK(generate_dataset(6, 1)[0].image != a[0].image);

  const auto many = generate_dataset(11, 1000, 32, 32, 3);
  double lo = 1.0, hi = 0.0;
  for (const auto& s : many) {
    const double f = s.mask.sum() / (32.0 * 32.0);
    lo = std::min(lo, f);
    hi = std::max(hi, f);
  }
  CHECK(lo >= 0.02);
  CHECK(hi <= 0.6);
  CHECK(hi - lo > 0.2);  // the fraction actually varies
  CHECK_THROWS_AS(generate_dataset(1, 0), ConfigError);
}

TEST_CASE("domain shifts") {
  const auto s = generate_dataset(3, 1)[0];
  DomainSpec identity;
  const auto same = shift_domain(s, identity);
  CHECK(max_abs_diff(same.image, s.image) <= 1e-9);
  CHECK(same.mask == s.mask);

  SyntheticSample flat = s;
  flat.image.fill(0.5);
  DomainSpec gamma;
  gamma.name = "g";
  gamma.gamma = 2.0;
  const auto g = shift_domain(flat, gamma);
  for (double v : g.image.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));

  DomainSpec lf;
  lf.name = "lf";
  lf.lf_gain = 0.8;
  const auto shifted = shift_domain(s, lf);
  const auto before = amplitude_phase(fft2(s.image, true));
  const auto after = amplitude_phase(fft2(shifted.image, true));
  double worst = 0.0;
  for (std::size_t i = 0; i < before.phase.size(); ++i) {
    if (before.amplitude[i] < 1e-6) continue;
    double d = std::abs(after.phase[i] - before.phase[i]);
    d = std::min(d, 2 * std::numbers::pi - d);
    worst = std::max(worst, d);
  }
  CHECK(worst <= 1e-6);
  CHECK(shifted.image != s.image);

  DomainSpec noisy;
  noisy.name = "noisy";
  noisy.noise_sigma = 0.05;
  noisy.blur_sigma = 1.0;
  noisy.tint = {1.1, 1.0, 0.9};
  const auto n1 = shift_domain(s, noisy), n2 = shift_domain(s, noisy);
  CHECK(n1.image == n2.image);
  CHECK(n1.domain == "noisy");
  for (double v : n1.image.data()) CHECK((v >= 0.0 && v <= 1.0));

  DomainSpec bad = noisy;
  bad.tint = {1.0, 1.0};
  CHECK_THROWS_AS(shift_domain(s, bad), ConfigError);
  bad.tint.clear();
  bad.gain = 10.0;
  CHECK_THROWS_AS(shift_domain(s, bad), ConfigError);
  bad.gain = 1.0;
  bad.name = "a,b";
  CHECK_THROWS_AS(shift_domain(s, bad), ConfigError);

  for (const auto& d : default_target_domains()) CHECK_NOTHROW(d.validate());
  CHECK(default_target_domains().size() == 4);
}

TEST_CASE("configuration JSON") {
  BenchmarkConfig c;
  CHECK(c.adapter.alpha == 0.05);
  CHECK(c.seeds() == std::vector<std::uint64_t>{7, 8, 9});
  const nlohmann::json j = c;
  CHECK(nlohmann::json(j.get<BenchmarkConfig>()) == j);

  auto parse = [](const char* text) { return nlohmann::json::parse(text).get<BenchmarkConfig>(); };
  const auto p = parse(R"({"tau": 3, "benchmark": {"seed": 1, "rounds": 3, "pretrain": {"epochs": 4}}})");
  CHECK(p.adapter.tau == 3.0);
  CHECK(p.seed == 1);
  CHECK(p.rounds == 3);
  CHECK(p.pretrain.epochs == 4);
  CHECK(p.adapter.alpha == 0.05);
  CHECK_THROWS_AS(parse(R"({"benchmark": {"sed": 1}})"), ConfigError);
  CHECK_THROWS_AS(parse(R"({"benchmark": {"rounds": 0}})"), ConfigError);
  CHECK_THROWS_AS(parse(R"({"benchmark": {"domains": [{"name": "x", "gamma": 9}]}})"), ConfigError);
  CHECK_THROWS_AS(parse(R"({"benchmark": {"pretrain": {"epochs": 0}}})"), ConfigError);
  CHECK_THROWS_AS(load_benchmark_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("sweep parameters and ablation rows") {
  AdapterConfig a;
  set_sweep_param(a, "alpha", 0.1);
  set_sweep_param(a, "S", 0);
  set_sweep_param(a, "K", 4);
  set_sweep_param(a, "tau", 2);
  CHECK(a.alpha == 0.1);
  CHECK(a.capacity == 0);
  CHECK(a.support == 4);
  CHECK(a.tau == 2.0);
  CHECK_THROWS_AS(set_sweep_param(a, "beta", 1), ConfigError);
  CHECK_THROWS_AS(set_sweep_param(a, "K", 2.5), ConfigError);
  CHECK_THROWS_AS(set_sweep_param(a, "K", 0), ConfigError);
  CHECK_THROWS_AS(set_sweep_param(a, "alpha", 1.5), ConfigError);

  const auto rows = ablation_rows(AdapterConfig{});
  REQUIRE(rows.size() == 5);
  CHECK(!rows[0].second);
  CHECK((!rows[1].second->use_memory_bank && !rows[1].second->use_warmup));
  CHECK((rows[2].second->use_memory_bank && !rows[2].second->use_warmup));
  CHECK((!rows[3].second->use_memory_bank && rows[3].second->use_warmup));
  CHECK((rows[4].second->use_memory_bank && rows[4].second->use_warmup));
}

TEST_CASE("loss efficacy counts steps after the warm-up window") {
  std::vector<StreamRecord> r(20);
  for (std::size_t k = 0; k < r.size(); ++k) {
    r[k].i = static_cast<std::int64_t>(k + 1);
    r[k].loss_pre = 1.0;
    r[k].loss_post = k % 5 == 0 ? 2.0 : 0.5;
  }
  CHECK(loss_efficacy(r) == doctest::Approx(8.0 / 10.0));
}

TEST_CASE("short pretraining keeps valid statistics and diverges loudly") {
  const auto data = generate_dataset(2, 16, 32, 32, 3);
  PretrainConfig cfg;
  cfg.epochs = 3;
  PretrainReport report;
  const Model m = pretrain_source(data, cfg, 2, &report);
  CHECK(report.epoch_loss.size() == 3);
  CHECK(report.epoch_loss.back() < report.epoch_loss.front());
  REQUIRE(m.bn_count() == 4);
  CHECK(m.encoder_bn_count() == 3);
  for (const auto& bn : m.bn_sources()) {
    CHECK(bn.running_mean.all_finite());
    const Tensor sigma = bn.sigma();
    for (double s : sigma.data()) CHECK(s > 0.0);
  }
  CHECK(pretrain_source(data, cfg, 2).checksum() == m.checksum());

  auto poisoned = data;
  poisoned[3].image[10] = std::nan("");
  CHECK_THROWS_AS(pretrain_source(poisoned, cfg, 2), TrainingDiverged);
  CHECK_THROWS_AS(pretrain_source({}, PretrainConfig{}, 2), ConfigError);
}

TEST_CASE("target stream layout") {
  const auto c = tiny_config();
  const auto stream = build_target_stream(c, 7);
  REQUIRE(stream.size() == 4 * c.target_images);
  for (std::size_t k = 0; k < stream.size(); ++k) {
    CHECK(stream[k].domain == c.domains[k / c.target_images].name);
    CHECK(stream[k].mask.has_value());
  }
  const auto again = build_target_stream(c, 7);
  CHECK(again[5].image == stream[5].image);
}

TEST_CASE("small benchmark writes deterministic records and a summary") {
  auto c = tiny_config();
  c.rounds = 2;
  const auto root = fs::temp_directory_path() / "vptta_bench_test";
  fs::remove_all(root);
  const auto s1 = run_benchmark(c, root / "a", root / "a" / "models", std::nullopt, nullptr);
  const auto s2 = run_benchmark(c, root / "b", root / "b" / "models", std::nullopt, nullptr);
  for (const char* f : {"vptta.csv", "prompt_only.csv"}) {
    const auto t1 = slurp(root / "a" / "seed_7" / f);
    CHECK(!t1.empty());
    CHECK(t1 == slurp(root / "b" / "seed_7" / f));
  }
  CHECK(slurp(root / "a" / "summary.json") == slurp(root / "b" / "summary.json"));
  CHECK(s1 == s2);
  CHECK(s1["methods"].size() == 3);
  CHECK(s1["model_frozen"] == true);
  CHECK(s1["seeds"][0]["vptta"]["per_round"].size() == 2);
  CHECK(s1["seeds"][0]["vptta"]["steps"] == 2 * 4 * c.target_images);
  CHECK(fs::exists(root / "a" / "models" / "seed_7" / "model.json"));

  // A cached model is reused: a third run with the first model root matches.
  CHECK(run_benchmark(c, root / "c", root / "a" / "models", std::nullopt, nullptr) == s1);

  const auto ablation = run_ablation(c, root / "a", root / "a" / "models", nullptr);
  REQUIRE(ablation.size() == 5);
  CHECK(ablation[0].mean == s1["methods"][0]["mean_dice"].get<double>());
  CHECK(ablation[1].mean == s1["methods"][1]["mean_dice"].get<double>());
  CHECK(ablation[4].mean == s1["methods"][2]["mean_dice"].get<double>());
  CHECK(fs::exists(root / "a" / "ablation.csv"));

  const auto sweep = run_sweep(c, "tau", {1, 5}, root / "a", root / "a" / "models", nullptr);
  CHECK(sweep.size() == 2);
  CHECK(slurp(root / "a" / "sweep_tau.csv").rfind("tau,mean_dice\n", 0) == 0);
  CHECK_THROWS_AS(run_sweep(c, "tau", {}, root / "a", std::nullopt, nullptr), ConfigError);

  // With no bank capacity the full method reduces to the warm-up-only row.
  auto no_bank = c;
  set_sweep_param(no_bank.adapter, "S", 0);
  const auto s_zero = run_sweep(no_bank, "tau", {5}, root / "a", root / "a" / "models", nullptr);
  CHECK(s_zero[0].second == ablation[3].mean);

  CHECK_THROWS_AS(require_model(root / "missing", 7), ConfigError);
  fs::remove_all(root);
}

TEST_CASE("source pretraining reaches the Dice gates") {
  const std::uint64_t seed = 7;
  const auto data = generate_dataset(derive_seed(seed, 10), 200);
  PretrainReport report;
  const Model m = pretrain_source(data, PretrainConfig{}, seed, &report);
  CHECK(report.train_dice >= 0.90);
  CHECK(frozen_dice(m, generate_dataset(derive_seed(seed, 11), 100)) >= 0.85);
}
