// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "test_util.hpp"
#include "vptta/adapter.hpp"
#include "vptta/image_io.hpp"
#include "vptta/prompt.hpp"

#include <cmath>
#include <filesystem>
#include <sstream>

using namespace vptta;

namespace {

Model shifted_toy(std::uint64_t seed) {
  Model m = make_toy_model(3, seed);
  std::mt19937_64 rng(seed + 50);
  for (auto& bn : m.mutable_bn_sources()) {
    bn.running_mean = testing::random_tensor(bn.running_mean.shape(), rng, -0.3, 0.3);
    bn.running_var = testing::random_tensor(bn.running_var.shape(), rng, 0.5, 1.5);
  }
  return m;
}

AdapterConfig small_config() {
  AdapterConfig c;
  c.alpha = 0.2;  // 3x3 window on 16x16 images
  c.capacity = 6;
  c.support = 3;
  return c;
}

std::vector<StreamItem> small_stream(std::uint64_t seed, std::size_t n) {
  std::mt19937_64 rng(seed);
  std::vector<StreamItem> items;
  for (std::size_t k = 0; k < n; ++k) {
    Tensor mask({16, 16, 1});
    for (std::size_t y = 4; y < 11; ++y)
      for (std::size_t x = 3 + k % 4; x < 12; ++x) mask.at(y, x, 0) = 1.0;
    items.push_back({testing::random_tensor({16, 16, 3}, rng, 0, 1), mask, k < n / 2 ? "a" : "b"});
  }
  return items;
}

}  // namespace

TEST_CASE("Adam first step is lr times the gradient sign") {
  CHECK(std::abs(adam_single_step(0.1, 0.05) + 0.05) <= 1e-6);
  CHECK(adam_single_step(0.0, 0.05) == 0.0);
  CHECK(std::abs(adam_single_step(-0.2, 0.05) - 0.05) <= 1e-6);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-10, 10);
  for (int k = 0; k < 1000; ++k) {
    const double g = u(rng);
    CHECK(std::abs(adam_single_step(g, 0.01)) <= 0.01);
  }
}

TEST_CASE("Adam second step follows the bias-corrected moments") {
  std::vector<Tensor> p{Tensor({1}, 1.0)};
  Adam adam(0.1);
  adam.step(p, {Tensor({1}, 0.5)});
  const auto d = adam.step(p, {Tensor({1}, -1.0)});
  const double m = (0.9 * 0.1 * 0.5 + 0.1 * -1.0) / (1 - 0.81);
  const double v = (0.999 * 0.001 * 0.25 + 0.001 * 1.0) / (1 - 0.999 * 0.999);
  CHECK(d[0][0] == doctest::Approx(-0.1 * m / (std::sqrt(v) + 1e-8)).epsilon(1e-12));
  CHECK(adam.steps() == 2);
}

TEST_CASE("config defaults, JSON and validation") {
  const AdapterConfig d;
  CHECK(d.alpha == 0.01);
  CHECK(d.capacity == 40);
  CHECK(d.support == 16);
  CHECK(d.tau == 5.0);
  CHECK(d.iterations == 1);
  CHECK(d.beta1 == 0.9);
  CHECK(d.beta2 == 0.999);
  CHECK(d.adam_eps == 1e-8);

  AdapterConfig c = small_config();
  c.prompt_kind = PromptKind::LowRank;
  c.inference_stats = InferenceStats::Source;
  c.loss_scope = LossScope::All;
  nlohmann::json j = c;
  const auto back = j.get<AdapterConfig>();
  CHECK(nlohmann::json(back) == j);

  auto parse = [](const char* text) { return nlohmann::json::parse(text).get<AdapterConfig>(); };
  CHECK(parse(R"({"tau": 2})").tau == 2.0);
  CHECK_THROWS_AS(parse(R"({"tua": 2})"), ConfigError);
  CHECK_THROWS_AS(parse(R"({"learning_rate": 0})"), ConfigError);
  CHECK_THROWS_AS(parse(R"({"iterations": -1})"), ConfigError);
  CHECK_THROWS_AS(parse(R"({"K": 0})"), ConfigError);
  CHECK_THROWS_AS(parse(R"({"prompt_kind": "highfreq"})"), ConfigError);
  CHECK_THROWS_AS(parse(R"({"alpha": "big"})"), ConfigError);
}

TEST_CASE("dice") {
  Tensor a({10, 20, 1}), b({10, 20, 1});
  for (std::size_t i = 0; i < 100; ++i) a[i] = 1.0;
  for (std::size_t i = 50; i < 150; ++i) b[i] = 0.9;
  CHECK(dice(a, a) == 1.0);
  CHECK(dice(a, b) == 0.5);
  Tensor c({10, 20, 1});
  for (std::size_t i = 100; i < 200; ++i) c[i] = 1.0;
  CHECK(dice(a, c) == 0.0);
  CHECK(dice(Tensor({4, 4, 1}), Tensor({4, 4, 1})) == 1.0);
  CHECK_THROWS_AS(dice(a, Tensor({3, 3, 1})), ConfigError);
}

TEST_CASE("first step record") {
  const Model m = shifted_toy(1);
  auto items = small_stream(2, 1);
  MemoryBank bank(6);
  const auto r = adapt_step(items[0].image, items[0].mask, m, bank, small_config(), 1);
  CHECK(std::abs(r.record.lambda - 5.0 / 6.0) <= 1e-12);
  CHECK(r.record.bank_size == 1);
  CHECK(r.record.loss_pre >= 0.0);
  CHECK(r.record.loss_post >= 0.0);
  CHECK(r.initial[0] == Tensor::ones({3, 3, 3}));
  CHECK(r.record.max_displacement <= 0.05 * (1 + 1e-6));
  CHECK(r.record.max_displacement > 0.04);
  CHECK(r.record.max_step_error <= 1e-4);
  CHECK(r.probabilities.shape() == Shape{16, 16, 1});
  CHECK(bank.entries().front().value[0] == r.prompt[0]);
  CHECK(bank.entries().front().key.values == extract_key(items[0].image, 0.2).values);
  CHECK_THROWS_AS(adapt_step(items[0].image, items[0].mask, m, bank, small_config(), 0), ConfigError);
  CHECK_THROWS_AS(adapt_step(Tensor({16, 16, 1}), std::nullopt, m, bank, small_config(), 2), ConfigError);
}

TEST_CASE("zero iterations predict with the initialized prompt") {
  const Model m = shifted_toy(3);
  auto items = small_stream(4, 1);
  AdapterConfig c = small_config();
  c.iterations = 0;
  c.inference_stats = InferenceStats::Source;
  MemoryBank bank(6);
  const auto r = adapt_step(items[0].image, items[0].mask, m, bank, c, 1);
  const auto frozen = m.forward(items[0].image, {BnMode::FrozenEval, 0.0, LossScope::All}).probabilities.value();
  CHECK(max_abs_diff(r.probabilities.reshaped(frozen.shape()), frozen) <= 1e-9);
  CHECK(r.prompt[0] == r.initial[0]);
  CHECK(r.record.loss_post == r.record.loss_pre);
  CHECK(r.record.dice_pre == r.record.dice_post);
}

TEST_CASE("ablation switches") {
  const Model m = shifted_toy(5);
  AdapterConfig c = small_config();
  c.use_memory_bank = false;
  c.use_warmup = false;
  const auto res = run_stream(small_stream(6, 8), m, c);
  for (const auto& r : res.records) {
    CHECK(r.lambda == 0.0);
    CHECK(r.bank_size == 0);
  }
  // Without warm-up the adapt-mode forward normalizes with the source
  // statistics, so the loss is the source-form gap.
  auto items = small_stream(6, 1);
  MemoryBank bank(0);
  const auto step = adapt_step(items[0].image, items[0].mask, m, bank, c, 1);
  const auto fwd = m.forward(items[0].image, {BnMode::FrozenEval, 0.0, c.loss_scope});
  CHECK(step.record.loss_pre == doctest::Approx(alignment_loss(fwd.bn, AlignMode::Source).total).epsilon(1e-9));
}

TEST_CASE("bank warms up and is reused after K entries") {
  const Model m = shifted_toy(7);
  const auto res = run_stream(small_stream(8, 10), m, small_config());
  for (std::size_t k = 0; k < res.records.size(); ++k) CHECK(res.records[k].bank_size == std::min<std::size_t>(k + 1, 6));
}

TEST_CASE("the model is never modified") {
  const Model m = shifted_toy(9);
  const auto before = m.checksum();
  AdapterConfig c = small_config();
  MemoryBank bank(c.capacity);
  auto items = small_stream(10, 20);
  for (int i = 1; i <= 1000; ++i) {
    const auto& item = items[static_cast<std::size_t>(i) % items.size()];
    adapt_step(item.image, item.mask, m, bank, c, i);
  }
  CHECK(m.checksum() == before);
}

TEST_CASE("displacement bound holds for both prompt kinds") {
  const Model m = shifted_toy(11);
  for (auto kind : {PromptKind::LowFrequency, PromptKind::LowRank}) {
    AdapterConfig c = small_config();
    c.prompt_kind = kind;
    c.learning_rate = 0.01;
    const auto res = run_stream(small_stream(12, 12), m, c, {2, std::nullopt});
    REQUIRE(res.records.size() == 24);
    for (const auto& r : res.records) {
      CHECK(r.max_displacement <= 0.01 * (1 + 1e-6));
      CHECK(r.max_step_error <= 1e-4);
      CHECK(!r.aborted);
    }
  }
}

TEST_CASE("identical streams give byte-identical records") {
  const Model m = shifted_toy(13);
  auto run = [&] {
    std::ostringstream out;
    write_records_csv(out, run_stream(small_stream(14, 10), m, small_config(), {2, std::nullopt}).records);
    return out.str();
  };
  const auto first = run();
  CHECK(first == run());
  CHECK(first.rfind("i,domain,lambda,loss_pre,loss_post,dice_pre,dice_post,bank_size,prompt_dist,imag_residue\n", 0) ==
        0);
}

TEST_CASE("stream summary aggregates per domain and per round") {
  const Model m = shifted_toy(15);
  const auto res = run_stream(small_stream(16, 6), m, small_config(), {3, std::nullopt});
  const auto s = stream_summary(res);
  CHECK(s["steps"] == 18);
  CHECK(s["per_round"].size() == 3);
  CHECK(s["per_domain"].size() == 2);
  CHECK(s["per_domain"][0]["domain"] == "a");
  CHECK(s["per_domain"][0]["steps"] == 9);
  CHECK(s["model_checksum_before"] == s["model_checksum_after"]);
  double mean = 0.0;
  for (const auto& r : res.records) mean += r.dice_post;
  CHECK(s["overall"]["dice_post"].get<double>() == doctest::Approx(mean / 18).epsilon(1e-12));
  CHECK(s["degradation"].get<double>() ==
        doctest::Approx(s["per_round"][0]["dice_post"].get<double>() - s["overall"]["dice_post"].get<double>()));
}

TEST_CASE("a diverging step falls back to the initialized prompt") {
  const Model m = shifted_toy(17);
  AdapterConfig c = small_config();
  c.support = 1;
  MemoryBank bank(4);
  auto items = small_stream(18, 1);
  bank.enqueue(extract_key(items[0].image, c.alpha), {Tensor({3, 3, 3}, 1e300)});
  const auto r = adapt_step(items[0].image, items[0].mask, m, bank, c, 2);
  CHECK(r.record.aborted);
  CHECK(r.prompt[0] == r.initial[0]);
}

TEST_CASE("stream dumps and shape errors") {
  const Model m = shifted_toy(19);
  const auto dir = std::filesystem::temp_directory_path() / "vptta_dump_test";
  std::filesystem::remove_all(dir);
  run_stream(small_stream(20, 2), m, small_config(), {1, dir});
  CHECK(std::filesystem::exists(dir / "step_00001_adapted.png"));
  CHECK(std::filesystem::exists(dir / "step_00002_prompt.png"));
  const auto img = read_png(dir / "step_00001_adapted.png");
  CHECK(img.shape() == Shape{16, 16, 3});
  CHECK(img.sum() > 0.0);
  std::filesystem::remove_all(dir);

  std::vector<StreamItem> bad{{Tensor({16, 16, 2}), std::nullopt, "x"}};
  CHECK_THROWS_AS(run_stream(bad, m, small_config()), ConfigError);
  auto comma = small_stream(20, 1);
  comma[0].domain = "a,b";
  CHECK_THROWS_AS(run_stream(comma, m, small_config()), ConfigError);
}

TEST_CASE("png round trip") {
  std::mt19937_64 rng(21);
  Tensor t = testing::random_tensor({5, 7, 3}, rng, 0, 1);
  for (auto& v : t.data()) v = std::round(v * 255) / 255;
  const auto path = std::filesystem::temp_directory_path() / "vptta_png_test.png";
  write_png(path, t);
  CHECK(max_abs_diff(read_png(path), t) <= 1e-12);
  Tensor g({4, 4, 1}, 3.0);
  g[0] = -1.0;
  write_png(path, g, true);
  const auto n = read_png(path);
  CHECK(n[0] == 0.0);
  CHECK(n[1] == 1.0);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_png(path), ConfigError);
  CHECK_THROWS_AS(write_png(path, Tensor({4, 4, 2})), ConfigError);
}
