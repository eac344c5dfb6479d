// SPDX-License-Identifier: Apache-2.0
#include "vptta/bench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <numeric>
#include <random>

#include "vptta/prompt.hpp"

namespace vptta {

using ad::Var;

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
  std::uint64_t z = base * 0x9E3779B97F4A7C15ULL + tag + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace {

std::uint64_t string_tag(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) h = (h ^ ch) * 1099511628211ULL;
  return h;
}

struct Point {
  double y, x;
};

bool inside_polygon(const std::vector<Point>& poly, double y, double x) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto& a = poly[i];
    const auto& b = poly[j];
    if ((a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x) in = !in;
  }
  return in;
}

SyntheticSample draw_sample(std::mt19937_64& rng, std::size_t h, std::size_t w, std::size_t c) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  std::normal_distribution<double> noise(0.0, 0.015);
  const double H = static_cast<double>(h), W = static_cast<double>(w);

  SyntheticSample s;
  s.mask = Tensor({h, w, 1});
  for (int attempt = 0;; ++attempt) {
    s.mask.fill(0.0);
    const int shapes = 1 + static_cast<int>(u(rng) * 3);
    for (int k = 0; k < shapes; ++k) {
      const double cy = uni(0.2, 0.8) * H, cx = uni(0.2, 0.8) * W;
      const double r = uni(0.08, 0.28) * std::min(H, W);
      if (u(rng) < 0.5) {
        const double ry = r * uni(0.6, 1.4), rx = r * uni(0.6, 1.4), th = uni(0.0, std::numbers::pi);
        const double ct = std::cos(th), st = std::sin(th);
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
            const double a = (ct * dx + st * dy) / rx, b = (-st * dx + ct * dy) / ry;
            if (a * a + b * b <= 1.0) s.mask.at(y, x, 0) = 1.0;
          }
      } else {
        const int n = 3 + static_cast<int>(u(rng) * 4);
        std::vector<double> angles(n);
        for (auto& a : angles) a = uni(0.0, 2 * std::numbers::pi);
        std::sort(angles.begin(), angles.end());
        std::vector<Point> poly;
        for (double a : angles) {
          const double rr = r * uni(0.7, 1.3);
          poly.push_back({cy + rr * std::sin(a), cx + rr * std::cos(a)});
        }
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x)
            if (inside_polygon(poly, y + 0.5, x + 0.5)) s.mask.at(y, x, 0) = 1.0;
      }
    }
    const double frac = s.mask.sum() / (H * W);
    if (frac >= 0.02 && frac <= 0.6) break;
    if (attempt > 1000) throw ContractViolation("generate_dataset: could not draw a valid mask");
  }

  // Background: channel bases plus a few smooth waves. Foreground: a
  // brighter, redder tone with its own stripes.
  std::vector<double> base(c), delta(c);
  for (std::size_t k = 0; k < c; ++k) {
    base[k] = uni(0.3, 0.45);
    const double lo = k == 0 ? 0.2 : (k == 1 ? 0.05 : -0.15), hi = k == 0 ? 0.35 : (k == 1 ? 0.2 : 0.0);
    delta[k] = c == 1 ? uni(0.2, 0.35) : uni(lo, hi);
  }
  struct Wave {
    double amp, fy, fx, phase;
  };
  std::vector<Wave> waves(3);
  for (auto& wv : waves) wv = {uni(0.02, 0.06), uni(0.5, 4.0), uni(0.5, 4.0), uni(0.0, 2 * std::numbers::pi)};
  const Wave stripes{uni(0.02, 0.04), uni(4.0, 8.0), uni(4.0, 8.0), uni(0.0, 2 * std::numbers::pi)};

  s.image = Tensor({h, w, c});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double bg = 0.0;
      for (const auto& wv : waves) bg += wv.amp * std::sin(2 * std::numbers::pi * (wv.fy * y / H + wv.fx * x / W) + wv.phase);
      const bool fg = s.mask.at(y, x, 0) > 0.5;
      const double st =
          fg ? stripes.amp * std::sin(2 * std::numbers::pi * (stripes.fy * y / H + stripes.fx * x / W) + stripes.phase)
             : 0.0;
      for (std::size_t k = 0; k < c; ++k)
        s.image.at(y, x, k) = std::clamp(base[k] + bg + (fg ? delta[k] + st : 0.0) + noise(rng), 0.0, 1.0);
    }
  return s;
}

Tensor gaussian_blur(const Tensor& img, double sigma) {
  const std::size_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  for (int k = -radius; k <= radius; ++k) kernel[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
  const double norm = std::accumulate(kernel.begin(), kernel.end(), 0.0);
  for (auto& k : kernel) k /= norm;
  auto clampi = [](long v, std::size_t n) { return static_cast<std::size_t>(std::clamp<long>(v, 0, static_cast<long>(n) - 1)); };
  Tensor tmp(img.shape()), out(img.shape());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * img.at(y, clampi(long(x) + k, w), ch);
        tmp.at(y, x, ch) = acc;
      }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * tmp.at(clampi(long(y) + k, h), x, ch);
        out.at(y, x, ch) = acc;
      }
  return out;
}

void check_range(double v, double lo, double hi, const std::string& what) {
  if (!(v >= lo && v <= hi)) {
    throw ConfigError(what + " = " + std::to_string(v) + " outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
}

}  // namespace

std::vector<SyntheticSample> generate_dataset(std::uint64_t seed, std::size_t n, std::size_t height, std::size_t width,
                                              std::size_t channels) {
  if (n < 1) throw ConfigError("generate_dataset: n must be >= 1");
  if (height < 8 || width < 8 || channels < 1) throw ConfigError("generate_dataset: images must be at least 8x8x1");
  std::vector<SyntheticSample> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::uint64_t s = derive_seed(seed, k);
    std::mt19937_64 rng(s);
    out.push_back(draw_sample(rng, height, width, channels));
    out.back().seed = s;
  }
  return out;
}

void DomainSpec::validate() const {
  if (name.empty() || name.find_first_of(",\"\n") != std::string::npos) {
    throw ConfigError("domain name must be nonempty and free of CSV metacharacters");
  }
  check_range(gain, 0.25, 4.0, name + ".gain");
  check_range(gamma, 0.25, 4.0, name + ".gamma");
  for (double t : tint) check_range(t, 0.25, 4.0, name + ".tint");
  check_range(blur_sigma, 0.0, 5.0, name + ".blur_sigma");
  check_range(noise_sigma, 0.0, 0.2, name + ".noise_sigma");
  check_range(lf_gain, 0.25, 4.0, name + ".lf_gain");
  if (!(lf_alpha > 0.0 && lf_alpha < 1.0)) throw ConfigError(name + ".lf_alpha must lie in (0, 1)");
}

void to_json(nlohmann::json& j, const DomainSpec& d) {
  j = {{"name", d.name},           {"gain", d.gain},   {"gamma", d.gamma},     {"tint", d.tint},
       {"blur_sigma", d.blur_sigma}, {"noise_sigma", d.noise_sigma}, {"lf_gain", d.lf_gain}, {"lf_alpha", d.lf_alpha}};
}

void from_json(const nlohmann::json& j, DomainSpec& d) {
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "name") d.name = value.get<std::string>();
      else if (key == "gain") d.gain = value.get<double>();
      else if (key == "gamma") d.gamma = value.get<double>();
      else if (key == "tint") d.tint = value.get<std::vector<double>>();
      else if (key == "blur_sigma") d.blur_sigma = value.get<double>();
      else if (key == "noise_sigma") d.noise_sigma = value.get<double>();
      else if (key == "lf_gain") d.lf_gain = value.get<double>();
      else if (key == "lf_alpha") d.lf_alpha = value.get<double>();
      else throw ConfigError("unknown domain key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("domain spec: ") + e.what());
  }
  d.validate();
}

SyntheticSample shift_domain(const SyntheticSample& sample, const DomainSpec& spec) {
  spec.validate();
  const std::size_t c = sample.image.dim(2);
  if (!spec.tint.empty() && spec.tint.size() != c) {
    throw ConfigError("domain " + spec.name + ": tint has " + std::to_string(spec.tint.size()) + " entries for " +
                      std::to_string(c) + " channels");
  }
  SyntheticSample out = sample;
  out.domain = spec.name;
  Tensor& img = out.image;
  for (std::size_t i = 0; i < img.size(); ++i) {
    double v = img[i] * spec.gain * (spec.tint.empty() ? 1.0 : spec.tint[i % c]);
    if (spec.gamma != 1.0) v = std::pow(std::clamp(v, 0.0, 1.0), spec.gamma);
    img[i] = v;
  }
  if (spec.blur_sigma > 0.0) img = gaussian_blur(img, spec.blur_sigma);
  if (spec.lf_gain != 1.0) {
    auto p = LowFrequencyPrompt::ones(img.shape(), spec.lf_alpha);
    p.values.fill(spec.lf_gain);
    img = apply_prompt(img, p).image;
  }
  if (spec.noise_sigma > 0.0) {
    std::mt19937_64 rng(derive_seed(sample.seed, string_tag(spec.name)));
    std::normal_distribution<double> nd(0.0, spec.noise_sigma);
    for (auto& v : img.data()) v += nd(rng);
  }
  for (auto& v : img.data()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

std::vector<DomainSpec> default_target_domains() {
  std::vector<DomainSpec> d(4);
  d[0].name = "bright";
  d[0].gain = 1.3;
  d[0].lf_gain = 1.1;
  d[1].name = "dim_warm";
  d[1].gain = 0.75;
  d[1].tint = {1.15, 1.0, 0.8};
  d[2].name = "gamma_blur";
  d[2].gamma = 1.6;
  d[2].blur_sigma = 1.0;
  d[3].name = "cool_noisy";
  d[3].tint = {0.8, 1.0, 1.25};
  d[3].noise_sigma = 0.04;
  d[3].lf_gain = 0.85;
  return d;
}

void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = {{"epochs", c.epochs}, {"learning_rate", c.learning_rate}, {"batch", c.batch}, {"bn_momentum", c.bn_momentum}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "epochs") c.epochs = value.get<int>();
      else if (key == "learning_rate") c.learning_rate = value.get<double>();
      else if (key == "batch") c.batch = value.get<std::size_t>();
      else if (key == "bn_momentum") c.bn_momentum = value.get<double>();
      else throw ConfigError("unknown pretrain key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("pretrain config: ") + e.what());
  }
  if (c.epochs < 1 || c.batch < 1 || !(c.learning_rate > 0.0) || !(c.bn_momentum > 0.0 && c.bn_momentum <= 1.0)) {
    throw ConfigError("pretrain config needs epochs >= 1, batch >= 1, learning_rate > 0, bn_momentum in (0, 1]");
  }
}

Model pretrain_source(const std::vector<SyntheticSample>& data, const PretrainConfig& config, std::uint64_t seed,
                      PretrainReport* report, std::ostream* log) {
  if (data.empty()) throw ConfigError("pretrain_source: empty dataset");
  const std::size_t h = data[0].image.dim(0), w = data[0].image.dim(1), c = data[0].image.dim(2);
  Model model = make_toy_model(c, derive_seed(seed, 1));
  std::mt19937_64 rng(derive_seed(seed, 2));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  PretrainReport local;
  PretrainReport& rep = report ? *report : local;
  rep.epoch_loss.clear();

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch) {
      const std::size_t n = std::min(config.batch, order.size() - start);
      Tensor x({n, h, w, c}), y({n, h, w, 1});
      for (std::size_t b = 0; b < n; ++b) {
        const auto& s = data[order[start + b]];
        std::copy(s.image.data().begin(), s.image.data().end(), x.data().begin() + b * h * w * c);
        std::copy(s.mask.data().begin(), s.mask.data().end(), y.data().begin() + b * h * w);
      }
      const auto params = model.bind_trainable();
      const auto fwd = model.forward(Var::constant(x), {BnMode::TrainSource, 1.0, LossScope::All}, params);
      const Var p = fwd.probabilities;
      const Var inter = ad::sum(ad::mul(p, Var::constant(y)));
      const Var soft_dice =
          ad::div(ad::add_scalar(ad::scale(inter, 2.0), 1.0), ad::add_scalar(ad::sum(p), y.sum() + 1.0));
      const Var loss = ad::add(ad::add_scalar(ad::scale(soft_dice, -1.0), 1.0), ad::bce_with_logits(fwd.logits, y));
      const double value = loss.value()[0];
      auto diverged = [&](const std::string& what) {
        throw TrainingDiverged("pretraining diverged at epoch " + std::to_string(epoch + 1) + ", batch " +
                               std::to_string(batches + 1) + ": " + what +
                               "; check the data for non-finite pixels or lower the learning rate");
      };
      if (!std::isfinite(value)) diverged("loss is " + std::to_string(value));
      ad::backward(loss);
      auto& store = model.mutable_params();
      for (std::size_t k = 0; k < store.size(); ++k) {
        const Tensor g = params[k].grad();
        if (!g.all_finite()) diverged("gradient of parameter " + std::to_string(k) + " is not finite");
        for (std::size_t i = 0; i < g.size(); ++i) store[k][i] -= config.learning_rate * g[i];
      }
      model.update_running_stats(fwd, config.bn_momentum);
      for (std::size_t k = 0; k < model.bn_count(); ++k) {
        const auto& bn = model.bn_sources()[k];
        if (!bn.running_mean.all_finite() || !bn.running_var.all_finite()) {
          diverged("running statistics of batch-norm layer " + std::to_string(k) + " are not finite");
        }
      }
      epoch_loss += value;
      ++batches;
    }
    rep.epoch_loss.push_back(epoch_loss / static_cast<double>(batches));
    if (log) *log << "  epoch " << epoch + 1 << "/" << config.epochs << " loss " << rep.epoch_loss.back() << '\n';
  }
  rep.train_dice = frozen_dice(model, data);
  return model;
}

double frozen_dice(const Model& model, const std::vector<SyntheticSample>& data) {
  double total = 0.0;
  for (const auto& s : data) total += dice(model.forward(s.image, {}).probabilities.value(), s.mask);
  return total / static_cast<double>(data.size());
}

BenchmarkConfig::BenchmarkConfig() {
  // A 64x64 image at alpha = 0.01 would leave a single frequency bin; the
  // benchmark uses a 3x3 window instead.
  adapter.alpha = 0.05;
}

std::vector<std::uint64_t> BenchmarkConfig::seeds() const {
  std::vector<std::uint64_t> s;
  for (std::size_t k = 0; k < seed_count; ++k) s.push_back(seed + k);
  return s;
}

void BenchmarkConfig::validate() const {
  adapter.validate();
  if (seed_count < 1) throw ConfigError("seed_count must be >= 1");
  if (source_images < 1 || target_images < 1) throw ConfigError("image counts must be >= 1");
  if (rounds < 1) throw ConfigError("rounds must be >= 1");
  if (domains.empty()) throw ConfigError("at least one target domain is required");
  for (const auto& d : domains) d.validate();
}

void to_json(nlohmann::json& j, const BenchmarkConfig& c) {
  j = c.adapter;
  j["benchmark"] = {{"seed", c.seed},
                    {"seed_count", c.seed_count},
                    {"source_images", c.source_images},
                    {"target_images", c.target_images},
                    {"height", c.height},
                    {"width", c.width},
                    {"channels", c.channels},
                    {"rounds", c.rounds},
                    {"pretrain", c.pretrain},
                    {"domains", c.domains}};
}

void from_json(const nlohmann::json& j, BenchmarkConfig& c) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  nlohmann::json adapter = j;
  adapter.erase("benchmark");
  from_json(adapter, c.adapter);
  if (j.contains("benchmark")) {
    try {
      for (const auto& [key, value] : j.at("benchmark").items()) {
        if (key == "seed") c.seed = value.get<std::uint64_t>();
        else if (key == "seed_count") c.seed_count = value.get<std::size_t>();
        else if (key == "source_images") c.source_images = value.get<std::size_t>();
        else if (key == "target_images") c.target_images = value.get<std::size_t>();
        else if (key == "height") c.height = value.get<std::size_t>();
        else if (key == "width") c.width = value.get<std::size_t>();
        else if (key == "channels") c.channels = value.get<std::size_t>();
        else if (key == "rounds") c.rounds = value.get<int>();
        else if (key == "pretrain") c.pretrain = value.get<PretrainConfig>();
        else if (key == "domains") c.domains = value.get<std::vector<DomainSpec>>();
        else throw ConfigError("unknown benchmark key '" + key + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("benchmark config: ") + e.what());
    }
  }
  c.validate();
}

BenchmarkConfig load_benchmark_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return j.get<BenchmarkConfig>();
}

namespace {

std::filesystem::path seed_dir(const std::filesystem::path& root, std::uint64_t seed) {
  return root / ("seed_" + std::to_string(seed));
}

}  // namespace

Model require_model(const std::filesystem::path& model_root, std::uint64_t seed) {
  const auto dir = seed_dir(model_root, seed);
  if (!std::filesystem::exists(dir / "model.json")) {
    throw ConfigError("no pretrained model at " + dir.string() + "; run `vptta pretrain --seed " +
                      std::to_string(seed) + " --model-dir " + model_root.string() + "` first");
  }
  return Model::load(dir);
}

Model obtain_model(const BenchmarkConfig& config, std::uint64_t seed,
                   const std::optional<std::filesystem::path>& model_root, std::ostream* log) {
  if (model_root && std::filesystem::exists(seed_dir(*model_root, seed) / "model.json")) {
    return Model::load(seed_dir(*model_root, seed));
  }
  if (log) *log << "pretraining source model for seed " << seed << '\n';
  const auto data =
      generate_dataset(derive_seed(seed, 10), config.source_images, config.height, config.width, config.channels);
  PretrainReport report;
  Model m = pretrain_source(data, config.pretrain, seed, &report, nullptr);
  if (log) *log << "  training dice " << report.train_dice << '\n';
  if (model_root) m.save(seed_dir(*model_root, seed));
  return m;
}

std::vector<StreamItem> build_target_stream(const BenchmarkConfig& config, std::uint64_t seed) {
  std::vector<StreamItem> stream;
  for (std::size_t k = 0; k < config.domains.size(); ++k) {
    const auto data = generate_dataset(derive_seed(seed, 100 + k), config.target_images, config.height, config.width,
                                       config.channels);
    for (const auto& s : data) {
      auto shifted = shift_domain(s, config.domains[k]);
      stream.push_back({std::move(shifted.image), std::move(shifted.mask), config.domains[k].name});
    }
  }
  return stream;
}

SeedContext prepare_seed(const BenchmarkConfig& config, std::uint64_t seed,
                         const std::optional<std::filesystem::path>& model_root, std::ostream* log) {
  return {seed, obtain_model(config, seed, model_root, log), build_target_stream(config, seed)};
}

double source_only_dice(const Model& model, const std::vector<StreamItem>& stream) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& item : stream) {
    if (!item.mask) continue;
    total += dice(model.forward(item.image, {}).probabilities.value(), *item.mask);
    ++n;
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

double loss_efficacy(const std::vector<StreamRecord>& records, std::int64_t warmup) {
  std::size_t considered = 0, improved = 0;
  for (const auto& r : records) {
    if (r.i <= warmup) continue;
    ++considered;
    improved += r.loss_post < r.loss_pre;
  }
  return considered ? static_cast<double>(improved) / static_cast<double>(considered) : 0.0;
}

std::vector<std::pair<std::string, std::optional<AdapterConfig>>> ablation_rows(const AdapterConfig& base) {
  auto with = [&](bool bank, bool warm) {
    AdapterConfig c = base;
    c.use_memory_bank = bank;
    c.use_warmup = warm;
    return std::optional<AdapterConfig>(c);
  };
  return {{"none", std::nullopt},
          {"prompt", with(false, false)},
          {"prompt+bank", with(true, false)},
          {"prompt+warmup", with(false, true)},
          {"prompt+bank+warmup", with(true, true)}};
}

namespace {

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

void write_csv(const std::filesystem::path& path, const std::vector<StreamRecord>& records) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  write_records_csv(out, records);
}

nlohmann::json row_json(const MethodRow& r) {
  return {{"method", r.method}, {"seed_dice", r.seed_dice}, {"mean_dice", r.mean}};
}

}  // namespace

nlohmann::json run_benchmark(const BenchmarkConfig& config, const std::filesystem::path& out,
                             const std::optional<std::filesystem::path>& model_root,
                             const std::optional<std::filesystem::path>& dump_dir, std::ostream* log) {
  config.validate();
  std::filesystem::create_directories(out);
  AdapterConfig prompt_only = config.adapter;
  prompt_only.use_memory_bank = false;
  prompt_only.use_warmup = false;

  MethodRow source{"source_only", {}, 0.0}, prompt{"prompt_only", {}, 0.0}, full{"vptta", {}, 0.0};
  nlohmann::json seeds = nlohmann::json::array();
  std::vector<double> efficacy;
  bool frozen = true;
  for (const auto seed : config.seeds()) {
    const auto ctx = prepare_seed(config, seed, model_root, log);
    const auto dir = seed_dir(out, seed);
    std::filesystem::create_directories(dir);

    AdapterConfig a = config.adapter;
    a.seed = seed;
    AdapterConfig p = prompt_only;
    p.seed = seed;
    StreamOptions opts{config.rounds, std::nullopt};
    const auto prompt_res = run_stream(ctx.stream, ctx.model, p, opts);
    if (dump_dir) opts.dump_dir = seed_dir(*dump_dir, seed);
    const auto full_res = run_stream(ctx.stream, ctx.model, a, opts);
    write_csv(dir / "prompt_only.csv", prompt_res.records);
    write_csv(dir / "vptta.csv", full_res.records);

    source.seed_dice.push_back(source_only_dice(ctx.model, ctx.stream));
    prompt.seed_dice.push_back(prompt_res.overall.post);
    full.seed_dice.push_back(full_res.overall.post);
    efficacy.push_back(loss_efficacy(full_res.records));
    frozen = frozen && full_res.checksum_before == full_res.checksum_after &&
             prompt_res.checksum_before == prompt_res.checksum_after;
    seeds.push_back({{"seed", seed},
                     {"source_only", source.seed_dice.back()},
                     {"prompt_only", stream_summary(prompt_res)},
                     {"vptta", stream_summary(full_res)},
                     {"loss_efficacy", efficacy.back()}});
    if (log) {
      *log << "seed " << seed << ": source-only " << source.seed_dice.back() << ", prompt-only "
           << prompt.seed_dice.back() << ", vptta " << full.seed_dice.back() << ", loss efficacy " << efficacy.back()
           << '\n';
    }
  }
  for (auto* r : {&source, &prompt, &full}) r->mean = mean_of(r->seed_dice);

  nlohmann::json summary = {{"format", "vptta-benchmark-1"},
                            {"config", config},
                            {"methods", {row_json(source), row_json(prompt), row_json(full)}},
                            {"gap_vs_source", full.mean - source.mean},
                            {"loss_efficacy", mean_of(efficacy)},
                            {"model_frozen", frozen},
                            {"seeds", seeds}};
  std::ofstream(out / "summary.json") << summary.dump(2) << '\n';
  return summary;
}

std::vector<MethodRow> run_ablation(const BenchmarkConfig& config, const std::filesystem::path& out,
                                    const std::optional<std::filesystem::path>& model_root, std::ostream* log) {
  config.validate();
  std::filesystem::create_directories(out);
  const auto rows = ablation_rows(config.adapter);
  std::vector<MethodRow> result;
  for (const auto& [name, cfg] : rows) result.push_back({name, {}, 0.0});
  for (const auto seed : config.seeds()) {
    const auto ctx = prepare_seed(config, seed, model_root, log);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      double d;
      if (!rows[r].second) {
        d = source_only_dice(ctx.model, ctx.stream);
      } else {
        AdapterConfig a = *rows[r].second;
        a.seed = seed;
        d = run_stream(ctx.stream, ctx.model, a, {config.rounds, std::nullopt}).overall.post;
      }
      result[r].seed_dice.push_back(d);
      if (log) *log << "seed " << seed << " " << rows[r].first << ": " << d << '\n';
    }
  }
  std::ofstream csv(out / "ablation.csv");
  csv << "method,memory_bank,warmup,mean_dice";
  for (const auto seed : config.seeds()) csv << ",seed_" << seed;
  csv << '\n';
  for (std::size_t r = 0; r < rows.size(); ++r) {
    auto& row = result[r];
    row.mean = mean_of(row.seed_dice);
    const auto& cfg = rows[r].second;
    csv << row.method << ',' << (cfg && cfg->use_memory_bank) << ',' << (cfg && cfg->use_warmup) << ','
        << format_double(row.mean);
    for (double d : row.seed_dice) csv << ',' << format_double(d);
    csv << '\n';
  }
  return result;
}

void set_sweep_param(AdapterConfig& config, const std::string& param, double value) {
  if (param == "alpha") {
    config.alpha = value;
  } else if (param == "S" || param == "K") {
    if (!(value >= 0.0) || value != std::floor(value)) throw ConfigError(param + " must be a nonnegative integer");
    if (param == "S") config.capacity = static_cast<std::size_t>(value);
    else config.support = static_cast<int>(value);
  } else if (param == "tau") {
    config.tau = value;
  } else {
    throw ConfigError("sweep parameter must be one of alpha, S, K, tau; got '" + param + "'");
  }
  config.validate();
}

std::vector<std::pair<double, double>> run_sweep(const BenchmarkConfig& config, const std::string& param,
                                                 const std::vector<double>& grid, const std::filesystem::path& out,
                                                 const std::optional<std::filesystem::path>& model_root,
                                                 std::ostream* log) {
  config.validate();
  if (grid.empty()) throw ConfigError("sweep grid is empty");
  for (double v : grid) {
    AdapterConfig probe = config.adapter;
    set_sweep_param(probe, param, v);
  }
  std::filesystem::create_directories(out);
  std::vector<std::vector<double>> per_value(grid.size());
  for (const auto seed : config.seeds()) {
    const auto ctx = prepare_seed(config, seed, model_root, log);
    for (std::size_t g = 0; g < grid.size(); ++g) {
      AdapterConfig a = config.adapter;
      set_sweep_param(a, param, grid[g]);
      a.seed = seed;
      per_value[g].push_back(run_stream(ctx.stream, ctx.model, a, {config.rounds, std::nullopt}).overall.post);
      if (log) *log << "seed " << seed << " " << param << "=" << grid[g] << ": " << per_value[g].back() << '\n';
    }
  }
  std::vector<std::pair<double, double>> rows;
  std::ofstream csv(out / ("sweep_" + param + ".csv"));
  csv << param << ",mean_dice\n";
  for (std::size_t g = 0; g < grid.size(); ++g) {
    rows.emplace_back(grid[g], mean_of(per_value[g]));
    csv << format_double(grid[g]) << ',' << format_double(rows.back().second) << '\n';
  }
  return rows;
}

}  // namespace vptta
