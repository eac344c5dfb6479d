// SPDX-License-Identifier: Apache-2.0
#include "vptta/adapter.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <random>

#include "vptta/image_io.hpp"
#include "vptta/prompt.hpp"

namespace vptta {

using ad::Var;

namespace {

template <class E>
struct EnumNames {
  E value;
  const char* name;
};

constexpr EnumNames<LossScope> kScopes[] = {{LossScope::All, "all"}, {LossScope::EncoderOnly, "encoder_only"}};
constexpr EnumNames<InferenceStats> kStats[] = {{InferenceStats::Warmup, "warmup"},
                                                {InferenceStats::Source, "source"}};
constexpr EnumNames<PromptKind> kKinds[] = {{PromptKind::LowFrequency, "lowfreq"}, {PromptKind::LowRank, "lowrank"}};

template <class E, std::size_t N>
const char* name_of(const EnumNames<E> (&table)[N], E v) {
  for (const auto& e : table)
    if (e.value == v) return e.name;
  return "?";
}

template <class E, std::size_t N>
E parse_enum(const EnumNames<E> (&table)[N], const std::string& s, const char* field) {
  for (const auto& e : table)
    if (s == e.name) return e.value;
  std::string options;
  for (const auto& e : table) options += std::string(options.empty() ? "" : ", ") + e.name;
  throw ConfigError(std::string(field) + ": unknown value '" + s + "' (expected one of " + options + ")");
}

bool all_finite(const std::vector<Tensor>& ts) {
  for (const auto& t : ts)
    if (!t.all_finite()) return false;
  return true;
}

std::vector<Var> as_constants(const PromptParams& p) {
  std::vector<Var> out;
  for (const auto& t : p) out.push_back(Var::constant(t));
  return out;
}

}  // namespace

void AdapterConfig::validate() const {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  if (support <= 0) throw ConfigError("support size K must be positive");
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (iterations < 0) throw ConfigError("iterations must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("Adam eps must be positive");
  if (prompt_kind == PromptKind::LowRank && rank < 1) throw ConfigError("low-rank prompt needs rank >= 1");
}

void to_json(nlohmann::json& j, const AdapterConfig& c) {
  j = {{"alpha", c.alpha},
       {"S", c.capacity},
       {"K", c.support},
       {"tau", c.tau},
       {"learning_rate", c.learning_rate},
       {"iterations", c.iterations},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},
       {"loss_scope", name_of(kScopes, c.loss_scope)},
       {"inference_stats", name_of(kStats, c.inference_stats)},
       {"prompt_kind", name_of(kKinds, c.prompt_kind)},
       {"rank", c.rank},
       {"seed", c.seed},
       {"use_memory_bank", c.use_memory_bank},
       {"use_warmup", c.use_warmup}};
}

void from_json(const nlohmann::json& j, AdapterConfig& c) {
  if (!j.is_object()) throw ConfigError("adapter config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "alpha") c.alpha = value.get<double>();
      else if (key == "S") c.capacity = value.get<std::size_t>();
      else if (key == "K") c.support = value.get<int>();
      else if (key == "tau") c.tau = value.get<double>();
      else if (key == "learning_rate") c.learning_rate = value.get<double>();
      else if (key == "iterations") c.iterations = value.get<int>();
      else if (key == "beta1") c.beta1 = value.get<double>();
      else if (key == "beta2") c.beta2 = value.get<double>();
      else if (key == "adam_eps") c.adam_eps = value.get<double>();
      else if (key == "loss_scope") c.loss_scope = parse_enum(kScopes, value.get<std::string>(), "loss_scope");
      else if (key == "inference_stats")
        c.inference_stats = parse_enum(kStats, value.get<std::string>(), "inference_stats");
      else if (key == "prompt_kind") c.prompt_kind = parse_enum(kKinds, value.get<std::string>(), "prompt_kind");
      else if (key == "rank") c.rank = value.get<std::size_t>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "use_memory_bank") c.use_memory_bank = value.get<bool>();
      else if (key == "use_warmup") c.use_warmup = value.get<bool>();
      else throw ConfigError("unknown adapter config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("adapter config: ") + e.what());
  }
  c.validate();
}

Adam::Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

std::vector<Tensor> Adam::step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
  if (params.size() != grads.size()) throw ContractViolation("Adam::step: parameter/gradient count mismatch");
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.push_back(Tensor::zeros(p.shape()));
      v_.push_back(Tensor::zeros(p.shape()));
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, t_), c2 = 1.0 - std::pow(beta2_, t_);
  std::vector<Tensor> deltas;
  for (std::size_t k = 0; k < params.size(); ++k) {
    require_same_shape(params[k], grads[k], "Adam::step");
    Tensor d(params[k].shape());
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double g = grads[k][i];
      m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * g;
      v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * g * g;
      d[i] = -lr_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_);
      params[k][i] += d[i];
    }
    deltas.push_back(std::move(d));
  }
  return deltas;
}

double adam_single_step(double grad, double lr, double eps) {
  std::vector<Tensor> p{Tensor::zeros({1})};
  return Adam(lr, 0.9, 0.999, eps).step(p, {Tensor({1}, grad)})[0][0];
}

PromptParams identity_prompt(const AdapterConfig& config, const Shape& image_shape, std::int64_t i) {
  if (config.prompt_kind == PromptKind::LowFrequency) return {LowFrequencyPrompt::ones(image_shape, config.alpha).values};
  std::seed_seq seq{config.seed, static_cast<std::uint64_t>(i)};
  std::mt19937_64 rng(seq);
  auto p = LowRankPrompt::identity(image_shape, config.rank, rng);
  return {std::move(p.b), std::move(p.a)};
}

Var apply_prompt_params(const Var& image, const std::vector<Var>& params, PromptKind kind) {
  if (kind == PromptKind::LowFrequency) {
    if (params.size() != 1) throw ContractViolation("low-frequency prompt has one tensor");
    return apply_prompt(image, params[0]);
  }
  if (params.size() != 2) throw ContractViolation("low-rank prompt has two tensors");
  return apply_lowrank(image, params[0], params[1]);
}

double dice(const Tensor& prediction, const Tensor& mask) {
  if (prediction.size() != mask.size()) {
    throw ConfigError("dice: prediction " + shape_str(prediction.shape()) + " vs mask " + shape_str(mask.shape()));
  }
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const bool p = prediction[i] > 0.5, m = mask[i] > 0.5;
    a += p;
    b += m;
    both += p && m;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

StepResult adapt_step(const Tensor& image, const std::optional<Tensor>& mask, const Model& model, MemoryBank& bank,
                      const AdapterConfig& config, std::int64_t i) {
  config.validate();
  if (i < 1) throw ConfigError("stream index must start at 1");
  if (image.rank() != 3 || image.dim(2) != model.in_channels()) {
    throw ConfigError("adapt_step: image " + shape_str(image.shape()) + " does not fit a model with " +
                      std::to_string(model.in_channels()) + " input channels");
  }
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  const auto bound = model.bind_constants();
  const Var image_var = Var::constant(image);
  const FrequencyKey key = extract_key(image, config.alpha, static_cast<std::uint64_t>(i));

  StepResult out;
  auto& rec = out.record;
  rec.i = i;
  rec.has_mask = mask.has_value();

  const PromptParams fallback = identity_prompt(config, image.shape(), i);
  out.initial = config.use_memory_bank ? bank.initialize_prompt(key, config.support, fallback) : fallback;

  rec.lambda = config.use_warmup ? warmup_lambda(i, config.tau) : 0.0;
  const AlignMode align = config.use_warmup ? AlignMode::Warmup : AlignMode::Source;
  const ForwardOptions adapt_opts{BnMode::Adapt, rec.lambda, config.loss_scope};

  struct Eval {
    Var adapted;
    ForwardResult forward;
    AlignmentReport report;
  };
  auto evaluate = [&](const std::vector<Var>& params, const ForwardOptions& opts) {
    Eval e;
    e.adapted = apply_prompt_params(image_var, params, config.prompt_kind);
    const Var batch = ad::reshape(e.adapted, {1, h, w, c});
    e.forward = model.forward(batch, opts, bound);
    e.report = alignment_loss(e.forward.bn, align, checksum(batch.value().data()));
    return e;
  };

  PromptParams prompt = out.initial;
  Adam adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps);
  bool have_pre = false;
  for (int it = 0; it < config.iterations && !rec.aborted; ++it) {
    std::vector<Var> params;
    for (const auto& t : prompt) params.push_back(Var::parameter(t));
    const Eval e = evaluate(params, adapt_opts);
    if (!have_pre) {
      rec.loss_pre = e.report.total;
      have_pre = true;
    }
    if (!std::isfinite(e.report.total)) {
      rec.aborted = true;
      break;
    }
    ad::backward(e.report.loss);
    std::vector<Tensor> grads;
    for (const auto& p : params) grads.push_back(p.grad());
    if (!all_finite(grads)) {
      rec.aborted = true;
      break;
    }
    const auto deltas = adam.step(prompt, grads);
    if (it == 0) {
      for (std::size_t k = 0; k < deltas.size(); ++k)
        for (std::size_t j = 0; j < deltas[k].size(); ++j)
          if (std::abs(grads[k][j]) > 1e-4)
            rec.max_step_error = std::max(rec.max_step_error, std::abs(std::abs(deltas[k][j]) - config.learning_rate));
    }
  }
  if (!rec.aborted && !all_finite(prompt)) rec.aborted = true;

  auto finish = [&](const PromptParams& p) {
    const auto params = as_constants(p);
    const bool warm_inference = config.inference_stats == InferenceStats::Warmup;
    Eval e = evaluate(params, adapt_opts);
    if (!have_pre) rec.loss_pre = e.report.total;
    rec.loss_post = e.report.total;
    out.adapted_image = e.adapted.value();
    out.probabilities =
        (warm_inference ? e.forward.probabilities
                        : model.forward(ad::reshape(e.adapted, {1, h, w, c}), {BnMode::FrozenEval, 0.0, config.loss_scope},
                                        bound)
                              .probabilities)
            .value()
            .reshaped({h, w, 1});
  };

  if (!rec.aborted) {
    finish(prompt);
    if (!std::isfinite(rec.loss_post) || !out.probabilities.all_finite()) rec.aborted = true;
  }
  if (rec.aborted) {
    std::cerr << "adapt_step " << i << ": non-finite loss or gradient, falling back to the initial prompt\n";
    prompt = out.initial;
    finish(prompt);
  }

  for (std::size_t k = 0; k < prompt.size(); ++k)
    for (std::size_t j = 0; j < prompt[k].size(); ++j)
      rec.max_displacement = std::max(rec.max_displacement, std::abs(prompt[k][j] - out.initial[k][j]));

  if (config.prompt_kind == PromptKind::LowFrequency) {
    double d2 = 0.0;
    for (double v : prompt[0].data()) d2 += (v - 1.0) * (v - 1.0);
    rec.prompt_dist = std::sqrt(d2);
    rec.imag_residue = prompt_imag_residue(image, prompt[0]);
  } else {
    rec.prompt_dist = frobenius_norm(ad::channel_matmul(Var::constant(prompt[0]), Var::constant(prompt[1])).value());
  }

  if (mask) {
    rec.dice_pre = dice(model.forward(image, {BnMode::FrozenEval, 0.0, config.loss_scope}).probabilities.value(), *mask);
    rec.dice_post = dice(out.probabilities, *mask);
  }

  if (config.use_memory_bank) bank.enqueue(key, prompt);
  rec.bank_size = bank.size();
  out.prompt = std::move(prompt);
  return out;
}

namespace {

void accumulate(MeanDice& m, const StreamRecord& r) {
  m.pre += r.dice_pre;
  m.post += r.dice_post;
  m.loss_pre += r.loss_pre;
  m.loss_post += r.loss_post;
  ++m.steps;
}

void finalize(MeanDice& m) {
  if (m.steps == 0) return;
  const double n = static_cast<double>(m.steps);
  m.pre /= n;
  m.post /= n;
  m.loss_pre /= n;
  m.loss_post /= n;
}

Tensor prompt_picture(const PromptParams& p, PromptKind kind) {
  Tensor t = kind == PromptKind::LowFrequency
                 ? p[0]
                 : ad::channel_matmul(Var::constant(p[0]), Var::constant(p[1])).value();
  if (t.dim(2) == 1 || t.dim(2) == 3) return t;
  Tensor first({t.dim(0), t.dim(1), 1});
  for (std::size_t y = 0; y < t.dim(0); ++y)
    for (std::size_t x = 0; x < t.dim(1); ++x) first.at(y, x, 0) = t.at(y, x, 0);
  return first;
}

}  // namespace

StreamResult run_stream(const std::vector<StreamItem>& items, const Model& model, const AdapterConfig& config,
                        const StreamOptions& options) {
  config.validate();
  if (options.rounds < 1) throw ConfigError("rounds must be >= 1");
  for (const auto& item : items) {
    if (item.image.rank() != 3 || item.image.dim(2) != model.in_channels()) {
      throw ConfigError("stream image " + shape_str(item.image.shape()) + " does not fit the model");
    }
    if (item.domain.find_first_of(",\"\n") != std::string::npos) {
      throw ConfigError("domain label '" + item.domain + "' contains CSV metacharacters");
    }
  }
  if (options.dump_dir) std::filesystem::create_directories(*options.dump_dir);

  StreamResult result;
  result.checksum_before = model.checksum();
  MemoryBank bank(config.use_memory_bank ? config.capacity : 0);
  std::int64_t i = 0;
  for (int round = 0; round < options.rounds; ++round) {
    MeanDice round_mean;
    for (const auto& item : items) {
      ++i;
      auto step = adapt_step(item.image, item.mask, model, bank, config, i);
      step.record.domain = item.domain;
      if (options.dump_dir) {
        char stem[32];
        std::snprintf(stem, sizeof stem, "step_%05lld", static_cast<long long>(i));
        write_png(*options.dump_dir / (std::string(stem) + "_adapted.png"), step.adapted_image, true);
        write_png(*options.dump_dir / (std::string(stem) + "_prompt.png"), prompt_picture(step.prompt, config.prompt_kind),
                  true);
      }
      if (!result.per_domain.count(item.domain)) result.domain_order.push_back(item.domain);
      accumulate(result.per_domain[item.domain], step.record);
      accumulate(round_mean, step.record);
      accumulate(result.overall, step.record);
      result.aborted += step.record.aborted;
      result.records.push_back(std::move(step.record));
    }
    finalize(round_mean);
    result.per_round.push_back(round_mean);
  }
  for (auto& [name, m] : result.per_domain) finalize(m);
  finalize(result.overall);
  result.checksum_after = model.checksum();
  return result;
}

std::string format_double(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

void write_records_csv(std::ostream& out, const std::vector<StreamRecord>& records) {
  out << kRecordHeader << '\n';
  for (const auto& r : records) {
    out << r.i << ',' << r.domain << ',' << format_double(r.lambda) << ',' << format_double(r.loss_pre) << ','
        << format_double(r.loss_post) << ',' << format_double(r.dice_pre) << ',' << format_double(r.dice_post) << ','
        << r.bank_size << ',' << format_double(r.prompt_dist) << ',' << format_double(r.imag_residue) << '\n';
  }
}

namespace {

nlohmann::json mean_json(const MeanDice& m) {
  return {{"dice_pre", m.pre}, {"dice_post", m.post}, {"loss_pre", m.loss_pre}, {"loss_post", m.loss_post},
          {"steps", m.steps}};
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

nlohmann::json stream_summary(const StreamResult& result) {
  nlohmann::json domains = nlohmann::json::array();
  for (const auto& name : result.domain_order) {
    auto j = mean_json(result.per_domain.at(name));
    j["domain"] = name;
    domains.push_back(j);
  }
  nlohmann::json rounds = nlohmann::json::array();
  for (std::size_t r = 0; r < result.per_round.size(); ++r) {
    auto j = mean_json(result.per_round[r]);
    j["round"] = r + 1;
    rounds.push_back(j);
  }
  const double degradation =
      result.per_round.empty() ? 0.0 : result.per_round.front().post - result.overall.post;
  return {{"steps", result.records.size()},
          {"overall", mean_json(result.overall)},
          {"per_domain", domains},
          {"per_round", rounds},
          {"degradation", degradation},
          {"aborted", result.aborted},
          {"model_checksum_before", hex(result.checksum_before)},
          {"model_checksum_after", hex(result.checksum_after)}};
}

}  // namespace vptta
