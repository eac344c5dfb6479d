// SPDX-License-Identifier: Apache-2.0
#include "vptta/memory_bank.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "json.hpp"

namespace vptta {

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ConfigError("cosine_similarity: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

double cosine_similarity(const FrequencyKey& a, const FrequencyKey& b) {
  return cosine_similarity(a.values.data(), b.values.data());
}

void MemoryBank::enqueue(FrequencyKey key, PromptParams value) {
  if (!entries_.empty()) {
    const auto& front = entries_.front();
    if (key.values.shape() != front.key.values.shape()) {
      throw ConfigError("memory bank key shape " + shape_str(key.values.shape()) + " does not match stored " +
                        shape_str(front.key.values.shape()));
    }
    if (value.size() != front.value.size()) throw ConfigError("memory bank value arity mismatch");
    for (std::size_t j = 0; j < value.size(); ++j) {
      if (value[j].shape() != front.value[j].shape()) throw ConfigError("memory bank value shape mismatch");
    }
  }
  entries_.push_back({std::move(key), std::move(value), next_index_++});
  while (entries_.size() > capacity_) {
    entries_.pop_front();
    ++evictions_;
  }
}

SupportSet MemoryBank::retrieve(const FrequencyKey& query, int k) const {
  if (k <= 0) throw ConfigError("support size K must be positive");
  if (!entries_.empty() && query.values.shape() != entries_.front().key.values.shape()) {
    throw ConfigError("query key shape does not match the memory bank");
  }
  SupportSet out;
  out.items.reserve(entries_.size());
  for (const auto& e : entries_) out.items.push_back({&e, cosine_similarity(query, e.key), 0.0});
  std::sort(out.items.begin(), out.items.end(), [](const SupportItem& a, const SupportItem& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.entry->insert_index > b.entry->insert_index;
  });
  if (out.items.size() > static_cast<std::size_t>(k)) out.items.resize(static_cast<std::size_t>(k));

  double total = 0.0;
  for (const auto& item : out.items) total += std::max(item.similarity, 0.0);
  for (auto& item : out.items) {
    item.weight = total > 0.0 ? std::max(item.similarity, 0.0) / total : 1.0 / static_cast<double>(out.items.size());
  }
  return out;
}

PromptParams MemoryBank::initialize_prompt(const FrequencyKey& query, int k, const PromptParams& fallback) const {
  if (k <= 0) throw ConfigError("support size K must be positive");
  if (entries_.size() < static_cast<std::size_t>(k)) return fallback;
  const auto support = retrieve(query, k);
  PromptParams out;
  for (const auto& t : support.items.front().entry->value) out.push_back(Tensor::zeros(t.shape()));
  for (const auto& item : support.items) {
    for (std::size_t j = 0; j < out.size(); ++j) {
      const auto& v = item.entry->value[j];
      for (std::size_t i = 0; i < v.size(); ++i) out[j][i] += item.weight * v[i];
    }
  }
  return out;
}

void MemoryBank::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json order = nlohmann::json::array();
  for (std::size_t n = 0; n < entries_.size(); ++n) {
    const auto& e = entries_[n];
    write_vpt(dir / ("key_" + std::to_string(n) + ".vpt"), e.key.values);
    for (std::size_t j = 0; j < e.value.size(); ++j) {
      write_vpt(dir / ("value_" + std::to_string(n) + "_" + std::to_string(j) + ".vpt"), e.value[j]);
    }
    order.push_back({{"slot", n},
                     {"insert_index", e.insert_index},
                     {"source_id", e.key.source_id},
                     {"value_tensors", e.value.size()}});
  }
  nlohmann::json manifest = {
      {"capacity", capacity_}, {"order", order}, {"inserts", next_index_}, {"evictions", evictions_}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

MemoryBank MemoryBank::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ConfigError("no memory-bank manifest in " + dir.string());
  const auto manifest = nlohmann::json::parse(in);
  MemoryBank bank(manifest.at("capacity").get<std::size_t>());
  for (const auto& slot : manifest.at("order")) {
    const auto n = slot.at("slot").get<std::size_t>();
    BankEntry e;
    e.key = {read_vpt(dir / ("key_" + std::to_string(n) + ".vpt")), slot.at("source_id").get<std::uint64_t>()};
    for (std::size_t j = 0; j < slot.at("value_tensors").get<std::size_t>(); ++j) {
      e.value.push_back(read_vpt(dir / ("value_" + std::to_string(n) + "_" + std::to_string(j) + ".vpt")));
    }
    e.insert_index = slot.at("insert_index").get<std::uint64_t>();
    bank.entries_.push_back(std::move(e));
  }
  bank.next_index_ = manifest.at("inserts").get<std::uint64_t>();
  bank.evictions_ = manifest.at("evictions").get<std::uint64_t>();
  return bank;
}

}  // namespace vptta
