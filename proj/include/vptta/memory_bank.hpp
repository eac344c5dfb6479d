// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <vector>

#include "vptta/prompt.hpp"
#include "vptta/tensor.hpp"

namespace vptta {

/// Prompt parameters as stored in the bank: one tensor for the
/// low-frequency prompt, (B, A) for the low-rank one.
using PromptParams = std::vector<Tensor>;

struct BankEntry {
  FrequencyKey key;
  PromptParams value;
  std::uint64_t insert_index = 0;
};

struct SupportItem {
  const BankEntry* entry = nullptr;
  double similarity = 0.0;
  double weight = 0.0;
};

/// Top-K entries, most similar first; weights sum to one when nonempty.
struct SupportSet {
  std::vector<SupportItem> items;
  bool empty() const { return items.empty(); }
  std::size_t size() const { return items.size(); }
};

/// <a, b> / (|a| |b|); 0 when either vector is zero.
double cosine_similarity(std::span<const double> a, std::span<const double> b);
double cosine_similarity(const FrequencyKey& a, const FrequencyKey& b);

/// FIFO store of (low-frequency key, prompt) pairs with capacity S.
class MemoryBank {
 public:
  explicit MemoryBank(std::size_t capacity) : capacity_(capacity) {}

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::uint64_t inserts() const { return next_index_; }
  std::uint64_t evictions() const { return evictions_; }
  const std::deque<BankEntry>& entries() const { return entries_; }

  /// Appends; evicts the oldest entry once the size exceeds the capacity.
  void enqueue(FrequencyKey key, PromptParams value);

  /// Top-K by cosine similarity, ties going to the newer entry. Weights are
  /// the clamped similarities max(s, 0) normalized to sum one, or uniform
  /// when every clamped similarity is zero.
  SupportSet retrieve(const FrequencyKey& query, int k) const;

  /// Similarity-weighted sum of the top-K values, or `fallback` while the
  /// bank holds fewer than K entries.
  PromptParams initialize_prompt(const FrequencyKey& query, int k, const PromptParams& fallback) const;

  /// Directory of key_<n>.vpt / value_<n>_<j>.vpt plus manifest.json
  /// {capacity, order}.
  void save(const std::filesystem::path& dir) const;
  static MemoryBank load(const std::filesystem::path& dir);

 private:
  std::size_t capacity_;
  std::deque<BankEntry> entries_;
  std::uint64_t next_index_ = 0;
  std::uint64_t evictions_ = 0;
};

}  // namespace vptta
