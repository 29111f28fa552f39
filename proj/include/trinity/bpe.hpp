#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "trinity/pretokenize.hpp"

namespace trinity {

/// Byte-level BPE model. Token ids are laid out as
///   [0, 256)                       raw bytes,
///   [256, 256 + specials)          special tokens,
///   [256 + specials, vocab_size)   merge results in rank order,
/// so truncating merges by rank never renumbers surviving tokens.
class BpeModel {
 public:
  struct Merge {
    int32_t left;
    int32_t right;
  };

  BpeModel() = default;
  BpeModel(std::vector<std::string> specials, std::vector<Merge> merges);

  int32_t vocab_size() const { return static_cast<int32_t>(256 + specials_.size() + merges_.size()); }
  int32_t special_count() const { return static_cast<int32_t>(specials_.size()); }
  int32_t merge_count() const { return static_cast<int32_t>(merges_.size()); }
  const std::vector<Merge>& merges() const { return merges_; }
  const std::vector<std::string>& specials() const { return specials_; }

  /// Byte sequence a token id decodes to.
  const std::string& token_bytes(int32_t id) const { return token_bytes_[static_cast<size_t>(id)]; }

  /// Merge rank for a symbol pair, or -1 when the pair never merges.
  int32_t merge_rank(int32_t left, int32_t right) const;
  int32_t merged_id(int32_t rank) const { return static_cast<int32_t>(256 + specials_.size()) + rank; }

  /// Applies merges in rank order to one pretoken's bytes.
  void encode_word(std::string_view bytes, std::vector<int32_t>& out) const;

  /// Keeps the first merges so that vocab_size() == new_vocab_size.
  BpeModel truncated(int32_t new_vocab_size) const;

  void save(const std::string& path) const;
  static BpeModel load(const std::string& path);

 private:
  std::vector<std::string> specials_;
  std::vector<Merge> merges_;
  std::vector<std::string> token_bytes_;
  std::unordered_map<uint64_t, int32_t> rank_by_pair_;

  void rebuild_tables();
};

/// Trains by greedy highest-frequency pair merging over pretoken boundaries.
/// Ties break by lexicographic byte order of the pair. Deterministic.
/// Throws when the corpus is empty or vocab_size < 256 + specials.
BpeModel train_bpe(std::span<const std::string> corpus, int32_t vocab_size,
                   std::vector<std::string> specials = {},
                   const ScriptTable& table = ScriptTable::defaults());

/// Pretokenizes then BPE-encodes; byte fallback guarantees coverage.
std::vector<int32_t> encode(const BpeModel& model, std::string_view text,
                            const ScriptTable& table = ScriptTable::defaults());

/// Inverse of encode for any id sequence (specials decode to their text).
std::string decode(const BpeModel& model, std::span<const int32_t> ids);

struct EfficiencyMetrics {
  double bytes_per_token;
  double chars_per_token;
  int64_t total_bytes;
  int64_t total_chars;
  int64_t total_tokens;
};

/// Corpus-level compression measures; throws when the corpus encodes to
/// zero tokens.
EfficiencyMetrics efficiency_metrics(const BpeModel& model, std::span<const std::string> corpus,
                                     const ScriptTable& table = ScriptTable::defaults());

}  // namespace trinity
