#include "trinity/bpe.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <queue>
#include <stdexcept>

#include <json.hpp>

namespace trinity {

namespace {

uint64_t pack_pair(int32_t l, int32_t r) {
  return (static_cast<uint64_t>(static_cast<uint32_t>(l)) << 32) | static_cast<uint32_t>(r);
}

}  // namespace

BpeModel::BpeModel(std::vector<std::string> specials, std::vector<Merge> merges)
    : specials_(std::move(specials)), merges_(std::move(merges)) {
  rebuild_tables();
}

void BpeModel::rebuild_tables() {
  token_bytes_.clear();
  token_bytes_.reserve(static_cast<size_t>(vocab_size()));
  for (int b = 0; b < 256; ++b) token_bytes_.emplace_back(1, static_cast<char>(b));
  for (const std::string& s : specials_) token_bytes_.push_back(s);
  rank_by_pair_.clear();
  rank_by_pair_.reserve(merges_.size() * 2);
  for (size_t rank = 0; rank < merges_.size(); ++rank) {
    const Merge& m = merges_[rank];
    const int32_t limit = static_cast<int32_t>(token_bytes_.size());
    if (m.left < 0 || m.left >= limit || m.right < 0 || m.right >= limit) {
      throw std::invalid_argument("BpeModel: merge rank " + std::to_string(rank) + " references unknown token");
    }
    token_bytes_.push_back(token_bytes_[static_cast<size_t>(m.left)] + token_bytes_[static_cast<size_t>(m.right)]);
    rank_by_pair_.emplace(pack_pair(m.left, m.right), static_cast<int32_t>(rank));
  }
}

int32_t BpeModel::merge_rank(int32_t left, int32_t right) const {
  auto it = rank_by_pair_.find(pack_pair(left, right));
  return it == rank_by_pair_.end() ? -1 : it->second;
}

void BpeModel::encode_word(std::string_view bytes, std::vector<int32_t>& out) const {
  const size_t start = out.size();
  for (unsigned char c : bytes) out.push_back(static_cast<int32_t>(c));
  if (bytes.size() < 2 || merges_.empty()) return;

  std::vector<int32_t> symbols(out.begin() + static_cast<ptrdiff_t>(start), out.end());
  out.resize(start);
  while (symbols.size() >= 2) {
    int32_t best_rank = std::numeric_limits<int32_t>::max();
    for (size_t i = 0; i + 1 < symbols.size(); ++i) {
      const int32_t r = merge_rank(symbols[i], symbols[i + 1]);
      if (r >= 0 && r < best_rank) best_rank = r;
    }
    if (best_rank == std::numeric_limits<int32_t>::max()) break;
    const Merge m = merges_[static_cast<size_t>(best_rank)];
    const int32_t merged = merged_id(best_rank);
    size_t w = 0;
    for (size_t i = 0; i < symbols.size();) {
      if (i + 1 < symbols.size() && symbols[i] == m.left && symbols[i + 1] == m.right) {
        symbols[w++] = merged;
        i += 2;
      } else {
        symbols[w++] = symbols[i++];
      }
    }
    symbols.resize(w);
  }
  out.insert(out.end(), symbols.begin(), symbols.end());
}

BpeModel BpeModel::truncated(int32_t new_vocab_size) const {
  const int32_t floor_size = static_cast<int32_t>(256 + specials_.size());
  if (new_vocab_size < floor_size || new_vocab_size > vocab_size()) {
    throw std::invalid_argument("BpeModel: truncation target " + std::to_string(new_vocab_size) +
                                " outside [" + std::to_string(floor_size) + ", " + std::to_string(vocab_size()) + "]");
  }
  std::vector<Merge> kept(merges_.begin(), merges_.begin() + (new_vocab_size - floor_size));
  return BpeModel(specials_, std::move(kept));
}

void BpeModel::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("BpeModel: cannot open " + path + " for writing");
  nlohmann::json header = {
      {"format", "trinity-bpe"},
      {"version", 1},
      {"vocab_size", vocab_size()},
      {"special_count", special_count()},
      {"merge_count", merge_count()},
  };
  out << header.dump() << "\n";
  for (size_t rank = 0; rank < merges_.size(); ++rank) {
    nlohmann::json rec = {{"rank", rank}, {"left", merges_[rank].left}, {"right", merges_[rank].right}};
    out << rec.dump() << "\n";
  }
  for (size_t i = 0; i < specials_.size(); ++i) {
    nlohmann::json rec = {{"special", i}, {"id", 256 + i}, {"text", specials_[i]}};
    out << rec.dump() << "\n";
  }
  if (!out) throw std::runtime_error("BpeModel: write failed for " + path);
}

BpeModel BpeModel::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("BpeModel: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("BpeModel: empty model file " + path);
  nlohmann::json header = nlohmann::json::parse(line);
  if (header.value("format", "") != "trinity-bpe") {
    throw std::runtime_error("BpeModel: unrecognized format in " + path);
  }
  if (header.value("version", 0) != 1) throw std::runtime_error("BpeModel: unsupported version in " + path);
  const int32_t merge_count = header.at("merge_count").get<int32_t>();
  const int32_t special_count = header.at("special_count").get<int32_t>();

  std::vector<Merge> merges(static_cast<size_t>(merge_count));
  std::vector<std::string> specials(static_cast<size_t>(special_count));
  for (int32_t i = 0; i < merge_count; ++i) {
    if (!std::getline(in, line)) throw std::runtime_error("BpeModel: truncated merge records in " + path);
    nlohmann::json rec = nlohmann::json::parse(line);
    const int32_t rank = rec.at("rank").get<int32_t>();
    if (rank != i) throw std::runtime_error("BpeModel: merge records out of rank order in " + path);
    merges[static_cast<size_t>(i)] = {rec.at("left").get<int32_t>(), rec.at("right").get<int32_t>()};
  }
  for (int32_t i = 0; i < special_count; ++i) {
    if (!std::getline(in, line)) throw std::runtime_error("BpeModel: truncated special records in " + path);
    nlohmann::json rec = nlohmann::json::parse(line);
    specials[static_cast<size_t>(rec.at("special").get<int32_t>())] = rec.at("text").get<std::string>();
  }
  BpeModel model(std::move(specials), std::move(merges));
  if (model.vocab_size() != header.at("vocab_size").get<int32_t>()) {
    throw std::runtime_error("BpeModel: vocab_size header mismatch in " + path);
  }
  return model;
}

namespace {

struct TrainWord {
  std::vector<int32_t> symbols;
  int64_t count;
};

struct PairStats {
  std::unordered_map<uint64_t, int64_t> counts;
  std::unordered_map<uint64_t, std::vector<int32_t>> words;  // may hold stale word ids

  void add_word_pairs(const TrainWord& w, int32_t word_id, bool track_words) {
    for (size_t i = 0; i + 1 < w.symbols.size(); ++i) {
      const uint64_t key = pack_pair(w.symbols[i], w.symbols[i + 1]);
      counts[key] += w.count;
      if (track_words) {
        auto& lst = words[key];
        if (lst.empty() || lst.back() != word_id) lst.push_back(word_id);
      }
    }
  }

  void remove_word_pairs(const TrainWord& w) {
    for (size_t i = 0; i + 1 < w.symbols.size(); ++i) {
      counts[pack_pair(w.symbols[i], w.symbols[i + 1])] -= w.count;
    }
  }
};

}  // namespace

BpeModel train_bpe(std::span<const std::string> corpus, int32_t vocab_size,
                   std::vector<std::string> specials, const ScriptTable& table) {
  const int32_t floor_size = static_cast<int32_t>(256 + specials.size());
  if (vocab_size < floor_size) {
    throw std::invalid_argument("train_bpe: vocab_size " + std::to_string(vocab_size) + " below byte floor " +
                                std::to_string(floor_size));
  }
  bool any_text = false;
  for (const std::string& doc : corpus) {
    if (!doc.empty()) any_text = true;
  }
  if (corpus.empty() || !any_text) throw std::runtime_error("train_bpe: empty corpus");

  // Pretoken frequency table; merges never cross pretoken boundaries.
  std::unordered_map<std::string, int64_t> word_counts;
  std::vector<Pretoken> spans;
  for (const std::string& doc : corpus) {
    pretokenize_into(doc, spans, table);
    for (const Pretoken& p : spans) {
      word_counts[doc.substr(static_cast<size_t>(p.begin), static_cast<size_t>(p.end - p.begin))] += 1;
    }
  }

  std::vector<TrainWord> words;
  words.reserve(word_counts.size());
  for (const auto& [text, count] : word_counts) {
    TrainWord w;
    w.count = count;
    w.symbols.reserve(text.size());
    for (unsigned char c : text) w.symbols.push_back(static_cast<int32_t>(c));
    words.push_back(std::move(w));
  }

  PairStats stats;
  for (size_t i = 0; i < words.size(); ++i) stats.add_word_pairs(words[i], static_cast<int32_t>(i), true);

  std::vector<BpeModel::Merge> merges;
  std::vector<std::string> token_bytes;
  for (int b = 0; b < 256; ++b) token_bytes.emplace_back(1, static_cast<char>(b));
  for (const std::string& s : specials) token_bytes.push_back(s);

  // Max-heap on (count, lexicographically smallest pair bytes). Entries go
  // stale when counts change; validated on pop.
  struct Entry {
    int64_t count;
    int32_t left, right;
  };
  auto later = [&token_bytes](const Entry& a, const Entry& b) {
    if (a.count != b.count) return a.count < b.count;
    const std::string& al = token_bytes[static_cast<size_t>(a.left)];
    const std::string& bl = token_bytes[static_cast<size_t>(b.left)];
    if (al != bl) return al > bl;
    return token_bytes[static_cast<size_t>(a.right)] > token_bytes[static_cast<size_t>(b.right)];
  };
  std::priority_queue<Entry, std::vector<Entry>, decltype(later)> heap(later);
  for (const auto& [key, count] : stats.counts) {
    if (count > 0) heap.push({count, static_cast<int32_t>(key >> 32), static_cast<int32_t>(key & 0xffffffff)});
  }

  const int32_t target_merges = vocab_size - floor_size;
  while (static_cast<int32_t>(merges.size()) < target_merges && !heap.empty()) {
    Entry top = heap.top();
    heap.pop();
    const uint64_t key = pack_pair(top.left, top.right);
    auto it = stats.counts.find(key);
    const int64_t current = it == stats.counts.end() ? 0 : it->second;
    if (current <= 0) continue;
    if (current != top.count) {
      heap.push({current, top.left, top.right});
      continue;
    }

    const int32_t merged = static_cast<int32_t>(token_bytes.size());
    merges.push_back({top.left, top.right});
    token_bytes.push_back(token_bytes[static_cast<size_t>(top.left)] + token_bytes[static_cast<size_t>(top.right)]);

    auto word_ids = std::move(stats.words[key]);
    stats.words.erase(key);
    stats.counts.erase(key);
    for (int32_t wi : word_ids) {
      TrainWord& w = words[static_cast<size_t>(wi)];
      bool contains = false;
      for (size_t i = 0; i + 1 < w.symbols.size(); ++i) {
        if (w.symbols[i] == top.left && w.symbols[i + 1] == top.right) {
          contains = true;
          break;
        }
      }
      if (!contains) continue;  // stale membership entry
      stats.remove_word_pairs(w);
      size_t wpos = 0;
      for (size_t i = 0; i < w.symbols.size();) {
        if (i + 1 < w.symbols.size() && w.symbols[i] == top.left && w.symbols[i + 1] == top.right) {
          w.symbols[wpos++] = merged;
          i += 2;
        } else {
          w.symbols[wpos++] = w.symbols[i++];
        }
      }
      w.symbols.resize(wpos);
      stats.add_word_pairs(w, wi, true);
      // Newly created or re-counted pairs need fresh heap entries.
      for (size_t i = 0; i + 1 < w.symbols.size(); ++i) {
        const uint64_t k = pack_pair(w.symbols[i], w.symbols[i + 1]);
        heap.push({stats.counts[k], w.symbols[i], w.symbols[i + 1]});
      }
    }
  }

  return BpeModel(std::move(specials), std::move(merges));
}

std::vector<int32_t> encode(const BpeModel& model, std::string_view text, const ScriptTable& table) {
  std::vector<int32_t> out;
  if (text.empty()) return out;
  out.reserve(text.size() / 2 + 8);
  std::vector<Pretoken> spans;
  pretokenize_into(text, spans, table);
  for (const Pretoken& p : spans) {
    model.encode_word(text.substr(static_cast<size_t>(p.begin), static_cast<size_t>(p.end - p.begin)), out);
  }
  return out;
}

std::string decode(const BpeModel& model, std::span<const int32_t> ids) {
  std::string out;
  for (int32_t id : ids) {
    if (id < 0 || id >= model.vocab_size()) {
      throw std::invalid_argument("decode: token id " + std::to_string(id) + " outside vocabulary of size " +
                                  std::to_string(model.vocab_size()));
    }
    out += model.token_bytes(id);
  }
  return out;
}

EfficiencyMetrics efficiency_metrics(const BpeModel& model, std::span<const std::string> corpus,
                                     const ScriptTable& table) {
  EfficiencyMetrics m{0, 0, 0, 0, 0};
  for (const std::string& doc : corpus) {
    m.total_bytes += static_cast<int64_t>(doc.size());
    m.total_chars += count_codepoints(doc);
    m.total_tokens += static_cast<int64_t>(encode(model, doc, table).size());
  }
  if (m.total_tokens == 0) throw std::runtime_error("efficiency_metrics: corpus encodes to zero tokens");
  m.bytes_per_token = static_cast<double>(m.total_bytes) / static_cast<double>(m.total_tokens);
  m.chars_per_token = static_cast<double>(m.total_chars) / static_cast<double>(m.total_tokens);
  return m;
}

}  // namespace trinity
