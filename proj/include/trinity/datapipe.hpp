#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "trinity/rng.hpp"

namespace trinity {

struct Document {
  std::vector<int32_t> tokens;
  int32_t domain = 0;
};

class DocumentStream {
 public:
  virtual ~DocumentStream() = default;
  virtual std::optional<Document> next() = 0;
};

class VectorDocumentStream : public DocumentStream {
 public:
  explicit VectorDocumentStream(std::vector<Document> docs) : docs_(std::move(docs)) {}
  std::optional<Document> next() override {
    if (pos_ >= docs_.size()) return std::nullopt;
    return docs_[pos_++];
  }

 private:
  std::vector<Document> docs_;
  size_t pos_ = 0;
};

/// Lognormal document lengths, categorical domain labels, tokens drawn from
/// per-domain disjoint vocabulary bands so domain imbalance is measurable
/// from token histograms alone.
struct SynthCorpusParams {
  int64_t count = 0;
  double length_mu = 6.0;
  double length_sigma = 1.0;
  std::vector<double> domain_weights = {0.8, 0.2};
  int64_t vocab_band = 256;
  uint64_t seed = 1;
};

class SynthCorpusStream : public DocumentStream {
 public:
  explicit SynthCorpusStream(SynthCorpusParams params);
  std::optional<Document> next() override;

 private:
  SynthCorpusParams params_;
  Rng rng_;
  int64_t produced_ = 0;
  std::vector<double> cumulative_;
};

std::vector<Document> synth_corpus(const SynthCorpusParams& params);

/// Provenance of a stretch of tokens inside a sequence buffer.
struct SpanRecord {
  int64_t doc_id;      // running index in stream arrival order
  int64_t buf_offset;  // where the stretch starts in the buffer
  int64_t doc_offset;  // where it starts in the document
  int64_t len;
  int32_t domain;
  bool operator==(const SpanRecord&) const = default;
};

/// Exactly-full packed sequence; spans tile [0, seq_len).
struct SequenceBuffer {
  std::vector<int32_t> tokens;
  std::vector<SpanRecord> spans;
};

/// Baseline packer: documents concatenated in arrival order, a document
/// crossing the boundary continues into the next buffer, the final partial
/// buffer is withheld.
class SequentialPacker {
 public:
  SequentialPacker(DocumentStream& source, int64_t seq_len);
  std::optional<SequenceBuffer> next();

 private:
  DocumentStream& source_;
  int64_t seq_len_;
  std::optional<Document> pending_;
  int64_t pending_offset_ = 0;
  int64_t next_doc_id_ = 0;
};

/// Random Sequential Document Buffer: a pool of partially consumed documents
/// with read heads. Each fill step samples a resident document uniformly and
/// copies from its read head. The internal capacity is twice the configured
/// value; a bulk refill runs whenever the resident count falls to the
/// configured value.
class Rsdb {
 public:
  Rsdb(DocumentStream& source, int64_t user_capacity, uint64_t seed);

  std::optional<SequenceBuffer> next_sequence(int64_t seq_len);

  /// Bulk refill toward internal_capacity(); purges nothing (consumed
  /// entries are evicted as soon as their read head hits the end).
  void refill();

  int64_t resident_count() const { return static_cast<int64_t>(resident_.size()); }
  int64_t user_capacity() const { return user_capacity_; }
  int64_t internal_capacity() const { return 2 * user_capacity_; }
  bool source_exhausted() const { return source_done_; }

 private:
  struct Entry {
    Document doc;
    int64_t head = 0;
    int64_t id = 0;
  };

  DocumentStream& source_;
  int64_t user_capacity_;
  Rng rng_;
  std::vector<Entry> resident_;
  int64_t next_doc_id_ = 0;
  bool source_done_ = false;
};

/// max(losses) - mean(losses); throws on empty input.
double batch_het(std::span<const double> losses);

struct PackStepRecord {
  int64_t step;
  double batch_het;
  double max_loss;
  double mean_loss;
};

struct PackBenchSummary {
  int64_t steps = 0;
  double mean_sequential = 0.0;
  double mean_rsdb = 0.0;
  double ratio = 0.0;       // mean_rsdb / mean_sequential
  double ci_low = 0.0;      // bootstrap 95% interval for the ratio
  double ci_high = 0.0;
  double frac_rsdb_lower = 0.0;
  double kurtosis_sequential = 0.0;  // Pearson kurtosis of the BatchHet series
  double kurtosis_rsdb = 0.0;
};

struct PackBenchParams {
  SynthCorpusParams corpus;  // corpus.count == 0 sizes the stream automatically
  int64_t seq_len = 1024;
  int64_t microbatches = 8;
  int64_t seqs_per_microbatch = 4;
  int64_t steps = 2000;
  int64_t rsdb_capacity = 1024;
  uint64_t rsdb_seed = 99;
  bool run_sequential = true;
  bool run_rsdb = true;
  int64_t bootstrap_resamples = 1000;
  uint64_t bootstrap_seed = 7;
};

struct PackBenchResult {
  std::vector<PackStepRecord> sequential;
  std::vector<PackStepRecord> rsdb;
  PackBenchSummary summary;
};

/// Paired packing benchmark over identically seeded corpus copies. The
/// per-microbatch proxy loss is the per-domain unigram cross-entropy under
/// the corpus's own generating distribution, so the comparison isolates
/// packing rather than learning dynamics.
PackBenchResult packing_comparison(const PackBenchParams& params);

}  // namespace trinity
