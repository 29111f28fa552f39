#include "trinity/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace trinity {

SynthCorpusStream::SynthCorpusStream(SynthCorpusParams params)
    : params_(std::move(params)), rng_(params_.seed) {
  if (params_.count < 0 || params_.length_sigma < 0 || params_.vocab_band < 1) {
    throw std::invalid_argument("SynthCorpusStream: invalid parameters");
  }
  if (params_.domain_weights.empty()) throw std::invalid_argument("SynthCorpusStream: no domains");
  double total = 0.0;
  for (double w : params_.domain_weights) {
    if (w <= 0.0) throw std::invalid_argument("SynthCorpusStream: domain weights must be positive");
    total += w;
    cumulative_.push_back(total);
  }
  for (double& c : cumulative_) c /= total;
}

std::optional<Document> SynthCorpusStream::next() {
  if (produced_ >= params_.count) return std::nullopt;
  ++produced_;
  Document doc;
  const double z = params_.length_sigma == 0.0 ? 0.0 : rng_.normal();
  const double raw = std::exp(params_.length_mu + params_.length_sigma * z);
  const int64_t len = std::max<int64_t>(1, std::llround(raw));
  const double u = rng_.uniform();
  int32_t domain = 0;
  while (domain + 1 < static_cast<int32_t>(cumulative_.size()) && u >= cumulative_[static_cast<size_t>(domain)]) {
    ++domain;
  }
  doc.domain = domain;
  doc.tokens.resize(static_cast<size_t>(len));
  const int64_t base = static_cast<int64_t>(domain) * params_.vocab_band;
  for (int32_t& t : doc.tokens) {
    t = static_cast<int32_t>(base + static_cast<int64_t>(rng_.uniform_below(static_cast<uint64_t>(params_.vocab_band))));
  }
  return doc;
}

std::vector<Document> synth_corpus(const SynthCorpusParams& params) {
  SynthCorpusStream stream(params);
  std::vector<Document> docs;
  docs.reserve(static_cast<size_t>(params.count));
  while (auto doc = stream.next()) docs.push_back(std::move(*doc));
  return docs;
}

SequentialPacker::SequentialPacker(DocumentStream& source, int64_t seq_len)
    : source_(source), seq_len_(seq_len) {
  if (seq_len < 1) throw std::invalid_argument("SequentialPacker: seq_len must be >= 1");
}

std::optional<SequenceBuffer> SequentialPacker::next() {
  SequenceBuffer buf;
  buf.tokens.reserve(static_cast<size_t>(seq_len_));
  while (static_cast<int64_t>(buf.tokens.size()) < seq_len_) {
    if (!pending_) {
      pending_ = source_.next();
      pending_offset_ = 0;
      if (!pending_) return std::nullopt;  // partial final buffer withheld
      ++next_doc_id_;
    }
    const int64_t doc_len = static_cast<int64_t>(pending_->tokens.size());
    const int64_t space = seq_len_ - static_cast<int64_t>(buf.tokens.size());
    const int64_t take = std::min(space, doc_len - pending_offset_);
    buf.spans.push_back({next_doc_id_ - 1, static_cast<int64_t>(buf.tokens.size()), pending_offset_, take,
                         pending_->domain});
    buf.tokens.insert(buf.tokens.end(), pending_->tokens.begin() + pending_offset_,
                      pending_->tokens.begin() + pending_offset_ + take);
    pending_offset_ += take;
    if (pending_offset_ == doc_len) {
      pending_.reset();
      pending_offset_ = 0;
    }
  }
  return buf;
}

Rsdb::Rsdb(DocumentStream& source, int64_t user_capacity, uint64_t seed)
    : source_(source), user_capacity_(user_capacity), rng_(seed) {
  if (user_capacity < 1) throw std::invalid_argument("Rsdb: capacity must be >= 1");
  refill();
}

void Rsdb::refill() {
  while (!source_done_ && resident_count() < internal_capacity()) {
    auto doc = source_.next();
    if (!doc) {
      source_done_ = true;
      break;
    }
    resident_.push_back({std::move(*doc), 0, next_doc_id_++});
  }
}

std::optional<SequenceBuffer> Rsdb::next_sequence(int64_t seq_len) {
  if (seq_len < 1) throw std::invalid_argument("Rsdb: seq_len must be >= 1");
  SequenceBuffer buf;
  buf.tokens.reserve(static_cast<size_t>(seq_len));
  while (static_cast<int64_t>(buf.tokens.size()) < seq_len) {
    if (resident_.empty()) {
      refill();
      if (resident_.empty()) return std::nullopt;  // drained: partial withheld
    }
    const size_t pick = static_cast<size_t>(rng_.uniform_below(resident_.size()));
    Entry& e = resident_[pick];
    const int64_t doc_len = static_cast<int64_t>(e.doc.tokens.size());
    const int64_t space = seq_len - static_cast<int64_t>(buf.tokens.size());
    const int64_t take = std::min(space, doc_len - e.head);
    buf.spans.push_back({e.id, static_cast<int64_t>(buf.tokens.size()), e.head, take, e.doc.domain});
    buf.tokens.insert(buf.tokens.end(), e.doc.tokens.begin() + e.head, e.doc.tokens.begin() + e.head + take);
    e.head += take;
    if (e.head == doc_len) {
      resident_[pick] = std::move(resident_.back());
      resident_.pop_back();
    }
  }
  if (resident_count() <= user_capacity_) refill();
  return buf;
}

double batch_het(std::span<const double> losses) {
  if (losses.empty()) throw std::invalid_argument("batch_het: no microbatch losses");
  double mx = losses[0], mean = 0.0;
  for (double l : losses) {
    mx = std::max(mx, l);
    mean += l;
  }
  mean /= static_cast<double>(losses.size());
  return mx - mean;
}

namespace {

double pearson_kurtosis(std::span<const double> xs) {
  const double n = static_cast<double>(xs.size());
  if (xs.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= n;
  double m2 = 0.0, m4 = 0.0;
  for (double x : xs) {
    const double d = x - mean;
    m2 += d * d;
    m4 += d * d * d * d;
  }
  m2 /= n;
  m4 /= n;
  if (m2 == 0.0) return 0.0;
  return m4 / (m2 * m2);
}

struct ProxyLoss {
  std::vector<double> per_domain;  // -log(weight_d / band)
  explicit ProxyLoss(const SynthCorpusParams& p) {
    double total = 0.0;
    for (double w : p.domain_weights) total += w;
    for (double w : p.domain_weights) {
      per_domain.push_back(-std::log((w / total) / static_cast<double>(p.vocab_band)));
    }
  }
  double microbatch_loss(std::span<const SequenceBuffer> seqs) const {
    double acc = 0.0;
    int64_t tokens = 0;
    for (const SequenceBuffer& s : seqs) {
      for (const SpanRecord& span : s.spans) {
        acc += static_cast<double>(span.len) * per_domain[static_cast<size_t>(span.domain)];
        tokens += span.len;
      }
    }
    return acc / static_cast<double>(tokens);
  }
};

template <typename NextSeq>
bool run_arm(const PackBenchParams& p, const ProxyLoss& proxy, NextSeq&& next_seq,
             std::vector<PackStepRecord>& out) {
  const int64_t per_step = p.microbatches * p.seqs_per_microbatch;
  std::vector<SequenceBuffer> seqs;
  seqs.reserve(static_cast<size_t>(per_step));
  for (int64_t step = 0; step < p.steps; ++step) {
    seqs.clear();
    for (int64_t i = 0; i < per_step; ++i) {
      auto s = next_seq();
      if (!s) return false;
      seqs.push_back(std::move(*s));
    }
    std::vector<double> losses(static_cast<size_t>(p.microbatches));
    for (int64_t m = 0; m < p.microbatches; ++m) {
      losses[static_cast<size_t>(m)] = proxy.microbatch_loss(
          std::span<const SequenceBuffer>(seqs.data() + m * p.seqs_per_microbatch,
                                          static_cast<size_t>(p.seqs_per_microbatch)));
    }
    double mean = 0.0, mx = losses[0];
    for (double l : losses) {
      mean += l;
      mx = std::max(mx, l);
    }
    mean /= static_cast<double>(p.microbatches);
    out.push_back({step, mx - mean, mx, mean});
  }
  return true;
}

}  // namespace

PackBenchResult packing_comparison(const PackBenchParams& params) {
  PackBenchParams p = params;
  if (p.steps < 1 || p.microbatches < 1 || p.seqs_per_microbatch < 1) {
    throw std::invalid_argument("packing_comparison: invalid step/microbatch layout");
  }
  if (p.corpus.count == 0) {
    const double tokens_needed = static_cast<double>(p.steps) * static_cast<double>(p.microbatches) *
                                 static_cast<double>(p.seqs_per_microbatch) * static_cast<double>(p.seq_len);
    const double mean_len = std::exp(p.corpus.length_mu + 0.5 * p.corpus.length_sigma * p.corpus.length_sigma);
    p.corpus.count = static_cast<int64_t>(tokens_needed / mean_len * 1.3) + 4 * p.rsdb_capacity;
  }

  PackBenchResult res;
  ProxyLoss proxy(p.corpus);
  if (p.run_sequential) {
    SynthCorpusStream stream(p.corpus);
    SequentialPacker packer(stream, p.seq_len);
    if (!run_arm(p, proxy, [&] { return packer.next(); }, res.sequential)) {
      throw std::runtime_error("packing_comparison: corpus exhausted in the sequential arm");
    }
  }
  if (p.run_rsdb) {
    SynthCorpusStream stream(p.corpus);
    Rsdb rsdb(stream, p.rsdb_capacity, p.rsdb_seed);
    if (!run_arm(p, proxy, [&] { return rsdb.next_sequence(p.seq_len); }, res.rsdb)) {
      throw std::runtime_error("packing_comparison: corpus exhausted in the RSDB arm");
    }
  }

  PackBenchSummary& s = res.summary;
  if (p.run_sequential && p.run_rsdb) {
    s.steps = static_cast<int64_t>(res.sequential.size());
    std::vector<double> seq_het, rsdb_het;
    int64_t lower = 0;
    for (int64_t i = 0; i < s.steps; ++i) {
      seq_het.push_back(res.sequential[static_cast<size_t>(i)].batch_het);
      rsdb_het.push_back(res.rsdb[static_cast<size_t>(i)].batch_het);
      s.mean_sequential += seq_het.back();
      s.mean_rsdb += rsdb_het.back();
      if (rsdb_het.back() < seq_het.back()) ++lower;
    }
    s.mean_sequential /= static_cast<double>(s.steps);
    s.mean_rsdb /= static_cast<double>(s.steps);
    s.ratio = s.mean_rsdb / s.mean_sequential;
    s.frac_rsdb_lower = static_cast<double>(lower) / static_cast<double>(s.steps);
    s.kurtosis_sequential = pearson_kurtosis(seq_het);
    s.kurtosis_rsdb = pearson_kurtosis(rsdb_het);

    // paired bootstrap over steps for the mean ratio
    Rng rng(p.bootstrap_seed);
    std::vector<double> ratios;
    ratios.reserve(static_cast<size_t>(p.bootstrap_resamples));
    for (int64_t b = 0; b < p.bootstrap_resamples; ++b) {
      double num = 0.0, den = 0.0;
      for (int64_t i = 0; i < s.steps; ++i) {
        const size_t idx = static_cast<size_t>(rng.uniform_below(static_cast<uint64_t>(s.steps)));
        num += rsdb_het[idx];
        den += seq_het[idx];
      }
      ratios.push_back(num / den);
    }
    std::sort(ratios.begin(), ratios.end());
    const size_t lo = static_cast<size_t>(0.025 * static_cast<double>(ratios.size() - 1));
    const size_t hi = static_cast<size_t>(0.975 * static_cast<double>(ratios.size() - 1));
    s.ci_low = ratios[lo];
    s.ci_high = ratios[hi];
  } else if (p.run_sequential) {
    s.steps = static_cast<int64_t>(res.sequential.size());
  } else if (p.run_rsdb) {
    s.steps = static_cast<int64_t>(res.rsdb.size());
  }
  return res;
}

}  // namespace trinity
