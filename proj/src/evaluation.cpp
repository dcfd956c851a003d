#include "s4mt/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <map>
#include <random>
#include <sstream>
#include <thread>

#include "s4mt/training.hpp"

namespace s4mt {

namespace {

std::vector<std::int32_t> model_source(const Model& model, std::span<const std::int32_t> source) {
  std::vector<std::int32_t> src(source.begin(), source.end());
  if (model.config().reverse_source) std::reverse(src.begin(), src.end());
  return src;
}

bool decodable(std::size_t id) { return id == static_cast<std::size_t>(kEos) || id >= kReservedTokens; }

std::size_t default_max_len(std::size_t source_len, std::size_t max_len) {
  return max_len ? max_len : 2 * source_len + 10;
}

}  // namespace

std::vector<std::int32_t> greedy_decode(const Model& model, std::span<const std::int32_t> source,
                                        std::size_t max_len) {
  const std::vector<std::int32_t> src = model_source(model, source);
  IncrementalDecoder dec(model, src);
  const std::size_t limit = default_max_len(src.size(), max_len);
  std::vector<std::int32_t> out;
  std::int32_t token = dec.start_token();
  for (std::size_t t = 0; t < limit; ++t) {
    const std::vector<float> lp = dec.log_probs(dec.step(std::span<const std::int32_t>(&token, 1)));
    std::size_t best = kEos;
    for (std::size_t v = 0; v < lp.size(); ++v)
      if (decodable(v) && lp[v] > lp[best]) best = v;
    if (best == static_cast<std::size_t>(kEos)) break;
    token = static_cast<std::int32_t>(best);
    out.push_back(token);
  }
  return out;
}

Hypothesis beam_decode(const Model& model, std::span<const std::int32_t> source, const DecodeOptions& options) {
  if (options.beam < 1) throw std::invalid_argument("beam_decode: beam must be >= 1");
  const std::vector<std::int32_t> src = model_source(model, source);
  IncrementalDecoder dec(model, src);
  const std::size_t limit = default_max_len(src.size(), options.max_len);
  auto normalized = [&](double lp, std::size_t len) {
    return lp / std::pow(static_cast<double>(std::max<std::size_t>(len, 1)), options.alpha);
  };

  std::vector<Hypothesis> alive(1);
  std::vector<Hypothesis> finished;
  std::vector<std::int32_t> last{dec.start_token()};
  struct Candidate {
    double log_prob;
    std::size_t row;
    std::int32_t token;
  };
  for (std::size_t t = 0; t < limit && !alive.empty() && finished.size() < options.beam; ++t) {
    const std::vector<float> lp = dec.log_probs(dec.step(last));
    const std::size_t vocab = lp.size() / alive.size();
    std::vector<Candidate> cands;
    cands.reserve(alive.size() * vocab);
    for (std::size_t r = 0; r < alive.size(); ++r)
      for (std::size_t v = 0; v < vocab; ++v)
        if (decodable(v)) cands.push_back({alive[r].log_prob + lp[r * vocab + v], r, static_cast<std::int32_t>(v)});
    const std::size_t keep = std::min(options.beam, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
                        if (a.row != b.row) return a.row < b.row;
                        return a.token < b.token;
                      });
    std::vector<Hypothesis> next;
    std::vector<std::size_t> rows;
    last.clear();
    for (std::size_t i = 0; i < keep; ++i) {
      const Candidate& c = cands[i];
      Hypothesis h = alive[c.row];
      h.log_prob = c.log_prob;
      if (c.token == kEos) {
        h.finished = true;
        h.score = normalized(h.log_prob, h.tokens.size() + 1);
        finished.push_back(std::move(h));
        continue;
      }
      h.tokens.push_back(c.token);
      h.score = normalized(h.log_prob, h.tokens.size());
      next.push_back(std::move(h));
      rows.push_back(c.row);
      last.push_back(c.token);
    }
    alive = std::move(next);
    if (!alive.empty()) dec.select_rows(rows);
  }
  std::vector<Hypothesis>& pool = finished.empty() ? alive : finished;
  if (pool.empty()) return Hypothesis{};
  return *std::max_element(pool.begin(), pool.end(),
                           [](const Hypothesis& a, const Hypothesis& b) { return a.score < b.score; });
}

std::vector<std::vector<std::int32_t>> decode_corpus(const Model& model, const ParallelCorpus& corpus,
                                                     const DecodeOptions& options, std::size_t threads) {
  std::vector<std::vector<std::int32_t>> out(corpus.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < corpus.size(); i = next++) {
      const auto& src = corpus.pairs[i].src;
      out[i] = options.beam == 1 ? greedy_decode(model, src, options.max_len) : beam_decode(model, src, options).tokens;
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, corpus.size()));
  if (threads == 1) {
    worker();
    return out;
  }
  std::vector<std::thread> pool;
  for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  return out;
}

double teacher_forced_accuracy(const Model& model, const ParallelCorpus& corpus, std::size_t max_tokens) {
  NoGradGuard no_grad;
  BatchConfig bc;
  bc.max_tokens = max_tokens;
  bc.decoder_only = model.config().decoder_only();
  bc.shuffle = false;
  std::size_t correct = 0, total = 0;
  for (const SequenceBatch& batch : make_batches(model_view(model.config(), corpus), bc)) {
    const Model::Output out = model.forward(batch, ForwardContext{});
    const std::size_t v = out.logits.dim(2);
    auto lv = out.logits.data();
    for (std::size_t p = 0; p < batch.loss_mask.size(); ++p) {
      if (!batch.loss_mask[p]) continue;
      const float* row = lv.data() + p * v;
      const auto best = static_cast<std::int32_t>(std::max_element(row, row + v) - row);
      correct += best == batch.tgt_out[p];
      ++total;
    }
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

// ---------------------------------------------------------------------------
// BLEU

std::vector<std::string> tokenize_13a(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) tokens.push_back(std::move(cur));
    cur.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c)) {
      const bool digits_around = i > 0 && i + 1 < text.size() && std::isdigit(static_cast<unsigned char>(text[i - 1])) &&
                                 std::isdigit(static_cast<unsigned char>(text[i + 1]));
      if (digits_around) {
        cur += static_cast<char>(c);
      } else {
        flush();
        tokens.emplace_back(1, static_cast<char>(c));
      }
    } else {
      cur += static_cast<char>(c);
    }
  }
  flush();
  return tokens;
}

BleuStats& BleuStats::operator+=(const BleuStats& o) {
  for (std::size_t n = 0; n < 4; ++n) {
    matches[n] += o.matches[n];
    totals[n] += o.totals[n];
    ref_totals[n] += o.ref_totals[n];
  }
  hyp_len += o.hyp_len;
  ref_len += o.ref_len;
  return *this;
}

namespace {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts count_ngrams(const std::vector<std::string>& toks, std::size_t n) {
  NgramCounts counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i)
    ++counts[std::vector<std::string>(toks.begin() + static_cast<std::ptrdiff_t>(i),
                                      toks.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

}  // namespace

BleuStats sentence_stats(const std::string& hyp, const std::string& ref) {
  const auto h = tokenize_13a(hyp);
  const auto r = tokenize_13a(ref);
  BleuStats s;
  s.hyp_len = h.size();
  s.ref_len = r.size();
  for (std::size_t n = 1; n <= 4; ++n) {
    const NgramCounts hc = count_ngrams(h, n);
    const NgramCounts rc = count_ngrams(r, n);
    s.totals[n - 1] = h.size() >= n ? h.size() - n + 1 : 0;
    s.ref_totals[n - 1] = r.size() >= n ? r.size() - n + 1 : 0;
    for (const auto& [gram, count] : hc) {
      auto it = rc.find(gram);
      if (it != rc.end()) s.matches[n - 1] += std::min(count, it->second);
    }
  }
  return s;
}

BleuScore bleu_from_stats(const BleuStats& s) {
  BleuScore b;
  b.hyp_len = s.hyp_len;
  b.ref_len = s.ref_len;
  if (s.hyp_len == 0) return b;
  // Exponential smoothing: each order with no matches gets 1 / (2^k * total),
  // k counting such orders so far. An order the hypothesis is too short to
  // have is smoothed the same way (as if total were 1) when the references
  // have n-grams of that order, and counts as exact otherwise.
  double smooth = 1.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    double p;
    if (s.totals[n] == 0) {
      if (s.ref_totals[n] == 0) {
        p = 1.0;
      } else {
        smooth *= 2.0;
        p = 1.0 / smooth;
      }
    } else if (s.matches[n] == 0) {
      smooth *= 2.0;
      p = 1.0 / (smooth * static_cast<double>(s.totals[n]));
    } else {
      p = static_cast<double>(s.matches[n]) / static_cast<double>(s.totals[n]);
    }
    b.precisions[n] = 100.0 * p;
    log_sum += 0.25 * std::log(p);
  }
  b.brevity_penalty =
      s.hyp_len < s.ref_len ? std::exp(1.0 - static_cast<double>(s.ref_len) / static_cast<double>(s.hyp_len)) : 1.0;
  b.score = std::min(100.0, 100.0 * b.brevity_penalty * std::exp(log_sum));
  return b;
}

BleuScore corpus_bleu(std::span<const std::string> hyps, std::span<const std::string> refs) {
  if (hyps.empty()) throw std::invalid_argument("corpus_bleu: empty corpus");
  if (hyps.size() != refs.size())
    throw std::invalid_argument("corpus_bleu: " + std::to_string(hyps.size()) + " hypotheses vs " +
                                std::to_string(refs.size()) + " references");
  BleuStats total;
  for (std::size_t i = 0; i < hyps.size(); ++i) total += sentence_stats(hyps[i], refs[i]);
  return bleu_from_stats(total);
}

json BleuScore::to_json() const {
  return json{{"score", score},
              {"precisions", precisions},
              {"brevity_penalty", brevity_penalty},
              {"hyp_len", hyp_len},
              {"ref_len", ref_len}};
}

// ---------------------------------------------------------------------------

json BucketReport::to_json() const {
  json b = json::array();
  for (const auto& r : buckets)
    b.push_back({{"range", r.range}, {"count", r.count}, {"bleu", r.bleu ? r.bleu->to_json() : json(nullptr)}});
  return json{{"overall", overall.to_json()}, {"buckets", b}, {"decode", decode.to_json()}};
}

BucketReport bucket_report(std::span<const std::string> hyps, std::span<const std::string> refs,
                           std::span<const std::size_t> lengths, const LengthBuckets& buckets) {
  if (lengths.size() != hyps.size()) throw std::invalid_argument("bucket_report: one length per sentence required");
  BucketReport report;
  report.overall = corpus_bleu(hyps, refs);
  std::vector<BleuStats> stats(buckets.count());
  report.buckets.resize(buckets.count());
  for (std::size_t i = 0; i < buckets.count(); ++i) report.buckets[i].range = buckets.label(i);
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const std::size_t b = bucket_of(buckets, lengths[i]);
    stats[b] += sentence_stats(hyps[i], refs[i]);
    ++report.buckets[b].count;
  }
  for (std::size_t i = 0; i < buckets.count(); ++i)
    if (report.buckets[i].count) report.buckets[i].bleu = bleu_from_stats(stats[i]);
  return report;
}

BucketReport evaluate_buckets(const Model& model, const ParallelCorpus& corpus, const Vocabulary& vocab,
                              const LengthBuckets& buckets, BucketBy bucket_by, const DecodeOptions& options,
                              std::size_t threads) {
  const auto decoded = decode_corpus(model, corpus, options, threads);
  std::vector<std::string> hyps, refs;
  std::vector<std::size_t> lengths;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    hyps.push_back(vocab.decode(decoded[i]));
    refs.push_back(vocab.decode(corpus.pairs[i].tgt));
    lengths.push_back(bucket_by == BucketBy::source ? corpus.pairs[i].src.size() : corpus.pairs[i].tgt.size());
  }
  BucketReport report = bucket_report(hyps, refs, lengths, buckets);
  report.decode = options;
  return report;
}

json SignificanceResult::to_json() const {
  return json{{"p_value", p_value}, {"resamples", resamples}, {"significant", significant}};
}

SignificanceResult paired_bootstrap(std::span<const std::string> hyps_a, std::span<const std::string> hyps_b,
                                    std::span<const std::string> refs, std::size_t resamples, std::uint64_t seed) {
  if (hyps_a.size() != refs.size() || hyps_b.size() != refs.size())
    throw std::invalid_argument("paired_bootstrap: hypothesis and reference lists must align");
  if (refs.empty()) throw std::invalid_argument("paired_bootstrap: empty corpus");
  if (resamples < 100) throw std::invalid_argument("paired_bootstrap: at least 100 resamples required");
  std::vector<BleuStats> sa, sb;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    sa.push_back(sentence_stats(hyps_a[i], refs[i]));
    sb.push_back(sentence_stats(hyps_b[i], refs[i]));
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, refs.size() - 1);
  double b_wins = 0.0;
  for (std::size_t r = 0; r < resamples; ++r) {
    BleuStats ta, tb;
    for (std::size_t i = 0; i < refs.size(); ++i) {
      const std::size_t j = pick(rng);
      ta += sa[j];
      tb += sb[j];
    }
    const double a = bleu_from_stats(ta).score;
    const double b = bleu_from_stats(tb).score;
    if (b > a) b_wins += 1.0;
    else if (b == a) b_wins += 0.5;
  }
  SignificanceResult res;
  res.resamples = resamples;
  res.p_value = b_wins / static_cast<double>(resamples);
  res.significant = res.p_value < 0.05;
  return res;
}

}  // namespace s4mt
