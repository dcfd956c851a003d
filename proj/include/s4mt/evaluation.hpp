#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "s4mt/data.hpp"
#include "s4mt/model.hpp"

namespace s4mt {

struct DecodeOptions {
  std::size_t beam = 4;
  double alpha = 0.6;      // length normalization exponent
  std::size_t max_len = 0; // 0 = 2 * source length + 10

  json to_json() const { return json{{"beam", beam}, {"alpha", alpha}}; }
};

struct Hypothesis {
  std::vector<std::int32_t> tokens;  // without the final EOS
  double log_prob = 0.0;             // includes EOS when finished
  double score = 0.0;                // log_prob / length^alpha, length counting EOS
  bool finished = false;
};

// `source` holds content tokens in natural order; reversal for
// reverse_source models happens inside.
std::vector<std::int32_t> greedy_decode(const Model& model, std::span<const std::int32_t> source,
                                        std::size_t max_len = 0);
Hypothesis beam_decode(const Model& model, std::span<const std::int32_t> source, const DecodeOptions& options);
// Sentences are spread over `threads` workers; output order matches input.
std::vector<std::vector<std::int32_t>> decode_corpus(const Model& model, const ParallelCorpus& corpus,
                                                     const DecodeOptions& options, std::size_t threads = 1);

// Fraction of scored positions whose argmax equals the reference token.
double teacher_forced_accuracy(const Model& model, const ParallelCorpus& corpus, std::size_t max_tokens = 4096);

// ---------------------------------------------------------------------------
// BLEU

// Whitespace-normalized tokens with punctuation split off, except between digits.
std::vector<std::string> tokenize_13a(const std::string& text);

struct BleuStats {
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};      // hypothesis n-grams
  std::array<std::size_t, 4> ref_totals{};  // reference n-grams
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;

  BleuStats& operator+=(const BleuStats& o);
};

struct BleuScore {
  double score = 0.0;
  std::array<double, 4> precisions{};  // percentages after smoothing
  double brevity_penalty = 0.0;
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;

  json to_json() const;
};

BleuStats sentence_stats(const std::string& hyp, const std::string& ref);
BleuScore bleu_from_stats(const BleuStats& stats);
BleuScore corpus_bleu(std::span<const std::string> hyps, std::span<const std::string> refs);

// ---------------------------------------------------------------------------
// Bucketed reports and significance

enum class BucketBy { source, reference };

struct BucketResult {
  std::string range;
  std::size_t count = 0;
  std::optional<BleuScore> bleu;  // empty bucket -> none
};

struct BucketReport {
  BleuScore overall;
  std::vector<BucketResult> buckets;
  DecodeOptions decode;

  json to_json() const;
};

// Scores already decoded hypotheses; `lengths` selects each sentence's bucket.
BucketReport bucket_report(std::span<const std::string> hyps, std::span<const std::string> refs,
                           std::span<const std::size_t> lengths, const LengthBuckets& buckets);
BucketReport evaluate_buckets(const Model& model, const ParallelCorpus& corpus, const Vocabulary& vocab,
                              const LengthBuckets& buckets, BucketBy bucket_by, const DecodeOptions& options,
                              std::size_t threads = 1);

struct SignificanceResult {
  double p_value = 1.0;
  std::size_t resamples = 0;
  bool significant = false;  // p < 0.05

  json to_json() const;
};

// One-sided test that system A beats system B. p counts resamples where B
// scores higher, plus half of the ties.
SignificanceResult paired_bootstrap(std::span<const std::string> hyps_a, std::span<const std::string> hyps_b,
                                    std::span<const std::string> refs, std::size_t resamples = 1000,
                                    std::uint64_t seed = 1);

}  // namespace s4mt
