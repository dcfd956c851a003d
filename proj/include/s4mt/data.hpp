#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "s4mt/batch.hpp"
#include "s4mt/config.hpp"
#include "s4mt/tensor.hpp"

namespace s4mt {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Reserved ids occupy 0..4; content tokens follow.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> content_tokens);
  // Content tokens "w0" .. "w{n-1}".
  static Vocabulary synthetic(std::size_t content_tokens);
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  std::size_t content_size() const { return tokens_.size() - kReservedTokens; }
  std::int32_t id(const std::string& token) const;  // kUnk when absent
  const std::string& token(std::int32_t id) const;

  // Whitespace tokenization.
  std::vector<std::int32_t> encode(const std::string& sentence) const;
  // Reserved ids other than UNK are skipped.
  std::string decode(std::span<const std::int32_t> ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

enum class TaskKind { copy, reverse_copy, lexicon_translate };
enum class LengthLaw { uniform, long_tail };

struct SyntheticTaskSpec {
  TaskKind kind = TaskKind::copy;
  std::size_t vocab_size = 32;  // content tokens
  std::size_t min_len = 1;
  std::size_t max_len = 10;
  LengthLaw law = LengthLaw::uniform;
  std::size_t window = 3;         // lexicon_translate reordering window
  bool identity_lexicon = false;  // lexicon_translate only
  std::uint64_t seed = 1;

  void validate() const;
  json to_json() const;
  static SyntheticTaskSpec from_json(const json& j);
};

struct SentencePair {
  std::vector<std::int32_t> src;
  std::vector<std::int32_t> tgt;
};

struct ParallelCorpus {
  std::vector<SentencePair> pairs;
  std::size_t size() const { return pairs.size(); }
};

// Content-id permutation used by lexicon_translate: target id = lexicon[source id].
std::vector<std::int32_t> task_lexicon(const SyntheticTaskSpec& spec);
// Window reordering: every window of size m (the last may be partial) emits
// its second part (m - m/2 tokens) before its first m/2 tokens.
std::vector<std::int32_t> reorder_windows(std::span<const std::int32_t> tokens, std::size_t window);

// Pure in (spec, index).
SentencePair generate_pair(const SyntheticTaskSpec& spec, std::uint64_t index);
ParallelCorpus generate(const SyntheticTaskSpec& spec, std::size_t n, std::uint64_t first_index = 0);

ParallelCorpus reverse_source(const ParallelCorpus& corpus);

struct BatchConfig {
  std::size_t max_tokens = 4096;  // padded tokens per batch, source and target streams together
  bool decoder_only = true;
  bool shuffle = true;
  std::uint64_t seed = 1;
};

// Padded tokens one pair occupies in a batch row.
std::size_t row_tokens(const SentencePair& pair, bool decoder_only);
SequenceBatch make_batch(std::span<const SentencePair* const> rows, bool decoder_only);
// Length-sorted groups within the token budget; batch order shuffled from
// (seed, epoch). Pairs longer than the budget are skipped and counted.
std::vector<SequenceBatch> make_batches(const ParallelCorpus& corpus, const BatchConfig& cfg, std::uint64_t epoch = 0,
                                        std::size_t* skipped = nullptr);

struct LengthBuckets {
  std::vector<std::size_t> boundaries{18, 30};  // half-open ranges [1,18), [18,30), [30,inf)

  std::size_t count() const { return boundaries.size() + 1; }
  std::string label(std::size_t bucket) const;
};
std::size_t bucket_of(const LengthBuckets& buckets, std::size_t reference_length);

// <dir>/<name>.src and <dir>/<name>.tgt, one sentence per line.
void write_corpus(const std::filesystem::path& dir, const std::string& name, const ParallelCorpus& corpus,
                  const Vocabulary& vocab);
ParallelCorpus read_corpus(const std::filesystem::path& dir, const std::string& name, const Vocabulary& vocab);
std::vector<std::string> read_lines(const std::filesystem::path& path);

}  // namespace s4mt
