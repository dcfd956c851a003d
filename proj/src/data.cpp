#include "s4mt/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace s4mt {

namespace {

const char* kReservedNames[] = {"<pad>", "<s>", "</s>", "<sep>", "<unk>"};
const char* kTaskNames[] = {"copy", "reverse_copy", "lexicon_translate"};

std::mt19937_64 seeded(std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32), static_cast<std::uint32_t>(b),
                    static_cast<std::uint32_t>(b >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace

std::size_t SequenceBatch::loss_positions() const {
  return static_cast<std::size_t>(std::count(loss_mask.begin(), loss_mask.end(), std::uint8_t{1}));
}

Vocabulary::Vocabulary(std::vector<std::string> content_tokens) {
  tokens_.assign(std::begin(kReservedNames), std::end(kReservedNames));
  for (auto& t : content_tokens) tokens_.push_back(std::move(t));
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<std::int32_t>(i)).second)
      throw ConfigError("vocabulary: duplicate token '" + tokens_[i] + "'");
  }
}

Vocabulary Vocabulary::synthetic(std::size_t content_tokens) {
  std::vector<std::string> t;
  t.reserve(content_tokens);
  for (std::size_t i = 0; i < content_tokens; ++i) t.push_back("w" + std::to_string(i));
  return Vocabulary(std::move(t));
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::vector<std::string> lines = read_lines(path);
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return Vocabulary(std::move(lines));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (std::size_t i = kReservedTokens; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::int32_t Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw std::out_of_range("token id out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::int32_t> Vocabulary::encode(const std::string& sentence) const {
  std::istringstream in(sentence);
  std::vector<std::int32_t> ids;
  std::string word;
  while (in >> word) ids.push_back(id(word));
  return ids;
}

std::string Vocabulary::decode(std::span<const std::int32_t> ids) const {
  std::string out;
  for (std::int32_t i : ids) {
    if (i < kReservedTokens && i != kUnk) continue;
    if (!out.empty()) out += ' ';
    out += token(i);
  }
  return out;
}

void SyntheticTaskSpec::validate() const {
  if (vocab_size == 0) throw ConfigError("task.vocab_size must be >= 1");
  if (kind == TaskKind::lexicon_translate && vocab_size < 2)
    throw ConfigError("task.vocab_size too small for a lexicon permutation (need >= 2)");
  if (min_len == 0 || min_len > max_len) throw ConfigError("task lengths need 1 <= min_len <= max_len");
  if (window == 0) throw ConfigError("task.window must be >= 1");
}

json SyntheticTaskSpec::to_json() const {
  return json{{"kind", kTaskNames[static_cast<int>(kind)]},
              {"vocab_size", vocab_size},
              {"min_len", min_len},
              {"max_len", max_len},
              {"law", law == LengthLaw::uniform ? "uniform" : "long_tail"},
              {"window", window},
              {"identity_lexicon", identity_lexicon},
              {"seed", seed}};
}

SyntheticTaskSpec SyntheticTaskSpec::from_json(const json& j) {
  SyntheticTaskSpec s;
  StrictObject o(j, "task");
  std::string kind = kTaskNames[0], law = "uniform";
  o.get("kind", kind);
  o.get("vocab_size", s.vocab_size);
  o.get("min_len", s.min_len);
  o.get("max_len", s.max_len);
  o.get("law", law);
  o.get("window", s.window);
  o.get("identity_lexicon", s.identity_lexicon);
  o.get("seed", s.seed);
  o.finish();
  auto it = std::find(std::begin(kTaskNames), std::end(kTaskNames), kind);
  if (it == std::end(kTaskNames)) throw ConfigError("task.kind: unknown task '" + kind + "'");
  s.kind = static_cast<TaskKind>(it - std::begin(kTaskNames));
  if (law != "uniform" && law != "long_tail") throw ConfigError("task.law: expected uniform or long_tail");
  s.law = law == "uniform" ? LengthLaw::uniform : LengthLaw::long_tail;
  s.validate();
  return s;
}

std::vector<std::int32_t> task_lexicon(const SyntheticTaskSpec& spec) {
  std::vector<std::int32_t> lex(kReservedTokens + spec.vocab_size);
  std::iota(lex.begin(), lex.end(), 0);
  if (!spec.identity_lexicon) {
    auto rng = seeded(spec.seed, 0x6c657869636f6eULL);
    std::shuffle(lex.begin() + kReservedTokens, lex.end(), rng);
  }
  return lex;
}

std::vector<std::int32_t> reorder_windows(std::span<const std::int32_t> tokens, std::size_t window) {
  std::vector<std::int32_t> out;
  out.reserve(tokens.size());
  for (std::size_t start = 0; start < tokens.size(); start += window) {
    const std::size_t m = std::min(window, tokens.size() - start);
    const std::size_t first = m / 2;
    out.insert(out.end(), tokens.begin() + static_cast<std::ptrdiff_t>(start + first),
               tokens.begin() + static_cast<std::ptrdiff_t>(start + m));
    out.insert(out.end(), tokens.begin() + static_cast<std::ptrdiff_t>(start),
               tokens.begin() + static_cast<std::ptrdiff_t>(start + first));
  }
  return out;
}

SentencePair generate_pair(const SyntheticTaskSpec& spec, std::uint64_t index) {
  auto rng = seeded(spec.seed, index);
  std::size_t len;
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (spec.law == LengthLaw::long_tail && coin(rng) < 0.1) {
    len = std::uniform_int_distribution<std::size_t>(spec.max_len, 4 * spec.max_len)(rng);
  } else {
    len = std::uniform_int_distribution<std::size_t>(spec.min_len, spec.max_len)(rng);
  }
  std::uniform_int_distribution<std::int32_t> tok(kReservedTokens,
                                                  kReservedTokens + static_cast<std::int32_t>(spec.vocab_size) - 1);
  SentencePair p;
  p.src.resize(len);
  for (auto& t : p.src) t = tok(rng);
  switch (spec.kind) {
    case TaskKind::copy: p.tgt = p.src; break;
    case TaskKind::reverse_copy: p.tgt.assign(p.src.rbegin(), p.src.rend()); break;
    case TaskKind::lexicon_translate: {
      // Recomputed per pair to keep the function pure; cheap at these vocab sizes.
      const std::vector<std::int32_t> lex = task_lexicon(spec);
      std::vector<std::int32_t> mapped(len);
      for (std::size_t i = 0; i < len; ++i) mapped[i] = lex[static_cast<std::size_t>(p.src[i])];
      p.tgt = reorder_windows(mapped, spec.window);
      break;
    }
  }
  return p;
}

ParallelCorpus generate(const SyntheticTaskSpec& spec, std::size_t n, std::uint64_t first_index) {
  spec.validate();
  ParallelCorpus c;
  c.pairs.reserve(n);
  if (spec.kind != TaskKind::lexicon_translate) {
    for (std::size_t i = 0; i < n; ++i) c.pairs.push_back(generate_pair(spec, first_index + i));
    return c;
  }
  const std::vector<std::int32_t> lex = task_lexicon(spec);
  SyntheticTaskSpec copy_spec = spec;
  copy_spec.kind = TaskKind::copy;
  for (std::size_t i = 0; i < n; ++i) {
    SentencePair p = generate_pair(copy_spec, first_index + i);
    for (auto& t : p.tgt) t = lex[static_cast<std::size_t>(t)];
    p.tgt = reorder_windows(p.tgt, spec.window);
    c.pairs.push_back(std::move(p));
  }
  return c;
}

ParallelCorpus reverse_source(const ParallelCorpus& corpus) {
  ParallelCorpus out = corpus;
  for (auto& p : out.pairs) std::reverse(p.src.begin(), p.src.end());
  return out;
}

std::size_t row_tokens(const SentencePair& pair, bool decoder_only) {
  if (decoder_only) return pair.src.size() + pair.tgt.size() + 3;
  return (pair.src.size() + 1) + (pair.tgt.size() + 1);
}

SequenceBatch make_batch(std::span<const SentencePair* const> rows, bool decoder_only) {
  SequenceBatch b;
  b.decoder_only = decoder_only;
  b.batch_size = rows.size();
  for (const SentencePair* p : rows) {
    if (p->src.empty()) throw ContractError("make_batch: empty source sentence");
    const std::size_t t = decoder_only ? p->src.size() + p->tgt.size() + 3 : p->tgt.size() + 1;
    b.tgt_time = std::max(b.tgt_time, t);
    if (!decoder_only) b.src_time = std::max(b.src_time, p->src.size() + 1);
  }
  const std::size_t total = b.batch_size * b.tgt_time;
  b.tgt_in.assign(total, kPad);
  b.tgt_out.assign(total, kPad);
  b.pad_mask.assign(total, 0);
  b.loss_mask.assign(total, 0);
  b.ae_mask.assign(total, 0);
  if (!decoder_only) b.src.assign(b.batch_size * b.src_time, kPad);

  for (std::size_t r = 0; r < rows.size(); ++r) {
    const SentencePair& p = *rows[r];
    const std::size_t n = p.src.size();
    std::vector<std::int32_t> stream;
    std::size_t target_from;  // first tgt_out index predicting a target token
    if (decoder_only) {
      stream.push_back(kBos);
      stream.insert(stream.end(), p.src.begin(), p.src.end());
      stream.push_back(kEos);
      stream.push_back(kSep);
      stream.insert(stream.end(), p.tgt.begin(), p.tgt.end());
      stream.push_back(kEos);
      target_from = n + 2;
      b.sep_positions.push_back(n + 2);
      for (std::size_t i = 0; i < n; ++i) b.ae_mask[r * b.tgt_time + i] = 1;
    } else {
      stream.push_back(kBos);
      stream.insert(stream.end(), p.tgt.begin(), p.tgt.end());
      stream.push_back(kEos);
      target_from = 0;
      for (std::size_t i = 0; i < n; ++i) b.src[r * b.src_time + i] = p.src[i];
      b.src[r * b.src_time + n] = kEos;
      b.src_lengths.push_back(n + 1);
    }
    const std::size_t len = stream.size() - 1;
    b.tgt_lengths.push_back(len);
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t at = r * b.tgt_time + i;
      b.tgt_in[at] = stream[i];
      b.tgt_out[at] = stream[i + 1];
      b.pad_mask[at] = 1;
      if (i >= target_from) b.loss_mask[at] = 1;
    }
  }
  return b;
}

std::vector<SequenceBatch> make_batches(const ParallelCorpus& corpus, const BatchConfig& cfg, std::uint64_t epoch,
                                        std::size_t* skipped) {
  std::vector<std::size_t> order;
  std::size_t dropped = 0;
  for (std::size_t i = 0; i < corpus.pairs.size(); ++i) {
    if (row_tokens(corpus.pairs[i], cfg.decoder_only) > cfg.max_tokens) {
      ++dropped;
      continue;
    }
    order.push_back(i);
  }
  if (skipped) *skipped = dropped;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return row_tokens(corpus.pairs[a], cfg.decoder_only) < row_tokens(corpus.pairs[b], cfg.decoder_only);
  });

  std::vector<std::vector<const SentencePair*>> groups;
  std::vector<const SentencePair*> current;
  std::size_t widest = 0;
  for (std::size_t i : order) {
    const SentencePair* p = &corpus.pairs[i];
    const std::size_t w = std::max(widest, row_tokens(*p, cfg.decoder_only));
    if (!current.empty() && w * (current.size() + 1) > cfg.max_tokens) {
      groups.push_back(std::move(current));
      current.clear();
      widest = 0;
    }
    current.push_back(p);
    widest = std::max(widest, row_tokens(*p, cfg.decoder_only));
  }
  if (!current.empty()) groups.push_back(std::move(current));

  if (cfg.shuffle) {
    auto rng = seeded(cfg.seed, epoch);
    std::shuffle(groups.begin(), groups.end(), rng);
  }
  std::vector<SequenceBatch> batches;
  batches.reserve(groups.size());
  for (const auto& g : groups) batches.push_back(make_batch(g, cfg.decoder_only));
  return batches;
}

std::string LengthBuckets::label(std::size_t bucket) const {
  const std::size_t lo = bucket == 0 ? 1 : boundaries[bucket - 1];
  if (bucket >= boundaries.size()) return "[" + std::to_string(lo) + ",inf)";
  return "[" + std::to_string(lo) + "," + std::to_string(boundaries[bucket] - 1) + "]";
}

std::size_t bucket_of(const LengthBuckets& buckets, std::size_t reference_length) {
  if (reference_length == 0) throw std::invalid_argument("bucket_of: length must be >= 1");
  return static_cast<std::size_t>(std::upper_bound(buckets.boundaries.begin(), buckets.boundaries.end(),
                                                   reference_length) -
                                  buckets.boundaries.begin());
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

void write_corpus(const std::filesystem::path& dir, const std::string& name, const ParallelCorpus& corpus,
                  const Vocabulary& vocab) {
  std::ofstream src(dir / (name + ".src"));
  std::ofstream tgt(dir / (name + ".tgt"));
  if (!src || !tgt) throw IoError("cannot write corpus " + name + " in " + dir.string());
  for (const auto& p : corpus.pairs) {
    src << vocab.decode(p.src) << '\n';
    tgt << vocab.decode(p.tgt) << '\n';
  }
  if (!src || !tgt) throw IoError("write failed for corpus " + name);
}

ParallelCorpus read_corpus(const std::filesystem::path& dir, const std::string& name, const Vocabulary& vocab) {
  const auto src = read_lines(dir / (name + ".src"));
  const auto tgt = read_lines(dir / (name + ".tgt"));
  if (src.size() != tgt.size())
    throw IoError("corpus " + name + ": " + std::to_string(src.size()) + " source vs " + std::to_string(tgt.size()) +
                  " target lines");
  ParallelCorpus c;
  for (std::size_t i = 0; i < src.size(); ++i) {
    SentencePair p{vocab.encode(src[i]), vocab.encode(tgt[i])};
    if (p.src.empty() || p.tgt.empty()) throw IoError("corpus " + name + ": empty sentence at line " + std::to_string(i + 1));
    c.pairs.push_back(std::move(p));
  }
  return c;
}

}  // namespace s4mt
