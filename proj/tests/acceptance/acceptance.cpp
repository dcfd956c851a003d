// Acceptance run. One PASS/FAIL line per criterion on stdout, progress on
// stderr, every measured number in acceptance_report.json (working dir).

#include <malloc.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "grad_suite.hpp"
#include "s4mt/attribution.hpp"
#include "s4mt/evaluation.hpp"
#include "s4mt/kernel_check.hpp"
#include "s4mt/ssm.hpp"
#include "s4mt/training.hpp"

using namespace s4mt;
using Clock = std::chrono::steady_clock;

namespace {

// Desk-scale settings shared by the trained experiments.
constexpr std::size_t kContentVocab = 32;
constexpr std::size_t kDModel = 64;
constexpr std::size_t kDff = 256;
constexpr std::size_t kStateDim = 16;
constexpr std::size_t kHeads = 4;
constexpr float kDeskDelta = 0.2f;  // see README: with delta 1 and N = 16 memory is a few steps

constexpr std::size_t kCopyMaxSteps = 2000;
constexpr std::size_t kCopyEvalEvery = 100;
constexpr std::size_t kCopyTokens = 1024;

constexpr std::size_t kLexMaxLen = 12;
constexpr std::size_t kLexSteps = 4000;
constexpr std::size_t kLexTokens = 1024;
constexpr std::size_t kPerBucket = 60;
constexpr std::size_t kNaturalTest = 200;
constexpr std::size_t kSweepSteps = 1500;

const std::vector<std::uint64_t> kSeeds{1, 2, 3};

json g_report = json::object();

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void log(const std::string& msg) {
  std::fprintf(stderr, "%s\n", msg.c_str());
  std::fflush(stderr);
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

struct Verdict {
  bool pass = true;
  std::vector<std::string> notes;
  void require(bool ok, const std::string& what) {
    pass = pass && ok;
    notes.push_back((ok ? "" : "FAILED ") + what);
  }
};

int g_failures = 0;

void report(int id, const Verdict& v, double secs) {
  std::string detail;
  for (const auto& n : v.notes) detail += (detail.empty() ? "" : "; ") + n;
  std::printf("criterion %2d: %s  (%s) [%.1fs]\n", id, v.pass ? "PASS" : "FAIL", detail.c_str(), secs);
  std::fflush(stdout);
  g_report["criterion_" + std::to_string(id)]["pass"] = v.pass;
  g_report["criterion_" + std::to_string(id)]["seconds"] = secs;
  if (!v.pass) ++g_failures;
}

template <class F>
void run(int id, F&& body) {
  const auto t0 = Clock::now();
  Verdict v;
  try {
    body(v, g_report["criterion_" + std::to_string(id)]);
  } catch (const std::exception& e) {
    v.require(false, std::string("exception: ") + e.what());
  }
  report(id, v, seconds_since(t0));
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

// ---------------------------------------------------------------------------
// Models and corpora for the trained criteria

struct Arch {
  std::string name;
  EncoderKind enc;
  DecoderKind dec;
  std::size_t enc_layers;
  std::size_t dec_layers;
  std::size_t blocks;
  bool ae = false;
};

const Arch kTrTr{"Tr-Tr", EncoderKind::transformer, DecoderKind::transformer, 2, 2, 1};
const Arch kNoS4{"0-S4", EncoderKind::none, DecoderKind::s4, 0, 2, 2};
const Arch kTrS4A{"Tr-S4A", EncoderKind::transformer, DecoderKind::s4a, 2, 2, 2};
const Arch kNoS4Ae{"0-S4+AE", EncoderKind::none, DecoderKind::s4, 0, 2, 2, true};

ModelConfig desk_config(const Arch& a) {
  ModelConfig c;
  c.encoder_kind = a.enc;
  c.decoder_kind = a.dec;
  c.encoder_layers = a.enc_layers;
  c.decoder_layers = a.dec_layers;
  c.blocks_per_layer = a.blocks;
  c.d_model = kDModel;
  c.d_ff = kDff;
  c.n_heads = kHeads;
  c.state_dim = kStateDim;
  c.vocab_size = kReservedTokens + kContentVocab;
  c.dropout = 0.1f;
  c.delta = kDeskDelta;
  c.include_ae_loss = a.ae;
  return c;
}

SyntheticTaskSpec copy_spec() {
  SyntheticTaskSpec s;
  s.kind = TaskKind::copy;
  s.vocab_size = kContentVocab;
  s.max_len = 10;
  return s;
}

SyntheticTaskSpec lexicon_spec() {
  SyntheticTaskSpec s;
  s.kind = TaskKind::lexicon_translate;
  s.vocab_size = kContentVocab;
  s.max_len = kLexMaxLen;
  s.law = LengthLaw::long_tail;
  s.window = 3;
  return s;
}

// Training draws indices [0, n); evaluation sets start far above.
constexpr std::uint64_t kHeldOut = 10'000'000;

// Equal numbers of short (< 18) and long (>= 30) sentences.
ParallelCorpus stratified_test(const SyntheticTaskSpec& s) {
  ParallelCorpus out;
  std::size_t shorts = 0, longs = 0;
  for (std::uint64_t i = kHeldOut; shorts < kPerBucket || longs < kPerBucket; ++i) {
    SentencePair p = generate_pair(s, i);
    if (p.src.size() < 18 && shorts < kPerBucket) {
      out.pairs.push_back(std::move(p));
      ++shorts;
    } else if (p.src.size() >= 30 && longs < kPerBucket) {
      out.pairs.push_back(std::move(p));
      ++longs;
    }
  }
  return out;
}

TrainerConfig desk_trainer(std::uint64_t seed, std::size_t steps, std::size_t tokens) {
  TrainerConfig t;
  t.epochs = 1000;
  t.max_steps = steps;
  t.max_tokens = tokens;
  t.schedule = {0.005, 400};
  t.seed = seed;
  return t;
}

struct LexRun {
  double short_bleu = 0.0;
  double long_bleu = 0.0;
  double natural_bleu = 0.0;
  Model model;
};

LexRun train_lexicon(const Arch& arch, std::uint64_t seed, const ParallelCorpus& train_set, const ParallelCorpus& test,
                     const ParallelCorpus& natural, std::size_t steps = kLexSteps) {
  const auto t0 = Clock::now();
  Model m = build_model(desk_config(arch), seed);
  train(m, train_set, desk_trainer(seed, steps, kLexTokens));
  const Vocabulary v = Vocabulary::synthetic(kContentVocab);
  DecodeOptions beam;  // beam 4, alpha 0.6
  const BucketReport r = evaluate_buckets(m, test, v, LengthBuckets{}, BucketBy::source, beam, 1);
  const BucketReport n = evaluate_buckets(m, natural, v, LengthBuckets{}, BucketBy::source, beam, 1);
  LexRun out{r.buckets[0].bleu->score, r.buckets[2].bleu->score, n.overall.score, std::move(m)};
  log("  " + arch.name + " seed " + std::to_string(seed) + ": short " + fmt(out.short_bleu) + " long " +
      fmt(out.long_bleu) + " natural " + fmt(out.natural_bleu) + " (" + fmt(seconds_since(t0), 3) + "s)");
  return out;
}

double mean_source_entropy(const Model& m, const std::vector<SentencePair>& inputs) {
  std::vector<double> h;
  for (const auto& p : inputs) h.push_back(sharpness(source_attribution(m, p.src, p.tgt)).mean_entropy);
  return mean(h);
}

// ---------------------------------------------------------------------------

void criterion_1(Verdict& v, json& out) {
  ssm::KernelCheckOptions o;  // N 64, H 8, L 128, 20 draws
  const auto t0 = Clock::now();
  const auto r = ssm::check_kernel_duality(o);
  const double secs = seconds_since(t0);
  out["max_residual"] = r.max_residual;
  v.require(r.trials.size() == 20, std::to_string(r.trials.size()) + " draws");
  v.require(r.max_residual < 1e-4, "max residual " + fmt(r.max_residual));
  v.require(r.passed, "all draws stable");
  v.require(secs < 30.0, "runtime " + fmt(secs, 3) + "s < 30s");
}

void criterion_2(Verdict& v, json& out) {
  const Eigen::MatrixXd a = ssm::hippo_legs(64);
  double worst = 0.0, upper = 0.0, diag = 0.0;
  for (int n = 0; n < 64; ++n)
    for (int k = 0; k < 64; ++k) {
      const double want = n > k ? -std::sqrt(2.0 * n + 1.0) * std::sqrt(2.0 * k + 1.0) : n == k ? -(n + 1.0) : 0.0;
      worst = std::max(worst, std::abs(a(n, k) - want) / std::max(1.0, std::abs(want)));
      if (k > n) upper = std::max(upper, std::abs(a(n, k)));
      if (k == n) diag = std::max(diag, std::abs(a(n, k) + (n + 1.0)));
    }
  out["max_rel_error"] = worst;
  v.require(worst <= 4 * std::numeric_limits<double>::epsilon(), "max rel error " + fmt(worst));
  v.require(upper == 0.0, "strict upper triangle zero");
  v.require(diag == 0.0, "diagonal -(n+1)");
}

void criterion_3(Verdict& v, json& out) {
  ssm::SsmParams s;
  s.a = Eigen::MatrixXd::Constant(1, 1, -1.0);
  s.b = Eigen::VectorXd::Constant(1, 1.0);
  s.c = Eigen::RowVectorXd::Constant(1, 1.0);
  const auto d = ssm::discretize_bilinear(s);
  const double ea = std::abs(d.a_bar(0, 0) - 1.0 / 3.0), eb = std::abs(d.b_bar(0) - 2.0 / 3.0);
  v.require(ea < 1e-12 && eb < 1e-12, "scalar A_bar 1/3, B_bar 2/3");

  // Triangular A: diag(A_bar) = (2 + a_nn) / (2 - a_nn) for delta 1. With
  // a = (-1, -2) that is (1/3, 0); a stated second entry of -1/3 does not
  // follow from the formula, so the formula is what is checked.
  ssm::SsmParams h;
  h.a = ssm::hippo_legs(2);
  h.b = ssm::hippo_legs_input(2);
  h.c = Eigen::RowVectorXd::Ones(2);
  const auto d2 = ssm::discretize_bilinear(h);
  double diag_err = 0.0;
  for (int i = 0; i < 2; ++i) {
    const double lam = h.a(i, i);
    diag_err = std::max(diag_err, std::abs(d2.a_bar(i, i) - (2.0 + lam) / (2.0 - lam)));
  }
  out["n2_diagonal"] = {d2.a_bar(0, 0), d2.a_bar(1, 1)};
  v.require(diag_err < 1e-12, "N=2 diag (" + fmt(d2.a_bar(0, 0)) + ", " + fmt(d2.a_bar(1, 1)) + ") matches (2+l)/(2-l)");

  double worst = 0.0;
  for (std::size_t n = 1; n <= 64; ++n) {
    ssm::SsmParams p;
    p.a = ssm::hippo_legs(n);
    p.b = ssm::hippo_legs_input(n);
    p.c = Eigen::RowVectorXd::Ones(static_cast<Eigen::Index>(n));
    worst = std::max(worst, ssm::spectral_radius(ssm::discretize_bilinear(p).a_bar));
  }
  out["max_spectral_radius"] = worst;
  v.require(worst < 1.0, "max spectral radius " + fmt(worst) + " for N<=64");
}

void criterion_4(Verdict& v, json& out) {
  ssm::DiscretizedSsm s;
  s.a_bar = Eigen::MatrixXd::Constant(1, 1, 1.0 / 3.0);
  s.b_bar = Eigen::VectorXd::Constant(1, 2.0 / 3.0);
  s.c_bar = Eigen::RowVectorXd::Constant(1, 1.0);
  const auto k = ssm::materialize_kernel(s, 3);
  const double e = std::max({std::abs(k[0] - 2.0 / 3.0), std::abs(k[1] - 2.0 / 9.0), std::abs(k[2] - 2.0 / 27.0)});
  v.require(e < 1e-12, "scalar kernel (2/3, 2/9, 2/27)");

  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    ssm::SsmParams p;
    p.a = ssm::hippo_legs(4) + 0.1 * Eigen::MatrixXd::NullaryExpr(4, 4, [&] { return nd(rng); });
    p.b = Eigen::VectorXd::NullaryExpr(4, [&] { return nd(rng); });
    p.c = Eigen::RowVectorXd::NullaryExpr(4, [&] { return nd(rng); });
    const auto d = ssm::discretize_bilinear(p);
    const auto kk = ssm::materialize_kernel(d, 16);
    Eigen::MatrixXd power = Eigen::MatrixXd::Identity(4, 4);
    for (std::size_t i = 0; i < kk.size(); ++i) {
      worst = std::max(worst, std::abs(kk[i] - static_cast<double>(d.c_bar * power * d.b_bar)));
      power = power * d.a_bar;
    }
  }
  out["random_max_error"] = worst;
  v.require(worst < 1e-6, "random N=4 vs matrix powers " + fmt(worst));
}

void criterion_5(Verdict& v, json& out) {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name;
  std::size_t count = 0;
  for (const auto& c : testing::primitive_grad_cases()) {
    const auto r = c.run();
    ++count;
    if (r.norm_rel > worst) {
      worst = r.norm_rel;
      worst_name = c.name;
    }
  }
  out["primitive_worst"] = worst;
  v.require(worst < 1e-3, std::to_string(count) + " primitives, worst " + fmt(worst) + " (" + worst_name + ")");
  const auto model = testing::tiny_model_grad_check(1e-2, 1e-2);
  out["model_norm_rel"] = model.norm_rel;
  out["model_coord_rel"] = model.coord_rel;
  v.require(model.norm_rel < 1e-2 && model.coord_rel < 1e-2,
            "tiny 0-S4 norm rel " + fmt(model.norm_rel) + ", coord rel " + fmt(model.coord_rel));
  const double secs = seconds_since(t0);
  v.require(secs < 60.0, "runtime " + fmt(secs, 3) + "s < 60s");
}

void criterion_6(Verdict& v, json& out) {
  const SyntheticTaskSpec spec = copy_spec();
  const ParallelCorpus train_set = generate(spec, 50000);
  const ParallelCorpus held = generate(spec, 300, kHeldOut);
  ModelConfig c = desk_config(kNoS4);
  c.dropout = 0.0f;
  Model m = build_model(c, 1);
  TrainerConfig t = desk_trainer(1, kCopyMaxSteps, kCopyTokens);
  t.schedule = {0.01, 400};
  const auto t0 = Clock::now();
  double acc = 0.0;
  std::uint64_t reached = 0;
  TrainOptions opts;
  opts.stop_when = [&](const StepMetrics& s) {
    if (s.step % kCopyEvalEvery != 0) return false;
    acc = teacher_forced_accuracy(m, held);
    log("  copy step " + std::to_string(s.step) + " accuracy " + fmt(acc));
    if (acc >= 0.99) reached = s.step;
    return reached != 0;
  };
  const auto r = train(m, train_set, t, opts);
  const double secs = seconds_since(t0);
  out["accuracy"] = acc;
  out["steps"] = r.steps;
  v.require(reached != 0, "held-out accuracy " + fmt(acc) + " after " + std::to_string(r.steps) + " steps");
  v.require(secs < 300.0, "training " + fmt(secs, 3) + "s < 300s");

  // the trained model also decodes the source back
  std::size_t exact = 0;
  const auto hyps = decode_corpus(m, held, DecodeOptions{}, 1);
  for (std::size_t i = 0; i < held.size(); ++i) exact += hyps[i] == held.pairs[i].tgt;
  out["exact_decodes"] = exact;
  log("  copy decode exact " + std::to_string(exact) + "/" + std::to_string(held.size()));
}

struct LexResults {
  std::map<std::string, std::vector<LexRun>> runs;
};

LexResults g_lex;

void train_lexicon_models() {
  const SyntheticTaskSpec spec = lexicon_spec();
  const ParallelCorpus train_set = generate(spec, 60000);
  const ParallelCorpus test = stratified_test(spec);
  const ParallelCorpus natural = generate(spec, kNaturalTest, 2 * kHeldOut);
  for (const Arch* a : {&kTrTr, &kNoS4, &kTrS4A, &kNoS4Ae})
    for (std::uint64_t seed : kSeeds) g_lex.runs[a->name].push_back(train_lexicon(*a, seed, train_set, test, natural));
}

std::vector<double> field(const std::string& arch, double LexRun::*f) {
  std::vector<double> out;
  for (const auto& r : g_lex.runs.at(arch)) out.push_back(r.*f);
  return out;
}

void criterion_7(Verdict& v, json& out) {
  std::vector<double> gap_short, gap_long;
  for (std::size_t i = 0; i < kSeeds.size(); ++i) {
    gap_short.push_back(g_lex.runs.at("Tr-Tr")[i].short_bleu - g_lex.runs.at("0-S4")[i].short_bleu);
    gap_long.push_back(g_lex.runs.at("Tr-Tr")[i].long_bleu - g_lex.runs.at("0-S4")[i].long_bleu);
  }
  for (const Arch* a : {&kTrTr, &kNoS4, &kTrS4A}) {
    out[a->name]["short"] = field(a->name, &LexRun::short_bleu);
    out[a->name]["long"] = field(a->name, &LexRun::long_bleu);
  }
  out["gap_short"] = mean(gap_short);
  out["gap_long"] = mean(gap_long);
  v.require(mean(gap_long) - mean(gap_short) > 1.0,
            "Tr-Tr minus 0-S4: short " + fmt(mean(gap_short)) + ", long " + fmt(mean(gap_long)));
}

void criterion_8(Verdict& v, json& out) {
  const double trtr = mean(field("Tr-Tr", &LexRun::long_bleu)), s4 = mean(field("0-S4", &LexRun::long_bleu)),
               s4a = mean(field("Tr-S4A", &LexRun::long_bleu));
  const double need = s4 + 0.5 * (trtr - s4);
  out["long"] = {{"Tr-Tr", trtr}, {"0-S4", s4}, {"Tr-S4A", s4a}, {"threshold", need}};
  v.require(s4a >= need, "long bucket Tr-S4A " + fmt(s4a) + " >= " + fmt(need) + " (0-S4 " + fmt(s4) + ", Tr-Tr " +
                             fmt(trtr) + ")");
}

// Length-100 sources with their gold translations.
std::vector<SentencePair> long_inputs(std::size_t count) {
  const SyntheticTaskSpec spec = lexicon_spec();
  const auto lex = task_lexicon(spec);
  std::mt19937_64 rng(100);
  std::uniform_int_distribution<std::int32_t> tok(kReservedTokens, kReservedTokens + kContentVocab - 1);
  std::vector<SentencePair> out;
  for (std::size_t i = 0; i < count; ++i) {
    SentencePair p;
    p.src.resize(100);
    for (auto& t : p.src) t = tok(rng);
    std::vector<std::int32_t> mapped;
    for (auto t : p.src) mapped.push_back(lex[t]);
    p.tgt = reorder_windows(mapped, spec.window);
    out.push_back(std::move(p));
  }
  return out;
}

void criterion_9(Verdict& v, json& out) {
  // (a) blurred vs sharp on long inputs
  const auto inputs = long_inputs(2);
  std::vector<double> h_s4, h_tr;
  for (std::size_t i = 0; i < kSeeds.size(); ++i) {
    h_s4.push_back(mean_source_entropy(g_lex.runs.at("0-S4")[i].model, inputs));
    h_tr.push_back(mean_source_entropy(g_lex.runs.at("Tr-Tr")[i].model, inputs));
  }
  out["a"] = {{"0-S4", h_s4}, {"Tr-Tr", h_tr}};
  v.require(mean(h_s4) > mean(h_tr), "(a) length-100 entropy 0-S4 " + fmt(mean(h_s4)) + " > Tr-Tr " + fmt(mean(h_tr)));

  // (b) more blocks per layer at a similar parameter count, on copy
  const Arch b1{"0-S4 B=1 L=5", EncoderKind::none, DecoderKind::s4, 0, 5, 1};
  const Arch b4{"0-S4 B=4 L=3", EncoderKind::none, DecoderKind::s4, 0, 3, 4};
  const SyntheticTaskSpec cs = copy_spec();
  const ParallelCorpus copy_train = generate(cs, 50000);
  std::vector<SentencePair> probe;
  for (std::uint64_t i = 3 * kHeldOut; probe.size() < 10; ++i) {
    SentencePair p = generate_pair(cs, i);
    if (p.src.size() >= 8) probe.push_back(std::move(p));
  }
  auto sweep_entropy = [&](const Arch& a, std::uint64_t seed) {
    const auto t0 = Clock::now();
    Model m = build_model(desk_config(a), seed);
    train(m, copy_train, desk_trainer(seed, kSweepSteps, kCopyTokens));
    const double h = mean_source_entropy(m, probe);
    log("  " + a.name + " seed " + std::to_string(seed) + ": entropy " + fmt(h) + " (" + fmt(seconds_since(t0), 3) + "s)");
    return h;
  };
  std::vector<double> h1, h4;
  for (std::uint64_t seed : kSeeds) {
    h1.push_back(sweep_entropy(b1, seed));
    h4.push_back(sweep_entropy(b4, seed));
  }
  out["b"] = {{"B1_params", build_model(desk_config(b1), 1).parameter_counts().total},
              {"B4_params", build_model(desk_config(b4), 1).parameter_counts().total},
              {"B1", h1},
              {"B4", h4}};
  v.require(mean(h4) < mean(h1), "(b) entropy B=4 " + fmt(mean(h4)) + " < B=1 " + fmt(mean(h1)));

  // (c) Tr-Tr on copy attends along the diagonal
  Model m = build_model(desk_config(kTrTr), 1);
  train(m, copy_train, desk_trainer(1, 1500, kCopyTokens));
  std::size_t rows = 0;
  double aligned = 0.0;
  for (const auto& p : generate(cs, 50, kHeldOut).pairs) {
    std::vector<std::size_t> diag(p.tgt.size());
    std::iota(diag.begin(), diag.end(), 0);
    const auto s = sharpness(source_attribution(m, p.src, p.tgt), diag);
    if (!s.alignment_rate) continue;
    aligned += *s.alignment_rate * static_cast<double>(s.rows_used);
    rows += s.rows_used;
  }
  const double rate = rows ? aligned / static_cast<double>(rows) : 0.0;
  out["c"] = {{"diagonal_rate", rate}, {"rows", rows}};
  v.require(rate >= 0.95, "(c) Tr-Tr copy diagonal rate " + fmt(rate));
}

void criterion_10(Verdict& v, json& out) {
  const double with = mean(field("0-S4+AE", &LexRun::natural_bleu)), without = mean(field("0-S4", &LexRun::natural_bleu));
  out["with_ae"] = field("0-S4+AE", &LexRun::natural_bleu);
  out["without_ae"] = field("0-S4", &LexRun::natural_bleu);
  std::printf("L^AE ablation: mean BLEU with %.2f, without %.2f\n", with, without);
  v.require(with <= without + 0.5, "with AE " + fmt(with) + ", without " + fmt(without));
}

void criterion_11(Verdict& v, json& out) {
  const SyntheticTaskSpec spec = lexicon_spec();
  const Vocabulary vocab = Vocabulary::synthetic(kContentVocab);
  const ParallelCorpus c = generate(spec, 200, kHeldOut);
  std::vector<std::string> refs, noisy, empty(c.size());
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::int32_t> tok(kReservedTokens, kReservedTokens + kContentVocab - 1);
  std::bernoulli_distribution flip(0.3);
  for (const auto& p : c.pairs) {
    refs.push_back(vocab.decode(p.tgt));
    auto h = p.tgt;
    for (auto& t : h)
      if (flip(rng)) t = tok(rng);
    noisy.push_back(vocab.decode(h));
  }
  std::size_t significant = 0;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) significant += paired_bootstrap(noisy, noisy, refs, 1000, seed).significant;
  const auto perfect = paired_bootstrap(refs, empty, refs, 1000, 1);
  out["self_significant"] = significant;
  out["perfect_vs_empty_p"] = perfect.p_value;
  v.require(significant <= 5, "self-comparison significant in " + std::to_string(significant) + "/100");
  v.require(perfect.p_value == 0.0, "perfect vs empty p " + fmt(perfect.p_value));
}

bool same_records(const Checkpoint& a, const Checkpoint& b) {
  if (a.records.size() != b.records.size()) return false;
  for (std::size_t i = 0; i < a.records.size(); ++i)
    if (a.records[i].name != b.records[i].name || a.records[i].shape != b.records[i].shape ||
        std::memcmp(a.records[i].data.data(), b.records[i].data.data(), a.records[i].data.size() * sizeof(float)) != 0)
      return false;
  return true;
}

void criterion_12(Verdict& v, json&) {
  const auto dir = std::filesystem::path("acceptance_work") / "determinism";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);

  ModelConfig c = desk_config(kTrS4A);
  c.d_model = 16;
  c.d_ff = 32;
  c.state_dim = 8;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  const Model m = build_model(c, 12);
  const AdamState adam = AdamState::for_params(m.params());
  const Checkpoint ck = capture(m, &adam);
  save_checkpoint(ck, dir / "m.ckpt");
  const Checkpoint back = load_checkpoint(dir / "m.ckpt");
  v.require(same_records(ck, back) && back.header == ck.header, "checkpoint round trip bitwise");

  std::vector<Checkpoint> copies(4, capture(m));
  v.require(same_records(average_checkpoints(copies), capture(m)), "average of 4 identical checkpoints bitwise");

  SyntheticTaskSpec spec = copy_spec();
  spec.max_len = 6;
  const ParallelCorpus corpus = generate(spec, 400);
  TrainerConfig t;
  t.epochs = 3;
  t.max_tokens = 256;
  t.schedule = {0.005, 20};
  t.average_last = 2;
  t.seed = 5;
  Model a = build_model(c, 1);
  train(a, corpus, t, {dir / "full", std::nullopt, nullptr});
  std::filesystem::create_directories(dir / "resumed");
  std::filesystem::copy_file(dir / "full" / "epoch_1.ckpt", dir / "resumed" / "epoch_1.ckpt");
  Model b = build_model(c, 77);
  train(b, corpus, t, {dir / "resumed", dir / "resumed" / "epoch_1.ckpt", nullptr});
  v.require(same_records(capture(a), capture(b)) &&
                same_records(load_checkpoint(dir / "full" / "averaged.ckpt"), load_checkpoint(dir / "resumed" / "averaged.ckpt")),
            "resumed training bitwise");

  const auto map = source_attribution(a, corpus.pairs[0].src, corpus.pairs[0].tgt);
  export_heatmap(map, dir / "map.csv", HeatmapFormat::csv);
  const auto read = read_heatmap_csv(dir / "map.csv");
  v.require(read.values == map.values && read.rows == map.rows && read.cols == map.cols, "CSV heatmap round trip exact");
}

void criterion_13(Verdict& v, json&) {
  const double base = 0.005;
  for (std::size_t warmup : {2u, 100u, 4000u}) {
    const LrSchedule s{base, warmup};
    const double w = static_cast<double>(warmup);
    const bool at_warmup = std::abs(lr_at(s, warmup) - base) < 1e-12;
    const bool at_four = std::abs(lr_at(s, 4 * warmup) - base / 2) < 1e-12;
    // each side of the boundary follows its own branch, and both branches give base at s = warmup
    const bool left = std::abs(lr_at(s, warmup - 1) - base * (w - 1) / w) < 1e-12;
    const bool right = std::abs(lr_at(s, warmup + 1) - base * std::sqrt(w / (w + 1))) < 1e-12;
    const bool meet = std::abs(base * w / w - base * std::sqrt(w / w)) < 1e-12;
    v.require(at_warmup && at_four && left && right && meet, "warmup " + std::to_string(warmup));
  }
}

}  // namespace

int main() {
  // Keep freed buffers in the heap; the training loop reallocates the same
  // sizes every step.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);

  const auto t0 = Clock::now();
  run(1, criterion_1);
  run(2, criterion_2);
  run(3, criterion_3);
  run(4, criterion_4);
  run(5, criterion_5);
  run(6, criterion_6);

  bool lex_ok = true;
  try {
    train_lexicon_models();
  } catch (const std::exception& e) {
    lex_ok = false;
    log(std::string("lexicon training failed: ") + e.what());
  }
  if (lex_ok) {
    run(7, criterion_7);
    run(8, criterion_8);
    run(9, criterion_9);
    run(10, criterion_10);
  } else {
    for (int id : {7, 8, 9, 10}) {
      Verdict v;
      v.require(false, "lexicon models unavailable");
      report(id, v, 0.0);
    }
  }

  run(11, criterion_11);
  run(12, criterion_12);
  run(13, criterion_13);

  g_report["total_seconds"] = seconds_since(t0);
  std::ofstream("acceptance_report.json") << g_report.dump(2) << '\n';
  std::printf("%d criteria failed (%.0fs)\n", g_failures, seconds_since(t0));
  return g_failures == 0 ? 0 : 1;
}
