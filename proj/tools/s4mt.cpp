// s4mt command line: data generation, training, evaluation, significance,
// attribution heatmaps and the kernel duality check.
#include <malloc.h>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "s4mt/attribution.hpp"
#include "s4mt/data.hpp"
#include "s4mt/evaluation.hpp"
#include "s4mt/kernel_check.hpp"
#include "s4mt/model.hpp"
#include "s4mt/training.hpp"

namespace fs = std::filesystem;
using namespace s4mt;

namespace {

enum Exit { kOk = 0, kFail = 1, kConfig = 2, kIo = 3, kNumeric = 4 };

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::size_t default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string spec, out;
  std::size_t n = 0;
};

int gen_data(const GenDataArgs& a) {
  json j = read_json(a.spec);
  // Either a bare task spec or a run config with a "task" section.
  if (j.is_object() && j.contains("task") && j["task"].is_object()) j = j["task"];
  const SyntheticTaskSpec spec = SyntheticTaskSpec::from_json(j);
  const fs::path out(a.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());

  const std::size_t n_valid = a.n / 10, n_test = a.n / 10;
  const std::size_t n_train = a.n - n_valid - n_test;
  const Vocabulary vocab = Vocabulary::synthetic(spec.vocab_size);
  vocab.save(out / "vocab.txt");
  write_corpus(out, "train", generate(spec, n_train, 0), vocab);
  write_corpus(out, "valid", generate(spec, n_valid, n_train), vocab);
  write_corpus(out, "test", generate(spec, n_test, n_train + n_valid), vocab);
  write_json(out / "spec.json", spec.to_json());
  std::cout << json{{"train", n_train}, {"valid", n_valid}, {"test", n_test}}.dump() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, data, out, resume;
  std::size_t average_last = 0;
  bool average_set = false;
};

struct RunConfig {
  ModelConfig model;
  TrainerConfig trainer;
  json task;  // kept verbatim when present
  json eval;
  std::uint64_t seed = 1;

  json to_json() const {
    json j{{"model", model.to_json()}, {"trainer", trainer.to_json()}, {"seed", seed}};
    if (!task.is_null()) j["task"] = task;
    if (!eval.is_null()) j["eval"] = eval;
    return j;
  }
};

RunConfig parse_run_config(const json& j, std::size_t vocab_ids) {
  RunConfig rc;
  StrictObject o(j, "config");
  o.get("seed", rc.seed);
  json model = json::object();
  if (const json* m = o.sub("model")) model = *m;
  if (!model.is_object()) throw ConfigError("config.model: expected a JSON object");
  if (model.contains("vocab_size") && model["vocab_size"] != vocab_ids)
    throw ConfigError("config.model.vocab_size is " + model["vocab_size"].dump() + " but the data vocabulary has " +
                      std::to_string(vocab_ids) + " ids");
  model["vocab_size"] = vocab_ids;
  rc.model = ModelConfig::from_json(model);
  if (const json* t = o.sub("trainer")) rc.trainer = TrainerConfig::from_json(*t);
  if (const json* t = o.sub("task")) {
    SyntheticTaskSpec::from_json(*t);  // validation only
    rc.task = *t;
  }
  if (const json* e = o.sub("eval")) {
    StrictObject eo(*e, "config.eval");
    DecodeOptions d;
    std::vector<std::size_t> buckets;
    std::string by;
    eo.get("beam", d.beam);
    eo.get("alpha", d.alpha);
    eo.get("buckets", buckets);
    eo.get("bucket_by", by);
    eo.finish();
    rc.eval = *e;
  }
  o.finish();
  return rc;
}

int train_cmd(const TrainArgs& a) {
  const fs::path data(a.data), out(a.out);
  const Vocabulary vocab = Vocabulary::load(data / "vocab.txt");
  RunConfig rc = parse_run_config(read_json(a.config), vocab.size());
  if (a.average_set) rc.trainer.average_last = a.average_last;
  const ParallelCorpus corpus = read_corpus(data, "train", vocab);
  if (corpus.size() == 0) throw ConfigError("training corpus " + (data / "train").string() + " is empty");

  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  write_json(out / "config.json", rc.to_json());

  Model model = build_model(rc.model, rc.seed);
  TrainOptions opts;
  opts.out_dir = out;
  if (!a.resume.empty()) opts.resume = fs::path(a.resume);
  opts.on_step = [&](const StepMetrics& m) {
    if (m.step % rc.trainer.log_every == 0)
      std::cerr << "step " << m.step << " epoch " << m.epoch << " lr " << m.lr << " loss " << m.mt_loss << '\n';
  };
  const TrainResult r = train(model, corpus, rc.trainer, opts);
  json summary{{"steps", r.steps}, {"epochs", r.epochs_completed}};
  json ckpts = json::array();
  for (const auto& p : r.checkpoints) ckpts.push_back(p.string());
  summary["checkpoints"] = ckpts;
  summary["averaged"] = r.averaged ? json(r.averaged->string()) : json(nullptr);
  std::cout << summary.dump() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string model, data, split = "test", buckets = "18,30", bucket_by = "reference", hyps_out;
  std::size_t beam = 4;
  double alpha = 0.6;
  std::size_t threads = 0;
};

// "none" (or an empty string) gives a single bucket
std::vector<std::size_t> parse_boundaries(const std::string& text) {
  std::vector<std::size_t> out;
  if (text == "none") return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size() || v == 0) throw ConfigError("--buckets: bad boundary '" + item + "'");
    if (!out.empty() && v <= out.back()) throw ConfigError("--buckets: boundaries must increase");
    out.push_back(v);
  }
  return out;
}

int evaluate_cmd(const EvalArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.model);
  const Model model = model_from_checkpoint(ckpt);
  const fs::path data(a.data);
  const Vocabulary vocab = Vocabulary::load(data / "vocab.txt");
  if (vocab.size() != model.config().vocab_size)
    throw ConfigError("vocabulary has " + std::to_string(vocab.size()) + " ids but the model expects " +
                      std::to_string(model.config().vocab_size));
  const ParallelCorpus corpus = read_corpus(data, a.split, vocab);
  if (corpus.size() == 0) throw ConfigError("evaluation corpus is empty");
  LengthBuckets buckets;
  buckets.boundaries = parse_boundaries(a.buckets);
  if (a.bucket_by != "source" && a.bucket_by != "reference")
    throw ConfigError("--bucket-by must be source or reference");
  if (a.beam == 0) throw ConfigError("--beam must be >= 1");
  DecodeOptions d;
  d.beam = a.beam;
  d.alpha = a.alpha;
  const std::size_t threads = a.threads ? a.threads : default_threads();
  const auto hyps = decode_corpus(model, corpus, d, threads);
  std::vector<std::string> hyp_text, ref_text;
  std::vector<std::size_t> lengths;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    hyp_text.push_back(vocab.decode(hyps[i]));
    ref_text.push_back(vocab.decode(corpus.pairs[i].tgt));
    lengths.push_back(a.bucket_by == "source" ? corpus.pairs[i].src.size() : corpus.pairs[i].tgt.size());
  }
  if (!a.hyps_out.empty()) {
    std::ofstream out(a.hyps_out);
    if (!out) throw IoError("cannot write " + a.hyps_out);
    for (const auto& h : hyp_text) out << h << '\n';
  }
  BucketReport report = bucket_report(hyp_text, ref_text, lengths, buckets);
  report.decode = d;
  std::cout << report.to_json().dump(2) << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------

struct HeatmapArgs {
  std::string model, sentence, vocab, mode = "source", format = "csv", out;
  std::size_t threads = 0;
  bool normalize = false;
};

int heatmap_cmd(const HeatmapArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.model);
  const Model model = model_from_checkpoint(ckpt);
  const Vocabulary vocab = Vocabulary::load(a.vocab);
  if (vocab.size() != model.config().vocab_size)
    throw ConfigError("vocabulary size does not match the model");
  HeatmapFormat format;
  if (a.format == "csv") format = HeatmapFormat::csv;
  else if (a.format == "pgm") format = HeatmapFormat::pgm;
  else if (a.format == "svg") format = HeatmapFormat::svg;
  else throw ConfigError("--format must be csv, pgm or svg");
  if (a.mode != "source" && a.mode != "target") throw ConfigError("--mode must be source or target");

  // Line 1: source sentence. Optional line 2: forced target; otherwise the
  // model's own greedy output is forced.
  const auto lines = read_lines(a.sentence);
  if (lines.empty() || lines[0].empty()) throw ConfigError(a.sentence + ": missing source sentence");
  const auto source = vocab.encode(lines[0]);
  std::vector<std::int32_t> target =
      lines.size() > 1 && !lines[1].empty() ? vocab.encode(lines[1]) : greedy_decode(model, source);
  if (target.empty()) throw NumericError("model produced an empty translation; pass a target on line 2");

  AttributionOptions opts;
  opts.threads = a.threads ? a.threads : default_threads();
  opts.vocab = &vocab;
  AttributionMap map = a.mode == "source" ? source_attribution(model, source, target, opts)
                                          : target_attribution(model, source, target, opts);
  if (a.normalize) map = map.normalized_rows();
  const fs::path out = a.out.empty() ? fs::path("heatmap." + a.format) : fs::path(a.out);
  json meta{{"model", a.model}, {"source", lines[0]}, {"target", vocab.decode(target)}};
  export_heatmap(map, out, format, meta);
  const SharpnessStats s = sharpness(map);
  std::cout << json{{"path", out.string()},
                    {"rows", map.rows},
                    {"cols", map.cols},
                    {"mean_entropy", s.mean_entropy},
                    {"mean_max_over_mean", s.mean_max_over_mean},
                    {"zero_rows", s.zero_rows}}
                   .dump()
            << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------

struct KernelArgs {
  ssm::KernelCheckOptions opts;
  std::string csv;
};

int check_kernel_cmd(const KernelArgs& a) {
  if (a.opts.state_dim == 0 || a.opts.length == 0 || a.opts.channels == 0)
    throw ConfigError("--n, --len and --channels must be >= 1");
  const auto r = ssm::check_kernel_duality(a.opts);
  std::printf("trial,residual,spectral_radius\n");
  for (const auto& t : r.trials) std::printf("%zu,%.9g,%.9g\n", t.index, t.residual, t.spectral_radius);
  if (!a.csv.empty()) {
    std::ofstream out(a.csv);
    if (!out) throw IoError("cannot write " + a.csv);
    out << "trial,t,channel,kernel\n";
    out.precision(9);
    for (const auto& t : r.trials)
      for (std::size_t i = 0; i < t.kernel.size(); ++i)
        out << t.index << ',' << i / a.opts.channels << ',' << i % a.opts.channels << ',' << t.kernel[i] << '\n';
  }
  std::fprintf(stderr, "max residual %.3g: %s\n", r.max_residual, r.passed ? "ok" : "FAILED");
  return r.passed ? kOk : kFail;
}

// ---------------------------------------------------------------------------

struct SignificanceArgs {
  std::string hyps_a, hyps_b, refs;
  std::size_t resamples = 1000;
  std::uint64_t seed = 1;
};

int significance_cmd(const SignificanceArgs& a) {
  const auto ha = read_lines(a.hyps_a), hb = read_lines(a.hyps_b), refs = read_lines(a.refs);
  if (ha.size() != refs.size() || hb.size() != refs.size())
    throw ConfigError("hypothesis and reference files differ in line count");
  const auto r = paired_bootstrap(ha, hb, refs, a.resamples, a.seed);
  std::cout << r.to_json().dump() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  // training reallocates the same large buffers every step; keep them in the heap
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);

  CLI::App app{"State-space sequence-to-sequence translation toolkit"};
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic parallel corpus");
  gen->add_option("--spec", gd.spec, "task spec JSON")->required();
  gen->add_option("--out", gd.out, "output directory")->required();
  gen->add_option("--n", gd.n, "total sentence pairs (80/10/10 split)")->required();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "train a model");
  tr->add_option("--config", ta.config, "run config JSON")->required();
  tr->add_option("--data", ta.data, "directory written by gen-data")->required();
  tr->add_option("--out", ta.out, "output directory")->required();
  tr->add_option("--resume", ta.resume, "epoch checkpoint to continue from");
  auto* avg = tr->add_option("--average-last", ta.average_last, "average the last k epoch checkpoints");

  EvalArgs ea;
  auto* ev = app.add_subcommand("evaluate", "decode and score a split");
  ev->add_option("--model", ea.model, "checkpoint")->required();
  ev->add_option("--data", ea.data, "data directory")->required();
  ev->add_option("--split", ea.split, "split name");
  ev->add_option("--buckets", ea.buckets, "comma-separated bucket boundaries, or none");
  ev->add_option("--bucket-by", ea.bucket_by, "source or reference");
  ev->add_option("--beam", ea.beam, "beam size");
  ev->add_option("--alpha", ea.alpha, "length normalization exponent");
  ev->add_option("--threads", ea.threads, "decoding workers (0 = all cores)");
  ev->add_option("--hyps-out", ea.hyps_out, "write hypotheses here");

  HeatmapArgs ha;
  auto* hm = app.add_subcommand("heatmap", "masking attribution heatmap for one sentence");
  hm->add_option("--model", ha.model, "checkpoint")->required();
  hm->add_option("--sentence", ha.sentence, "file: source line, optional forced target line")->required();
  hm->add_option("--vocab", ha.vocab, "vocabulary file")->required();
  hm->add_option("--mode", ha.mode, "source or target");
  hm->add_option("--format", ha.format, "csv, pgm or svg");
  hm->add_option("--out", ha.out, "output path");
  hm->add_option("--threads", ha.threads, "workers (0 = all cores)");
  hm->add_flag("--normalize", ha.normalize, "row-normalize before export");

  KernelArgs ka;
  auto* ck = app.add_subcommand("check-kernel", "convolution vs recurrence duality check");
  ck->add_option("--n", ka.opts.state_dim, "state size");
  ck->add_option("--len", ka.opts.length, "sequence length");
  ck->add_option("--channels", ka.opts.channels, "channels");
  ck->add_option("--trials", ka.opts.trials, "random draws");
  ck->add_option("--seed", ka.opts.seed, "seed");
  ck->add_option("--csv", ka.csv, "dump kernels here");
  ck->add_flag("--inject-unstable", ka.opts.inject_unstable, "rescale A_bar to spectral radius 1.5");

  SignificanceArgs sa;
  auto* sg = app.add_subcommand("significance", "paired bootstrap test that A beats B");
  sg->add_option("--hyps-a", sa.hyps_a, "system A hypotheses")->required();
  sg->add_option("--hyps-b", sa.hyps_b, "system B hypotheses")->required();
  sg->add_option("--refs", sa.refs, "references")->required();
  sg->add_option("--resamples", sa.resamples, "bootstrap resamples");
  sg->add_option("--seed", sa.seed, "seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) return gen_data(gd);
    if (*tr) {
      ta.average_set = avg->count() > 0;
      return train_cmd(ta);
    }
    if (*ev) return evaluate_cmd(ea);
    if (*hm) return heatmap_cmd(ha);
    if (*ck) return check_kernel_cmd(ka);
    if (*sg) return significance_cmd(sa);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::invalid_argument& e) {  // ConfigError, ShapeError, bad arguments
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFail;
  }
  return kOk;
}
