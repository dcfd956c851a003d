#include "s4mt/training.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace s4mt {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

double lr_at(const LrSchedule& sched, std::uint64_t step) {
  if (step == 0) throw std::invalid_argument("lr_at: step must be >= 1");
  if (sched.warmup_steps == 0) throw std::invalid_argument("lr_at: warmup_steps must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(sched.warmup_steps);
  return sched.base_lr * std::min(s / w, std::sqrt(w / s));
}

AdamState AdamState::for_params(const ParamList& params) {
  AdamState s;
  for (const auto& [name, t] : params.items()) {
    s.m.emplace_back(t.numel(), 0.0f);
    s.v.emplace_back(t.numel(), 0.0f);
  }
  return s;
}

void adam_step(ParamList& params, AdamState& state, double lr) {
  auto& items = params.items();
  if (state.m.size() != items.size()) throw ContractError("adam_step: optimizer state does not match parameters");
  for (const auto& [name, t] : items) {
    if (!t.has_grad()) continue;
    for (float g : t.grad())
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in " + name);
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < items.size(); ++i) {
    Tensor& t = items[i].second;
    if (!t.has_grad()) continue;
    auto g = t.grad();
    auto p = t.data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
      const double vj = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      p[j] = static_cast<float>(p[j] - lr * (mj / c1) / (std::sqrt(vj / c2) + state.eps));
    }
  }
}

double clip_grad_norm(ParamList& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, t] : params.items())
    if (t.has_grad())
      for (float g : t.grad()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& [name, t] : params.items())
      if (t.has_grad())
        for (float& g : t.mutable_grad()) g = static_cast<float>(g * factor);
  }
  return norm;
}

void zero_grads(ParamList& params) {
  for (auto& [name, t] : params.items()) t.zero_grad();
}

// ---------------------------------------------------------------------------
// Checkpoints

const TensorRecord* Checkpoint::find(const std::string& name) const {
  for (const auto& r : records)
    if (r.name == name) return &r;
  return nullptr;
}

namespace {

constexpr char kMagic[4] = {'S', '4', 'M', 'T'};
const std::string kMomentPrefix[2] = {"optim/m/", "optim/v/"};

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T take(std::istream& in, const std::string& what) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) throw IoError("truncated checkpoint while reading " + what);
  return value;
}

bool is_optimizer_record(const std::string& name) { return name.rfind("optim/", 0) == 0; }

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream s;
  s << rng;
  return s.str();
}

}  // namespace

Checkpoint capture(const Model& model, const AdamState* adam) {
  Checkpoint c;
  c.header = {{"model", model.config().to_json()}, {"step", 0}, {"epoch", 0}};
  for (const auto& [name, t] : model.params().items()) {
    c.records.push_back({name, t.shape(), std::vector<float>(t.data().begin(), t.data().end())});
  }
  if (adam) {
    const auto& items = model.params().items();
    for (int k = 0; k < 2; ++k) {
      const auto& buffers = k == 0 ? adam->m : adam->v;
      for (std::size_t i = 0; i < items.size(); ++i)
        c.records.push_back({kMomentPrefix[k] + items[i].first, items[i].second.shape(), buffers[i]});
    }
    c.header["adam"] = {{"step", adam->step}, {"beta1", adam->beta1}, {"beta2", adam->beta2}, {"eps", adam->eps}};
  }
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    const std::string header = ckpt.header.dump();
    out.write(kMagic, 4);
    put<std::uint32_t>(out, Checkpoint::kVersion);
    put<std::uint64_t>(out, header.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& r : ckpt.records) {
      if (r.name.size() > 0xffff) throw IoError("parameter name too long: " + r.name);
      if (r.shape.size() > 0xff) throw IoError("parameter rank too large: " + r.name);
      if (shape_numel(r.shape) != r.data.size()) throw ShapeError("record " + r.name + " shape/data mismatch");
      put<std::uint16_t>(out, static_cast<std::uint16_t>(r.name.size()));
      out.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
      put<std::uint8_t>(out, static_cast<std::uint8_t>(r.shape.size()));
      for (std::size_t d : r.shape) put<std::uint64_t>(out, d);
      out.write(reinterpret_cast<const char*>(r.data.data()), static_cast<std::streamsize>(r.data.size() * sizeof(float)));
    }
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw IoError(path.string() + " is not a checkpoint");
  const auto version = take<std::uint32_t>(in, "version");
  if (version != Checkpoint::kVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  const auto header_len = take<std::uint64_t>(in, "header length");
  std::string header(header_len, '\0');
  if (!in.read(header.data(), static_cast<std::streamsize>(header_len))) throw IoError("truncated checkpoint header");
  Checkpoint c;
  try {
    c.header = json::parse(header);
  } catch (const json::exception& e) {
    throw IoError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  while (in.peek() != std::char_traits<char>::eof()) {
    TensorRecord r;
    const auto name_len = take<std::uint16_t>(in, "name length");
    r.name.resize(name_len);
    if (!in.read(r.name.data(), name_len)) throw IoError("truncated parameter name");
    const auto rank = take<std::uint8_t>(in, r.name + " rank");
    for (std::uint8_t i = 0; i < rank; ++i) r.shape.push_back(take<std::uint64_t>(in, r.name + " dims"));
    r.data.resize(shape_numel(r.shape));
    if (!in.read(reinterpret_cast<char*>(r.data.data()), static_cast<std::streamsize>(r.data.size() * sizeof(float))))
      throw IoError("truncated payload for " + r.name);
    c.records.push_back(std::move(r));
  }
  return c;
}

void restore_parameters(Model& model, const Checkpoint& ckpt) {
  for (auto& [name, t] : model.params().items()) {
    const TensorRecord* r = ckpt.find(name);
    if (!r) throw IncompatibleCheckpoint("checkpoint lacks parameter " + name);
    if (r->shape != t.shape())
      throw IncompatibleCheckpoint("parameter " + name + " has shape " + shape_str(r->shape) + " in checkpoint, " +
                                   shape_str(t.shape()) + " in model");
    std::copy(r->data.begin(), r->data.end(), t.data().begin());
  }
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.header.contains("model")) throw IncompatibleCheckpoint("checkpoint header lacks a model config");
  Model model(ModelConfig::from_json(ckpt.header.at("model")), 0);
  restore_parameters(model, ckpt);
  return model;
}

AdamState restore_adam(const Model& model, const Checkpoint& ckpt) {
  AdamState s = AdamState::for_params(model.params());
  if (!ckpt.header.contains("adam")) throw IncompatibleCheckpoint("checkpoint holds no optimizer state");
  const json& a = ckpt.header.at("adam");
  s.step = a.at("step").get<std::uint64_t>();
  s.beta1 = a.at("beta1").get<double>();
  s.beta2 = a.at("beta2").get<double>();
  s.eps = a.at("eps").get<double>();
  const auto& items = model.params().items();
  for (int k = 0; k < 2; ++k) {
    auto& buffers = k == 0 ? s.m : s.v;
    for (std::size_t i = 0; i < items.size(); ++i) {
      const TensorRecord* r = ckpt.find(kMomentPrefix[k] + items[i].first);
      if (!r || r->data.size() != buffers[i].size())
        throw IncompatibleCheckpoint("optimizer moment missing or mis-sized for " + items[i].first);
      buffers[i] = r->data;
    }
  }
  return s;
}

Checkpoint average_checkpoints(std::span<const Checkpoint> inputs) {
  if (inputs.empty()) throw std::invalid_argument("average_checkpoints: no inputs");
  const json& model0 = inputs[0].header.at("model");
  for (std::size_t k = 1; k < inputs.size(); ++k) {
    const json& mk = inputs[k].header.at("model");
    for (auto it = model0.begin(); it != model0.end(); ++it) {
      if (!mk.contains(it.key()) || mk.at(it.key()) != it.value())
        throw IncompatibleCheckpoint("checkpoint " + std::to_string(k) + " differs in model." + it.key());
    }
    for (auto it = mk.begin(); it != mk.end(); ++it)
      if (!model0.contains(it.key()))
        throw IncompatibleCheckpoint("checkpoint " + std::to_string(k) + " differs in model." + it.key());
  }
  Checkpoint out;
  out.header = {{"model", model0}, {"epoch", inputs.back().header.value("epoch", 0)}};
  std::uint64_t step = 0;
  for (const auto& c : inputs) step = std::max(step, c.header.value("step", std::uint64_t{0}));
  out.header["step"] = step;
  out.header["averaged"] = inputs.size();
  const double n = static_cast<double>(inputs.size());
  for (const auto& r0 : inputs[0].records) {
    if (is_optimizer_record(r0.name)) continue;
    std::vector<double> acc(r0.data.begin(), r0.data.end());
    for (std::size_t k = 1; k < inputs.size(); ++k) {
      const TensorRecord* r = inputs[k].find(r0.name);
      if (!r || r->shape != r0.shape)
        throw IncompatibleCheckpoint("checkpoint " + std::to_string(k) + " differs in parameter " + r0.name);
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += r->data[j];
    }
    TensorRecord avg{r0.name, r0.shape, std::vector<float>(acc.size())};
    for (std::size_t j = 0; j < acc.size(); ++j) avg.data[j] = static_cast<float>(acc[j] / n);
    out.records.push_back(std::move(avg));
  }
  return out;
}

Checkpoint average_checkpoints(std::span<const std::filesystem::path> paths) {
  std::vector<Checkpoint> loaded;
  for (const auto& p : paths) loaded.push_back(load_checkpoint(p));
  return average_checkpoints(std::span<const Checkpoint>(loaded));
}

// ---------------------------------------------------------------------------
// Training loop

json TrainerConfig::to_json() const {
  return json{{"epochs", epochs},
              {"max_steps", max_steps},
              {"base_lr", schedule.base_lr},
              {"warmup_steps", schedule.warmup_steps},
              {"clip_norm", clip_norm},
              {"max_tokens", max_tokens},
              {"average_last", average_last},
              {"seed", seed},
              {"log_every", log_every}};
}

TrainerConfig TrainerConfig::from_json(const json& j) {
  TrainerConfig c;
  StrictObject o(j, "trainer");
  o.get("epochs", c.epochs);
  o.get("max_steps", c.max_steps);
  o.get("base_lr", c.schedule.base_lr);
  o.get("warmup_steps", c.schedule.warmup_steps);
  o.get("clip_norm", c.clip_norm);
  o.get("max_tokens", c.max_tokens);
  o.get("average_last", c.average_last);
  o.get("seed", c.seed);
  o.get("log_every", c.log_every);
  o.finish();
  if (!(c.schedule.base_lr > 0.0)) throw ConfigError("trainer.base_lr must be positive");
  if (c.schedule.warmup_steps == 0) throw ConfigError("trainer.warmup_steps must be >= 1");
  if (c.max_tokens == 0) throw ConfigError("trainer.max_tokens must be >= 1");
  if (c.log_every == 0) throw ConfigError("trainer.log_every must be >= 1");
  return c;
}

json StepMetrics::to_json() const {
  json j{{"step", step}, {"epoch", epoch}, {"lr", lr}, {"mt_loss", mt_loss}, {"grad_norm", grad_norm},
         {"tokens_per_sec", tokens_per_sec}};
  j["ae_loss"] = ae_loss ? json(*ae_loss) : json(nullptr);
  return j;
}

ParallelCorpus model_view(const ModelConfig& cfg, const ParallelCorpus& corpus) {
  return cfg.reverse_source ? reverse_source(corpus) : corpus;
}

TrainResult train(Model& model, const ParallelCorpus& corpus, const TrainerConfig& cfg, const TrainOptions& options) {
  TrainResult result;
  const ParallelCorpus view = model_view(model.config(), corpus);
  std::mt19937_64 rng(cfg.seed);
  AdamState adam = AdamState::for_params(model.params());
  std::uint64_t step = 0;
  std::size_t start_epoch = 0;

  if (options.resume) {
    const Checkpoint ckpt = load_checkpoint(*options.resume);
    restore_parameters(model, ckpt);
    adam = restore_adam(model, ckpt);
    step = ckpt.header.at("step").get<std::uint64_t>();
    start_epoch = ckpt.header.at("epoch").get<std::size_t>();
    std::istringstream(ckpt.header.at("rng").get<std::string>()) >> rng;
  }

  std::ofstream metrics;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    metrics.open(*options.out_dir / "metrics.jsonl", options.resume ? std::ios::app : std::ios::trunc);
    if (!metrics) throw IoError("cannot write metrics in " + options.out_dir->string());
  }

  BatchConfig bc;
  bc.max_tokens = cfg.max_tokens;
  bc.decoder_only = model.config().decoder_only();
  bc.seed = cfg.seed;

  bool stop = cfg.max_steps != 0 && step >= cfg.max_steps;
  for (std::size_t epoch = start_epoch; epoch < cfg.epochs && !stop; ++epoch) {
    const std::vector<SequenceBatch> batches = make_batches(view, bc, epoch);
    for (const SequenceBatch& batch : batches) {
      const auto t0 = std::chrono::steady_clock::now();
      ++step;
      const double lr = lr_at(cfg.schedule, step);
      ForwardContext ctx{true, model.config().dropout, &rng};
      LossBreakdown loss = forward_loss(model, batch, ctx);
      StepMetrics sm;
      sm.step = step;
      sm.epoch = epoch;
      sm.lr = lr;
      sm.mt_loss = loss.mt_loss.item();
      if (loss.ae_loss) sm.ae_loss = loss.ae_loss->item();
      if (!std::isfinite(loss.total.item())) {
        Tape::current().clear();
        std::string msg = "training diverged at step " + std::to_string(step);
        if (!result.checkpoints.empty()) msg += "; last good checkpoint " + result.checkpoints.back().string();
        throw TrainingDiverged(msg);
      }
      backward(loss.total);
      sm.grad_norm = clip_grad_norm(model.params(), cfg.clip_norm);
      adam_step(model.params(), adam, lr);
      zero_grads(model.params());
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::size_t tokens = 0;
      for (std::size_t len : batch.tgt_lengths) tokens += len;
      for (std::size_t len : batch.src_lengths) tokens += len;
      sm.tokens_per_sec = secs > 0.0 ? static_cast<double>(tokens) / secs : 0.0;
      if (metrics.is_open() && step % cfg.log_every == 0) metrics << sm.to_json().dump() << '\n';
      if (options.on_step) options.on_step(sm);
      result.last = sm;
      if ((cfg.max_steps != 0 && step >= cfg.max_steps) || (options.stop_when && options.stop_when(sm))) {
        stop = true;
        break;
      }
    }
    if (stop) break;
    result.epochs_completed = epoch + 1;
    if (options.out_dir) {
      Checkpoint ckpt = capture(model, &adam);
      ckpt.header["step"] = step;
      ckpt.header["epoch"] = epoch + 1;
      ckpt.header["rng"] = rng_state(rng);
      ckpt.header["trainer"] = cfg.to_json();
      const auto path = *options.out_dir / ("epoch_" + std::to_string(epoch + 1) + ".ckpt");
      save_checkpoint(ckpt, path);
      result.checkpoints.push_back(path);
    }
  }
  result.steps = step;

  if (options.out_dir && cfg.average_last > 0 && !result.checkpoints.empty()) {
    // by epoch number, so a resumed run also picks up checkpoints written before the resume
    const std::size_t last_epoch = result.epochs_completed;
    std::vector<std::filesystem::path> last;
    for (std::size_t e = last_epoch; e >= 1 && last.size() < cfg.average_last; --e) {
      const auto path = *options.out_dir / ("epoch_" + std::to_string(e) + ".ckpt");
      if (!std::filesystem::exists(path)) break;
      last.insert(last.begin(), path);
    }
    const auto path = *options.out_dir / "averaged.ckpt";
    save_checkpoint(average_checkpoints(std::span<const std::filesystem::path>(last)), path);
    result.averaged = path;
  }
  return result;
}

}  // namespace s4mt
