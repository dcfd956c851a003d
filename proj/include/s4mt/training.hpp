#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "s4mt/data.hpp"
#include "s4mt/model.hpp"

namespace s4mt {

struct LrSchedule {
  double base_lr = 0.005;
  std::size_t warmup_steps = 4000;
};

// base_lr * min(step / warmup, sqrt(warmup / step)); step >= 1.
double lr_at(const LrSchedule& sched, std::uint64_t step);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  std::uint64_t step = 0;
  std::vector<std::vector<float>> m;  // one buffer per parameter, in ParamList order
  std::vector<std::vector<float>> v;

  static AdamState for_params(const ParamList& params);
};

// Bias-corrected Adam on every parameter that holds a gradient. A non-finite
// gradient aborts before anything is modified (NumericError naming the tensor).
void adam_step(ParamList& params, AdamState& state, double lr);
// Scales gradients so their global L2 norm is at most max_norm; returns the
// norm before scaling.
double clip_grad_norm(ParamList& params, double max_norm);
void zero_grads(ParamList& params);

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  json header;  // {"model": ModelConfig, "step", "epoch", "rng", ...}
  std::vector<TensorRecord> records;

  const TensorRecord* find(const std::string& name) const;
};

// Parameters plus optional optimizer moments ("optim/m/<name>", "optim/v/<name>").
Checkpoint capture(const Model& model, const AdamState* adam = nullptr);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Builds the model described by the header and copies its parameters.
Model model_from_checkpoint(const Checkpoint& ckpt);
void restore_parameters(Model& model, const Checkpoint& ckpt);
AdamState restore_adam(const Model& model, const Checkpoint& ckpt);

class IncompatibleCheckpoint : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Per-parameter mean (float64, fixed input order); optimizer records dropped;
// step = max over inputs.
Checkpoint average_checkpoints(std::span<const Checkpoint> inputs);
Checkpoint average_checkpoints(std::span<const std::filesystem::path> paths);

struct TrainerConfig {
  std::size_t epochs = 1;
  std::size_t max_steps = 0;  // 0 = no limit
  LrSchedule schedule;
  double clip_norm = 1.0;
  std::size_t max_tokens = 4096;
  std::size_t average_last = 0;  // 0 = no averaged checkpoint
  std::uint64_t seed = 1;
  std::size_t log_every = 1;

  json to_json() const;
  static TrainerConfig from_json(const json& j);
};

struct StepMetrics {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double mt_loss = 0.0;
  std::optional<double> ae_loss;
  double grad_norm = 0.0;
  double tokens_per_sec = 0.0;

  json to_json() const;
};

struct TrainResult {
  std::uint64_t steps = 0;
  std::size_t epochs_completed = 0;
  std::vector<std::filesystem::path> checkpoints;
  std::optional<std::filesystem::path> averaged;
  std::optional<StepMetrics> last;
};

class TrainingDiverged : public NumericError {
 public:
  using NumericError::NumericError;
};

// Source order the model sees (reversed when the config asks for it).
ParallelCorpus model_view(const ModelConfig& cfg, const ParallelCorpus& corpus);

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;    // epoch checkpoints + metrics.jsonl
  std::optional<std::filesystem::path> resume;     // epoch checkpoint to continue from
  std::function<void(const StepMetrics&)> on_step;  // optional
  // Checked after each step; true ends training there (no epoch checkpoint).
  std::function<bool(const StepMetrics&)> stop_when;
};

// Trains in place. Batches are rebuilt per epoch from (seed, epoch), so a run
// resumed from an epoch checkpoint matches the uninterrupted one bit for bit.
TrainResult train(Model& model, const ParallelCorpus& corpus, const TrainerConfig& cfg,
                  const TrainOptions& options = {});

}  // namespace s4mt
