#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "s4mt/data.hpp"
#include "s4mt/model.hpp"

namespace s4mt {

enum class AttributionMode { source, target };

// Rows are generated target tokens y_1..y_m; row i holds the decoder state
// that predicts y_i. Source columns are x_1..x_n; target columns are the
// decoder inputs (start token, y_1, ..., y_{m-1}) and row i only defines
// columns j < i (0-based row i covers columns 0..i).
struct AttributionMap {
  AttributionMode mode = AttributionMode::source;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;  // row-major, >= 0
  std::vector<std::string> row_labels;
  std::vector<std::string> column_labels;
  std::vector<std::uint8_t> flagged_rows;  // baseline activation norm was zero
  bool normalized = false;

  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::size_t defined_columns(std::size_t row) const {
    return mode == AttributionMode::source ? cols : std::min(cols, row + 1);
  }
  // Each non-zero row rescaled to sum to 1.
  AttributionMap normalized_rows() const;
};

struct AttributionOptions {
  std::size_t threads = 1;
  std::size_t chunk = 16;         // masked variants per forward pass
  bool zero_upper = true;         // target mode: force undefined entries to 0
  const Vocabulary* vocab = nullptr;  // for labels
};

// Teacher-forced on `forced_target`; each column masks one token with PAD.
// Entry = ||h - h'|| / ||h|| on final decoder activations.
AttributionMap source_attribution(const Model& model, std::span<const std::int32_t> source,
                                  std::span<const std::int32_t> forced_target, const AttributionOptions& options = {});
AttributionMap target_attribution(const Model& model, std::span<const std::int32_t> source,
                                  std::span<const std::int32_t> forced_target, const AttributionOptions& options = {});

struct SharpnessStats {
  double mean_entropy = 0.0;      // nats, over normalized rows
  double mean_max_over_mean = 0.0;
  std::optional<double> alignment_rate;  // rows whose argmax is within +-1 of the expected column
  std::size_t rows_used = 0;
  std::size_t zero_rows = 0;
};

// `alignment[r]` is the expected column of row r (empty = not measured).
SharpnessStats sharpness(const AttributionMap& map, std::span<const std::size_t> alignment = {});

enum class HeatmapFormat { csv, pgm, svg };

// Writes the map and a metadata sidecar `<path>.json`.
void export_heatmap(const AttributionMap& map, const std::filesystem::path& path, HeatmapFormat format,
                    const json& metadata = json::object());
AttributionMap read_heatmap_csv(const std::filesystem::path& path);

}  // namespace s4mt
