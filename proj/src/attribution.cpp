#include "s4mt/attribution.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

namespace s4mt {

namespace {

std::string label(std::int32_t id, const Vocabulary* vocab) {
  if (vocab && id >= 0 && static_cast<std::size_t>(id) < vocab->size()) return vocab->token(id);
  return std::to_string(id);
}

AttributionMap attribute(const Model& model, std::span<const std::int32_t> source,
                         std::span<const std::int32_t> target, AttributionMode mode,
                         const AttributionOptions& options) {
  if (source.empty() || target.empty()) throw std::invalid_argument("attribution needs non-empty source and target");
  const ModelConfig& cfg = model.config();
  const bool decoder_only = cfg.decoder_only();
  const std::size_t n = source.size();
  const std::size_t m = target.size();

  SentencePair pair;
  pair.src.assign(source.begin(), source.end());
  if (cfg.reverse_source) std::reverse(pair.src.begin(), pair.src.end());
  pair.tgt.assign(target.begin(), target.end());

  auto row_position = [&](std::size_t r) { return decoder_only ? n + 2 + r : r; };
  const std::size_t cols = mode == AttributionMode::source ? n : m;

  // Applies the mask for column j to batch row b.
  auto mask = [&](SequenceBatch& batch, std::size_t b, std::size_t j) {
    if (mode == AttributionMode::source) {
      const std::size_t k = cfg.reverse_source ? n - 1 - j : j;
      if (decoder_only) batch.tgt_in[b * batch.tgt_time + 1 + k] = kPad;
      else batch.src[b * batch.src_time + k] = kPad;
    } else {
      const std::size_t pos = decoder_only ? n + 2 + j : j;
      batch.tgt_in[b * batch.tgt_time + pos] = kPad;
    }
  };

  auto run = [&](std::span<const std::size_t> columns) {
    NoGradGuard no_grad;
    std::vector<const SentencePair*> rows(std::max<std::size_t>(columns.size(), 1), &pair);
    SequenceBatch batch = make_batch(rows, decoder_only);
    for (std::size_t b = 0; b < columns.size(); ++b) mask(batch, b, columns[b]);
    return model.forward(batch, ForwardContext{}).hidden;
  };

  const Tensor base = run({});
  const std::size_t d = cfg.d_model;
  const std::size_t time = base.dim(1);
  std::vector<double> base_norm(m);
  AttributionMap map;
  map.mode = mode;
  map.rows = m;
  map.cols = cols;
  map.values.assign(m * cols, 0.0);
  map.flagged_rows.assign(m, 0);
  for (std::size_t r = 0; r < m; ++r) {
    const float* h = base.data().data() + row_position(r) * d;
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += static_cast<double>(h[k]) * h[k];
    base_norm[r] = std::sqrt(s);
    if (base_norm[r] == 0.0) map.flagged_rows[r] = 1;
  }

  std::vector<std::size_t> all(cols);
  for (std::size_t j = 0; j < cols; ++j) all[j] = j;
  const std::size_t chunk = std::max<std::size_t>(1, options.chunk);
  const std::size_t chunks = (cols + chunk - 1) / chunk;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t c = next++; c < chunks; c = next++) {
      const std::size_t lo = c * chunk;
      const std::size_t hi = std::min(cols, lo + chunk);
      const std::span<const std::size_t> columns(all.data() + lo, hi - lo);
      const Tensor masked = run(columns);
      for (std::size_t b = 0; b < columns.size(); ++b) {
        const std::size_t j = columns[b];
        for (std::size_t r = 0; r < m; ++r) {
          if (mode == AttributionMode::target && options.zero_upper && j > r) continue;
          if (base_norm[r] == 0.0) continue;
          const float* h = base.data().data() + row_position(r) * d;
          const float* h2 = masked.data().data() + (b * time + row_position(r)) * d;
          double s = 0.0;
          for (std::size_t k = 0; k < d; ++k) {
            const double diff = static_cast<double>(h[k]) - h2[k];
            s += diff * diff;
          }
          map.values[r * cols + j] = std::sqrt(s) / base_norm[r];
        }
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(options.threads, chunks));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (std::size_t r = 0; r < m; ++r) map.row_labels.push_back(label(target[r], options.vocab));
  if (mode == AttributionMode::source) {
    for (std::size_t j = 0; j < n; ++j) map.column_labels.push_back(label(source[j], options.vocab));
  } else {
    map.column_labels.push_back(decoder_only ? "<sep>" : "<s>");
    for (std::size_t j = 1; j < m; ++j) map.column_labels.push_back(label(target[j - 1], options.vocab));
  }
  return map;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

double row_max(const AttributionMap& map, std::size_t r) {
  double mx = 0.0;
  for (std::size_t c = 0; c < map.cols; ++c) mx = std::max(mx, map.at(r, c));
  return mx;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

AttributionMap AttributionMap::normalized_rows() const {
  AttributionMap out = *this;
  out.flagged_rows.resize(rows, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += at(r, c);
    if (s > 0.0)
      for (std::size_t c = 0; c < cols; ++c) out.values[r * cols + c] /= s;
    else
      out.flagged_rows[r] = 1;
  }
  out.normalized = true;
  return out;
}

AttributionMap source_attribution(const Model& model, std::span<const std::int32_t> source,
                                  std::span<const std::int32_t> forced_target, const AttributionOptions& options) {
  return attribute(model, source, forced_target, AttributionMode::source, options);
}

AttributionMap target_attribution(const Model& model, std::span<const std::int32_t> source,
                                  std::span<const std::int32_t> forced_target, const AttributionOptions& options) {
  return attribute(model, source, forced_target, AttributionMode::target, options);
}

SharpnessStats sharpness(const AttributionMap& map, std::span<const std::size_t> alignment) {
  if (!alignment.empty() && alignment.size() != map.rows)
    throw std::invalid_argument("sharpness: alignment needs one entry per row");
  const AttributionMap norm = map.normalized ? map : map.normalized_rows();
  SharpnessStats s;
  double entropy = 0.0, ratio = 0.0;
  std::size_t aligned = 0;
  for (std::size_t r = 0; r < norm.rows; ++r) {
    const std::size_t width = norm.defined_columns(r);
    double total = 0.0, mx = 0.0, h = 0.0;
    std::size_t arg = 0;
    for (std::size_t c = 0; c < width; ++c) {
      const double p = norm.at(r, c);
      total += p;
      if (p > mx) {
        mx = p;
        arg = c;
      }
      if (p > 0.0) h -= p * std::log(p);
    }
    if (total <= 0.0) {
      ++s.zero_rows;
      continue;
    }
    ++s.rows_used;
    entropy += h;
    ratio += mx / (total / static_cast<double>(width));
    if (!alignment.empty()) {
      const std::size_t want = alignment[r];
      if ((arg > want ? arg - want : want - arg) <= 1) ++aligned;
    }
  }
  if (s.rows_used) {
    s.mean_entropy = entropy / static_cast<double>(s.rows_used);
    s.mean_max_over_mean = ratio / static_cast<double>(s.rows_used);
    if (!alignment.empty()) s.alignment_rate = static_cast<double>(aligned) / static_cast<double>(s.rows_used);
  }
  return s;
}

void export_heatmap(const AttributionMap& map, const std::filesystem::path& path, HeatmapFormat format,
                    const json& metadata) {
  for (double v : map.values)
    if (!std::isfinite(v)) throw NumericError("export_heatmap: map has non-finite entries");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  switch (format) {
    case HeatmapFormat::csv: {
      out << "";
      for (std::size_t c = 0; c < map.cols; ++c)
        out << ',' << csv_escape(c < map.column_labels.size() ? map.column_labels[c] : std::to_string(c));
      out << '\n';
      for (std::size_t r = 0; r < map.rows; ++r) {
        out << csv_escape(r < map.row_labels.size() ? map.row_labels[r] : std::to_string(r));
        for (std::size_t c = 0; c < map.cols; ++c) out << ',' << format_double(map.at(r, c));
        out << '\n';
      }
      break;
    }
    case HeatmapFormat::pgm: {
      out << "P5\n" << map.cols << ' ' << map.rows << "\n255\n";
      for (std::size_t r = 0; r < map.rows; ++r) {
        const double mx = row_max(map, r);
        for (std::size_t c = 0; c < map.cols; ++c) {
          const double v = mx > 0.0 ? map.at(r, c) / mx : 0.0;
          out.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * v))));
        }
      }
      break;
    }
    case HeatmapFormat::svg: {
      const int cell = 18, margin = 80;
      const std::size_t w = margin + map.cols * cell, h = margin + map.rows * cell;
      out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
          << "\" font-family=\"monospace\" font-size=\"10\">\n";
      for (std::size_t c = 0; c < map.cols; ++c) {
        const std::string lab = c < map.column_labels.size() ? map.column_labels[c] : std::to_string(c);
        out << "<text transform=\"translate(" << margin + c * cell + cell / 2 << "," << margin - 4
            << ") rotate(-90)\">" << xml_escape(lab) << "</text>\n";
      }
      for (std::size_t r = 0; r < map.rows; ++r) {
        const std::string lab = r < map.row_labels.size() ? map.row_labels[r] : std::to_string(r);
        out << "<text x=\"" << margin - 4 << "\" y=\"" << margin + r * cell + cell * 2 / 3
            << "\" text-anchor=\"end\">" << xml_escape(lab) << "</text>\n";
        const double mx = row_max(map, r);
        for (std::size_t c = 0; c < map.cols; ++c) {
          const double v = mx > 0.0 ? map.at(r, c) / mx : 0.0;
          const int shade = static_cast<int>(std::lround(255.0 * (1.0 - v)));
          out << "<rect x=\"" << margin + c * cell << "\" y=\"" << margin + r * cell << "\" width=\"" << cell
              << "\" height=\"" << cell << "\" fill=\"rgb(255," << shade << ',' << shade << ")\"/>\n";
        }
      }
      out << "</svg>\n";
      break;
    }
  }
  if (!out) throw IoError("write failed: " + path.string());

  json meta = metadata;
  meta["mode"] = map.mode == AttributionMode::source ? "source" : "target";
  meta["normalized"] = map.normalized;
  meta["denominator"] = "l2(h - h_masked) / l2(h), final decoder activations";
  meta["rows"] = map.rows;
  meta["cols"] = map.cols;
  std::vector<std::size_t> flagged;
  for (std::size_t r = 0; r < map.flagged_rows.size(); ++r)
    if (map.flagged_rows[r]) flagged.push_back(r);
  meta["flagged_rows"] = flagged;
  std::ofstream side(path.string() + ".json");
  if (!side) throw IoError("cannot write " + path.string() + ".json");
  side << meta.dump(2) << '\n';
}

AttributionMap read_heatmap_csv(const std::filesystem::path& path) {
  const std::vector<std::string> lines = read_lines(path);
  if (lines.empty()) throw IoError("empty heatmap file " + path.string());
  AttributionMap map;
  auto header = csv_split(lines[0]);
  map.column_labels.assign(header.begin() + 1, header.end());
  map.cols = map.column_labels.size();
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    auto fields = csv_split(lines[i]);
    if (fields.size() != map.cols + 1) throw IoError("heatmap row " + std::to_string(i) + " has the wrong width");
    map.row_labels.push_back(fields[0]);
    for (std::size_t c = 1; c < fields.size(); ++c) {
      double v = 0.0;
      const auto res = std::from_chars(fields[c].data(), fields[c].data() + fields[c].size(), v);
      if (res.ec != std::errc()) throw IoError("heatmap: bad number '" + fields[c] + "'");
      map.values.push_back(v);
    }
  }
  map.rows = map.row_labels.size();
  map.flagged_rows.assign(map.rows, 0);
  return map;
}

}  // namespace s4mt
