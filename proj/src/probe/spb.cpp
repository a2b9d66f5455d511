#include "attncal/probe/spb.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "attncal/errors.hpp"
#include "attncal/model/vocab.hpp"

namespace attncal::probe {

double kl_from_uniform(std::span<const double> p) {
  const double n = static_cast<double>(p.size());
  double kl = 0.0;
  for (double x : p)
    if (x > 0.0) kl += x * std::log(x * n);
  return std::max(0.0, kl);
}

double max_min_ratio(std::span<const double> p) {
  const auto [mn, mx] = std::minmax_element(p.begin(), p.end());
  if (*mn <= 0.0) return std::numeric_limits<double>::infinity();
  return *mx / *mn;
}

double quadrant_mass(std::span<const double> p, synth::Quadrant q, std::size_t grid_h, std::size_t grid_w) {
  if (p.size() != grid_h * grid_w) throw DimensionError("heatmap size does not match the grid");
  const auto b = synth::quadrant_box(q, grid_h, grid_w);
  double m = 0.0;
  for (std::size_t r = b.row; r < b.row + b.height; ++r)
    for (std::size_t c = b.col; c < b.col + b.width; ++c) m += p[r * grid_w + c];
  return m;
}

std::vector<double> head_average(std::span<const std::vector<double>> heads) {
  if (heads.empty()) throw ConfigError("no heads to average");
  std::vector<double> out(heads[0].size(), 0.0);
  for (const auto& h : heads) {
    double s = 0.0;
    for (double x : h) s += x;
    if (!(s > 0.0)) throw NumericError("cannot renormalize an all-zero attention slice");
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += h[j] / s;
  }
  for (auto& x : out) x /= static_cast<double>(heads.size());
  return out;
}

const LayerHeatmap& SpbReport::layer(std::size_t l) const {
  for (const auto& h : layers)
    if (h.layer == l) return h;
  throw ConfigError("layer " + std::to_string(l) + " was not probed");
}

nlohmann::json to_json(const SpbReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : r.layers) {
    layers.push_back({{"layer", l.layer},
                      {"kl", l.kl},
                      {"max_min_ratio", std::isfinite(l.max_min) ? nlohmann::json(l.max_min) : nlohmann::json("inf")},
                      {"hot_quadrant_mass", l.hot_mass},
                      {"head_vision_mass", l.head_mass},
                      {"heatmap", l.heatmap}});
  }
  return {{"input", r.input},
          {"prompt", r.prompt},
          {"prompt_text", model::detokenize(r.prompt.tokens())},
          {"grid_h", r.grid_h},
          {"grid_w", r.grid_w},
          {"hot_quadrant", synth::to_string(r.hot)},
          {"layers", layers}};
}

SpbReport measure_spb(const model::Model& model, const model::HookRegistry& hooks, const nd::Tensor& patches,
                      const std::string& input_name, const calib::ProbePrompt& prompt,
                      std::span<const std::size_t> layers, synth::Quadrant hot) {
  const auto& c = model.config();
  SpbReport rep;
  rep.input = input_name;
  rep.prompt = prompt;
  rep.grid_h = c.grid_h;
  rep.grid_w = c.grid_w;
  rep.hot = hot;
  for (auto& la : calib::estimate_bias(model, hooks, patches, prompt, layers)) {
    LayerHeatmap h;
    h.layer = la.layer;
    for (const auto& v : la.heads) {
      double s = 0.0;
      for (double x : v) s += x;
      h.head_mass.push_back(s);
      std::vector<double> norm(v.size());
      for (std::size_t j = 0; j < v.size(); ++j) norm[j] = v[j] / s;
      h.per_head.push_back(std::move(norm));
    }
    h.heatmap = head_average(la.heads);
    h.kl = kl_from_uniform(h.heatmap);
    h.max_min = max_min_ratio(h.heatmap);
    h.hot_mass = quadrant_mass(h.heatmap, hot, c.grid_h, c.grid_w);
    rep.layers.push_back(std::move(h));
  }
  return rep;
}

std::string format_sig9(double v) {
  if (!std::isfinite(v)) throw DomainError("cannot format a non-finite heatmap value");
  int decimals = 9;
  if (v != 0.0) {
    const int exponent = static_cast<int>(std::floor(std::log10(std::fabs(v))));
    decimals = std::max(0, 8 - exponent);
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

std::string heatmap_csv(std::span<const double> cells, std::size_t grid_h, std::size_t grid_w) {
  if (cells.size() != grid_h * grid_w) throw DimensionError("heatmap size does not match the grid");
  std::string out;
  for (std::size_t r = 0; r < grid_h; ++r) {
    for (std::size_t c = 0; c < grid_w; ++c) {
      if (c) out += ',';
      out += format_sig9(cells[r * grid_w + c]);
    }
    out += '\n';
  }
  return out;
}

std::vector<double> parse_heatmap_csv(const std::string& text) {
  std::vector<double> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      try {
        out.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw IoError("bad heatmap cell '" + cell + "'");
      }
    }
  }
  return out;
}

std::string heatmap_pgm(std::span<const double> cells, std::size_t grid_h, std::size_t grid_w,
                        const std::string& comment) {
  if (cells.size() != grid_h * grid_w) throw DimensionError("heatmap size does not match the grid");
  const auto [mn, mx] = std::minmax_element(cells.begin(), cells.end());
  const double lo = *mn, hi = *mx;
  std::ostringstream out;
  out << "P2\n";
  out << "# attncalib heatmap; linear scale min " << format_sig9(lo) << " -> 0, max " << format_sig9(hi)
      << " -> 255; constant maps are all 0\n";
  if (!comment.empty()) out << "# " << comment << "\n";
  out << grid_w << " " << grid_h << "\n255\n";
  for (std::size_t r = 0; r < grid_h; ++r) {
    for (std::size_t c = 0; c < grid_w; ++c) {
      const double v = cells[r * grid_w + c];
      const int px = hi > lo ? static_cast<int>(std::lround((v - lo) / (hi - lo) * 255.0)) : 0;
      out << (c ? " " : "") << px;
    }
    out << "\n";
  }
  return out.str();
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed for " + path.string());
}

}  // namespace

void export_heatmap(const LayerHeatmap& layer, std::size_t grid_h, std::size_t grid_w,
                    const std::filesystem::path& path, HeatmapFormat format, const std::string& comment) {
  if (format == HeatmapFormat::kCsv) {
    write_text(path, heatmap_csv(layer.heatmap, grid_h, grid_w));
  } else {
    std::string meta = "layer " + std::to_string(layer.layer) + " kl " + format_sig9(layer.kl);
    if (!comment.empty()) meta += " " + comment;
    write_text(path, heatmap_pgm(layer.heatmap, grid_h, grid_w, meta));
  }
}

void export_report(const SpbReport& report, const std::filesystem::path& dir, const std::string& stem) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  for (const auto& l : report.layers) {
    const auto base = stem + "_layer" + std::to_string(l.layer);
    export_heatmap(l, report.grid_h, report.grid_w, dir / (base + ".csv"), HeatmapFormat::kCsv);
    export_heatmap(l, report.grid_h, report.grid_w, dir / (base + ".pgm"), HeatmapFormat::kPgm,
                   "input " + report.input);
    for (std::size_t h = 0; h < l.per_head.size(); ++h)
      write_text(dir / (base + "_head" + std::to_string(h) + ".csv"),
                 heatmap_csv(l.per_head[h], report.grid_h, report.grid_w));
  }
  write_text(dir / (stem + ".json"), to_json(report).dump(2) + "\n");
}

}  // namespace attncal::probe
