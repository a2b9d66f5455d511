#include "attncal/calib/uac.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "attncal/errors.hpp"
#include "attncal/model/vocab.hpp"
#include "attncal/nd/ops.hpp"
#include "attncal/nd/tape.hpp"
#include "attncal/synth/corpus.hpp"

namespace attncal::calib {

std::string to_string(PromptKind k) { return k == PromptKind::kPolling ? "polling" : "open_ended"; }

PromptKind parse_prompt_kind(const std::string& s) {
  if (s == "polling") return PromptKind::kPolling;
  if (s == "open_ended") return PromptKind::kOpenEnded;
  throw ConfigError("unknown prompt kind '" + s + "' (expected polling or open_ended)");
}

std::vector<std::size_t> ProbePrompt::tokens() const {
  if (kind == PromptKind::kPolling) {
    if (object >= model::tok::kNumObjects) throw ConfigError("probe object " + std::to_string(object) + " out of range");
    return synth::existence_query(object);
  }
  return synth::caption_prompt();
}

model::DecodeOptions ProbePrompt::decode_options() const {
  model::DecodeOptions o;
  if (kind == PromptKind::kPolling) {
    o.max_new = 1;
  } else {
    o.mode = model::DecodeMode::kTopP;
    o.top_p = 1.0;
    o.max_new = std::max<std::size_t>(1, max_steps);
    o.seed = seed;
  }
  return o;
}

void to_json(nlohmann::json& j, const ProbePrompt& p) {
  j = {{"kind", to_string(p.kind)}, {"object", p.object}, {"max_steps", p.max_steps}, {"seed", p.seed}};
}

void from_json(const nlohmann::json& j, ProbePrompt& p) {
  ProbePrompt d;
  p.kind = parse_prompt_kind(j.value("kind", to_string(d.kind)));
  p.object = j.value("object", d.object);
  p.max_steps = j.value("max_steps", d.max_steps);
  p.seed = j.value("seed", d.seed);
}

std::vector<LayerVisionAttention> estimate_bias(const model::Model& model, const model::HookRegistry& hooks,
                                                const nd::Tensor& patches, const ProbePrompt& prompt,
                                                std::span<const std::size_t> layers) {
  const auto& c = model.config();
  const auto n = c.n_vision();
  model::RecordSpec rec;
  rec.layers.assign(layers.begin(), layers.end());
  for (auto l : rec.layers)
    if (l >= c.layers) throw ConfigError("layer " + std::to_string(l) + " out of range");
  std::vector<LayerVisionAttention> out(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    out[i].layer = layers[i];
    out[i].heads.assign(c.heads, std::vector<double>(n, 0.0));
  }
  std::size_t steps = 0;
  nd::NoGradScope ng;
  model::generate(model, {patches, prompt.tokens()}, hooks, prompt.decode_options(), rec,
                  [&](std::size_t, const model::ForwardResult& r) {
                    ++steps;
                    for (const auto& snap : r.snapshots) {
                      const auto idx = static_cast<std::size_t>(
                          std::find(layers.begin(), layers.end(), snap.layer) - layers.begin());
                      for (std::size_t h = 0; h < c.heads; ++h) {
                        auto v = snap.vision_weights(h);
                        for (std::size_t j = 0; j < n; ++j) out[idx].heads[h][j] += v[j];
                      }
                    }
                  });
  for (auto& la : out) {
    for (std::size_t h = 0; h < c.heads; ++h) {
      double total = 0.0;
      for (auto& x : la.heads[h]) total += (x /= static_cast<double>(steps));
      if (!(total > 0.0))
        throw NumericError("vision attention at layer " + std::to_string(la.layer) + ", head " + std::to_string(h) +
                           " is all zero; cannot calibrate");
    }
  }
  return out;
}

namespace {

std::vector<double> weights_for(const std::vector<double>& a, double eps, std::size_t& floored) {
  const double avg = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
  std::vector<double> w(a.size());
  for (std::size_t j = 0; j < a.size(); ++j) {
    if (a[j] < 0.0) throw DomainError("attention weights must be non-negative");
    if (a[j] < eps) ++floored;
    w[j] = avg / std::max(a[j], eps);
  }
  return w;
}

}  // namespace

CalibrationMatrix compute_W(const LayerVisionAttention& a, double epsilon) {
  if (!(epsilon > 0.0)) throw ConfigError("UAC epsilon must be positive");
  CalibrationMatrix m;
  m.layer = a.layer;
  m.epsilon = epsilon;
  for (const auto& h : a.heads) m.heads.push_back(weights_for(h, epsilon, m.floored));
  return m;
}

CalibrationMatrix compute_W_head_averaged(const LayerVisionAttention& a, double epsilon) {
  if (a.heads.empty()) throw ConfigError("no heads to average");
  std::vector<double> mean(a.heads[0].size(), 0.0);
  for (const auto& h : a.heads)
    for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += h[j] / static_cast<double>(a.heads.size());
  LayerVisionAttention avg{a.layer, {mean}};
  auto m = compute_W(avg, epsilon);
  m.heads.assign(a.heads.size(), m.heads[0]);
  return m;
}

nd::Tensor apply_uac(const nd::Tensor& vision_slice, const nd::Tensor& w) {
  if (vision_slice.shape() != w.shape())
    throw HookError("UAC weight length " + nd::shape_str(w.shape()) + " does not match slice " +
                    nd::shape_str(vision_slice.shape()));
  return nd::mul(vision_slice, w);
}

std::vector<double> apply_uac_row(std::span<const double> row, std::span<const double> w) {
  if (w.size() > row.size()) throw HookError("UAC weight longer than the attention row");
  double mass = 0.0;
  for (double x : row) mass += x;
  std::vector<double> out(row.begin(), row.end());
  for (std::size_t j = 0; j < w.size(); ++j) out[j] *= w[j];
  auto t = nd::normalize_mass(nd::Tensor::from({out.size()}, out), mass);
  return t.to_vector();
}

void to_json(nlohmann::json& j, const UacConfig& c) {
  j = {{"stage", model::to_string(c.stage)},
       {"renormalize", c.renormalize},
       {"head_averaged", c.head_averaged},
       {"epsilon", c.epsilon},
       {"positions", model::to_string(c.positions)},
       {"input", synth::to_string(c.input)},
       {"input_seed", c.input_seed},
       {"prompt", c.prompt},
       {"layers", c.layers}};
}

void from_json(const nlohmann::json& j, UacConfig& c) {
  UacConfig d;
  c.stage = model::parse_hook_stage(j.value("stage", model::to_string(d.stage)));
  c.renormalize = j.value("renormalize", d.renormalize);
  c.head_averaged = j.value("head_averaged", d.head_averaged);
  c.epsilon = j.value("epsilon", d.epsilon);
  c.positions = model::parse_query_policy(j.value("positions", model::to_string(d.positions)));
  c.input = synth::parse_meaningless(j.value("input", synth::to_string(d.input)));
  c.input_seed = j.value("input_seed", d.input_seed);
  c.prompt = j.value("prompt", d.prompt);
  c.layers = j.value("layers", d.layers);
}

void install_uac(model::HookRegistry& hooks, std::span<const CalibrationMatrix> calibration, const UacConfig& config) {
  for (const auto& m : calibration) {
    std::vector<nd::Tensor> per_head;
    for (const auto& h : m.heads) per_head.push_back(nd::Tensor::from({h.size()}, h));
    model::HookEntry e;
    e.layer = m.layer;
    e.stage = config.stage;
    e.positions = config.positions;
    e.renormalize = config.renormalize;
    e.fn = [per_head = std::move(per_head), layer = m.layer](const model::HookContext& ctx, const nd::Tensor& slice) {
      if (ctx.head >= per_head.size())
        throw HookError("UAC on layer " + std::to_string(layer) + " has no weights for head " +
                        std::to_string(ctx.head));
      return apply_uac(slice, per_head[ctx.head]);
    };
    hooks.add(std::move(e));
  }
}

std::vector<CalibrationMatrix> fit_uac(const model::Model& model, const synth::World& world, const UacConfig& config,
                                       model::HookRegistry* installed) {
  auto layers = config.layers;
  if (layers.empty()) {
    layers.resize(model.config().layers);
    std::iota(layers.begin(), layers.end(), 0);
  }
  std::sort(layers.begin(), layers.end());
  if (std::adjacent_find(layers.begin(), layers.end()) != layers.end()) throw ConfigError("duplicate UAC layer");
  const auto patches = world.render_meaningless(config.input, config.input_seed);
  model::HookRegistry local;
  auto& hooks = installed ? *installed : local;
  std::vector<CalibrationMatrix> out;
  for (auto l : layers) {
    const std::size_t one[] = {l};
    auto est = estimate_bias(model, hooks, patches, config.prompt, one);
    auto m = config.head_averaged ? compute_W_head_averaged(est[0], config.epsilon) : compute_W(est[0], config.epsilon);
    m.source = synth::to_string(config.input);
    m.prompt = model::detokenize(config.prompt.tokens());
    install_uac(hooks, std::span(&m, 1), config);
    out.push_back(std::move(m));
  }
  return out;
}

nlohmann::json calibration_to_json(std::span<const CalibrationMatrix> calibration) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& m : calibration)
    for (std::size_t h = 0; h < m.heads.size(); ++h)
      arr.push_back({{"layer", m.layer},
                     {"head", h},
                     {"epsilon", m.epsilon},
                     {"values", m.heads[h]},
                     {"floored", m.floored},
                     {"source", m.source},
                     {"prompt", m.prompt}});
  return arr;
}

std::vector<CalibrationMatrix> calibration_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw IoError("calibration file must hold a JSON array");
  std::vector<CalibrationMatrix> out;
  try {
    for (const auto& e : j) {
      const auto layer = e.at("layer").get<std::size_t>();
      const auto head = e.at("head").get<std::size_t>();
      auto values = e.at("values").get<std::vector<double>>();
      for (double v : values)
        if (!std::isfinite(v) || v <= 0.0) throw IoError("calibration values must be finite and positive");
      auto it = std::find_if(out.begin(), out.end(), [&](const auto& m) { return m.layer == layer; });
      if (it == out.end()) {
        CalibrationMatrix m;
        m.layer = layer;
        m.epsilon = e.at("epsilon").get<double>();
        m.floored = e.value("floored", std::size_t{0});
        m.source = e.value("source", std::string{});
        m.prompt = e.value("prompt", std::string{});
        out.push_back(std::move(m));
        it = out.end() - 1;
      }
      if (head != it->heads.size()) throw IoError("calibration heads must be listed in order");
      it->heads.push_back(std::move(values));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed calibration file: ") + e.what());
  }
  return out;
}

void save_calibration(const std::filesystem::path& path, std::span<const CalibrationMatrix> calibration) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << calibration_to_json(calibration).dump(2) << '\n';
}

std::vector<CalibrationMatrix> load_calibration(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  return calibration_from_json(j);
}

}  // namespace attncal::calib
