#include "attncal/synth/scene.hpp"

#include <algorithm>
#include <cmath>

#include "attncal/errors.hpp"
#include "attncal/model/vocab.hpp"

namespace attncal::synth {

std::vector<int> SyntheticScene::cell_map() const {
  std::vector<int> cells(grid_h * grid_w, -1);
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const auto& b = objects[i].box;
    for (std::size_t r = b.row; r < b.row + b.height; ++r)
      for (std::size_t c = b.col; c < b.col + b.width; ++c) cells[r * grid_w + c] = static_cast<int>(i);
  }
  return cells;
}

bool SyntheticScene::contains_type(std::size_t type) const {
  return std::any_of(objects.begin(), objects.end(), [type](const auto& o) { return o.type == type; });
}

std::size_t SyntheticScene::count_type(std::size_t type) const {
  return static_cast<std::size_t>(
      std::count_if(objects.begin(), objects.end(), [type](const auto& o) { return o.type == type; }));
}

std::vector<std::size_t> SyntheticScene::present_types() const {
  std::vector<std::size_t> t;
  for (const auto& o : objects) t.push_back(o.type);
  std::sort(t.begin(), t.end());
  t.erase(std::unique(t.begin(), t.end()), t.end());
  return t;
}

std::string to_string(Quadrant q) {
  switch (q) {
    case Quadrant::kTopLeft: return "top_left";
    case Quadrant::kTopRight: return "top_right";
    case Quadrant::kBottomLeft: return "bottom_left";
    case Quadrant::kBottomRight: return "bottom_right";
  }
  return "?";
}

Quadrant parse_quadrant(const std::string& s) {
  for (auto q : {Quadrant::kTopLeft, Quadrant::kTopRight, Quadrant::kBottomLeft, Quadrant::kBottomRight})
    if (to_string(q) == s) return q;
  throw ConfigError("unknown quadrant '" + s + "'");
}

Quadrant opposite(Quadrant q) { return static_cast<Quadrant>(3 - static_cast<int>(q)); }

BoundingBox quadrant_box(Quadrant q, std::size_t grid_h, std::size_t grid_w) {
  const std::size_t top_h = (grid_h + 1) / 2, left_w = (grid_w + 1) / 2;
  const bool bottom = q == Quadrant::kBottomLeft || q == Quadrant::kBottomRight;
  const bool right = q == Quadrant::kTopRight || q == Quadrant::kBottomRight;
  return {bottom ? top_h : 0, right ? left_w : 0, bottom ? grid_h - top_h : top_h, right ? grid_w - left_w : left_w};
}

bool box_in_quadrant(const BoundingBox& box, Quadrant q, std::size_t grid_h, std::size_t grid_w) {
  const auto r = quadrant_box(q, grid_h, grid_w);
  return box.row >= r.row && box.col >= r.col && box.row + box.height <= r.row + r.height &&
         box.col + box.width <= r.col + r.width;
}

std::string to_string(MeaninglessKind k) {
  switch (k) {
    case MeaninglessKind::kWhite: return "white";
    case MeaninglessKind::kBlack: return "black";
    case MeaninglessKind::kNoise: return "noise";
  }
  return "?";
}

MeaninglessKind parse_meaningless(const std::string& s) {
  if (s == "white") return MeaninglessKind::kWhite;
  if (s == "black") return MeaninglessKind::kBlack;
  if (s == "noise") return MeaninglessKind::kNoise;
  throw ConfigError("unknown meaningless input kind '" + s + "'");
}

void to_json(nlohmann::json& j, const WorldConfig& c) {
  j = {{"grid_h", c.grid_h},
       {"grid_w", c.grid_w},
       {"patch_dim", c.patch_dim},
       {"noise_sigma", c.noise_sigma},
       {"world_seed", c.world_seed}};
}

void from_json(const nlohmann::json& j, WorldConfig& c) {
  WorldConfig d;
  c.grid_h = j.value("grid_h", d.grid_h);
  c.grid_w = j.value("grid_w", d.grid_w);
  c.patch_dim = j.value("patch_dim", d.patch_dim);
  c.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  c.world_seed = j.value("world_seed", d.world_seed);
}

namespace {

std::vector<double> random_direction(Rng& rng, std::size_t dim, double norm) {
  std::vector<double> v(dim);
  double ss = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    ss += x * x;
  }
  const double f = norm / std::sqrt(ss);
  for (auto& x : v) x *= f;
  return v;
}

}  // namespace

World::World(WorldConfig config) : config_(config) {
  if (config_.grid_h == 0 || config_.grid_w == 0 || config_.patch_dim == 0)
    throw ConfigError("world: grid and patch_dim must be positive");
  if (config_.noise_sigma < 0.0) throw ConfigError("world: noise_sigma must be non-negative");
  Rng rng(config_.world_seed);
  for (std::size_t t = 0; t < model::tok::kNumObjects; ++t) types_.push_back(random_direction(rng, config_.patch_dim, 1.0));
  for (std::size_t c = 0; c < model::tok::kNumColors; ++c) colors_.push_back(random_direction(rng, config_.patch_dim, 0.5));
  const double e = 1.0 / std::sqrt(static_cast<double>(config_.patch_dim));
  white_.assign(config_.patch_dim, e);
  black_.assign(config_.patch_dim, -e);
}

nd::Tensor World::render(const SyntheticScene& scene) const {
  if (scene.grid_h != config_.grid_h || scene.grid_w != config_.grid_w)
    throw DimensionError("scene grid " + std::to_string(scene.grid_h) + "x" + std::to_string(scene.grid_w) +
                         " does not match world grid");
  const auto p = config_.patch_dim;
  const auto cells = scene.cell_map();
  std::vector<double> out(cells.size() * p);
  Rng noise(scene.noise_seed);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    double* dst = out.data() + i * p;
    if (cells[i] < 0) {
      std::copy(white_.begin(), white_.end(), dst);
    } else {
      const auto& o = scene.objects[static_cast<std::size_t>(cells[i])];
      for (std::size_t k = 0; k < p; ++k) dst[k] = types_.at(o.type)[k] + colors_.at(o.color)[k];
    }
    if (config_.noise_sigma > 0.0)
      for (std::size_t k = 0; k < p; ++k) dst[k] += noise.normal(0.0, config_.noise_sigma);
  }
  return nd::Tensor::from({cells.size(), p}, std::move(out));
}

nd::Tensor World::render_meaningless(MeaninglessKind kind, std::uint64_t seed) const {
  const auto n = n_cells(), p = config_.patch_dim;
  std::vector<double> out(n * p);
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < p; ++k) {
      double v = 0.0;
      switch (kind) {
        case MeaninglessKind::kWhite: v = white_[k]; break;
        case MeaninglessKind::kBlack: v = black_[k]; break;
        case MeaninglessKind::kNoise: v = rng.normal(0.0, 0.25); break;
      }
      out[i * p + k] = v;
    }
  return nd::Tensor::from({n, p}, std::move(out));
}

ObjectCatalog::ObjectCatalog() {
  // cat dog ball car bus tree bird cup fork knife book chair
  weights_ = {1.0, 0.8, 0.5, 1.2, 0.7, 0.9, 0.5, 1.0, 0.6, 0.6, 0.7, 1.4};
  partners_ = {{1, 2}, {0, 2}, {0, 1}, {4, 5}, {3, 5}, {3, 4, 6}, {5}, {8, 9}, {7, 9}, {7, 8}, {11}, {10}};
}

std::string ObjectCatalog::name(std::size_t type) {
  return std::string(model::token_text(model::object_token(type)));
}

BoundingBox draw_box(Rng& rng, std::size_t grid_h, std::size_t grid_w, std::size_t height, std::size_t width,
                     const Placement& placement) {
  BoundingBox region{0, 0, grid_h, grid_w};
  if (placement.kind == Placement::Kind::kHotRegion) {
    Quadrant q = placement.hot;
    if (!rng.bernoulli(placement.hot_ratio)) {
      const auto k = rng.uniform_int(0, 2);
      q = static_cast<Quadrant>((static_cast<int>(placement.hot) + 1 + static_cast<int>(k)) % 4);
    }
    region = quadrant_box(q, grid_h, grid_w);
  }
  if (height > region.height || width > region.width)
    throw ConfigError("object of size " + std::to_string(height) + "x" + std::to_string(width) +
                      " does not fit its placement region");
  return {region.row + rng.uniform_int(0, region.height - height), region.col + rng.uniform_int(0, region.width - width),
          height, width};
}

SyntheticScene gen_scene(Rng& rng, const SceneSpec& spec, const ObjectCatalog& catalog) {
  if (spec.min_objects > spec.max_objects || spec.max_objects > catalog.size())
    throw ConfigError("scene object-count range is invalid");
  if (spec.min_side == 0 || spec.min_side > spec.max_side || spec.max_side > std::min(spec.grid_h, spec.grid_w))
    throw ConfigError("scene object-size range is invalid");
  SyntheticScene scene;
  scene.grid_h = spec.grid_h;
  scene.grid_w = spec.grid_w;
  scene.noise_seed = rng.next_u64();
  const auto count = rng.uniform_int(spec.min_objects, spec.max_objects);
  if (count == 0) return scene;

  std::vector<std::size_t> types;
  auto weights = std::vector<double>(catalog.base_weights().begin(), catalog.base_weights().end());
  auto take = [&](std::size_t t) {
    types.push_back(t);
    weights[t] = 0.0;
  };
  take(rng.categorical(weights));
  while (types.size() < count) {
    std::vector<std::size_t> free_partners;
    for (auto p : catalog.partners(types[0]))
      if (weights[p] > 0.0) free_partners.push_back(p);
    if (!free_partners.empty() && rng.bernoulli(spec.partner_prob))
      take(free_partners[rng.uniform_int(0, free_partners.size() - 1)]);
    else
      take(rng.categorical(weights));
  }

  std::vector<std::size_t> colors(count), heights(count), widths(count);
  for (std::size_t i = 0; i < count; ++i) {
    colors[i] = rng.uniform_int(0, model::tok::kNumColors - 1);
    heights[i] = rng.uniform_int(spec.min_side, spec.max_side);
    widths[i] = rng.uniform_int(spec.min_side, spec.max_side);
  }
  for (int attempt = 0; attempt < 100; ++attempt) {
    scene.objects.clear();
    std::vector<char> occupied(spec.grid_h * spec.grid_w, 0);
    bool ok = true;
    for (std::size_t i = 0; i < count && ok; ++i) {
      const auto& pl = i == 0 ? spec.focus_placement : Placement{};
      auto box = draw_box(rng, spec.grid_h, spec.grid_w, heights[i], widths[i], pl);
      for (std::size_t r = box.row; r < box.row + box.height && ok; ++r)
        for (std::size_t c = box.col; c < box.col + box.width; ++c)
          if (occupied[r * spec.grid_w + c]) {
            ok = false;
            break;
          }
      if (!ok) break;
      for (std::size_t r = box.row; r < box.row + box.height; ++r)
        for (std::size_t c = box.col; c < box.col + box.width; ++c) occupied[r * spec.grid_w + c] = 1;
      scene.objects.push_back({types[i], colors[i], box});
    }
    if (ok) return scene;
  }
  throw ConfigError("could not pack " + std::to_string(count) + " objects into a " + std::to_string(spec.grid_h) +
                    "x" + std::to_string(spec.grid_w) + " grid after 100 attempts");
}

void to_json(nlohmann::json& j, const SyntheticScene& s) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : s.objects)
    objs.push_back({{"type", o.type},
                    {"name", ObjectCatalog::name(o.type)},
                    {"color", o.color},
                    {"box", {o.box.row, o.box.col, o.box.height, o.box.width}}});
  const auto cells = s.cell_map();
  nlohmann::json grid = nlohmann::json::array();
  for (std::size_t r = 0; r < s.grid_h; ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t c = 0; c < s.grid_w; ++c) row.push_back(cells[r * s.grid_w + c]);
    grid.push_back(row);
  }
  j = {{"id", s.id},         {"grid_h", s.grid_h}, {"grid_w", s.grid_w},
       {"noise_seed", s.noise_seed}, {"objects", objs}, {"grid", grid}};
}

void from_json(const nlohmann::json& j, SyntheticScene& s) {
  s.id = j.at("id").get<std::uint64_t>();
  s.grid_h = j.at("grid_h").get<std::size_t>();
  s.grid_w = j.at("grid_w").get<std::size_t>();
  s.noise_seed = j.at("noise_seed").get<std::uint64_t>();
  s.objects.clear();
  for (const auto& o : j.at("objects")) {
    ObjectInstance inst;
    inst.type = o.at("type").get<std::size_t>();
    inst.color = o.at("color").get<std::size_t>();
    const auto& b = o.at("box");
    inst.box = {b.at(0).get<std::size_t>(), b.at(1).get<std::size_t>(), b.at(2).get<std::size_t>(),
                b.at(3).get<std::size_t>()};
    if (inst.type >= model::tok::kNumObjects || inst.color >= model::tok::kNumColors ||
        inst.box.row + inst.box.height > s.grid_h || inst.box.col + inst.box.width > s.grid_w)
      throw IoError("scene " + std::to_string(s.id) + ": annotation out of range");
    s.objects.push_back(inst);
  }
}

}  // namespace attncal::synth
