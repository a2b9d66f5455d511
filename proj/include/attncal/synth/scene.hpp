#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attncal/nd/tensor.hpp"
#include "attncal/rng.hpp"

namespace attncal::synth {

struct BoundingBox {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t height = 1;
  std::size_t width = 1;

  bool contains(std::size_t r, std::size_t c) const {
    return r >= row && r < row + height && c >= col && c < col + width;
  }
  bool operator==(const BoundingBox&) const = default;
};

struct ObjectInstance {
  std::size_t type = 0;
  std::size_t color = 0;
  BoundingBox box;
  bool operator==(const ObjectInstance&) const = default;
};

// Gh x Gw grid; every occupied cell belongs to exactly one object's box.
// Patch features are rendered on demand from (prototypes, noise_seed), so a
// scene is a small value type that serializes losslessly.
struct SyntheticScene {
  std::size_t grid_h = 6;
  std::size_t grid_w = 6;
  std::vector<ObjectInstance> objects;  // the annotations
  std::uint64_t id = 0;
  std::uint64_t noise_seed = 0;

  // Object index per cell, -1 for white background.
  std::vector<int> cell_map() const;
  bool contains_type(std::size_t type) const;
  std::size_t count_type(std::size_t type) const;
  std::vector<std::size_t> present_types() const;  // sorted, unique
  bool operator==(const SyntheticScene&) const = default;
};

enum class Quadrant { kTopLeft = 0, kTopRight = 1, kBottomLeft = 2, kBottomRight = 3 };
std::string to_string(Quadrant q);
Quadrant parse_quadrant(const std::string& s);
Quadrant opposite(Quadrant q);
// Cell rectangle of a quadrant; the top/left halves take the extra row/column of odd grids.
BoundingBox quadrant_box(Quadrant q, std::size_t grid_h, std::size_t grid_w);
// Quadrant wholly containing `box`, if any.
bool box_in_quadrant(const BoundingBox& box, Quadrant q, std::size_t grid_h, std::size_t grid_w);

enum class MeaninglessKind { kWhite, kBlack, kNoise };
std::string to_string(MeaninglessKind k);
MeaninglessKind parse_meaningless(const std::string& s);

struct WorldConfig {
  std::size_t grid_h = 6;
  std::size_t grid_w = 6;
  std::size_t patch_dim = 16;
  double noise_sigma = 0.05;
  std::uint64_t world_seed = 7;
};

void to_json(nlohmann::json& j, const WorldConfig& c);
void from_json(const nlohmann::json& j, WorldConfig& c);

// Fixed object/color prototypes and the renderer from scenes to patch features.
class World {
 public:
  explicit World(WorldConfig config);

  const WorldConfig& config() const { return config_; }
  std::size_t n_cells() const { return config_.grid_h * config_.grid_w; }

  // [n, patch_dim]: object cells = type prototype + color prototype,
  // background = white prototype, plus N(0, sigma^2) noise from scene.noise_seed.
  nd::Tensor render(const SyntheticScene& scene) const;
  // Constant white/black grids carry no noise; kNoise draws every cell from N(0, 0.25^2).
  nd::Tensor render_meaningless(MeaninglessKind kind, std::uint64_t seed = 0) const;

  std::span<const double> white() const { return white_; }
  std::span<const double> type_prototype(std::size_t t) const { return types_.at(t); }

 private:
  WorldConfig config_;
  std::vector<std::vector<double>> types_;
  std::vector<std::vector<double>> colors_;
  std::vector<double> white_;
  std::vector<double> black_;
};

// Object-type prior: Zipf-like base frequencies plus co-occurrence groups,
// which give POPE's popular and adversarial strategies something to find.
class ObjectCatalog {
 public:
  ObjectCatalog();
  std::size_t size() const { return weights_.size(); }
  std::span<const double> base_weights() const { return weights_; }
  const std::vector<std::size_t>& partners(std::size_t type) const { return partners_.at(type); }
  static std::string name(std::size_t type);

 private:
  std::vector<double> weights_;
  std::vector<std::vector<std::size_t>> partners_;
};

struct Placement {
  enum class Kind { kUniform, kHotRegion };
  Kind kind = Kind::kUniform;
  Quadrant hot = Quadrant::kBottomRight;
  double hot_ratio = 0.7;
  // kHotRegion: the focus object lands wholly inside `hot` with probability
  // hot_ratio, otherwise wholly inside one of the other three quadrants.
  static Placement uniform() { return {}; }
  static Placement hot_region(Quadrant q, double ratio) { return {Kind::kHotRegion, q, ratio}; }
};

struct SceneSpec {
  std::size_t grid_h = 6;
  std::size_t grid_w = 6;
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  std::size_t min_side = 1;
  std::size_t max_side = 2;
  double partner_prob = 0.6;  // chance a non-focus object is drawn from the focus's partners
  Placement focus_placement;  // applies to objects[0]; the rest are uniform
};

// Objects of distinct types, placed without overlap. Retries a full layout
// up to 100 times, then throws ConfigError (infeasible packing).
SyntheticScene gen_scene(Rng& rng, const SceneSpec& spec, const ObjectCatalog& catalog);

// Places one object of the given size; kHotRegion honours the quadrant draw.
BoundingBox draw_box(Rng& rng, std::size_t grid_h, std::size_t grid_w, std::size_t height, std::size_t width,
                     const Placement& placement);

void to_json(nlohmann::json& j, const SyntheticScene& s);
void from_json(const nlohmann::json& j, SyntheticScene& s);

}  // namespace attncal::synth
