#include "attncal/synth/augment.hpp"

#include <algorithm>
#include <numeric>

#include "attncal/errors.hpp"
#include "attncal/model/vocab.hpp"

namespace attncal::synth {

std::size_t max_crop_height(std::size_t grid_h) { return (grid_h + 1) / 2; }
std::size_t max_crop_width(std::size_t grid_w) { return (grid_w + 1) / 2; }

SyntheticScene paste_on_white(const ObjectInstance& object, std::size_t grid_h, std::size_t grid_w, Rng& rng) {
  if (grid_h == 0 || grid_w == 0) throw ConfigError("paste_on_white: empty grid");
  SyntheticScene s;
  s.grid_h = grid_h;
  s.grid_w = grid_w;
  ObjectInstance o = object;
  o.box.height = rng.uniform_int(1, max_crop_height(grid_h));
  o.box.width = rng.uniform_int(1, max_crop_width(grid_w));
  o.box.row = rng.uniform_int(0, grid_h - o.box.height);
  o.box.col = rng.uniform_int(0, grid_w - o.box.width);
  s.objects.push_back(o);
  s.noise_seed = rng.next_u64();
  return s;
}

namespace {

std::size_t absent_type(std::size_t present, Rng& rng) {
  const auto k = rng.uniform_int(0, model::tok::kNumObjects - 2);
  return k >= present ? k + 1 : k;
}

}  // namespace

AugmentedSet crop_augment(std::span<const SyntheticScene> calibration, const AugmentConfig& config, Rng& rng) {
  if (config.crops_per_object == 0) throw ConfigError("crop_augment: K must be positive");
  AugmentedSet out;
  for (const auto& scene : calibration) {
    if (scene.objects.empty()) {
      ++out.skipped_scenes;
      continue;
    }
    std::vector<std::size_t> idx(scene.objects.size());
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    idx.resize(std::min(idx.size(), config.max_objects_per_scene));
    std::sort(idx.begin(), idx.end());
    out.selected_objects += idx.size();
    for (auto j : idx) {
      const auto& obj = scene.objects[j];
      for (std::size_t k = 0; k < config.crops_per_object; ++k) {
        auto crop = paste_on_white(obj, scene.grid_h, scene.grid_w, rng);
        crop.id = scene.id;
        Provenance prov{scene.id, j, k, "crop"};
        QueryLabelPair pos;
        pos.kind = QueryKind::kExistence;
        pos.scene = crop;
        pos.query = existence_query(obj.type);
        pos.label = true;
        pos.answer = yes_no_answer(true);
        pos.object_type = obj.type;
        pos.provenance = prov;
        QueryLabelPair neg = pos;
        const auto other = absent_type(obj.type, rng);
        neg.query = existence_query(other);
        neg.label = false;
        neg.answer = yes_no_answer(false);
        neg.object_type = other;
        out.items.push_back(std::move(pos));
        out.items.push_back(std::move(neg));
      }
    }
  }
  for (std::size_t i = 0; i < out.items.size(); ++i) out.items[i].id = i;
  return out;
}

QueryLabelPair second_augmentation(const QueryLabelPair& example, Rng& rng) {
  if (example.scene.objects.size() != 1)
    throw ContractError("second_augmentation expects a single pasted object, got " +
                        std::to_string(example.scene.objects.size()));
  QueryLabelPair out = example;
  const auto id = out.scene.id;
  out.scene = paste_on_white(example.scene.objects[0], example.scene.grid_h, example.scene.grid_w, rng);
  out.scene.id = id;
  out.provenance.origin = "second_view";
  return out;
}

}  // namespace attncal::synth
