#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "attncal/rng.hpp"
#include "attncal/synth/corpus.hpp"
#include "attncal/synth/scene.hpp"

namespace attncal::synth {

struct AugmentConfig {
  std::size_t max_objects_per_scene = 3;  // J_max
  std::size_t crops_per_object = 10;      // K
};

// Crop-and-paste set. items come in (yes, no) pairs, one pair per crop.
struct AugmentedSet {
  std::vector<QueryLabelPair> items;
  std::size_t skipped_scenes = 0;  // scenes without objects
  std::size_t selected_objects = 0;
};

// Largest crop edge: half the grid, rounded up.
std::size_t max_crop_height(std::size_t grid_h);
std::size_t max_crop_width(std::size_t grid_w);

// A white scene holding one copy of `object` resized to a random size in
// [1, ceil(G/2)] per axis and pasted at a uniformly random feasible position.
SyntheticScene paste_on_white(const ObjectInstance& object, std::size_t grid_h, std::size_t grid_w, Rng& rng);

// For each scene, up to J_max objects are chosen without replacement and
// each yields K crops; every crop gives a positive query naming the pasted
// object and a negative query naming a type absent from the crop.
AugmentedSet crop_augment(std::span<const SyntheticScene> calibration, const AugmentConfig& config, Rng& rng);

// Re-resizes and re-positions the single pasted object on white. Query,
// label, object type and provenance source are preserved.
QueryLabelPair second_augmentation(const QueryLabelPair& example, Rng& rng);

}  // namespace attncal::synth
