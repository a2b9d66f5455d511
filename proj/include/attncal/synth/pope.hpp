#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "attncal/rng.hpp"
#include "attncal/synth/corpus.hpp"

namespace attncal::synth {

enum class PopeStrategy { kRandom, kPopular, kAdversarial };
std::string to_string(PopeStrategy s);
PopeStrategy parse_pope_strategy(const std::string& s);
inline constexpr PopeStrategy kAllPopeStrategies[] = {PopeStrategy::kRandom, PopeStrategy::kPopular,
                                                      PopeStrategy::kAdversarial};

// Object frequency (scenes containing the type) and pairwise co-occurrence
// (scenes containing both types) over a scene corpus.
struct CorpusStatistics {
  std::vector<double> frequency;
  std::vector<std::vector<double>> cooccurrence;
};

CorpusStatistics compute_statistics(std::span<const SyntheticScene> scenes, std::size_t num_types);

struct PopeSet {
  PopeStrategy strategy = PopeStrategy::kRandom;
  std::vector<QueryLabelPair> items;  // per scene: k yes items, then k no items
  std::size_t skipped_scenes = 0;     // no present or no absent type
};

// Per scene k = min(#present, #absent, max_per_scene) present types are
// polled (uniform without replacement) against k absent types:
//   random      uniform without replacement over absent types
//   popular     the k most frequent absent types
//   adversarial the k absent types with the largest summed co-occurrence
//               with the scene's present types
// Ties break by frequency, then type id.
PopeSet sample_pope_negatives(std::span<const SyntheticScene> scenes, PopeStrategy strategy,
                              const CorpusStatistics& stats, Rng& rng, std::size_t max_per_scene = 3);

}  // namespace attncal::synth
