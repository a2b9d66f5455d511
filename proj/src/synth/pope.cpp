#include "attncal/synth/pope.hpp"

#include <algorithm>
#include <iostream>

#include "attncal/errors.hpp"

namespace attncal::synth {

std::string to_string(PopeStrategy s) {
  switch (s) {
    case PopeStrategy::kRandom: return "random";
    case PopeStrategy::kPopular: return "popular";
    case PopeStrategy::kAdversarial: return "adversarial";
  }
  return "?";
}

PopeStrategy parse_pope_strategy(const std::string& s) {
  for (auto k : kAllPopeStrategies)
    if (to_string(k) == s) return k;
  throw ConfigError("unknown POPE strategy '" + s + "' (expected random, popular or adversarial)");
}

CorpusStatistics compute_statistics(std::span<const SyntheticScene> scenes, std::size_t num_types) {
  CorpusStatistics st;
  st.frequency.assign(num_types, 0.0);
  st.cooccurrence.assign(num_types, std::vector<double>(num_types, 0.0));
  for (const auto& s : scenes) {
    const auto present = s.present_types();
    for (auto a : present) {
      if (a >= num_types) throw IndexError("object type " + std::to_string(a) + " outside statistics table");
      st.frequency[a] += 1.0;
      for (auto b : present)
        if (a != b) st.cooccurrence[a][b] += 1.0;
    }
  }
  return st;
}

PopeSet sample_pope_negatives(std::span<const SyntheticScene> scenes, PopeStrategy strategy,
                              const CorpusStatistics& stats, Rng& rng, std::size_t max_per_scene) {
  const auto num_types = stats.frequency.size();
  PopeSet out;
  out.strategy = strategy;
  for (const auto& scene : scenes) {
    auto present = scene.present_types();
    std::vector<std::size_t> absent;
    for (std::size_t t = 0; t < num_types; ++t)
      if (!scene.contains_type(t)) absent.push_back(t);
    const auto k = std::min({present.size(), absent.size(), max_per_scene});
    if (k == 0) {
      ++out.skipped_scenes;
      std::cerr << "warning: POPE skips scene " << scene.id
                << (absent.empty() ? " (no absent object)" : " (no present object)") << "\n";
      continue;
    }
    rng.shuffle(present);
    present.resize(k);
    std::vector<std::size_t> negatives;
    if (strategy == PopeStrategy::kRandom) {
      rng.shuffle(absent);
      negatives.assign(absent.begin(), absent.begin() + static_cast<std::ptrdiff_t>(k));
    } else {
      std::vector<double> score(num_types, 0.0);
      for (auto t : absent) {
        if (strategy == PopeStrategy::kPopular) {
          score[t] = stats.frequency[t];
        } else {
          for (auto p : scene.present_types()) score[t] += stats.cooccurrence[p][t];
        }
      }
      std::stable_sort(absent.begin(), absent.end(), [&](auto a, auto b) {
        if (score[a] != score[b]) return score[a] > score[b];
        if (stats.frequency[a] != stats.frequency[b]) return stats.frequency[a] > stats.frequency[b];
        return a < b;
      });
      negatives.assign(absent.begin(), absent.begin() + static_cast<std::ptrdiff_t>(k));
    }
    for (auto t : present) out.items.push_back(make_existence_item(scene, t));
    for (auto t : negatives) out.items.push_back(make_existence_item(scene, t));
  }
  for (std::size_t i = 0; i < out.items.size(); ++i) {
    out.items[i].id = i;
    out.items[i].provenance.origin = "pope:" + to_string(strategy);
  }
  return out;
}

}  // namespace attncal::synth
