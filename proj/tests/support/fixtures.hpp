#pragma once

#include <algorithm>

#include "attncal/model/model.hpp"
#include "attncal/rng.hpp"
#include "gradcheck.hpp"

namespace attncal::testing {

// 3x3 grid, 2 heads, 2 layers: fast enough for exhaustive checks.
inline model::ModelConfig tiny_config() {
  model::ModelConfig c;
  c.grid_h = c.grid_w = 3;
  c.patch_dim = 4;
  c.embed_dim = 8;
  c.heads = 2;
  c.layers = 2;
  c.mlp_hidden = 16;
  c.max_seq_len = 24;
  return c;
}

inline nd::Tensor random_patches(const model::ModelConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  return random_tensor(rng, {c.n_vision(), c.patch_dim});
}

inline void fill(nd::Tensor t, double v) {
  auto d = t.mutable_data();
  std::fill(d.begin(), d.end(), v);
}

}  // namespace attncal::testing
