#include "attncal/synth/corpus.hpp"

#include <algorithm>
#include <cmath>

#include "attncal/errors.hpp"

namespace attncal::synth {

namespace tok = model::tok;

std::string to_string(QueryKind k) {
  switch (k) {
    case QueryKind::kExistence: return "existence";
    case QueryKind::kColor: return "color";
    case QueryKind::kCount: return "count";
    case QueryKind::kPosition: return "position";
    case QueryKind::kCaption: return "caption";
  }
  return "?";
}

QueryKind parse_query_kind(const std::string& s) {
  for (auto k : {QueryKind::kExistence, QueryKind::kColor, QueryKind::kCount, QueryKind::kPosition, QueryKind::kCaption})
    if (to_string(k) == s) return k;
  throw IoError("unknown query kind '" + s + "'");
}

std::string to_string(MmeSubtask s) {
  switch (s) {
    case MmeSubtask::kExistence: return "existence";
    case MmeSubtask::kCount: return "count";
    case MmeSubtask::kPosition: return "position";
    case MmeSubtask::kColor: return "color";
  }
  return "?";
}

std::vector<std::size_t> existence_query(std::size_t type) {
  return {tok::kIs, tok::kThere, tok::kA, model::object_token(type), tok::kQuestion};
}

std::vector<std::size_t> color_query(std::size_t color, std::size_t type) {
  return {tok::kIs, tok::kThere, tok::kA, model::color_token(color), model::object_token(type), tok::kQuestion};
}

std::vector<std::size_t> count_query(std::size_t count, std::size_t type) {
  return {tok::kAre, tok::kThere, model::count_token(count), model::object_token(type), tok::kQuestion};
}

std::vector<std::size_t> position_query(std::size_t type, model::Side side) {
  return {tok::kIs, tok::kThe, model::object_token(type), tok::kOn, tok::kThe, model::side_token(side), tok::kQuestion};
}

std::vector<std::size_t> caption_prompt() { return {tok::kDescribe, tok::kThe, tok::kImage, tok::kColon}; }

std::vector<std::size_t> caption_answer(const SyntheticScene& scene, std::size_t max_objects) {
  std::vector<const ObjectInstance*> objs;
  for (const auto& o : scene.objects) objs.push_back(&o);
  std::sort(objs.begin(), objs.end(), [](auto* a, auto* b) {
    return std::pair(a->box.row, a->box.col) < std::pair(b->box.row, b->box.col);
  });
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < objs.size() && i < max_objects; ++i) out.push_back(model::object_token(objs[i]->type));
  out.push_back(tok::kEos);
  return out;
}

std::vector<std::size_t> yes_no_answer(bool yes) { return {yes ? tok::kYes : tok::kNo, tok::kEos}; }

QueryLabelPair make_existence_item(const SyntheticScene& scene, std::size_t type) {
  QueryLabelPair q;
  q.kind = QueryKind::kExistence;
  q.scene = scene;
  q.query = existence_query(type);
  q.label = scene.contains_type(type);
  q.answer = yes_no_answer(*q.label);
  q.object_type = type;
  q.provenance.source_scene = scene.id;
  return q;
}

model::TrainingItem to_training_item(const World& world, const QueryLabelPair& item) {
  return {world.render(item.scene), item.query, item.answer};
}

model::TokenSequence to_prompt(const World& world, const QueryLabelPair& item) {
  return {world.render(item.scene), item.query};
}

void to_json(nlohmann::json& j, const CorpusConfig& c) {
  j = {{"items", c.items},
       {"caption_fraction", c.caption_fraction},
       {"mme_fraction", c.mme_fraction},
       {"hot_quadrant", to_string(c.positive_placement.hot)},
       {"hot_ratio", c.positive_placement.hot_ratio},
       {"biased", c.positive_placement.kind == Placement::Kind::kHotRegion},
       {"min_objects", c.scene.min_objects},
       {"max_objects", c.scene.max_objects},
       {"min_side", c.scene.min_side},
       {"max_side", c.scene.max_side},
       {"partner_prob", c.scene.partner_prob}};
}

void from_json(const nlohmann::json& j, CorpusConfig& c) {
  CorpusConfig d;
  c.items = j.value("items", d.items);
  c.caption_fraction = j.value("caption_fraction", d.caption_fraction);
  c.mme_fraction = j.value("mme_fraction", d.mme_fraction);
  c.positive_placement.hot = parse_quadrant(j.value("hot_quadrant", to_string(d.positive_placement.hot)));
  c.positive_placement.hot_ratio = j.value("hot_ratio", d.positive_placement.hot_ratio);
  c.positive_placement.kind = j.value("biased", true) ? Placement::Kind::kHotRegion : Placement::Kind::kUniform;
  c.scene.min_objects = j.value("min_objects", d.scene.min_objects);
  c.scene.max_objects = j.value("max_objects", d.scene.max_objects);
  c.scene.min_side = j.value("min_side", d.scene.min_side);
  c.scene.max_side = j.value("max_side", d.scene.max_side);
  c.scene.partner_prob = j.value("partner_prob", d.scene.partner_prob);
}

namespace {

std::size_t random_absent_type(const SyntheticScene& scene, Rng& rng) {
  std::vector<std::size_t> absent;
  for (std::size_t t = 0; t < tok::kNumObjects; ++t)
    if (!scene.contains_type(t)) absent.push_back(t);
  if (absent.empty()) throw ConfigError("scene contains every object type; no negative query possible");
  return absent[rng.uniform_int(0, absent.size() - 1)];
}

QueryLabelPair yes_no(QueryKind kind, const SyntheticScene& scene, std::vector<std::size_t> query, bool yes,
                      std::size_t type) {
  QueryLabelPair q;
  q.kind = kind;
  q.scene = scene;
  q.query = std::move(query);
  q.label = yes;
  q.answer = yes_no_answer(yes);
  q.object_type = type;
  q.provenance.source_scene = scene.id;
  return q;
}

SyntheticScene count_scene(Rng& rng, const SceneSpec& spec, const ObjectCatalog& catalog, std::size_t type,
                           std::size_t k) {
  for (int attempt = 0; attempt < 100; ++attempt) {
    SyntheticScene s;
    s.grid_h = spec.grid_h;
    s.grid_w = spec.grid_w;
    s.noise_seed = rng.next_u64();
    std::vector<char> occ(spec.grid_h * spec.grid_w, 0);
    const std::size_t extra = rng.uniform_int(0, 1);
    bool ok = true;
    for (std::size_t i = 0; i < k + extra && ok; ++i) {
      std::size_t t = type;
      if (i >= k) {
        do t = rng.categorical(catalog.base_weights()); while (t == type);
      }
      BoundingBox b = draw_box(rng, spec.grid_h, spec.grid_w, 1, 1, Placement{});
      if (occ[b.row * spec.grid_w + b.col]) ok = false;
      occ[b.row * spec.grid_w + b.col] = 1;
      s.objects.push_back({t, rng.uniform_int(0, tok::kNumColors - 1), b});
    }
    if (ok) return s;
  }
  throw ConfigError("could not lay out a count scene");
}

// Returns false when the object straddles the midline on the chosen axis.
bool side_of(const BoundingBox& b, std::size_t gh, std::size_t gw, bool horizontal, model::Side& side) {
  if (horizontal) {
    const std::size_t mid = gw / 2;
    if (b.col + b.width <= mid) { side = model::Side::kLeft; return true; }
    if (b.col >= gw - mid) { side = model::Side::kRight; return true; }
  } else {
    const std::size_t mid = gh / 2;
    if (b.row + b.height <= mid) { side = model::Side::kTop; return true; }
    if (b.row >= gh - mid) { side = model::Side::kBottom; return true; }
  }
  return false;
}

model::Side flip(model::Side s) {
  switch (s) {
    case model::Side::kLeft: return model::Side::kRight;
    case model::Side::kRight: return model::Side::kLeft;
    case model::Side::kTop: return model::Side::kBottom;
    case model::Side::kBottom: return model::Side::kTop;
  }
  return s;
}

// Yes/no pair for one MME-style subtask on a fresh scene.
std::pair<QueryLabelPair, QueryLabelPair> mme_pair(MmeSubtask sub, const SceneSpec& spec, const ObjectCatalog& catalog,
                                                   Rng& rng) {
  SceneSpec uniform = spec;
  uniform.focus_placement = Placement{};
  switch (sub) {
    case MmeSubtask::kExistence: {
      auto s = gen_scene(rng, uniform, catalog);
      if (s.objects.empty()) return mme_pair(sub, spec, catalog, rng);
      const auto t = s.objects[0].type;
      const auto neg = random_absent_type(s, rng);
      return {yes_no(QueryKind::kExistence, s, existence_query(t), true, t),
              yes_no(QueryKind::kExistence, s, existence_query(neg), false, neg)};
    }
    case MmeSubtask::kColor: {
      auto s = gen_scene(rng, uniform, catalog);
      if (s.objects.empty()) return mme_pair(sub, spec, catalog, rng);
      const auto& o = s.objects[0];
      const auto wrong = (o.color + 1 + rng.uniform_int(0, tok::kNumColors - 2)) % tok::kNumColors;
      return {yes_no(QueryKind::kColor, s, color_query(o.color, o.type), true, o.type),
              yes_no(QueryKind::kColor, s, color_query(wrong, o.type), false, o.type)};
    }
    case MmeSubtask::kCount: {
      const auto t = rng.categorical(catalog.base_weights());
      const auto k = rng.uniform_int(1, tok::kNumCounts);
      auto s = count_scene(rng, spec, catalog, t, k);
      const auto wrong = (k - 1 + 1 + rng.uniform_int(0, tok::kNumCounts - 2)) % tok::kNumCounts + 1;
      return {yes_no(QueryKind::kCount, s, count_query(k, t), true, t),
              yes_no(QueryKind::kCount, s, count_query(wrong, t), false, t)};
    }
    case MmeSubtask::kPosition: {
      for (int attempt = 0; attempt < 1000; ++attempt) {
        auto s = gen_scene(rng, uniform, catalog);
        if (s.objects.empty()) continue;
        const auto& o = s.objects[0];
        const bool horizontal = rng.bernoulli(0.5);
        model::Side side;
        if (!side_of(o.box, s.grid_h, s.grid_w, horizontal, side)) continue;
        return {yes_no(QueryKind::kPosition, s, position_query(o.type, side), true, o.type),
                yes_no(QueryKind::kPosition, s, position_query(o.type, flip(side)), false, o.type)};
      }
      throw ConfigError("could not generate a position question");
    }
  }
  throw ConfigError("unknown MME subtask");
}

}  // namespace

std::vector<QueryLabelPair> build_pretraining_corpus(const CorpusConfig& config, const ObjectCatalog& catalog,
                                                     Rng& rng) {
  if (config.caption_fraction < 0.0 || config.mme_fraction < 0.0 || config.caption_fraction + config.mme_fraction > 1.0)
    throw ConfigError("corpus fractions must be non-negative and sum to at most 1");
  std::vector<QueryLabelPair> out;
  out.reserve(config.items);
  SceneSpec positive = config.scene;
  positive.focus_placement = config.positive_placement;
  SceneSpec uniform = config.scene;
  uniform.focus_placement = Placement{};
  if (positive.min_objects == 0) positive.min_objects = 1;
  std::size_t mme_rotation = 0;
  while (out.size() < config.items) {
    const double u = rng.uniform();
    if (u < config.caption_fraction) {
      auto s = gen_scene(rng, uniform, catalog);
      QueryLabelPair q;
      q.kind = QueryKind::kCaption;
      q.scene = s;
      q.query = caption_prompt();
      q.answer = caption_answer(s);
      out.push_back(std::move(q));
    } else if (u < config.caption_fraction + config.mme_fraction) {
      static constexpr MmeSubtask kRot[] = {MmeSubtask::kColor, MmeSubtask::kCount, MmeSubtask::kPosition};
      auto [yes, no] = mme_pair(kRot[mme_rotation++ % 3], config.scene, catalog, rng);
      out.push_back(rng.bernoulli(0.5) ? std::move(yes) : std::move(no));
    } else if (rng.bernoulli(0.5)) {
      auto s = gen_scene(rng, positive, catalog);
      out.push_back(yes_no(QueryKind::kExistence, s, existence_query(s.objects[0].type), true, s.objects[0].type));
    } else {
      auto s = gen_scene(rng, uniform, catalog);
      const auto t = random_absent_type(s, rng);
      out.push_back(yes_no(QueryKind::kExistence, s, existence_query(t), false, t));
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].id = i;
    out[i].scene.id = i;
    out[i].provenance.source_scene = i;
    out[i].provenance.origin = "pretrain";
  }
  return out;
}

std::vector<SyntheticScene> gen_scenes(std::size_t count, const SceneSpec& spec, const ObjectCatalog& catalog,
                                       Rng& rng, std::uint64_t first_id) {
  std::vector<SyntheticScene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(gen_scene(rng, spec, catalog));
    out.back().id = first_id + i;
  }
  return out;
}

std::vector<QueryLabelPair> build_quadrant_polling_set(Quadrant quadrant, std::size_t scenes, const SceneSpec& spec,
                                                       const ObjectCatalog& catalog, Rng& rng) {
  SceneSpec s = spec;
  s.focus_placement = Placement::hot_region(quadrant, 1.0);
  s.min_objects = std::max<std::size_t>(1, s.min_objects);
  std::vector<QueryLabelPair> out;
  for (std::size_t i = 0; i < scenes; ++i) {
    auto scene = gen_scene(rng, s, catalog);
    scene.id = i;
    const auto t = scene.objects[0].type;
    out.push_back(yes_no(QueryKind::kExistence, scene, existence_query(t), true, t));
    const auto neg = random_absent_type(scene, rng);
    out.push_back(yes_no(QueryKind::kExistence, scene, existence_query(neg), false, neg));
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].id = i;
    out[i].provenance.origin = "quadrant:" + to_string(quadrant);
  }
  return out;
}

std::vector<QueryLabelPair> build_mme_subtask(MmeSubtask subtask, std::size_t scenes, const SceneSpec& spec,
                                              const ObjectCatalog& catalog, Rng& rng) {
  std::vector<QueryLabelPair> out;
  for (std::size_t i = 0; i < scenes; ++i) {
    auto [yes, no] = mme_pair(subtask, spec, catalog, rng);
    yes.scene.id = no.scene.id = i;
    yes.provenance.source_scene = no.provenance.source_scene = i;
    out.push_back(std::move(yes));
    out.push_back(std::move(no));
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].id = i;
    out[i].provenance.origin = "mme:" + to_string(subtask);
  }
  return out;
}

std::pair<std::vector<SyntheticScene>, std::vector<SyntheticScene>> split_calibration(
    std::span<const SyntheticScene> validation, double fraction) {
  if (fraction < 0.0 || fraction > 1.0) throw ConfigError("calibration fraction must lie in [0, 1]");
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(validation.size())));
  return {{validation.begin(), validation.begin() + k}, {validation.begin() + k, validation.end()}};
}

}  // namespace attncal::synth
