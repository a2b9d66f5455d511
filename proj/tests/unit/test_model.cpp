#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "attncal/errors.hpp"
#include "attncal/model/checkpoint.hpp"
#include "attncal/model/model.hpp"
#include "attncal/model/vocab.hpp"
#include "attncal/nd/ops.hpp"
#include "attncal/nd/tape.hpp"
#include "support/fixtures.hpp"

using namespace attncal;
using namespace attncal::testing;
using model::HookStage;

namespace {

model::HookEntry identity_hook(std::size_t layer, HookStage stage) {
  model::HookEntry e;
  e.layer = layer;
  e.stage = stage;
  e.fn = [](const model::HookContext&, const nd::Tensor& s) { return s; };
  return e;
}

std::vector<std::size_t> prompt_tokens() { return {model::tok::kIs, model::tok::kThere, model::tok::kA, 14}; }

}  // namespace

TEST_CASE("config validation") {
  auto c = tiny_config();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  CHECK_NOTHROW(c.validate());
  model::ModelConfig d;
  CHECK(d.n_vision() == 36);
  CHECK(d.embed_dim == 64);
  CHECK(d.heads == 4);
  CHECK(d.layers == 4);
}

TEST_CASE("embed_image") {
  const auto c = tiny_config();
  model::Model m(c, 1);
  SUBCASE("zero projection gives positional rows") {
    fill(m.weights().patch_projection, 0.0);
    fill(m.weights().patch_bias, 0.0);
    auto e = model::embed_image(m, nd::Tensor::zeros({c.n_vision(), c.patch_dim}));
    CHECK(e.to_vector() == nd::slice_rows(m.weights().position_embedding, 0, c.n_vision()).to_vector());
  }
  SUBCASE("shape contract") {
    auto e = model::embed_image(m, random_patches(c, 3));
    CHECK(e.shape() == nd::Shape{c.n_vision(), c.embed_dim});
    CHECK_THROWS_AS(model::embed_image(m, nd::Tensor::zeros({c.n_vision() + 1, c.patch_dim})), DimensionError);
    CHECK_THROWS_AS(model::embed_image(m, nd::Tensor::zeros({c.n_vision(), c.patch_dim + 1})), DimensionError);
  }
  SUBCASE("one changed cell changes one token") {
    auto p = random_patches(c, 5);
    auto q = p.detach();
    q.mutable_data()[4 * c.patch_dim + 1] += 0.5;
    auto a = model::embed_image(m, p), b = model::embed_image(m, q);
    for (std::size_t r = 0; r < c.n_vision(); ++r) {
      bool same = true;
      for (std::size_t j = 0; j < c.embed_dim; ++j) same = same && a.at(r, j) == b.at(r, j);
      CHECK(same == (r != 4));
    }
  }
}

TEST_CASE("forward: causal mask and snapshots") {
  const auto c = tiny_config();
  model::Model m(c, 2);
  model::TokenSequence seq{random_patches(c, 7), prompt_tokens()};
  model::RecordSpec rec = model::RecordSpec::all_layers(c);
  rec.positions = model::QueryPolicy::kAllAfterImageStart;
  rec.capture_values = true;
  auto r = model::forward(m, seq, {}, rec);
  const auto t = seq.length();
  CHECK(r.logits.shape() == nd::Shape{t, c.vocab_size});
  CHECK(r.snapshots.size() == c.layers * (t - c.n_vision()));
  for (const auto& s : r.snapshots) {
    for (const auto& h : s.heads) {
      double total = 0.0;
      for (std::size_t j = 0; j < t; ++j) {
        if (j > s.query_pos) {
          CHECK(h.weights[j] == 0.0);
          CHECK(std::isinf(h.logits[j]));
        }
        total += h.weights[j];
      }
      CHECK(std::fabs(total - 1.0) < 1e-9);
      // Snapshot fidelity: the context equals weights . V.
      for (std::size_t k = 0; k < c.head_dim(); ++k) {
        double ctx = 0.0;
        for (std::size_t j = 0; j < t; ++j) ctx += h.weights[j] * h.values.at(j, k);
        CHECK(ctx == doctest::Approx(h.context[k]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("forward: causality under perturbation") {
  const auto c = tiny_config();
  model::Model m(c, 3);
  model::TokenSequence a{random_patches(c, 1), prompt_tokens()};
  auto b = a;
  b.text[2] = model::tok::kThe;
  const auto la = model::forward(m, a).logits, lb = model::forward(m, b).logits;
  const auto j = c.n_vision() + 2;
  for (std::size_t r = 0; r < a.length(); ++r) {
    bool same = true;
    for (std::size_t v = 0; v < c.vocab_size; ++v) same = same && la.at(r, v) == lb.at(r, v);
    if (r < j) CHECK(same);
    else CHECK_FALSE(same);
  }
}

TEST_CASE("forward: zero Q and K give uniform attention over the prefix") {
  const auto c = tiny_config();
  model::Model m(c, 4);
  for (auto& L : m.weights().layers) {
    fill(L.wq, 0.0);
    fill(L.wk, 0.0);
  }
  model::TokenSequence seq{random_patches(c, 2), prompt_tokens()};
  model::RecordSpec rec = model::RecordSpec::all_layers(c);
  rec.positions = model::QueryPolicy::kAllAfterImageStart;
  for (const auto& s : model::forward(m, seq, {}, rec).snapshots)
    for (const auto& h : s.heads)
      for (std::size_t j = 0; j <= s.query_pos; ++j)
        CHECK(h.weights[j] == doctest::Approx(1.0 / static_cast<double>(s.query_pos + 1)).epsilon(1e-12));
}

TEST_CASE("hooks: identity is bitwise neutral, bad shapes are reported") {
  const auto c = tiny_config();
  model::Model m(c, 5);
  model::TokenSequence seq{random_patches(c, 3), prompt_tokens()};
  const auto base = model::forward(m, seq).logits.to_vector();
  for (auto stage : {HookStage::kPostSoftmax, HookStage::kPreSoftmax}) {
    for (auto pol : {model::QueryPolicy::kLastToken, model::QueryPolicy::kAllAfterImageStart}) {
      model::HookRegistry hooks;
      for (std::size_t l = 0; l < c.layers; ++l) {
        auto e = identity_hook(l, stage);
        e.positions = pol;
        hooks.add(e);
      }
      CHECK(model::forward(m, seq, hooks).logits.to_vector() == base);
    }
  }
  model::HookRegistry dup;
  dup.add(identity_hook(0, HookStage::kPostSoftmax));
  CHECK_THROWS_AS(dup.add(identity_hook(0, HookStage::kPostSoftmax)), ConfigError);
  CHECK_NOTHROW(dup.add(identity_hook(0, HookStage::kPreSoftmax)));

  model::HookRegistry bad;
  auto e = identity_hook(1, HookStage::kPostSoftmax);
  e.fn = [](const model::HookContext&, const nd::Tensor&) { return nd::Tensor::zeros({2}); };
  bad.add(e);
  try {
    model::forward(m, seq, bad);
    FAIL("expected HookError");
  } catch (const HookError& err) {
    const std::string msg = err.what();
    CHECK(msg.find("layer 1") != std::string::npos);
    CHECK(msg.find("post") != std::string::npos);
  }
}

TEST_CASE("hooks: vision-slice isolation") {
  const auto c = tiny_config();
  model::Model m(c, 6);
  model::TokenSequence seq{random_patches(c, 4), prompt_tokens()};
  model::RecordSpec rec;
  rec.layers = {0};
  const auto before = model::forward(m, seq, {}, rec).snapshots[0];
  model::HookRegistry hooks;
  auto e = identity_hook(0, HookStage::kPostSoftmax);
  e.renormalize = false;
  e.fn = [](const model::HookContext&, const nd::Tensor& s) { return nd::scale(s, 3.0); };
  hooks.add(e);
  const auto after = model::forward(m, seq, hooks, rec).snapshots[0];
  for (std::size_t h = 0; h < c.heads; ++h) {
    for (std::size_t j = 0; j < seq.length(); ++j) {
      if (j < c.n_vision()) CHECK(after.heads[h].weights[j] == doctest::Approx(3.0 * before.heads[h].weights[j]));
      else CHECK(after.heads[h].weights[j] == before.heads[h].weights[j]);
    }
  }
}

TEST_CASE("generate") {
  const auto c = tiny_config();
  model::Model m(c, 7);
  model::TokenSequence prompt{random_patches(c, 5), prompt_tokens()};
  SUBCASE("one-hot head repeats its token") {
    const std::size_t tau = model::tok::kYes;
    fill(m.weights().final_gain, 0.0);
    fill(m.weights().final_bias, 1.0);
    fill(m.weights().output_head, 0.0);
    for (std::size_t k = 0; k < c.embed_dim; ++k) m.weights().output_head.mutable_data()[k * c.vocab_size + tau] = 1.0;
    model::DecodeOptions o;
    o.max_new = 5;
    CHECK(model::generate(m, prompt, {}, o) == std::vector<std::size_t>(5, tau));
  }
  SUBCASE("top-p near zero equals greedy; fixed seed reproduces") {
    model::DecodeOptions g;
    g.max_new = 6;
    g.stop_token = c.vocab_size + 1;  // never stop early
    auto greedy = model::generate(m, prompt, {}, g);
    auto p = g;
    p.mode = model::DecodeMode::kTopP;
    p.top_p = 1e-12;
    p.seed = 3;
    CHECK(model::generate(m, prompt, {}, p) == greedy);
    p.top_p = 1.0;
    CHECK(model::generate(m, prompt, {}, p) == model::generate(m, prompt, {}, p));
  }
}

TEST_CASE("pretraining: memorization, determinism, monotone epochs") {
  const auto c = tiny_config();
  model::TrainingItem item{random_patches(c, 9), prompt_tokens(), {model::tok::kYes, model::tok::kEos}};
  std::vector<model::TrainingItem> one{item};
  model::PretrainConfig pc;
  pc.epochs = 150;
  pc.batch_size = 1;
  pc.lr = 1e-2;
  pc.monitor_items = 1;
  model::Model m(c, 11);
  model::pretrain(m, one, pc);
  nd::NoGradScope ng;
  CHECK(model::item_loss(m, item).item() < 0.01);

  std::vector<model::TrainingItem> corpus;
  Rng rng(2);
  for (int i = 0; i < 24; ++i) {
    const bool yes = rng.bernoulli(0.5);
    corpus.push_back({random_patches(c, 100 + i), prompt_tokens(), {yes ? model::tok::kYes : model::tok::kNo, model::tok::kEos}});
  }
  pc.epochs = 5;
  pc.batch_size = 4;
  pc.lr = 3e-3;
  pc.monitor_items = 24;
  auto run = [&] {
    model::Model mm(c, 12);
    std::size_t improved = 0, total = 0;
    model::pretrain(mm, corpus, pc, [&](const model::EpochStats& s) {
      ++total;
      improved += s.monitor_loss_end <= s.monitor_loss_start;
    });
    CHECK(improved * 10 >= total * 9);
    return mm.parameter_hash();
  };
  CHECK(run() == run());
}

TEST_CASE("checkpoint round trip is byte identical") {
  const auto c = tiny_config();
  model::Model m(c, 13);
  const auto dir = std::filesystem::temp_directory_path() / "attncal_ckpt_test";
  std::filesystem::create_directories(dir);
  model::save_model(dir / "a.ckpt", m);
  auto loaded = model::load_model(dir / "a.ckpt");
  CHECK(loaded.parameter_hash() == m.parameter_hash());
  CHECK(loaded.config() == c);
  model::save_model(dir / "b.ckpt", loaded);
  const auto a = model::serialize_checkpoint(model::read_checkpoint(dir / "a.ckpt"));
  const auto b = model::serialize_checkpoint(model::read_checkpoint(dir / "b.ckpt"));
  CHECK(a == b);
  CHECK(std::filesystem::file_size(dir / "a.ckpt") == std::filesystem::file_size(dir / "b.ckpt"));
  CHECK_THROWS_AS(model::read_checkpoint(dir / "missing.ckpt"), IoError);
  CHECK_THROWS_AS(model::deserialize_checkpoint(a.substr(0, a.size() / 2)), IoError);
  CHECK_THROWS_AS(model::deserialize_checkpoint("NOTMAGIC" + a.substr(8)), IoError);
  std::filesystem::remove_all(dir);
}
