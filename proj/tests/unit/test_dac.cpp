#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "attncal/calib/dac.hpp"
#include "attncal/errors.hpp"
#include "attncal/nd/ops.hpp"
#include "attncal/nd/tape.hpp"
#include "attncal/synth/augment.hpp"
#include "support/fixtures.hpp"

using namespace attncal;
using namespace attncal::testing;

namespace {

synth::World tiny_world() { return synth::World({3, 3, 4, 0.05, 7}); }

synth::SceneSpec tiny_scenes() {
  synth::SceneSpec s;
  s.grid_h = s.grid_w = 3;
  s.max_side = 1;
  s.max_objects = 2;
  return s;
}

calib::DacModule randomized(const calib::DacConfig& cfg, std::size_t n, std::uint64_t seed) {
  calib::DacModule m(cfg, n);
  Rng rng(seed);
  for (auto& p : m.named_parameters()) {
    auto d = p.tensor.mutable_data();
    for (auto& v : d) v = 0.6 * rng.uniform() - 0.3;
  }
  return m;
}

std::vector<double> grads_of(const std::vector<nd::NamedTensor>& params) {
  std::vector<double> out;
  for (const auto& p : params) out.insert(out.end(), p.tensor.grad().begin(), p.tensor.grad().end());
  return out;
}

}  // namespace

TEST_CASE("nt_xent: degenerate and hand-evaluated cases") {
  auto z1 = nd::Tensor::matrix({{0.3, -1.0, 2.0}, {0.3, -1.0, 2.0}});
  CHECK(calib::nt_xent(z1, 1.0).item() == 0.0);

  auto z2 = nd::Tensor::matrix({{1, 0}, {1, 0}, {0, 1}, {0, 1}});
  const double e = std::exp(1.0);
  const double expected = -std::log(e / (e + 2.0));
  CHECK(std::fabs(calib::nt_xent(z2, 1.0).item() - expected) < 1e-9);
  CHECK(std::fabs(expected - 0.5514447139) < 1e-9);

  Rng rng(3);
  auto z = random_tensor(rng, {6, 5});
  const double base = calib::nt_xent(z, 0.1).item();
  CHECK(base >= 0.0);
  for (double c : {0.01, 3.7, 250.0})
    CHECK(calib::nt_xent(nd::scale(z, c), 0.1).item() == doctest::Approx(base).epsilon(1e-12));
  CHECK_THROWS_AS(calib::nt_xent(z, 0.0), ConfigError);
  CHECK_THROWS_AS(calib::nt_xent(z, -1.0), ConfigError);
}

TEST_CASE("combined_loss arithmetic") {
  auto ce = nd::Tensor::scalar(0.7), cl = nd::Tensor::scalar(0.5);
  CHECK(calib::combined_loss(ce, cl, 0.0).item() == 0.7);
  CHECK(calib::combined_loss(ce, cl, 0.01).item() == doctest::Approx(0.705).epsilon(1e-15));
}

TEST_CASE("combined_loss gradient is linear in the two parts") {
  calib::DacConfig cfg;
  cfg.layers = {0};
  auto module = randomized(cfg, 5, 21);
  module.set_trainable(true);
  auto params = module.named_parameters();
  Rng rng(4);
  auto x = random_tensor(rng, {4, 5});
  auto r = random_tensor(rng, {4, 5});
  const double lambda = 0.37;
  auto pass = [&](int which) {
    nd::zero_grads(params);
    nd::Tape tape;
    nd::TapeScope scope(tape);
    auto y = calib::dac_forward(x, module, 0);
    auto ce = nd::sum(nd::mul(y, r));
    auto cl = calib::nt_xent(y, 0.5);
    if (which == 0) tape.backward(calib::combined_loss(ce, cl, lambda));
    else if (which == 1) tape.backward(ce);
    else tape.backward(cl);
    return grads_of(params);
  };
  const auto total = pass(0), g_ce = pass(1), g_cl = pass(2);
  REQUIRE(total.size() == g_ce.size());
  for (std::size_t i = 0; i < total.size(); ++i)
    CHECK(total[i] == doctest::Approx(g_ce[i] + lambda * g_cl[i]).epsilon(1e-12));
}

TEST_CASE("dac_forward: identity at init and identity weights") {
  calib::DacConfig cfg;
  cfg.layers = {1};
  calib::DacModule zero(cfg, 9);
  Rng rng(5);
  auto x = random_tensor(rng, {9}, -50, 50);
  CHECK(calib::dac_forward(x, zero, 1).to_vector() == x.to_vector());
  auto rows = random_tensor(rng, {3, 9});
  CHECK(calib::dac_forward(rows, zero, 1).to_vector() == rows.to_vector());

  calib::DacStack plain;
  plain.weights = {nd::Tensor::zeros({4, 4})};
  plain.biases = {nd::Tensor::zeros({4})};
  for (std::size_t i = 0; i < 4; ++i) plain.weights[0].mutable_data()[i * 4 + i] = 1.0;
  auto v = nd::Tensor::vector({-3, 0.5, 2, -0.25});
  CHECK(calib::dac_forward(v, plain, false).to_vector() == v.to_vector());

  CHECK_THROWS_AS(calib::dac_forward(v, calib::DacModule{}, 0), ContractError);
}

TEST_CASE("dac_forward gradient matches finite differences") {
  calib::DacConfig cfg;
  cfg.layers = {0};
  for (bool residual : {true, false}) {
    cfg.residual = residual;
    auto module = randomized(cfg, 6, 31);
    Rng rng(6);
    auto x = random_away_from_zero(rng, {6});
    std::vector<nd::Tensor> inputs;
    for (auto& p : module.named_parameters()) inputs.push_back(p.tensor);
    auto r = check_gradients([&](const std::vector<nd::Tensor>&) { return nd::sum(calib::dac_forward(x, module, 0)); }, inputs);
    CHECK(r.entries > 0);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("zero-init DAC: model outputs and z are bitwise baseline") {
  const auto c = tiny_config();
  model::Model m(c, 6);
  model::TokenSequence seq{random_patches(c, 8), {model::tok::kIs, model::tok::kThere, model::tok::kA, 14}};
  const auto base = model::forward(m, seq);
  for (auto pol : {model::QueryPolicy::kLastToken, model::QueryPolicy::kAllAfterImageStart}) {
    calib::DacConfig cfg;
    cfg.positions = pol;
    calib::DacModule dac(cfg, c.n_vision());
    model::HookRegistry hooks;
    calib::install_dac(hooks, dac);
    const auto out = model::forward(m, seq, hooks);
    CHECK(out.logits.to_vector() == base.logits.to_vector());
    const auto z = calib::embed_repr(m, hooks, seq);
    CHECK(z.size() == c.embed_dim);
    CHECK(z.to_vector() == calib::embed_repr(m, {}, seq).to_vector());
    CHECK(z.to_vector() == calib::embed_repr(m, hooks, seq).to_vector());
  }
}

TEST_CASE("DAC reads and writes only the configured rows") {
  const auto c = tiny_config();
  model::Model m(c, 7);
  model::TokenSequence seq{random_patches(c, 9), {model::tok::kIs, model::tok::kThere, model::tok::kA, 14}};
  calib::DacConfig cfg;
  cfg.layers = {1};
  auto dac = randomized(cfg, c.n_vision(), 41);
  model::HookRegistry hooks;
  calib::install_dac(hooks, dac);
  auto rec = model::RecordSpec::all_layers(c);
  rec.positions = model::QueryPolicy::kAllAfterImageStart;
  const auto a = model::forward(m, seq, {}, rec);
  const auto b = model::forward(m, seq, hooks, rec);
  const auto last = seq.length() - 1;
  for (std::size_t i = 0; i < a.snapshots.size(); ++i) {
    const auto& sa = a.snapshots[i];
    const auto& sb = b.snapshots[i];
    const bool hooked = sa.layer == 1 && sa.query_pos == last;
    for (std::size_t h = 0; h < c.heads; ++h) {
      bool same = sa.heads[h].logits == sb.heads[h].logits;
      if (!hooked) CHECK(same);
      if (hooked) {
        CHECK_FALSE(same);
        // text logits untouched
        for (std::size_t j = c.n_vision(); j <= last; ++j) CHECK(sa.heads[h].logits[j] == sb.heads[h].logits[j]);
      }
    }
  }
}

TEST_CASE("train_dac: frozen backbone, overfit, determinism") {
  const auto c = tiny_config();
  const auto world = tiny_world();
  synth::ObjectCatalog cat;
  Rng rng(12);
  auto scenes = synth::gen_scenes(12, tiny_scenes(), cat, rng);
  auto aug = synth::crop_augment(scenes, {1, 2}, rng);

  // A backbone fitted to the crops; item 3 is one it still answers wrongly.
  model::Model m(c, 13);
  std::vector<model::TrainingItem> corpus;
  for (const auto& q : aug.items) corpus.push_back(synth::to_training_item(world, q));
  model::PretrainConfig pc;
  pc.epochs = 100;
  pc.batch_size = 4;
  pc.lr = 1e-2;
  model::pretrain(m, corpus, pc);

  const auto hash = m.parameter_hash();
  std::vector<synth::QueryLabelPair> one(4, aug.items[3]);
  calib::DacTrainConfig tc;
  tc.batch_size = 2;
  tc.grad_accum = 1;
  tc.lambda = 0.0;
  tc.lr = 1e-2;
  tc.epochs = 200;
  tc.max_steps = 300;
  auto run = [&] {
    calib::DacModule dac(calib::DacConfig{}, c.n_vision());
    auto r = calib::train_dac(m, dac, world, one, tc);
    return std::pair{r, dac.parameter_hash()};
  };
  auto [r, dac_hash] = run();
  CHECK(r.backbone_hash_before == hash);
  CHECK(r.backbone_hash_after == hash);
  CHECK(m.parameter_hash() == hash);
  REQUIRE(r.log.size() == 300);
  CHECK(r.log.front().ce > 1.0);
  CHECK(r.log.back().ce < 0.05);
  CHECK(run().second == dac_hash);

  tc.lambda = 0.01;
  tc.batch_size = 1;
  calib::DacModule dac(calib::DacConfig{}, c.n_vision());
  CHECK_THROWS_AS(calib::train_dac(m, dac, world, one, tc), ConfigError);
}

TEST_CASE("DAC checkpoint round trip") {
  calib::DacConfig cfg;
  cfg.layers = {0, 1};
  cfg.positions = model::QueryPolicy::kAllAfterImageStart;
  auto dac = randomized(cfg, 9, 51);
  const auto path = std::filesystem::temp_directory_path() / "attncal_test_dac.ckpt";
  calib::save_dac(path, dac);
  auto back = calib::load_dac(path);
  CHECK(back.parameter_hash() == dac.parameter_hash());
  CHECK(back.config().layers == cfg.layers);
  CHECK(back.config().positions == cfg.positions);
  CHECK(back.n_vision() == 9);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(calib::load_dac(path), IoError);
}
