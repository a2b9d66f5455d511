#include "attncal/calib/dac.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "attncal/errors.hpp"
#include "attncal/model/checkpoint.hpp"
#include "attncal/nd/ops.hpp"
#include "attncal/nd/tape.hpp"
#include "attncal/rng.hpp"
#include "attncal/synth/augment.hpp"

namespace attncal::calib {

void to_json(nlohmann::json& j, const DacConfig& c) {
  j = {{"layers", c.layers},
       {"depth", c.depth},
       {"width", c.width},
       {"residual", c.residual},
       {"positions", model::to_string(c.positions)},
       {"init_seed", c.init_seed}};
}

void from_json(const nlohmann::json& j, DacConfig& c) {
  DacConfig d;
  c.layers = j.value("layers", d.layers);
  c.depth = j.value("depth", d.depth);
  c.width = j.value("width", d.width);
  c.residual = j.value("residual", d.residual);
  c.positions = model::parse_query_policy(j.value("positions", model::to_string(d.positions)));
  c.init_seed = j.value("init_seed", d.init_seed);
}

namespace {

nd::Tensor gaussian(Rng& rng, nd::Shape shape, double stddev) {
  std::vector<double> v(nd::numel(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return nd::Tensor::from(std::move(shape), std::move(v));
}

void validate(const DacConfig& c) {
  if (c.layers.empty()) throw ConfigError("DAC needs at least one target layer");
  if (c.depth == 0) throw ConfigError("DAC depth must be at least 1");
  auto sorted = c.layers;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) throw ConfigError("duplicate DAC layer");
}

}  // namespace

DacModule::DacModule(DacConfig config, std::size_t n_vision) : config_(std::move(config)), n_(n_vision) {
  validate(config_);
  if (n_ == 0) throw ConfigError("DAC input width must be positive");
  const auto hidden = config_.width ? config_.width : n_;
  Rng rng(config_.init_seed);
  for (auto l : config_.layers) {
    DacStack s;
    s.layer = l;
    for (std::size_t i = 0; i < config_.depth; ++i) {
      const auto in = i == 0 ? n_ : hidden;
      const auto out = i + 1 == config_.depth ? n_ : hidden;
      const bool last = i + 1 == config_.depth;
      if (last && config_.residual) {
        s.weights.push_back(nd::Tensor::zeros({in, out}));
      } else {
        s.weights.push_back(gaussian(rng, {in, out}, std::sqrt((last ? 1.0 : 2.0) / static_cast<double>(in))));
      }
      s.biases.push_back(nd::Tensor::zeros({out}));
    }
    stacks_.push_back(std::move(s));
  }
}

DacModule::DacModule(DacConfig config, std::size_t n_vision, std::vector<DacStack> stacks)
    : config_(std::move(config)), n_(n_vision), stacks_(std::move(stacks)) {
  validate(config_);
  if (stacks_.size() != config_.layers.size()) throw DimensionError("DAC stack count does not match its layers");
  for (std::size_t s = 0; s < stacks_.size(); ++s) {
    const auto& st = stacks_[s];
    if (st.layer != config_.layers[s]) throw DimensionError("DAC stack order does not match its layers");
    if (st.weights.size() != config_.depth || st.biases.size() != config_.depth)
      throw DimensionError("DAC stack for layer " + std::to_string(st.layer) + " has the wrong depth");
    std::size_t in = n_;
    for (std::size_t i = 0; i < config_.depth; ++i) {
      const auto& w = st.weights[i];
      if (w.rank() != 2 || w.dim(0) != in) throw DimensionError("DAC weight has shape " + nd::shape_str(w.shape()));
      if (st.biases[i].shape() != nd::Shape{w.dim(1)}) throw DimensionError("DAC bias does not match its weight");
      in = w.dim(1);
    }
    if (in != n_) throw DimensionError("DAC stack output width must equal n");
  }
}

const DacStack& DacModule::stack_for(std::size_t layer) const {
  for (const auto& s : stacks_)
    if (s.layer == layer) return s;
  throw ConfigError("DAC has no stack for layer " + std::to_string(layer));
}

std::vector<nd::NamedTensor> DacModule::named_parameters() const {
  std::vector<nd::NamedTensor> out;
  for (const auto& s : stacks_)
    for (std::size_t i = 0; i < s.weights.size(); ++i) {
      const auto p = "dac/layer" + std::to_string(s.layer) + ".";
      out.push_back({p + "w" + std::to_string(i + 1), s.weights[i]});
      out.push_back({p + "b" + std::to_string(i + 1), s.biases[i]});
    }
  return out;
}

void DacModule::set_trainable(bool on) {
  for (auto& p : named_parameters()) p.tensor.set_requires_grad(on);
}

std::uint64_t DacModule::parameter_hash() const {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& p : named_parameters()) h = nd::content_hash(p.tensor, h);
  return h;
}

nd::Tensor dac_forward(const nd::Tensor& x, const DacStack& stack, bool residual) {
  if (stack.weights.empty()) throw ContractError("DAC module is not initialized");
  const bool vec = x.rank() == 1;
  auto g = vec ? nd::reshape(x, {1, x.dim(0)}) : x;
  if (g.dim(1) != stack.weights.front().dim(0))
    throw DimensionError("DAC input width " + std::to_string(g.dim(1)) + " does not match " +
                         std::to_string(stack.weights.front().dim(0)));
  const auto input = g;
  for (std::size_t i = 0; i < stack.weights.size(); ++i) {
    g = nd::add(nd::matmul(g, stack.weights[i]), stack.biases[i]);
    if (i + 1 < stack.weights.size()) g = nd::relu(g);
  }
  if (residual) g = nd::add(input, g);
  return vec ? nd::reshape(g, {x.dim(0)}) : g;
}

nd::Tensor dac_forward(const nd::Tensor& x, const DacModule& module, std::size_t layer) {
  if (!module.initialized()) throw ContractError("DAC module is not initialized");
  return dac_forward(x, module.stack_for(layer), module.config().residual);
}

void install_dac(model::HookRegistry& hooks, const DacModule& module) {
  if (!module.initialized()) throw ContractError("DAC module is not initialized");
  for (const auto& s : module.stacks()) {
    model::HookEntry e;
    e.layer = s.layer;
    e.stage = model::HookStage::kPreSoftmax;
    e.positions = module.config().positions;
    e.fn = [stack = s, residual = module.config().residual](const model::HookContext&, const nd::Tensor& slice) {
      return dac_forward(slice, stack, residual);
    };
    hooks.add(std::move(e));
  }
}

nd::Tensor embed_repr(const model::Model& model, const model::HookRegistry& hooks, const model::TokenSequence& seq) {
  auto r = model::forward(model, seq, hooks);
  return nd::take_segment(r.final_hidden, seq.length() - 1, 0, model.config().embed_dim);
}

nd::Tensor nt_xent(const nd::Tensor& z, double tau) {
  if (!(tau > 0.0)) throw ConfigError("NT-Xent temperature must be positive");
  if (z.rank() != 2 || z.dim(0) < 2 || z.dim(0) % 2 != 0)
    throw DimensionError("NT-Xent expects [2B, d] representations, got " + nd::shape_str(z.shape()));
  const auto m = z.dim(0);
  auto zn = nd::normalize_rows(z);
  auto s = nd::scale(nd::matmul_nt(zn, zn), 1.0 / tau);
  auto mask = nd::Tensor::zeros({m, m});
  auto md = mask.mutable_data();
  for (std::size_t i = 0; i < m; ++i) md[i * m + i] = nd::kMasked;
  auto lsm = nd::log_softmax_rows(s, mask);
  std::vector<std::size_t> partner(m);
  for (std::size_t i = 0; i < m; ++i) partner[i] = i * m + (i ^ 1);
  return nd::scale(nd::mean(nd::gather_elements(lsm, partner)), -1.0);
}

nd::Tensor combined_loss(const nd::Tensor& ce, const nd::Tensor& cl, double lambda) {
  if (lambda < 0.0) throw ConfigError("lambda must be non-negative");
  if (lambda == 0.0) return ce;
  return nd::add(ce, nd::scale(cl, lambda));
}

void to_json(nlohmann::json& j, const DacTrainConfig& c) {
  j = {{"batch_size", c.batch_size}, {"grad_accum", c.grad_accum}, {"lr", c.lr},
       {"tau", c.tau},               {"lambda", c.lambda},         {"epochs", c.epochs},
       {"max_steps", c.max_steps},   {"clip_norm", c.clip_norm},   {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DacTrainConfig& c) {
  DacTrainConfig d;
  c.batch_size = j.value("batch_size", d.batch_size);
  c.grad_accum = j.value("grad_accum", d.grad_accum);
  c.lr = j.value("lr", d.lr);
  c.tau = j.value("tau", d.tau);
  c.lambda = j.value("lambda", d.lambda);
  c.epochs = j.value("epochs", d.epochs);
  c.max_steps = j.value("max_steps", d.max_steps);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.seed = j.value("seed", d.seed);
}

nlohmann::json to_json_line(const DacLogEntry& e) {
  return {{"step", e.step}, {"ce", e.ce}, {"cl", e.cl}, {"total", e.total}};
}

DacTrainResult train_dac(const model::Model& model, DacModule& module, const synth::World& world,
                         std::span<const synth::QueryLabelPair> augmented, const DacTrainConfig& config,
                         const DacStepCallback& on_step) {
  if (!module.initialized()) throw ContractError("DAC module is not initialized");
  if (config.batch_size == 0 || config.grad_accum == 0) throw ConfigError("batch_size and grad_accum must be positive");
  if (config.lambda < 0.0) throw ConfigError("lambda must be non-negative");
  if (config.lambda > 0.0 && config.batch_size < 2)
    throw ConfigError("contrastive training needs batch_size >= 2 (at least one negative)");
  if (augmented.size() < config.batch_size) throw ConfigError("augmented set is smaller than one minibatch");
  for (const auto& p : model.named_parameters())
    if (p.tensor.requires_grad()) throw ContractError("backbone parameter '" + p.name + "' is not frozen");
  for (const auto& it : augmented)
    if (!it.label) throw ConfigError("DAC training items need yes/no labels");

  DacTrainResult result;
  result.backbone_hash_before = model.parameter_hash();
  const auto vocab = model.config().vocab_size;
  const auto n = model.config().n_vision();

  module.set_trainable(true);
  auto params = module.named_parameters();
  nd::AdamConfig adam;
  adam.lr = config.lr;
  adam.clip_norm = config.clip_norm;
  auto state = nd::make_optimizer_state(params, adam);
  model::HookRegistry hooks;
  install_dac(hooks, module);

  Rng rng(config.seed);
  std::vector<std::size_t> order(augmented.size());
  std::iota(order.begin(), order.end(), 0);
  nd::Tape tape;
  std::size_t micro = 0;
  DacLogEntry acc;
  bool done = false;
  for (std::size_t epoch = 0; epoch < config.epochs && !done; ++epoch) {
    rng.shuffle(order);
    for (std::size_t b = 0; b + config.batch_size <= order.size() && !done; b += config.batch_size) {
      if (micro == 0) nd::zero_grads(params);
      tape.reset();
      nd::TapeScope scope(tape);
      std::vector<nd::Tensor> ces, zs;
      for (std::size_t k = 0; k < config.batch_size; ++k) {
        const auto& item = augmented[order[b + k]];
        const synth::QueryLabelPair views[2] = {item, synth::second_augmentation(item, rng)};
        for (const auto& v : views) {
          model::TokenSequence seq{world.render(v.scene), v.query};
          if (seq.patches.dim(0) != n) throw DimensionError("augmented scene does not match the model grid");
          auto r = model::forward(model, seq, hooks);
          const auto last = seq.length() - 1;
          const auto target = *v.label ? model::tok::kYes : model::tok::kNo;
          ces.push_back(nd::cross_entropy_logits(nd::take_segment(r.logits, last, 0, vocab), target));
          zs.push_back(nd::take_segment(r.final_hidden, last, 0, model.config().embed_dim));
        }
      }
      std::vector<nd::Tensor> ce_rows, z_rows;
      for (auto& c : ces) ce_rows.push_back(nd::reshape(c, {1, 1}));
      for (auto& z : zs) z_rows.push_back(nd::reshape(z, {1, z.size()}));
      auto ce = nd::mean(nd::concat_rows(ce_rows));
      nd::Tensor cl;
      if (config.lambda > 0.0) {
        cl = nt_xent(nd::concat_rows(z_rows), config.tau);
      } else {
        // Logged for comparison with the contrastive arms; no gradient.
        nd::NoGradScope ng;
        cl = nt_xent(nd::concat_rows(z_rows), config.tau);
      }
      auto total = combined_loss(ce, cl, config.lambda);
      if (!std::isfinite(total.item())) throw NumericError("DAC training diverged: non-finite loss");
      tape.backward(nd::scale(total, 1.0 / static_cast<double>(config.grad_accum)));
      acc.ce += ce.item();
      acc.cl += cl.item();
      acc.total += total.item();
      if (++micro == config.grad_accum) {
        nd::optimizer_step(params, state);
        const double inv = 1.0 / static_cast<double>(config.grad_accum);
        DacLogEntry e{state.step, acc.ce * inv, acc.cl * inv, acc.total * inv};
        result.log.push_back(e);
        if (on_step) on_step(e);
        acc = {};
        micro = 0;
        if (config.max_steps && state.step >= config.max_steps) done = true;
      }
    }
  }
  tape.reset();
  nd::zero_grads(params);
  module.set_trainable(false);
  result.backbone_hash_after = model.parameter_hash();
  if (result.backbone_hash_after != result.backbone_hash_before)
    throw ContractError("frozen backbone changed during DAC training");
  return result;
}

void save_dac(const std::filesystem::path& path, const DacModule& module) {
  nlohmann::json cfg = module.config();
  cfg["n_vision"] = module.n_vision();
  model::write_checkpoint(path, {"dac", cfg, module.named_parameters()});
}

DacModule load_dac(const std::filesystem::path& path) {
  auto ck = model::read_checkpoint(path);
  if (ck.kind != "dac") throw IoError(path.string() + " holds a '" + ck.kind + "' checkpoint, not a DAC module");
  DacConfig cfg;
  std::size_t n = 0;
  try {
    cfg = ck.config.get<DacConfig>();
    n = ck.config.at("n_vision").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad DAC config in checkpoint: ") + e.what());
  }
  std::vector<DacStack> stacks;
  std::size_t idx = 0;
  for (auto l : cfg.layers) {
    DacStack s;
    s.layer = l;
    for (std::size_t i = 0; i < cfg.depth; ++i) {
      if (idx + 2 > ck.tensors.size()) throw IoError("DAC checkpoint is missing tensors");
      const auto p = "dac/layer" + std::to_string(l) + ".";
      if (ck.tensors[idx].name != p + "w" + std::to_string(i + 1) ||
          ck.tensors[idx + 1].name != p + "b" + std::to_string(i + 1))
        throw IoError("unexpected tensor '" + ck.tensors[idx].name + "' in DAC checkpoint");
      s.weights.push_back(ck.tensors[idx].tensor);
      s.biases.push_back(ck.tensors[idx + 1].tensor);
      idx += 2;
    }
    stacks.push_back(std::move(s));
  }
  if (idx != ck.tensors.size()) throw IoError("DAC checkpoint carries unexpected tensors");
  return DacModule(cfg, n, std::move(stacks));
}

}  // namespace attncal::calib
