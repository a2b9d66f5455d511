#include "attncal/model/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "attncal/errors.hpp"
#include "attncal/nd/ops.hpp"
#include "attncal/nd/tape.hpp"
#include "attncal/rng.hpp"

namespace attncal::model {

namespace {

nd::Tensor gaussian(Rng& rng, nd::Shape shape, double stddev) {
  std::vector<double> v(nd::numel(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return nd::Tensor::from(std::move(shape), std::move(v));
}

ModelWeights init_weights(const ModelConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  const auto d = c.embed_dim;
  const double s_in = 1.0 / std::sqrt(static_cast<double>(d));
  const double s_res = s_in / std::sqrt(2.0 * static_cast<double>(c.layers));
  ModelWeights w;
  w.token_embedding = gaussian(rng, {c.vocab_size, d}, 0.1);
  w.position_embedding = gaussian(rng, {c.max_seq_len, d}, 0.1);
  w.patch_projection = gaussian(rng, {c.patch_dim, d}, 1.0 / std::sqrt(static_cast<double>(c.patch_dim)));
  w.patch_bias = nd::Tensor::zeros({d});
  for (std::size_t l = 0; l < c.layers; ++l) {
    DecoderLayerWeights L;
    L.ln1_gain = nd::Tensor::full({d}, 1.0);
    L.ln1_bias = nd::Tensor::zeros({d});
    L.wq = gaussian(rng, {d, d}, s_in);
    L.wk = gaussian(rng, {d, d}, s_in);
    L.wv = gaussian(rng, {d, d}, s_in);
    L.wo = gaussian(rng, {d, d}, s_res);
    L.ln2_gain = nd::Tensor::full({d}, 1.0);
    L.ln2_bias = nd::Tensor::zeros({d});
    L.w_up = gaussian(rng, {d, c.mlp_hidden}, s_in);
    L.b_up = nd::Tensor::zeros({c.mlp_hidden});
    L.w_down = gaussian(rng, {c.mlp_hidden, d}, 1.0 / std::sqrt(static_cast<double>(c.mlp_hidden)) /
                                                    std::sqrt(2.0 * static_cast<double>(c.layers)));
    L.b_down = nd::Tensor::zeros({d});
    w.layers.push_back(std::move(L));
  }
  w.final_gain = nd::Tensor::full({d}, 1.0);
  w.final_bias = nd::Tensor::zeros({d});
  w.output_head = gaussian(rng, {d, c.vocab_size}, s_in);
  return w;
}

void expect_shape(const nd::Tensor& t, const nd::Shape& s, const std::string& name) {
  if (!t.defined() || t.shape() != s)
    throw DimensionError("weight '" + name + "' should be " + nd::shape_str(s) + ", got " +
                         (t.defined() ? nd::shape_str(t.shape()) : std::string("undefined")));
}

std::vector<std::size_t> policy_rows(QueryPolicy p, std::size_t n, std::size_t t) {
  if (p == QueryPolicy::kLastToken) return {t - 1};
  std::vector<std::size_t> rows;
  for (std::size_t r = n; r < t; ++r) rows.push_back(r);
  return rows;
}

void check_hook_output(const nd::Tensor& out, std::size_t n, std::size_t layer, HookStage stage) {
  if (!out.defined() || out.rank() != 1 || out.size() != n)
    throw HookError(to_string(stage) + " hook on layer " + std::to_string(layer) + " returned " +
                    (out.defined() ? nd::shape_str(out.shape()) : std::string("an undefined tensor")) +
                    ", expected [" + std::to_string(n) + "]");
}

}  // namespace

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  weights_ = init_weights(config_, seed);
}

Model::Model(ModelConfig config, ModelWeights weights) : config_(std::move(config)), weights_(std::move(weights)) {
  config_.validate();
  const auto d = config_.embed_dim;
  if (weights_.layers.size() != config_.layers)
    throw DimensionError("weights carry " + std::to_string(weights_.layers.size()) + " layers, config says " +
                         std::to_string(config_.layers));
  for (const auto& p : named_parameters()) {
    nd::Shape expect;
    const auto& n = p.name;
    if (n == "token_embedding") expect = {config_.vocab_size, d};
    else if (n == "position_embedding") expect = {config_.max_seq_len, d};
    else if (n == "patch_projection") expect = {config_.patch_dim, d};
    else if (n == "output_head") expect = {d, config_.vocab_size};
    else if (n.ends_with(".wq") || n.ends_with(".wk") || n.ends_with(".wv") || n.ends_with(".wo")) expect = {d, d};
    else if (n.ends_with(".w_up")) expect = {d, config_.mlp_hidden};
    else if (n.ends_with(".b_up")) expect = {config_.mlp_hidden};
    else if (n.ends_with(".w_down")) expect = {config_.mlp_hidden, d};
    else expect = {d};
    expect_shape(p.tensor, expect, n);
  }
}

std::vector<nd::NamedTensor> Model::named_parameters() const {
  std::vector<nd::NamedTensor> out;
  const auto& w = weights_;
  out.push_back({"token_embedding", w.token_embedding});
  out.push_back({"position_embedding", w.position_embedding});
  out.push_back({"patch_projection", w.patch_projection});
  out.push_back({"patch_bias", w.patch_bias});
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& L = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    out.push_back({p + "ln1_gain", L.ln1_gain});
    out.push_back({p + "ln1_bias", L.ln1_bias});
    out.push_back({p + "wq", L.wq});
    out.push_back({p + "wk", L.wk});
    out.push_back({p + "wv", L.wv});
    out.push_back({p + "wo", L.wo});
    out.push_back({p + "ln2_gain", L.ln2_gain});
    out.push_back({p + "ln2_bias", L.ln2_bias});
    out.push_back({p + "w_up", L.w_up});
    out.push_back({p + "b_up", L.b_up});
    out.push_back({p + "w_down", L.w_down});
    out.push_back({p + "b_down", L.b_down});
  }
  out.push_back({"final_gain", w.final_gain});
  out.push_back({"final_bias", w.final_bias});
  out.push_back({"output_head", w.output_head});
  return out;
}

void Model::set_trainable(bool on) {
  for (auto& p : named_parameters()) p.tensor.set_requires_grad(on);
}

std::uint64_t Model::parameter_hash() const {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& p : named_parameters()) h = nd::content_hash(p.tensor, h);
  return h;
}

RecordSpec RecordSpec::all_layers(const ModelConfig& c) {
  RecordSpec r;
  r.layers.resize(c.layers);
  std::iota(r.layers.begin(), r.layers.end(), 0);
  return r;
}

nd::Tensor embed_image(const Model& model, const nd::Tensor& patches) {
  const auto& c = model.config();
  const auto n = c.n_vision();
  if (!patches.defined() || patches.rank() != 2 || patches.dim(0) != n || patches.dim(1) != c.patch_dim)
    throw DimensionError("embed_image: expected patch features [" + std::to_string(n) + "x" +
                         std::to_string(c.patch_dim) + "], got " +
                         (patches.defined() ? nd::shape_str(patches.shape()) : std::string("undefined")));
  const auto& w = model.weights();
  auto projected = nd::add(nd::matmul(patches, w.patch_projection), w.patch_bias);
  return nd::add(projected, nd::slice_rows(w.position_embedding, 0, n));
}

ForwardResult forward(const Model& model, const TokenSequence& seq, const HookRegistry& hooks,
                      const RecordSpec& record) {
  const auto& c = model.config();
  const auto& w = model.weights();
  const auto n = c.n_vision();
  const auto t = seq.length();
  if (t > c.max_seq_len)
    throw ContractError("sequence length " + std::to_string(t) + " exceeds max_seq_len " +
                        std::to_string(c.max_seq_len));

  nd::Tensor x = embed_image(model, seq.patches);
  if (!seq.text.empty()) {
    auto txt = nd::add(nd::gather_rows(w.token_embedding, seq.text),
                       nd::slice_rows(w.position_embedding, n, seq.text.size()));
    const nd::Tensor parts[] = {x, txt};
    x = nd::concat_rows(parts);
  }
  const auto mask = nd::causal_mask(t);
  const auto mask_data = mask.data();
  const auto dl = c.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dl));

  ForwardResult result;
  for (std::size_t l = 0; l < c.layers; ++l) {
    const auto& L = w.layers[l];
    const bool rec = std::find(record.layers.begin(), record.layers.end(), l) != record.layers.end();
    const auto* pre = hooks.find(l, HookStage::kPreSoftmax);
    const auto* post = hooks.find(l, HookStage::kPostSoftmax);
    const auto pre_rows = pre ? policy_rows(pre->positions, n, t) : std::vector<std::size_t>{};
    const auto post_rows = post ? policy_rows(post->positions, n, t) : std::vector<std::size_t>{};
    const auto rec_rows = rec ? policy_rows(record.positions, n, t) : std::vector<std::size_t>{};
    std::vector<AttentionSnapshot> layer_snaps(rec_rows.size());
    for (std::size_t i = 0; i < rec_rows.size(); ++i) {
      layer_snaps[i].layer = l;
      layer_snaps[i].query_pos = rec_rows[i];
      layer_snaps[i].n_vision = n;
      layer_snaps[i].heads.resize(c.heads);
    }

    auto a = nd::layer_norm_rows(x, L.ln1_gain, L.ln1_bias);
    auto q = nd::matmul(a, L.wq);
    auto k = nd::matmul(a, L.wk);
    auto v = nd::matmul(a, L.wv);
    std::vector<nd::Tensor> heads_out;
    heads_out.reserve(c.heads);
    for (std::size_t h = 0; h < c.heads; ++h) {
      auto qh = nd::slice_cols(q, h * dl, dl);
      auto kh = nd::slice_cols(k, h * dl, dl);
      auto vh = nd::slice_cols(v, h * dl, dl);
      auto s = nd::scale(nd::matmul_nt(qh, kh), inv_sqrt);
      for (auto r : pre_rows) {
        HookContext ctx{l, h, r, n, HookStage::kPreSoftmax};
        auto out = pre->fn(ctx, nd::take_segment(s, r, 0, n));
        check_hook_output(out, n, l, HookStage::kPreSoftmax);
        s = nd::splice_segment(s, r, 0, out);
      }
      auto p = nd::softmax_rows(s, mask);
      for (auto r : post_rows) {
        double mass = 0.0;
        {
          auto pd = p.data();
          for (std::size_t j = 0; j <= r; ++j) mass += pd[r * t + j];
        }
        HookContext ctx{l, h, r, n, HookStage::kPostSoftmax};
        auto out = post->fn(ctx, nd::take_segment(p, r, 0, n));
        check_hook_output(out, n, l, HookStage::kPostSoftmax);
        p = nd::splice_segment(p, r, 0, out);
        if (post->renormalize) p = nd::splice_segment(p, r, 0, nd::normalize_mass(nd::take_segment(p, r, 0, r + 1), mass));
      }
      auto o = nd::matmul(p, vh);
      if (rec) {
        auto sd = s.data();
        auto pd = p.data();
        auto od = o.data();
        for (std::size_t i = 0; i < rec_rows.size(); ++i) {
          const auto r = rec_rows[i];
          auto& ha = layer_snaps[i].heads[h];
          ha.logits.resize(t);
          for (std::size_t j = 0; j < t; ++j) ha.logits[j] = sd[r * t + j] + mask_data[r * t + j];
          ha.weights.assign(pd.begin() + r * t, pd.begin() + (r + 1) * t);
          ha.context.assign(od.begin() + r * dl, od.begin() + (r + 1) * dl);
          if (record.capture_values) ha.values = vh.detach();
        }
      }
      heads_out.push_back(std::move(o));
    }
    auto attn = nd::concat_cols(heads_out);
    x = nd::add(x, nd::matmul(attn, L.wo));
    auto b = nd::layer_norm_rows(x, L.ln2_gain, L.ln2_bias);
    auto u = nd::relu(nd::add(nd::matmul(b, L.w_up), L.b_up));
    x = nd::add(x, nd::add(nd::matmul(u, L.w_down), L.b_down));
    for (auto& snap : layer_snaps) result.snapshots.push_back(std::move(snap));
  }
  result.final_hidden = nd::layer_norm_rows(x, w.final_gain, w.final_bias);
  result.logits = nd::matmul(result.final_hidden, w.output_head);
  return result;
}

namespace {

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::size_t sample_top_p(std::span<const double> logits, double top_p, Rng& rng) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> probs(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += probs[i] = std::exp(logits[i] - mx);
  for (auto& p : probs) p /= z;
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return probs[a] > probs[b]; });
  std::vector<double> kept;
  double cum = 0.0;
  for (auto i : order) {
    kept.push_back(probs[i]);
    cum += probs[i];
    if (cum >= top_p) break;
  }
  return order[rng.categorical(kept)];
}

}  // namespace

std::vector<std::size_t> generate(const Model& model, const TokenSequence& prompt, const HookRegistry& hooks,
                                  const DecodeOptions& options, const RecordSpec& record,
                                  const StepObserver& observer) {
  if (options.max_new == 0) throw ConfigError("generate: max_new must be at least 1");
  if (options.mode == DecodeMode::kTopP && !(options.top_p > 0.0 && options.top_p <= 1.0))
    throw ConfigError("generate: top_p must lie in (0, 1]");
  Rng rng(options.seed);
  TokenSequence seq = prompt;
  std::vector<std::size_t> out;
  const auto vocab = model.config().vocab_size;
  for (std::size_t step = 0; step < options.max_new; ++step) {
    if (seq.length() > model.config().max_seq_len) break;
    auto res = forward(model, seq, hooks, record);
    if (observer) observer(step, res);
    const auto t = seq.length();
    std::span<const double> last(res.logits.data().data() + (t - 1) * vocab, vocab);
    const auto next = options.mode == DecodeMode::kGreedy ? argmax(last) : sample_top_p(last, options.top_p, rng);
    if (next == options.stop_token) break;
    out.push_back(next);
    if (seq.length() + 1 > model.config().max_seq_len) break;
    seq.text.push_back(next);
  }
  return out;
}

std::pair<TokenSequence, std::vector<int>> teacher_forcing(const TrainingItem& item, std::size_t n_vision) {
  if (item.prompt.empty() || item.answer.empty())
    throw ContractError("training item needs a non-empty prompt and answer");
  TokenSequence seq{item.patches, item.prompt};
  seq.text.insert(seq.text.end(), item.answer.begin(), item.answer.end() - 1);
  std::vector<int> targets(seq.length(), -1);
  const auto first = n_vision + item.prompt.size() - 1;
  for (std::size_t i = 0; i < item.answer.size(); ++i) targets[first + i] = static_cast<int>(item.answer[i]);
  return {std::move(seq), std::move(targets)};
}

nd::Tensor item_loss(const Model& model, const TrainingItem& item, const HookRegistry& hooks) {
  auto [seq, targets] = teacher_forcing(item, model.config().n_vision());
  auto res = forward(model, seq, hooks);
  return nd::cross_entropy_rows(res.logits, targets);
}

PretrainResult pretrain(Model& model, std::span<const TrainingItem> corpus, const PretrainConfig& config,
                        const EpochCallback& on_epoch) {
  if (corpus.empty()) throw ConfigError("pretrain: empty corpus");
  if (config.batch_size == 0 || config.epochs == 0) throw ConfigError("pretrain: batch_size and epochs must be positive");
  Rng rng(config.seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::size_t> monitor = order;
  rng.shuffle(monitor);
  monitor.resize(std::min(config.monitor_items, monitor.size()));

  auto monitor_loss = [&] {
    nd::NoGradScope ng;
    double s = 0.0;
    for (auto i : monitor) s += item_loss(model, corpus[i]).item();
    return s / static_cast<double>(monitor.size());
  };

  model.set_trainable(true);
  auto params = model.named_parameters();
  nd::AdamConfig adam;
  adam.lr = config.lr;
  adam.clip_norm = config.clip_norm;
  auto state = nd::make_optimizer_state(params, adam);
  const std::size_t steps_per_epoch = (corpus.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * config.epochs;
  const std::size_t warmup = std::max<std::size_t>(1, total_steps / 20);

  PretrainResult result;
  nd::Tape tape;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    EpochStats stats;
    stats.epoch = epoch;
    stats.monitor_loss_start = monitor_loss();
    rng.shuffle(order);
    double train_sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
      const auto end = std::min(order.size(), b + config.batch_size);
      const double inv = 1.0 / static_cast<double>(end - b);
      nd::zero_grads(params);
      for (std::size_t i = b; i < end; ++i) {
        tape.reset();
        nd::TapeScope scope(tape);
        auto loss = item_loss(model, corpus[order[i]]);
        if (!std::isfinite(loss.item()))
          throw NumericError("pretrain diverged: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(result.steps));
        train_sum += loss.item();
        tape.backward(nd::scale(loss, inv));
      }
      tape.reset();
      // Linear warmup, then cosine decay to 10% of the base rate.
      const double s = static_cast<double>(result.steps);
      double lr = config.lr;
      if (result.steps < warmup) {
        lr *= (s + 1.0) / static_cast<double>(warmup);
      } else {
        const double prog = (s - static_cast<double>(warmup)) / static_cast<double>(std::max<std::size_t>(1, total_steps - warmup));
        lr *= 0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, prog)));
      }
      state.config.lr = lr;
      nd::optimizer_step(params, state);
      ++result.steps;
    }
    stats.mean_train_loss = train_sum / static_cast<double>(order.size());
    stats.monitor_loss_end = monitor_loss();
    result.epochs.push_back(stats);
    if (on_epoch) on_epoch(stats);
  }
  nd::zero_grads(params);
  model.set_trainable(false);
  return result;
}

}  // namespace attncal::model
