#include "attncal/nd/optim.hpp"

#include <cmath>

#include "attncal/errors.hpp"

namespace attncal::nd {

OptimizerState make_optimizer_state(std::span<const NamedTensor> params, AdamConfig config) {
  OptimizerState s;
  s.config = config;
  for (const auto& p : params) {
    s.first_moment.emplace_back(p.tensor.size(), 0.0);
    s.second_moment.emplace_back(p.tensor.size(), 0.0);
  }
  return s;
}

void optimizer_step(std::span<NamedTensor> params, OptimizerState& state) {
  if (params.size() != state.first_moment.size())
    throw DimensionError("optimizer_step: state tracks " + std::to_string(state.first_moment.size()) +
                         " parameters, got " + std::to_string(params.size()));
  double sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = params[i].tensor;
    if (t.size() != state.first_moment[i].size())
      throw DimensionError("optimizer_step: moment buffer shape mismatch for " + params[i].name);
    if (!t.has_grad()) continue;
    for (double g : t.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + params[i].name + "'");
      sq += g * g;
    }
  }
  const auto& c = state.config;
  double clip = 1.0;
  if (c.clip_norm > 0.0 && std::sqrt(sq) > c.clip_norm) clip = c.clip_norm / std::sqrt(sq);

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].tensor;
    auto w = p.mutable_data();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const bool has = p.has_grad();
    std::span<const double> g = has ? p.grad() : std::span<const double>{};
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = has ? g[k] * clip : 0.0;
      m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
      v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      w[k] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

void zero_grads(std::span<NamedTensor> params) {
  for (auto& p : params) p.tensor.zero_grad();
}

}  // namespace attncal::nd
