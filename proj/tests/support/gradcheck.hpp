#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "attncal/nd/ops.hpp"
#include "attncal/nd/tape.hpp"
#include "attncal/rng.hpp"

namespace attncal::testing {

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t entries = 0;
};

using LossFn = std::function<nd::Tensor(const std::vector<nd::Tensor>&)>;

// Compares tape gradients with central differences. The relative error of
// one entry is |a - n| / max(|a|, |n|, 1e-3).
inline GradCheck check_gradients(const LossFn& f, const std::vector<nd::Tensor>& inputs, double h = 1e-6) {
  for (auto t : inputs) {
    t.zero_grad();
    t.set_requires_grad(true);
  }
  {
    nd::Tape tape;
    nd::TapeScope scope(tape);
    tape.backward(f(inputs));
  }
  GradCheck r;
  for (auto t : inputs) {
    const auto analytic = std::vector<double>(t.grad().begin(), t.grad().end());
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double x = data[i];
      double fp, fm;
      {
        nd::NoGradScope ng;
        data[i] = x + h;
        fp = f(inputs).item();
        data[i] = x - h;
        fm = f(inputs).item();
        data[i] = x;
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-3});
      r.max_rel_error = std::max(r.max_rel_error, std::fabs(a - numeric) / denom);
      ++r.entries;
    }
  }
  return r;
}

inline nd::Tensor random_tensor(Rng& rng, nd::Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(nd::numel(shape));
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
  return nd::Tensor::from(std::move(shape), std::move(v));
}

// Values bounded away from the kink of relu at 0.
inline nd::Tensor random_away_from_zero(Rng& rng, nd::Shape shape, double margin = 0.05) {
  auto t = random_tensor(rng, std::move(shape));
  for (auto& x : t.mutable_data())
    if (std::fabs(x) < margin) x = x < 0 ? -margin - std::fabs(x) : margin + x;
  return t;
}

// sum(out * R) for a fixed random R, so that every output entry carries a
// distinct weight into the scalar loss.
inline nd::Tensor project(const nd::Tensor& out, std::uint64_t seed) {
  Rng rng(seed);
  return nd::sum(nd::mul(out, random_tensor(rng, out.shape())));
}

}  // namespace attncal::testing
