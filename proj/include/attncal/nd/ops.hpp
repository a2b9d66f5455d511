#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "attncal/nd/tensor.hpp"

namespace attncal::nd {

// Additive-mask sentinel; softmax treats such entries as exactly zero weight.
inline constexpr double kMasked = -std::numeric_limits<double>::infinity();

// Per-thread counters for conditions that are recovered from rather than
// thrown: all-masked softmax rows and zero-norm vectors hitting the epsilon
// floor. `ops` counts every op invocation.
struct Diagnostics {
  std::size_t degenerate_softmax_rows = 0;
  std::size_t norm_floors = 0;
  std::size_t ops = 0;
};
Diagnostics& diagnostics();
void reset_diagnostics();

// Linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,p]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k]x[p,k]^T
Tensor transpose(const Tensor& a);

// Elementwise. Binary ops accept equal shapes, or `b` matching `a` with the
// leading dimension dropped (broadcast across rows).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& a);  // d/dx at 0 is 0
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);   // DomainError on x <= 0
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

// Reductions
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Row-wise softmax over the last axis with max subtraction. `mask` (same
// shape, entries 0 or kMasked) is added before normalization; masked
// entries come out exactly 0. A fully masked row yields all zeros and bumps
// diagnostics().degenerate_softmax_rows.
Tensor softmax_rows(const Tensor& x);
Tensor softmax_rows(const Tensor& x, const Tensor& mask);
Tensor log_softmax_rows(const Tensor& x, const Tensor& mask);

// -log softmax(logits)[target] for a 1-D logit vector.
Tensor cross_entropy_logits(const Tensor& logits, std::size_t target);
// Mean token cross-entropy over rows of [T, C]; rows with target < 0 are skipped.
Tensor cross_entropy_rows(const Tensor& logits, std::span<const int> targets);

// Norms below this are floored (and counted in diagnostics().norm_floors).
inline constexpr double kNormFloor = 1e-12;
Tensor cosine_similarity(const Tensor& u, const Tensor& v);
Tensor normalize_rows(const Tensor& x);
Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       double eps = 1e-5);

// Indexing and layout
Tensor reshape(const Tensor& a, Shape shape);
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);
Tensor gather_elements(const Tensor& a, std::span<const std::size_t> flat_index);
Tensor slice_rows(const Tensor& a, std::size_t first, std::size_t count);
Tensor slice_cols(const Tensor& a, std::size_t first, std::size_t count);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
// 1-D copy of a[row, first : first+count].
Tensor take_segment(const Tensor& a, std::size_t row, std::size_t first, std::size_t count);
// Copy of `a` with a[row, first : first+len(segment)] replaced by `segment`.
Tensor splice_segment(const Tensor& a, std::size_t row, std::size_t first, const Tensor& segment);
// x * (mass / sum(x)); when sum(x) == mass exactly the result is bitwise x.
Tensor normalize_mass(const Tensor& x, double mass);

// [T, T] additive causal mask: 0 on and below the diagonal, kMasked above.
Tensor causal_mask(std::size_t t);

}  // namespace attncal::nd
