#include "attncal/nd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "attncal/errors.hpp"
#include "attncal/nd/tape.hpp"

namespace attncal::nd {

namespace {

thread_local Diagnostics g_diag;

using ImplPtr = std::shared_ptr<TensorImpl>;

Tensor make(Shape shape, std::vector<double> values) { return Tensor::from(std::move(shape), std::move(values)); }

bool recording(std::initializer_list<const Tensor*> inputs) {
  ++g_diag.ops;
  if (!Tape::active()) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

void attach(Tensor& out, std::string_view op, std::vector<ImplPtr> inputs, std::function<void()> bw) {
  out.impl()->requires_grad = true;
  out.impl()->leaf = false;
  Tape::active()->record({op, std::move(inputs), out.impl(), std::move(bw)});
}

const double* raw(const ImplPtr& p) { return p->data->data(); }

void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(t.shape()));
}

// C[m,p] += A[m,k] * B[k,p]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * p;
    const double* ai = a + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = ai[kk];
      if (av == 0.0) continue;
      const double* bk = b + kk * p;
      for (std::size_t j = 0; j < p; ++j) ci[j] += av * bk[j];
    }
  }
}

// C[m,p] += A[m,k] * B[p,k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < p; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) s += ai[kk] * bj[kk];
      c[i * p + j] += s;
    }
  }
}

// C[k,p] += A[m,k]^T * B[m,p]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * p;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = ai[kk];
      if (av == 0.0) continue;
      double* ck = c + kk * p;
      for (std::size_t j = 0; j < p; ++j) ck[j] += av * bi[j];
    }
  }
}

enum class Broadcast { kNone, kRows };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kNone;
  if (a.rank() == b.rank() + 1 && std::equal(b.shape().begin(), b.shape().end(), a.shape().begin() + 1))
    return Broadcast::kRows;
  throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                       " are not broadcast-compatible");
}

// Sums a gradient laid out like `a` down to the shape of a row-broadcast `b`.
std::vector<double> reduce_rows(std::span<const double> g, std::size_t inner) {
  std::vector<double> out(inner, 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) out[i % inner] += g[i];
  return out;
}

template <class Fwd, class Dda, class Ddb>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Dda dda, Ddb ddb) {
  const auto kind = broadcast_kind(a, b, name);
  const auto n = a.size();
  const auto inner = b.size();
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i], bd[kind == Broadcast::kNone ? i : i % inner]);
  Tensor r = make(a.shape(), std::move(out));
  if (recording({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), ri = r.impl();
    attach(r, name, {ai, bi}, [ai, bi, ri, n, inner, kind, dda, ddb] {
      const auto& g = ri->grad;
      const double* x = raw(ai);
      const double* y = raw(bi);
      auto yidx = [&](std::size_t i) { return kind == Broadcast::kNone ? i : i % inner; };
      if (ai->requires_grad) {
        auto& ga = ai->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * dda(x[i], y[yidx(i)]);
      }
      if (bi->requires_grad) {
        std::vector<double> gb(n);
        for (std::size_t i = 0; i < n; ++i) gb[i] = g[i] * ddb(x[i], y[yidx(i)]);
        if (kind == Broadcast::kRows) gb = reduce_rows(gb, inner);
        bi->accumulate_grad(gb);
      }
    });
  }
  return r;
}

// Elementwise unary op whose derivative is expressed from input x and output y.
template <class Fwd, class Deriv>
Tensor unary(const char* name, const Tensor& a, Fwd fwd, Deriv deriv) {
  auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = fwd(ad[i]);
  Tensor r = make(a.shape(), std::move(out));
  if (recording({&a})) {
    auto ai = a.impl(), ri = r.impl();
    attach(r, name, {ai}, [ai, ri, deriv] {
      const auto& g = ri->grad;
      const double* x = raw(ai);
      const double* y = raw(ri);
      auto& ga = ai->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(x[i], y[i]);
    });
  }
  return r;
}

std::pair<std::size_t, std::size_t> rows_cols(const Tensor& x) {
  std::size_t cols = x.shape().back();
  return {x.size() / cols, cols};
}

}  // namespace

Diagnostics& diagnostics() { return g_diag; }
void reset_diagnostics() { g_diag = Diagnostics{}; }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const auto m = a.dim(0), k = a.dim(1), p = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(m * p, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, p);
  Tensor r = make({m, p}, std::move(out));
  if (recording({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), ri = r.impl();
    attach(r, "matmul", {ai, bi}, [ai, bi, ri, m, k, p] {
      const double* g = ri->grad.data();
      if (ai->requires_grad) gemm_nt(g, raw(bi), ai->ensure_grad().data(), m, p, k);
      if (bi->requires_grad) gemm_tn(raw(ai), g, bi->ensure_grad().data(), m, k, p);
    });
  }
  return r;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const auto m = a.dim(0), k = a.dim(1), p = b.dim(0);
  if (b.dim(1) != k)
    throw DimensionError("matmul_nt: inner dimensions differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  std::vector<double> out(m * p, 0.0);
  gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, p);
  Tensor r = make({m, p}, std::move(out));
  if (recording({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), ri = r.impl();
    attach(r, "matmul_nt", {ai, bi}, [ai, bi, ri, m, k, p] {
      const double* g = ri->grad.data();
      if (ai->requires_grad) gemm_nn(g, raw(bi), ai->ensure_grad().data(), m, p, k);
      if (bi->requires_grad) gemm_tn(g, raw(ai), bi->ensure_grad().data(), m, p, k);
    });
  }
  return r;
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const auto m = a.dim(0), n = a.dim(1);
  auto ad = a.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = ad[i * n + j];
  Tensor r = make({n, m}, std::move(out));
  if (recording({&a})) {
    auto ai = a.impl(), ri = r.impl();
    attach(r, "transpose", {ai}, [ai, ri, m, n] {
      auto& ga = ai->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += ri->grad[j * m + i];
    });
  }
  return r;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double x : a.data())
    if (!(x > 0.0)) throw DomainError("log of non-positive value " + std::to_string(x));
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor scale(const Tensor& a, double s) {
  return unary(
      "scale", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(
      "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  Tensor r = Tensor::scalar(s);
  if (recording({&a})) {
    auto ai = a.impl(), ri = r.impl();
    attach(r, "sum", {ai}, [ai, ri] {
      auto& ga = ai->ensure_grad();
      const double g = ri->grad[0];
      for (auto& v : ga) v += g;
    });
  }
  return r;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

namespace {

Tensor softmax_impl(const Tensor& x, const Tensor* mask, bool log_space) {
  const char* name = log_space ? "log_softmax_rows" : "softmax_rows";
  if (mask && mask->shape() != x.shape())
    throw DimensionError(std::string(name) + ": mask shape " + shape_str(mask->shape()) + " differs from " +
                         shape_str(x.shape()));
  const auto [rows, cols] = rows_cols(x);
  auto xd = x.data();
  const double* md = mask ? mask->data().data() : nullptr;
  std::vector<double> out(x.size());
  std::vector<char> live(x.size(), 1);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t o = r * cols;
    double mx = kMasked;
    for (std::size_t c = 0; c < cols; ++c) {
      double v = xd[o + c] + (md ? md[o + c] : 0.0);
      if (v == kMasked) {
        live[o + c] = 0;
        continue;
      }
      mx = std::max(mx, v);
    }
    if (mx == kMasked) {
      ++g_diag.degenerate_softmax_rows;
      for (std::size_t c = 0; c < cols; ++c) out[o + c] = log_space ? kMasked : 0.0;
      continue;
    }
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c)
      if (live[o + c]) z += std::exp(xd[o + c] + (md ? md[o + c] : 0.0) - mx);
    const double logz = std::log(z);
    for (std::size_t c = 0; c < cols; ++c) {
      if (!live[o + c]) {
        out[o + c] = log_space ? kMasked : 0.0;
        continue;
      }
      const double shifted = xd[o + c] + (md ? md[o + c] : 0.0) - mx;
      out[o + c] = log_space ? shifted - logz : std::exp(shifted) / z;
    }
  }
  Tensor r = make(x.shape(), std::move(out));
  if (recording({&x})) {
    auto xi = x.impl(), ri = r.impl();
    attach(r, name, {xi}, [xi, ri, rows, cols, log_space, live = std::move(live)] {
      const auto& g = ri->grad;
      const double* y = raw(ri);
      auto& gx = xi->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t o = r * cols;
        if (log_space) {
          double gs = 0.0;
          for (std::size_t c = 0; c < cols; ++c)
            if (live[o + c]) gs += g[o + c];
          for (std::size_t c = 0; c < cols; ++c)
            if (live[o + c]) gx[o + c] += g[o + c] - std::exp(y[o + c]) * gs;
        } else {
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) dot += g[o + c] * y[o + c];
          for (std::size_t c = 0; c < cols; ++c)
            if (live[o + c]) gx[o + c] += y[o + c] * (g[o + c] - dot);
        }
      }
    });
  }
  return r;
}

}  // namespace

Tensor softmax_rows(const Tensor& x) { return softmax_impl(x, nullptr, false); }
Tensor softmax_rows(const Tensor& x, const Tensor& mask) { return softmax_impl(x, &mask, false); }
Tensor log_softmax_rows(const Tensor& x, const Tensor& mask) { return softmax_impl(x, &mask, true); }

Tensor cross_entropy_logits(const Tensor& logits, std::size_t target) {
  require_rank(logits, 1, "cross_entropy_logits");
  if (target >= logits.size())
    throw IndexError("cross_entropy_logits: target " + std::to_string(target) + " outside [0, " +
                     std::to_string(logits.size()) + ")");
  const int t = static_cast<int>(target);
  return cross_entropy_rows(reshape(logits, {1, logits.size()}), std::span<const int>(&t, 1));
}

Tensor cross_entropy_rows(const Tensor& logits, std::span<const int> targets) {
  require_rank(logits, 2, "cross_entropy_rows");
  const auto rows = logits.dim(0), cols = logits.dim(1);
  if (targets.size() != rows)
    throw DimensionError("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
  auto xd = logits.data();
  std::vector<double> probs(rows * cols, 0.0);
  double loss = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0) continue;
    if (static_cast<std::size_t>(targets[r]) >= cols)
      throw IndexError("cross_entropy_rows: target " + std::to_string(targets[r]) + " outside [0, " +
                       std::to_string(cols) + ")");
    const double* row = xd.data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(row[c] - mx);
    const double logz = std::log(z) + mx;
    loss += logz - row[targets[r]];
    for (std::size_t c = 0; c < cols; ++c) probs[r * cols + c] = std::exp(row[c] - logz);
    ++counted;
  }
  if (counted == 0) throw ContractError("cross_entropy_rows: no rows with a target");
  const double inv = 1.0 / static_cast<double>(counted);
  Tensor r = Tensor::scalar(loss * inv);
  if (recording({&logits})) {
    auto xi = logits.impl(), ri = r.impl();
    std::vector<int> tg(targets.begin(), targets.end());
    attach(r, "cross_entropy", {xi}, [xi, ri, rows, cols, inv, tg = std::move(tg), probs = std::move(probs)] {
      const double g = ri->grad[0] * inv;
      auto& gx = xi->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        if (tg[r] < 0) continue;
        for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g * probs[r * cols + c];
        gx[r * cols + tg[r]] -= g;
      }
    });
  }
  return r;
}

Tensor cosine_similarity(const Tensor& u, const Tensor& v) {
  require_rank(u, 1, "cosine_similarity");
  if (u.shape() != v.shape())
    throw DimensionError("cosine_similarity: " + shape_str(u.shape()) + " vs " + shape_str(v.shape()));
  auto ud = u.data(), vd = v.data();
  double dot = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < ud.size(); ++i) {
    dot += ud[i] * vd[i];
    uu += ud[i] * ud[i];
    vv += vd[i] * vd[i];
  }
  const double nu_raw = std::sqrt(uu), nv_raw = std::sqrt(vv);
  const bool fu = nu_raw < kNormFloor, fv = nv_raw < kNormFloor;
  g_diag.norm_floors += static_cast<std::size_t>(fu) + static_cast<std::size_t>(fv);
  const double nu = fu ? kNormFloor : nu_raw, nv = fv ? kNormFloor : nv_raw;
  const double s = dot / (nu * nv);
  Tensor r = Tensor::scalar(s);
  if (recording({&u, &v})) {
    auto ui = u.impl(), vi = v.impl(), ri = r.impl();
    attach(r, "cosine_similarity", {ui, vi}, [ui, vi, ri, nu, nv, fu, fv, s] {
      const double g = ri->grad[0];
      const double* x = raw(ui);
      const double* y = raw(vi);
      const std::size_t n = ui->data->size();
      if (ui->requires_grad) {
        auto& gu = ui->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          gu[i] += g * (y[i] / (nu * nv) - (fu ? 0.0 : s * x[i] / (nu * nu)));
      }
      if (vi->requires_grad) {
        auto& gv = vi->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          gv[i] += g * (x[i] / (nu * nv) - (fv ? 0.0 : s * y[i] / (nv * nv)));
      }
    });
  }
  return r;
}

Tensor normalize_rows(const Tensor& x) {
  const auto [rows, cols] = rows_cols(x);
  auto xd = x.data();
  std::vector<double> out(x.size());
  std::vector<double> norms(rows);
  std::vector<char> floored(rows, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < cols; ++c) ss += xd[r * cols + c] * xd[r * cols + c];
    double n = std::sqrt(ss);
    if (n < kNormFloor) {
      n = kNormFloor;
      floored[r] = 1;
      ++g_diag.norm_floors;
    }
    norms[r] = n;
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xd[r * cols + c] / n;
  }
  Tensor r = make(x.shape(), std::move(out));
  if (recording({&x})) {
    auto xi = x.impl(), ri = r.impl();
    attach(r, "normalize_rows", {xi},
           [xi, ri, rows, cols, norms = std::move(norms), floored = std::move(floored)] {
             const auto& g = ri->grad;
             const double* y = raw(ri);
             auto& gx = xi->ensure_grad();
             for (std::size_t r = 0; r < rows; ++r) {
               const std::size_t o = r * cols;
               double dot = 0.0;
               if (!floored[r])
                 for (std::size_t c = 0; c < cols; ++c) dot += g[o + c] * y[o + c];
               for (std::size_t c = 0; c < cols; ++c) gx[o + c] += (g[o + c] - y[o + c] * dot) / norms[r];
             }
           });
  }
  return r;
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(x, 2, "layer_norm_rows");
  const auto rows = x.dim(0), cols = x.dim(1);
  if (gamma.shape() != Shape{cols} || beta.shape() != Shape{cols})
    throw DimensionError("layer_norm_rows: gamma/beta must be [" + std::to_string(cols) + "]");
  auto xd = x.data(), gd = gamma.data(), bd = beta.data();
  std::vector<double> out(x.size()), xhat(x.size()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += row[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(cols);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      xhat[r * cols + c] = (row[c] - mu) * rstd[r];
      out[r * cols + c] = xhat[r * cols + c] * gd[c] + bd[c];
    }
  }
  Tensor r = make(x.shape(), std::move(out));
  if (recording({&x, &gamma, &beta})) {
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), ri = r.impl();
    attach(r, "layer_norm_rows", {xi, gi, bi},
           [xi, gi, bi, ri, rows, cols, xhat = std::move(xhat), rstd = std::move(rstd)] {
             const auto& g = ri->grad;
             const double* gam = raw(gi);
             if (gi->requires_grad || bi->requires_grad) {
               std::vector<double> dg(cols, 0.0), db(cols, 0.0);
               for (std::size_t r = 0; r < rows; ++r)
                 for (std::size_t c = 0; c < cols; ++c) {
                   dg[c] += g[r * cols + c] * xhat[r * cols + c];
                   db[c] += g[r * cols + c];
                 }
               if (gi->requires_grad) gi->accumulate_grad(dg);
               if (bi->requires_grad) bi->accumulate_grad(db);
             }
             if (xi->requires_grad) {
               auto& gx = xi->ensure_grad();
               const double inv_n = 1.0 / static_cast<double>(cols);
               for (std::size_t r = 0; r < rows; ++r) {
                 const std::size_t o = r * cols;
                 double m1 = 0.0, m2 = 0.0;
                 for (std::size_t c = 0; c < cols; ++c) {
                   const double dxh = g[o + c] * gam[c];
                   m1 += dxh;
                   m2 += dxh * xhat[o + c];
                 }
                 m1 *= inv_n;
                 m2 *= inv_n;
                 for (std::size_t c = 0; c < cols; ++c)
                   gx[o + c] += rstd[r] * (g[o + c] * gam[c] - m1 - xhat[o + c] * m2);
               }
             }
           });
  }
  return r;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size())
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor r = make(std::move(shape), a.to_vector());
  if (recording({&a})) {
    auto ai = a.impl(), ri = r.impl();
    attach(r, "reshape", {ai}, [ai, ri] { ai->accumulate_grad(ri->grad); });
  }
  return r;
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  require_rank(table, 2, "gather_rows");
  const auto rows = table.dim(0), cols = table.dim(1);
  if (ids.empty()) throw DimensionError("gather_rows: empty index list");
  auto td = table.data();
  std::vector<double> out(ids.size() * cols);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows)
      throw IndexError("gather_rows: row " + std::to_string(ids[i]) + " of " + std::to_string(rows));
    std::copy_n(td.data() + ids[i] * cols, cols, out.data() + i * cols);
  }
  Tensor r = make({ids.size(), cols}, std::move(out));
  if (recording({&table})) {
    auto ti = table.impl(), ri = r.impl();
    std::vector<std::size_t> idx(ids.begin(), ids.end());
    attach(r, "gather_rows", {ti}, [ti, ri, cols, idx = std::move(idx)] {
      auto& gt = ti->ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t c = 0; c < cols; ++c) gt[idx[i] * cols + c] += ri->grad[i * cols + c];
    });
  }
  return r;
}

Tensor gather_elements(const Tensor& a, std::span<const std::size_t> flat_index) {
  if (flat_index.empty()) throw DimensionError("gather_elements: empty index list");
  auto ad = a.data();
  std::vector<double> out(flat_index.size());
  for (std::size_t i = 0; i < flat_index.size(); ++i) {
    if (flat_index[i] >= ad.size()) throw IndexError("gather_elements: index out of range");
    out[i] = ad[flat_index[i]];
  }
  Tensor r = make({flat_index.size()}, std::move(out));
  if (recording({&a})) {
    auto ai = a.impl(), ri = r.impl();
    std::vector<std::size_t> idx(flat_index.begin(), flat_index.end());
    attach(r, "gather_elements", {ai}, [ai, ri, idx = std::move(idx)] {
      auto& ga = ai->ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i) ga[idx[i]] += ri->grad[i];
    });
  }
  return r;
}

Tensor slice_rows(const Tensor& a, std::size_t first, std::size_t count) {
  require_rank(a, 2, "slice_rows");
  const auto cols = a.dim(1);
  if (count == 0 || first + count > a.dim(0)) throw IndexError("slice_rows: range outside " + shape_str(a.shape()));
  auto ad = a.data();
  std::vector<double> out(ad.begin() + first * cols, ad.begin() + (first + count) * cols);
  Tensor r = make({count, cols}, std::move(out));
  if (recording({&a})) {
    auto ai = a.impl(), ri = r.impl();
    attach(r, "slice_rows", {ai}, [ai, ri, first, cols] {
      auto& ga = ai->ensure_grad();
      for (std::size_t i = 0; i < ri->grad.size(); ++i) ga[first * cols + i] += ri->grad[i];
    });
  }
  return r;
}

Tensor slice_cols(const Tensor& a, std::size_t first, std::size_t count) {
  require_rank(a, 2, "slice_cols");
  const auto rows = a.dim(0), cols = a.dim(1);
  if (count == 0 || first + count > cols) throw IndexError("slice_cols: range outside " + shape_str(a.shape()));
  auto ad = a.data();
  std::vector<double> out(rows * count);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(ad.data() + r * cols + first, count, out.data() + r * count);
  Tensor r = make({rows, count}, std::move(out));
  if (recording({&a})) {
    auto ai = a.impl(), ri = r.impl();
    attach(r, "slice_cols", {ai}, [ai, ri, rows, cols, first, count] {
      auto& ga = ai->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < count; ++c) ga[r * cols + first + c] += ri->grad[r * count + c];
    });
  }
  return r;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  const auto cols = parts[0].dim(1);
  std::size_t rows = 0;
  bool rec = false;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.dim(1) != cols) throw DimensionError("concat_rows: column counts differ");
    rows += p.dim(0);
    rec = rec || p.requires_grad();
  }
  ++g_diag.ops;
  std::vector<double> out;
  out.reserve(rows * cols);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Tensor r = make({rows, cols}, std::move(out));
  if (rec && Tape::active()) {
    std::vector<ImplPtr> ins;
    for (const auto& p : parts) ins.push_back(p.impl());
    auto ri = r.impl();
    attach(r, "concat_rows", ins, [ins, ri] {
      std::size_t off = 0;
      for (const auto& p : ins) {
        const auto n = p->data->size();
        if (p->requires_grad) p->accumulate_grad(std::span<const double>(ri->grad.data() + off, n));
        off += n;
      }
    });
  }
  return r;
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
  const auto rows = parts[0].dim(0);
  std::size_t cols = 0;
  bool rec = false;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != rows) throw DimensionError("concat_cols: row counts differ");
    cols += p.dim(1);
    rec = rec || p.requires_grad();
  }
  ++g_diag.ops;
  std::vector<double> out(rows * cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto pc = p.dim(1);
    auto pd = p.data();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(pd.data() + r * pc, pc, out.data() + r * cols + off);
    off += pc;
  }
  Tensor r = make({rows, cols}, std::move(out));
  if (rec && Tape::active()) {
    std::vector<ImplPtr> ins;
    for (const auto& p : parts) ins.push_back(p.impl());
    auto ri = r.impl();
    attach(r, "concat_cols", ins, [ins, ri, rows, cols] {
      std::size_t off = 0;
      for (const auto& p : ins) {
        const auto pc = p->shape[1];
        if (p->requires_grad) {
          auto& gp = p->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < pc; ++c) gp[r * pc + c] += ri->grad[r * cols + off + c];
        }
        off += pc;
      }
    });
  }
  return r;
}

Tensor take_segment(const Tensor& a, std::size_t row, std::size_t first, std::size_t count) {
  require_rank(a, 2, "take_segment");
  const auto cols = a.dim(1);
  if (row >= a.dim(0) || count == 0 || first + count > cols)
    throw IndexError("take_segment: segment outside " + shape_str(a.shape()));
  auto ad = a.data();
  const std::size_t off = row * cols + first;
  Tensor r = make({count}, std::vector<double>(ad.begin() + off, ad.begin() + off + count));
  if (recording({&a})) {
    auto ai = a.impl(), ri = r.impl();
    attach(r, "take_segment", {ai}, [ai, ri, off] {
      auto& ga = ai->ensure_grad();
      for (std::size_t i = 0; i < ri->grad.size(); ++i) ga[off + i] += ri->grad[i];
    });
  }
  return r;
}

Tensor splice_segment(const Tensor& a, std::size_t row, std::size_t first, const Tensor& segment) {
  require_rank(a, 2, "splice_segment");
  require_rank(segment, 1, "splice_segment");
  const auto cols = a.dim(1), count = segment.size();
  if (row >= a.dim(0) || first + count > cols)
    throw IndexError("splice_segment: segment outside " + shape_str(a.shape()));
  auto out = a.to_vector();
  const std::size_t off = row * cols + first;
  std::copy_n(segment.data().data(), count, out.data() + off);
  Tensor r = make(a.shape(), std::move(out));
  if (recording({&a, &segment})) {
    auto ai = a.impl(), si = segment.impl(), ri = r.impl();
    attach(r, "splice_segment", {ai, si}, [ai, si, ri, off, count] {
      if (ai->requires_grad) {
        auto& ga = ai->ensure_grad();
        for (std::size_t i = 0; i < ri->grad.size(); ++i)
          if (i < off || i >= off + count) ga[i] += ri->grad[i];
      }
      if (si->requires_grad) si->accumulate_grad(std::span<const double>(ri->grad.data() + off, count));
    });
  }
  return r;
}

Tensor normalize_mass(const Tensor& x, double mass) {
  auto xd = x.data();
  double s = 0.0;
  for (double v : xd) s += v;
  if (!(s > 0.0)) throw DomainError("normalize_mass: non-positive total " + std::to_string(s));
  const double f = mass / s;
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] * f;
  Tensor r = make(x.shape(), std::move(out));
  if (recording({&x})) {
    auto xi = x.impl(), ri = r.impl();
    attach(r, "normalize_mass", {xi}, [xi, ri, f, s] {
      const auto& g = ri->grad;
      const double* y = raw(ri);
      double dot = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * y[i];
      auto& gx = xi->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += f * g[i] - dot / s;
    });
  }
  return r;
}

Tensor causal_mask(std::size_t t) {
  std::vector<double> m(t * t, 0.0);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = i + 1; j < t; ++j) m[i * t + j] = kMasked;
  return make({t, t}, std::move(m));
}

}  // namespace attncal::nd
