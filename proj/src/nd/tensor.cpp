#include "attncal/nd/tensor.hpp"

#include <cstring>
#include <sstream>

#include "attncal/errors.hpp"

namespace attncal::nd {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

void TensorImpl::accumulate_grad(std::span<const double> g) {
  auto& dst = ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

std::vector<double>& TensorImpl::ensure_grad() {
  if (grad.empty()) grad.assign(data->size(), 0.0);
  return grad;
}

namespace {

void check_shape(const Shape& shape) {
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
}

std::shared_ptr<TensorImpl> make_impl(Shape shape, std::vector<double> values) {
  check_shape(shape);
  if (numel(shape) != values.size())
    throw DimensionError("shape " + shape_str(shape) + " needs " + std::to_string(numel(shape)) +
                         " values, got " + std::to_string(values.size()));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::make_shared<std::vector<double>>(std::move(values));
  return impl;
}

}  // namespace

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  check_shape(shape);
  auto n = numel(shape);
  return Tensor(make_impl(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  return Tensor(make_impl(std::move(shape), std::move(values)));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::vector(std::initializer_list<double> values) {
  return from({values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<double> v;
  std::size_t cols = rows.size() ? rows.begin()->size() : 0;
  for (const auto& r : rows) {
    if (r.size() != cols) throw DimensionError("ragged matrix literal");
    v.insert(v.end(), r.begin(), r.end());
  }
  return from({rows.size(), cols}, std::move(v));
}

const Shape& Tensor::shape() const {
  if (!impl_) throw ContractError("use of undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw IndexError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::size() const { return numel(shape()); }

std::span<const double> Tensor::data() const {
  shape();
  return {impl_->data->data(), impl_->data->size()};
}

std::span<double> Tensor::mutable_data() {
  shape();
  return {impl_->data->data(), impl_->data->size()};
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return (*impl_->data)[0];
}

double Tensor::at(std::size_t i) const {
  if (i >= size()) throw IndexError("flat index " + std::to_string(i) + " out of range");
  return (*impl_->data)[i];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (rank() != 2 || r >= dim(0) || c >= dim(1))
    throw IndexError("index (" + std::to_string(r) + "," + std::to_string(c) + ") invalid for " +
                     shape_str(shape()));
  return (*impl_->data)[r * dim(1) + c];
}

std::vector<double> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw ContractError("requires_grad can only be toggled on leaf tensors");
  impl_->requires_grad = on;
  if (!on) impl_->grad.clear();
  return *this;
}

bool Tensor::is_leaf() const { return impl_ && impl_->leaf; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return {impl_->grad.data(), impl_->grad.size()};
}

void Tensor::zero_grad() {
  if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from(shape(), to_vector()); }

std::uint64_t content_hash(const Tensor& t, std::uint64_t seed) {
  std::uint64_t h = seed;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (auto d : t.shape()) {
    std::uint64_t v = d;
    mix(&v, sizeof v);
  }
  auto d = t.data();
  mix(d.data(), d.size() * sizeof(double));
  return h;
}

}  // namespace attncal::nd
