#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace attncal::nd {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<double>> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  bool leaf = true;

  void accumulate_grad(std::span<const double> g);
  std::vector<double>& ensure_grad();
};

// Dense row-major float64 array. Copies are shallow handles: two Tensor
// objects copied from one another refer to the same buffer and gradient.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const double> data() const;
  // Writable view of the buffer. Only meaningful for leaves; writing into an
  // interior node does not update anything downstream.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t r, std::size_t c) const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Value copy with no autograd history.
  Tensor detach() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// FNV-1a over shape and raw bytes; used for checkpoint identity and frozen-weight checks.
std::uint64_t content_hash(const Tensor& t, std::uint64_t seed = 1469598103934665603ull);

}  // namespace attncal::nd
