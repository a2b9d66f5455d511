#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string_view>
#include <vector>

#include "attncal/nd/tensor.hpp"

namespace attncal::nd {

// Ordered record of differentiable operations executed while the tape is
// active on the current thread. Records are appended in execution order, so
// the list is already topologically sorted; backward walks it in reverse.
class Tape {
 public:
  struct Record {
    std::string_view op;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(Record r);
  // Seeds d(loss)/d(loss) = 1 and propagates to every leaf that requires grad.
  // Throws ContractError if loss is not a scalar, not on this tape, or the
  // tape was already consumed.
  void backward(const Tensor& loss);
  void reset();

  std::size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }
  const std::vector<Record>& records() const { return records_; }

  // Tape that ops record onto for this thread, or nullptr (inference mode).
  static Tape* active();

 private:
  friend class TapeScope;
  std::vector<Record> records_;
  bool consumed_ = false;
};

// Activates a tape for the current thread for the lifetime of the scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording for the current thread (evaluation inside a training loop).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

// backward on the thread's active tape.
void backward(const Tensor& loss);

}  // namespace attncal::nd
