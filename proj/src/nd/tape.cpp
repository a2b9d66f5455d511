#include "attncal/nd/tape.hpp"

#include <algorithm>

#include "attncal/errors.hpp"

namespace attncal::nd {

namespace {
thread_local Tape* g_active = nullptr;
}

Tape* Tape::active() { return g_active; }

void Tape::record(Record r) {
  if (consumed_) throw ContractError("recording onto a consumed tape; call reset() first");
  records_.push_back(std::move(r));
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw ContractError("backward called twice on the same tape without reset()");
  if (!loss.defined() || loss.size() != 1)
    throw ContractError("backward needs a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  if (!loss.requires_grad()) throw ContractError("loss does not depend on any tensor that requires grad");
  const auto& out = loss.impl();
  if (out->leaf) {
    out->ensure_grad()[0] += 1.0;
    consumed_ = true;
    return;
  }
  auto it = std::find_if(records_.rbegin(), records_.rend(),
                         [&](const Record& r) { return r.output == out; });
  if (it == records_.rend()) throw ContractError("loss was not produced on this tape");
  out->ensure_grad()[0] = 1.0;
  for (; it != records_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward();
  }
  consumed_ = true;
}

void Tape::reset() {
  records_.clear();
  consumed_ = false;
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active) { g_active = &tape; }
TapeScope::~TapeScope() { g_active = previous_; }

NoGradScope::NoGradScope() : previous_(g_active) { g_active = nullptr; }
NoGradScope::~NoGradScope() { g_active = previous_; }

void backward(const Tensor& loss) {
  auto* tape = Tape::active();
  if (!tape) throw ContractError("backward called with no active tape");
  tape->backward(loss);
}

}  // namespace attncal::nd
