#pragma once

#include <functional>
#include <vector>

#include "moelab/common.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

// Reverse-mode tape. Ops that produce a grad-requiring output push one
// closure; backward() seeds d(loss)=1 and runs closures newest-first, which is
// a valid reverse topological order because an op can only consume tensors
// that already existed when it executed.
template <class Real>
class Tape {
 public:
  bool recording = true;

  void record(std::function<void()> backward_fn) {
    if (recording) nodes_.push_back(std::move(backward_fn));
  }

  std::size_t size() const { return nodes_.size(); }

  void backward(Tensor<Real>& loss) {
    if (loss.numel() != 1)
      throw ShapeError("backward: loss of shape " + shape_str(loss.shape()) +
                       " is not a scalar");
    if (!loss.requires_grad())
      throw TrainError("backward: loss does not require grad");
    loss.grad()[0] += Real(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

// Pauses recording for the lifetime of the guard (eval-mode forward passes).
template <class Real>
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape<Real>& tape) : tape_(tape), prev_(tape.recording) {
    tape_.recording = false;
  }
  ~NoGradGuard() { tape_.recording = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape<Real>& tape_;
  bool prev_;
};

}  // namespace moelab
