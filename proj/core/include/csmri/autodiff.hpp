#pragma once

#include <functional>
#include <vector>

#include "csmri/tensor.hpp"

namespace csmri {

// Reverse-mode tape. Forward ops append records in execution order, which is
// a valid topological order by construction; backward() replays it in
// reverse. One tape serves one forward/backward pass on one thread.
template <typename T>
class Tape {
 public:
  struct Record {
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    // Reads output->grad, accumulates into the inputs that require grad.
    std::function<void(Record&)> backward;
  };

  void record(std::vector<Tensor<T>> inputs, Tensor<T> output, std::function<void(Record&)> fn);

  // Seeds d(loss)/d(loss) = 1 and propagates. Loss must be scalar and the
  // tape non-empty.
  void backward(Tensor<T> loss);

  size_t size() const { return records_.size(); }
  void clear() { records_.clear(); }

  // Ambient tape for the current thread; null means eval mode (no recording).
  static Tape* current();

 private:
  std::vector<Record> records_;
};

// Installs a tape as the thread's recording target for its lifetime.
template <typename T>
class [[nodiscard]] TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

// Suspends recording (frozen-network forwards, metric evaluation).
template <typename T>
class [[nodiscard]] NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

// True when an ambient tape exists and any input requires grad.
template <typename T>
bool should_record(std::initializer_list<const Tensor<T>*> inputs);

// Accumulates src into dst's grad buffer (allocating it on first touch).
template <typename T>
void accumulate_grad(Tensor<T>& t, std::span<const T> contribution);

extern template class Tape<float>;
extern template class Tape<double>;
extern template class TapeScope<float>;
extern template class TapeScope<double>;
extern template class NoGradScope<float>;
extern template class NoGradScope<double>;
extern template bool should_record<float>(std::initializer_list<const Tensor<float>*>);
extern template bool should_record<double>(std::initializer_list<const Tensor<double>*>);
extern template void accumulate_grad<float>(Tensor<float>&, std::span<const float>);
extern template void accumulate_grad<double>(Tensor<double>&, std::span<const double>);

}  // namespace csmri
