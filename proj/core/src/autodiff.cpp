#include "csmri/autodiff.hpp"

namespace csmri {
namespace {

template <typename T>
thread_local Tape<T>* g_current_tape = nullptr;

}  // namespace

template <typename T>
void Tape<T>::record(std::vector<Tensor<T>> inputs, Tensor<T> output,
                     std::function<void(Record&)> fn) {
  records_.push_back(Record{std::move(inputs), std::move(output), std::move(fn)});
}

template <typename T>
void Tape<T>::backward(Tensor<T> loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss");
  }
  if (records_.empty()) throw ContractError("backward() on an empty tape");
  loss.ensure_grad()[0] += T(1);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (!it->output.has_grad()) continue;  // not on a path to the loss
    it->backward(*it);
  }
}

template <typename T>
Tape<T>* Tape<T>::current() {
  return g_current_tape<T>;
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(g_current_tape<T>) {
  g_current_tape<T> = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  g_current_tape<T> = previous_;
}

template <typename T>
NoGradScope<T>::NoGradScope() : previous_(g_current_tape<T>) {
  g_current_tape<T> = nullptr;
}

template <typename T>
NoGradScope<T>::~NoGradScope() {
  g_current_tape<T> = previous_;
}

template <typename T>
bool should_record(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::current() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
void accumulate_grad(Tensor<T>& t, std::span<const T> contribution) {
  auto g = t.ensure_grad();
  for (size_t i = 0; i < g.size(); ++i) g[i] += contribution[i];
}

template class Tape<float>;
template class Tape<double>;
template class TapeScope<float>;
template class TapeScope<double>;
template class NoGradScope<float>;
template class NoGradScope<double>;
template bool should_record<float>(std::initializer_list<const Tensor<float>*>);
template bool should_record<double>(std::initializer_list<const Tensor<double>*>);
template void accumulate_grad<float>(Tensor<float>&, std::span<const float>);
template void accumulate_grad<double>(Tensor<double>&, std::span<const double>);

}  // namespace csmri
