#pragma once

#include <string>
#include <vector>

#include "csmri/rng.hpp"
#include "csmri/tensor.hpp"

namespace csmri {

// A trainable tensor plus its Adam state. Parameters are mutated only by
// initialize()/adam_step(), which require exclusive access.
template <typename T>
struct Parameter {
  Tensor<T> tensor;
  std::string name;
  std::vector<T> adam_m, adam_v;
  int64_t step_count = 0;

  Parameter() = default;
  Parameter(std::string name_, Shape shape) : tensor(std::move(shape)), name(std::move(name_)) {
    tensor.set_requires_grad(true);
    adam_m.assign(tensor.numel(), T(0));
    adam_v.assign(tensor.numel(), T(0));
  }
};

template <typename T>
using ParamRefs = std::vector<Parameter<T>*>;

struct InitScheme {
  enum class Kind { kOrthogonal, kGaussian, kZeros, kScalar };
  Kind kind = Kind::kZeros;
  double mean = 0.0;
  double std = 1.0;
  double value = 0.0;

  static InitScheme orthogonal() { return {Kind::kOrthogonal, 0, 1, 0}; }
  static InitScheme gaussian(double mean, double std) { return {Kind::kGaussian, mean, std, 0}; }
  static InitScheme zeros() { return {Kind::kZeros, 0, 0, 0}; }
  static InitScheme scalar(double v) { return {Kind::kScalar, 0, 0, v}; }
};

// Orthogonal init views the parameter as a (fan-out x fan-in) matrix, i.e.
// shape[0] rows by numel/shape[0] columns, and makes the smaller side
// orthonormal. Resets Adam state and step count.
template <typename T>
void initialize(Parameter<T>& param, const InitScheme& scheme, RngStream& rng);

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam over every parameter; requires populated gradients and
// clears them afterwards.
template <typename T>
void adam_step(const ParamRefs<T>& params, const AdamConfig& config);

template <typename T>
void zero_grads(const ParamRefs<T>& params);

template <typename T>
void set_requires_grad(const ParamRefs<T>& params, bool value);

// Content hash over parameter values (frozen-network checks).
template <typename T>
uint64_t params_hash(const ParamRefs<T>& params);

#define CSMRI_EXTERN_OPTIM(T)                                                      \
  extern template struct Parameter<T>;                                            \
  extern template void initialize(Parameter<T>&, const InitScheme&, RngStream&);  \
  extern template void adam_step(const ParamRefs<T>&, const AdamConfig&);         \
  extern template void zero_grads(const ParamRefs<T>&);                           \
  extern template void set_requires_grad(const ParamRefs<T>&, bool);              \
  extern template uint64_t params_hash(const ParamRefs<T>&);
CSMRI_EXTERN_OPTIM(float)
CSMRI_EXTERN_OPTIM(double)
#undef CSMRI_EXTERN_OPTIM

}  // namespace csmri
