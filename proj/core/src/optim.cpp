#include "csmri/optim.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "csmri/io.hpp"

namespace csmri {
namespace {

template <typename T>
void orthogonal_fill(std::span<T> data, int64_t rows, RngStream& rng) {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic>;
  const int64_t cols = static_cast<int64_t>(data.size()) / rows;
  const int64_t small = std::min(rows, cols), big = std::max(rows, cols);

  Mat g(big, small);
  for (int64_t j = 0; j < small; ++j) {
    for (int64_t i = 0; i < big; ++i) g(i, j) = rng.normal();
  }
  Eigen::HouseholderQR<Mat> qr(g);
  Mat q = qr.householderQ() * Mat::Identity(big, small);
  // Sign-fix against R's diagonal so the distribution is Haar, not QR-biased.
  Mat r = qr.matrixQR().template triangularView<Eigen::Upper>();
  for (int64_t j = 0; j < small; ++j) {
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  }
  // q has orthonormal columns; lay it out so the smaller dimension of the
  // (rows x cols) view is orthonormal.
  for (int64_t i = 0; i < rows; ++i) {
    for (int64_t j = 0; j < cols; ++j) {
      const double v = rows <= cols ? q(j, i) : q(i, j);
      data[static_cast<size_t>(i * cols + j)] = static_cast<T>(v);
    }
  }
}

}  // namespace

template <typename T>
void initialize(Parameter<T>& param, const InitScheme& scheme, RngStream& rng) {
  auto data = param.tensor.data();
  switch (scheme.kind) {
    case InitScheme::Kind::kZeros:
      std::fill(data.begin(), data.end(), T(0));
      break;
    case InitScheme::Kind::kScalar:
      std::fill(data.begin(), data.end(), static_cast<T>(scheme.value));
      break;
    case InitScheme::Kind::kGaussian:
      for (auto& v : data) v = static_cast<T>(rng.normal(scheme.mean, scheme.std));
      break;
    case InitScheme::Kind::kOrthogonal: {
      if (param.tensor.shape().empty() || param.tensor.numel() % param.tensor.dim(0) != 0) {
        throw ShapeError("orthogonal init needs a parameter viewable as 2D: " +
                         shape_str(param.tensor.shape()));
      }
      orthogonal_fill<T>(data, param.tensor.dim(0), rng);
      break;
    }
  }
  std::fill(param.adam_m.begin(), param.adam_m.end(), T(0));
  std::fill(param.adam_v.begin(), param.adam_v.end(), T(0));
  param.step_count = 0;
  param.tensor.zero_grad();
}

template <typename T>
void adam_step(const ParamRefs<T>& params, const AdamConfig& config) {
  for (auto* p : params) {
    if (!p->tensor.has_grad()) {
      throw ContractError("adam_step: parameter '" + p->name + "' has no gradient");
    }
  }
  const double b1 = config.beta1, b2 = config.beta2;
  for (auto* p : params) {
    auto values = p->tensor.data();
    auto grad = p->tensor.grad();
    p->step_count += 1;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(p->step_count));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(p->step_count));
    for (size_t i = 0; i < values.size(); ++i) {
      const double g = static_cast<double>(grad[i]);
      const double m = b1 * static_cast<double>(p->adam_m[i]) + (1.0 - b1) * g;
      const double v = b2 * static_cast<double>(p->adam_v[i]) + (1.0 - b2) * g * g;
      p->adam_m[i] = static_cast<T>(m);
      p->adam_v[i] = static_cast<T>(v);
      const double m_hat = m / bc1;
      const double v_hat = v / bc2;
      values[i] -= static_cast<T>(config.lr * m_hat / (std::sqrt(v_hat) + config.epsilon));
    }
    p->tensor.zero_grad();
  }
}

template <typename T>
void zero_grads(const ParamRefs<T>& params) {
  for (auto* p : params) p->tensor.zero_grad();
}

template <typename T>
void set_requires_grad(const ParamRefs<T>& params, bool value) {
  for (auto* p : params) p->tensor.set_requires_grad(value);
}

template <typename T>
uint64_t params_hash(const ParamRefs<T>& params) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto* p : params) {
    h = fnv1a(p->name.data(), p->name.size(), h);
    auto data = p->tensor.data();
    h = fnv1a(data.data(), data.size_bytes(), h);
  }
  return h;
}

#define CSMRI_INSTANTIATE_OPTIM(T)                                         \
  template struct Parameter<T>;                                            \
  template void initialize(Parameter<T>&, const InitScheme&, RngStream&);  \
  template void adam_step(const ParamRefs<T>&, const AdamConfig&);         \
  template void zero_grads(const ParamRefs<T>&);                           \
  template void set_requires_grad(const ParamRefs<T>&, bool);              \
  template uint64_t params_hash(const ParamRefs<T>&);
CSMRI_INSTANTIATE_OPTIM(float)
CSMRI_INSTANTIATE_OPTIM(double)
#undef CSMRI_INSTANTIATE_OPTIM

}  // namespace csmri
