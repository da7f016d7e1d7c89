#pragma once

#include <deque>
#include <vector>

#include "csmri/networks.hpp"
#include "csmri/tensor_ops.hpp"

namespace csmri {

// All losses are per-element means, so the stage-2 calibration constants stay
// independent of image and batch size. Probabilities are clamped to
// [1e-7, 1 - 1e-7] before any log, keeping every loss finite.
inline constexpr double kProbabilityClamp = 1e-7;

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& x, const Tensor<T>& x_hat);

template <typename T>
Tensor<T> perceptual_loss(const Tensor<T>& x, const Tensor<T>& x_hat,
                          const FeatureExtractor<T>& extractor);

// Binary cross-entropy with one-sided label smoothing: the real target is
// 1 - smoothing, the fake target stays 0. The two terms are summed.
template <typename T>
Tensor<T> discriminator_loss(const Tensor<T>& d_real, const Tensor<T>& d_fake,
                             double smoothing = 0.1);

// -mean(log d_fake).
template <typename T>
Tensor<T> adversarial_loss(const Tensor<T>& d_fake);

// Mean over layers of per-element mean absolute differences.
template <typename T>
Tensor<T> feature_matching_loss(const std::vector<Tensor<T>>& f_real,
                                const std::vector<Tensor<T>>& f_fake);

// Per-element mean |x_V| of the ungated refiner output.
template <typename T>
Tensor<T> l1_penalty(const Tensor<T>& x_v);

// Normalizers of the total refinement loss, set once from the first stage-2
// iteration and immutable afterwards.
class LossCalibration {
 public:
  // Sets M, N, O to the first-iteration loss values and alpha so that the
  // weighted penalty term equals 0.1 there. Throws CalibrationError on
  // non-positive inputs or if already frozen.
  void calibrate(double adv, double feat, double vgg, double pen);

  bool frozen() const { return frozen_; }
  double m() const { return m_; }
  double n() const { return n_; }
  double o() const { return o_; }
  double alpha() const { return alpha_; }

  nlohmann::ordered_json to_json() const;
  static LossCalibration from_json(const nlohmann::ordered_json& j);

 private:
  double m_ = 1.0, n_ = 1.0, o_ = 1.0, alpha_ = 0.0;
  bool frozen_ = false;
};

// (adv/M + feat/N)/2 + vgg/O + alpha*pen; requires a frozen calibration.
template <typename T>
Tensor<T> total_refiner_loss(const Tensor<T>& adv, const Tensor<T>& feat, const Tensor<T>& vgg,
                             const Tensor<T>& pen, const LossCalibration& calibration);

// Experience replay over generated images. Every fresh fake is pushed
// (evicting a uniformly random resident when full); each discriminator batch
// slot is then filled from the pre-push residents with probability p.
template <typename T>
class ReplayBuffer {
 public:
  explicit ReplayBuffer(size_t capacity = 80, double draw_probability = 0.5);

  std::vector<Tensor<T>> push_sample(const std::vector<Tensor<T>>& fresh, RngStream& rng);

  size_t size() const { return store_.size(); }
  size_t capacity() const { return capacity_; }
  double draw_probability() const { return draw_probability_; }

  const std::deque<Tensor<T>>& contents() const { return store_; }
  void restore(std::deque<Tensor<T>> contents);

 private:
  size_t capacity_;
  double draw_probability_;
  std::deque<Tensor<T>> store_;
};

#define CSMRI_EXTERN_LOSSES(T)                                                              \
  extern template Tensor<T> mse_loss(const Tensor<T>&, const Tensor<T>&);                   \
  extern template Tensor<T> perceptual_loss(const Tensor<T>&, const Tensor<T>&,             \
                                            const FeatureExtractor<T>&);                    \
  extern template Tensor<T> discriminator_loss(const Tensor<T>&, const Tensor<T>&, double); \
  extern template Tensor<T> adversarial_loss(const Tensor<T>&);                             \
  extern template Tensor<T> feature_matching_loss(const std::vector<Tensor<T>>&,            \
                                                  const std::vector<Tensor<T>>&);           \
  extern template Tensor<T> l1_penalty(const Tensor<T>&);                                   \
  extern template Tensor<T> total_refiner_loss(const Tensor<T>&, const Tensor<T>&,          \
                                               const Tensor<T>&, const Tensor<T>&,          \
                                               const LossCalibration&);                     \
  extern template class ReplayBuffer<T>;
CSMRI_EXTERN_LOSSES(float)
CSMRI_EXTERN_LOSSES(double)
#undef CSMRI_EXTERN_LOSSES

}  // namespace csmri
