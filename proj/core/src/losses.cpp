#include "csmri/losses.hpp"

namespace csmri {

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& x, const Tensor<T>& x_hat) {
  Tensor<T> d = sub(x, x_hat);
  return mean_all(mul(d, d));
}

template <typename T>
Tensor<T> perceptual_loss(const Tensor<T>& x, const Tensor<T>& x_hat,
                          const FeatureExtractor<T>& extractor) {
  Tensor<T> fx = extractor.forward(x);
  Tensor<T> fx_hat = extractor.forward(x_hat);
  Tensor<T> d = sub(fx, fx_hat);
  return mean_all(mul(d, d));
}

namespace {

// BCE against a constant target on clamped probabilities.
template <typename T>
Tensor<T> bce_constant_target(const Tensor<T>& p, double target) {
  Tensor<T> pc = clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
  Tensor<T> one_minus = add_scalar(mul_scalar(pc, -1.0), 1.0);
  Tensor<T> term = add(mul_scalar(log_op(pc), target),
                       mul_scalar(log_op(one_minus), 1.0 - target));
  return mul_scalar(mean_all(term), -1.0);
}

}  // namespace

template <typename T>
Tensor<T> discriminator_loss(const Tensor<T>& d_real, const Tensor<T>& d_fake, double smoothing) {
  if (smoothing < 0.0 || smoothing >= 1.0) {
    throw ConfigError("label smoothing must lie in [0, 1)");
  }
  return add(bce_constant_target(d_real, 1.0 - smoothing), bce_constant_target(d_fake, 0.0));
}

template <typename T>
Tensor<T> adversarial_loss(const Tensor<T>& d_fake) {
  Tensor<T> pc = clamp(d_fake, kProbabilityClamp, 1.0 - kProbabilityClamp);
  return mul_scalar(mean_all(log_op(pc)), -1.0);
}

template <typename T>
Tensor<T> feature_matching_loss(const std::vector<Tensor<T>>& f_real,
                                const std::vector<Tensor<T>>& f_fake) {
  if (f_real.size() != f_fake.size() || f_real.empty()) {
    throw ShapeError("feature_matching_loss: feature list lengths differ or are empty");
  }
  Tensor<T> acc;
  for (size_t i = 0; i < f_real.size(); ++i) {
    if (!same_shape(f_real[i].shape(), f_fake[i].shape())) {
      throw ShapeError("feature_matching_loss: layer " + std::to_string(i) + " shapes " +
                       shape_str(f_real[i].shape()) + " vs " + shape_str(f_fake[i].shape()));
    }
    Tensor<T> layer = mean_all(abs_op(sub(f_real[i], f_fake[i])));
    acc = acc.defined() ? add(acc, layer) : layer;
  }
  return mul_scalar(acc, 1.0 / static_cast<double>(f_real.size()));
}

template <typename T>
Tensor<T> l1_penalty(const Tensor<T>& x_v) {
  return mean_all(abs_op(x_v));
}

void LossCalibration::calibrate(double adv, double feat, double vgg, double pen) {
  if (frozen_) {
    throw CalibrationError("loss calibration is frozen after the first iteration");
  }
  constexpr double kFloor = 1e-12;
  if (adv <= kFloor || feat <= kFloor || vgg <= kFloor || pen <= kFloor) {
    throw CalibrationError(
        "first-iteration losses must be strictly positive to calibrate "
        "(adv=" + std::to_string(adv) + ", feat=" + std::to_string(feat) +
        ", vgg=" + std::to_string(vgg) + ", pen=" + std::to_string(pen) +
        "); rerun with a different seed");
  }
  m_ = adv;
  n_ = feat;
  o_ = vgg;
  alpha_ = 0.1 / pen;
  frozen_ = true;
}

nlohmann::ordered_json LossCalibration::to_json() const {
  return nlohmann::ordered_json{{"m", m_}, {"n", n_}, {"o", o_}, {"alpha", alpha_},
                                {"frozen", frozen_}};
}

LossCalibration LossCalibration::from_json(const nlohmann::ordered_json& j) {
  LossCalibration c;
  c.m_ = j.at("m").get<double>();
  c.n_ = j.at("n").get<double>();
  c.o_ = j.at("o").get<double>();
  c.alpha_ = j.at("alpha").get<double>();
  c.frozen_ = j.at("frozen").get<bool>();
  return c;
}

template <typename T>
Tensor<T> total_refiner_loss(const Tensor<T>& adv, const Tensor<T>& feat, const Tensor<T>& vgg,
                             const Tensor<T>& pen, const LossCalibration& calibration) {
  if (!calibration.frozen()) {
    throw ContractError("total_refiner_loss requires a frozen calibration");
  }
  Tensor<T> gan_terms =
      add(mul_scalar(adv, 0.5 / calibration.m()), mul_scalar(feat, 0.5 / calibration.n()));
  Tensor<T> total = add(gan_terms, mul_scalar(vgg, 1.0 / calibration.o()));
  return add(total, mul_scalar(pen, calibration.alpha()));
}

template <typename T>
ReplayBuffer<T>::ReplayBuffer(size_t capacity, double draw_probability)
    : capacity_(capacity), draw_probability_(draw_probability) {
  if (capacity_ == 0) throw ConfigError("replay buffer capacity must be positive");
  if (draw_probability_ < 0.0 || draw_probability_ > 1.0) {
    throw ConfigError("replay draw probability must lie in [0, 1]");
  }
}

template <typename T>
std::vector<Tensor<T>> ReplayBuffer<T>::push_sample(const std::vector<Tensor<T>>& fresh,
                                                    RngStream& rng) {
  // Slots draw from the residents as they were before this batch arrived.
  std::vector<Tensor<T>> snapshot(store_.begin(), store_.end());
  for (const auto& f : fresh) {
    Tensor<T> copy = f.detached();
    if (store_.size() < capacity_) {
      store_.push_back(std::move(copy));
    } else {
      store_[rng.uniform_int(store_.size())] = std::move(copy);
    }
  }
  std::vector<Tensor<T>> batch;
  batch.reserve(fresh.size());
  for (const auto& f : fresh) {
    if (!snapshot.empty() && rng.uniform() < draw_probability_) {
      batch.push_back(snapshot[rng.uniform_int(snapshot.size())]);
    } else {
      batch.push_back(f);
    }
  }
  return batch;
}

template <typename T>
void ReplayBuffer<T>::restore(std::deque<Tensor<T>> contents) {
  if (contents.size() > capacity_) {
    throw ContractError("replay restore exceeds capacity");
  }
  store_ = std::move(contents);
}

#define CSMRI_INSTANTIATE_LOSSES(T)                                                  \
  template Tensor<T> mse_loss(const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> perceptual_loss(const Tensor<T>&, const Tensor<T>&,             \
                                     const FeatureExtractor<T>&);                    \
  template Tensor<T> discriminator_loss(const Tensor<T>&, const Tensor<T>&, double); \
  template Tensor<T> adversarial_loss(const Tensor<T>&);                             \
  template Tensor<T> feature_matching_loss(const std::vector<Tensor<T>>&,            \
                                           const std::vector<Tensor<T>>&);           \
  template Tensor<T> l1_penalty(const Tensor<T>&);                                   \
  template Tensor<T> total_refiner_loss(const Tensor<T>&, const Tensor<T>&,          \
                                        const Tensor<T>&, const Tensor<T>&,          \
                                        const LossCalibration&);                     \
  template class ReplayBuffer<T>;
CSMRI_INSTANTIATE_LOSSES(float)
CSMRI_INSTANTIATE_LOSSES(double)
#undef CSMRI_INSTANTIATE_LOSSES

}  // namespace csmri
