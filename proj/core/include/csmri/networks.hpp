#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "csmri/checkpoint.hpp"
#include "csmri/kspace.hpp"
#include "csmri/optim.hpp"
#include "csmri/tensor_ops.hpp"

namespace csmri {

// --- layer building blocks ---------------------------------------------------

template <typename T>
struct Conv2dLayer {
  Parameter<T> weight, bias;  // weight [F,C,kH,kW]
  int stride = 1, padding = 0;

  Conv2dLayer() = default;
  Conv2dLayer(const std::string& name, int in_ch, int out_ch, int kernel, int stride_,
              int padding_)
      : weight(name + "/weight", {out_ch, in_ch, kernel, kernel}),
        bias(name + "/bias", {out_ch}), stride(stride_), padding(padding_) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    return conv2d(x, weight.tensor, bias.tensor, stride, padding);
  }
  void collect(ParamRefs<T>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

template <typename T>
struct ConvTranspose2dLayer {
  Parameter<T> weight, bias;  // weight [in_ch, out_ch, kH, kW]
  int stride = 1, padding = 0;

  ConvTranspose2dLayer() = default;
  ConvTranspose2dLayer(const std::string& name, int in_ch, int out_ch, int kernel, int stride_,
                       int padding_)
      : weight(name + "/weight", {in_ch, out_ch, kernel, kernel}),
        bias(name + "/bias", {out_ch}), stride(stride_), padding(padding_) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    return conv_transpose2d(x, weight.tensor, bias.tensor, stride, padding);
  }
  void collect(ParamRefs<T>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

template <typename T>
struct BatchNorm2dLayer {
  Parameter<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  std::string name;
  double momentum = 0.1, epsilon = 1e-5;

  BatchNorm2dLayer() = default;
  BatchNorm2dLayer(const std::string& name_, int channels, double momentum_ = 0.1,
                   double epsilon_ = 1e-5)
      : gamma(name_ + "/gamma", {channels}), beta(name_ + "/beta", {channels}),
        running_mean({channels}, T(0)), running_var({channels}, T(1)), name(name_),
        momentum(momentum_), epsilon(epsilon_) {
    std::fill(gamma.tensor.data().begin(), gamma.tensor.data().end(), T(1));
  }

  Tensor<T> operator()(const Tensor<T>& x, bool training) {
    return batch_norm(x, gamma.tensor, beta.tensor, running_mean, running_var, training, momentum,
                      epsilon);
  }
  void collect(ParamRefs<T>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
  void collect_buffers(NamedBuffers<T>& out) {
    out.emplace_back(name + "/running_mean", &running_mean);
    out.emplace_back(name + "/running_var", &running_var);
  }
};

// --- configs -------------------------------------------------------------------

struct CascadeConfig {
  int n_c = 3;       // de-aliasing blocks
  int n_d = 3;       // conv layers per block
  int filters = 32;
  int kernel = 3;    // odd, size-preserving
  double leaky_slope = 0.1;
  std::optional<double> dc_soft_lambda;  // unset = hard replacement
};

struct RefinerConfig {
  std::vector<int> encoder_filters{32, 64, 128};
  std::vector<int> decoder_filters{64, 32};
  int kernel = 4;
  double leaky_slope = 0.1;
};

struct DiscriminatorConfig {
  std::vector<int> filters{64, 128, 256, 512, 1024, 1024};
  int kernel = 4;
  int stride = 2;
  double dropout_rate = 0.5;
  int dropout_layers = 3;  // channelwise dropout after the last N convs
  double leaky_slope = 0.2;
  bool batch_norm = true;  // after every hidden conv except the first
};

struct FeatureExtractorConfig {
  std::string source = "seeded-random";  // or a checkpoint directory path
  std::vector<int> widths{16, 32, 64};
  int in_channels = 3;  // magnitude replicated to this count
  int kernel = 4;
  int stride = 2;
  double leaky_slope = 0.1;
  uint64_t seed = 0x7a31f00dull;  // private to the extractor, not the run seed
};

struct SegmenterConfig {
  std::vector<int> encoder_filters{16, 32, 64};
  std::vector<int> decoder_filters{32, 16};
  int kernel = 4;
  double leaky_slope = 0.1;
};

// Architecture presets named in config files: "paper" (the full-scale
// settings) and "desk" (64x64 laptop-scale runs).
CascadeConfig cascade_preset(const std::string& name);
RefinerConfig refiner_preset(const std::string& name);
DiscriminatorConfig discriminator_preset(const std::string& name);
FeatureExtractorConfig feature_extractor_preset(const std::string& name);
SegmenterConfig segmenter_preset(const std::string& name);

void to_json(nlohmann::ordered_json& j, const CascadeConfig& c);
void from_json(const nlohmann::ordered_json& j, CascadeConfig& c);
void to_json(nlohmann::ordered_json& j, const RefinerConfig& c);
void from_json(const nlohmann::ordered_json& j, RefinerConfig& c);
void to_json(nlohmann::ordered_json& j, const DiscriminatorConfig& c);
void from_json(const nlohmann::ordered_json& j, DiscriminatorConfig& c);
void to_json(nlohmann::ordered_json& j, const FeatureExtractorConfig& c);
void from_json(const nlohmann::ordered_json& j, FeatureExtractorConfig& c);
void to_json(nlohmann::ordered_json& j, const SegmenterConfig& c);
void from_json(const nlohmann::ordered_json& j, SegmenterConfig& c);

// --- reconstruction cascade R ---------------------------------------------------

// Unrolled de-aliasing: x <- block_i(x) + x followed by a data-consistency
// layer, n_c times, so the output always satisfies the DC property.
template <typename T>
class CascadeNet {
 public:
  explicit CascadeNet(CascadeConfig config);

  Tensor<T> forward(const Tensor<T>& x_u, const KSpaceBatch<T>& kspace) const;
  void init(RngStream& rng);  // conv weights N(0, 0.02), biases zero
  ParamRefs<T> parameters();
  const CascadeConfig& config() const { return config_; }

 private:
  CascadeConfig config_;
  std::vector<std::vector<Conv2dLayer<T>>> blocks_;
};

// --- generic U-Net ---------------------------------------------------------------

struct UNetShape {
  int in_channels = 2;
  int out_channels = 2;
  std::vector<int> encoder_filters;
  std::vector<int> decoder_filters;  // must be encoder_filters.size() - 1
  int kernel = 4;                    // even; stride-2 halving/doubling
  double leaky_slope = 0.1;
};

template <typename T>
class UNet {
 public:
  UNet(const std::string& name, UNetShape shape);

  // Linear output head; callers add their own nonlinearity.
  Tensor<T> forward(const Tensor<T>& x, bool training);
  void init(const InitScheme& conv_scheme, RngStream& rng);
  ParamRefs<T> parameters();
  NamedBuffers<T> buffers();

 private:
  UNetShape shape_;
  std::vector<Conv2dLayer<T>> enc_;
  std::vector<BatchNorm2dLayer<T>> enc_bn_;
  std::vector<ConvTranspose2dLayer<T>> dec_;
  std::vector<BatchNorm2dLayer<T>> dec_bn_;
  ConvTranspose2dLayer<T> out_;
};

// --- visual refinement network V ---------------------------------------------------

// x_hat = x_rec + lambda * rescale(unet(scale_to_unit(x_rec))), algebraically
// the scale-back of s + lambda*x_V but exact at lambda == 0. The ungated x_V
// is returned for the l1 penalty.
template <typename T>
class RefinerNet {
 public:
  struct Output {
    Tensor<T> x_hat;
    Tensor<T> x_v;
  };

  explicit RefinerNet(RefinerConfig config);

  Output forward(const Tensor<T>& x_rec, bool training);
  void init(RngStream& rng);  // orthogonal convs, lambda = 0
  ParamRefs<T> parameters();  // includes lambda
  NamedBuffers<T> buffers();
  Parameter<T>& lambda() { return lambda_; }
  const RefinerConfig& config() const { return config_; }

 private:
  RefinerConfig config_;
  UNet<T> unet_;
  Parameter<T> lambda_;
};

// Per-image affine coefficients mapping [min,max] jointly over both channels
// onto (-1,1); a degenerate range maps to all zeros.
template <typename T>
struct UnitScale {
  std::vector<T> fwd_scale, fwd_shift;  // x -> s
  std::vector<T> inv_scale;             // ds -> dx (shift cancels in the residual)
};
template <typename T>
UnitScale<T> unit_scale_coefficients(const Tensor<T>& x);

// --- PatchGAN discriminator D ---------------------------------------------------

template <typename T>
class PatchDiscriminator {
 public:
  struct Output {
    Tensor<T> patch_map;             // per-patch probabilities in (0,1)
    std::vector<T> mean_prob;        // spatial mean per batch item (diagnostic)
    std::vector<Tensor<T>> features; // post-activation map of every conv layer
  };

  explicit PatchDiscriminator(DiscriminatorConfig config);

  // Training mode draws channelwise dropout masks from `dropout_rng` and
  // batch statistics; eval mode is mask-free and uses running stats, so
  // feature-matching pairs stay comparable.
  Output forward(const Tensor<T>& x, bool training, RngStream* dropout_rng = nullptr);
  void init(RngStream& rng);  // N(0, 0.02)
  ParamRefs<T> parameters();
  NamedBuffers<T> buffers();
  const DiscriminatorConfig& config() const { return config_; }

 private:
  DiscriminatorConfig config_;
  std::vector<Conv2dLayer<T>> convs_;
  std::vector<BatchNorm2dLayer<T>> bns_;  // indices 1.. when batch_norm is on
  Conv2dLayer<T> head_;  // 3x3 stride-1 projection keeps the patch extent
};

// --- frozen perceptual feature extractor F ----------------------------------------

template <typename T>
class FeatureExtractor {
 public:
  explicit FeatureExtractor(FeatureExtractorConfig config);

  Tensor<T> forward(const Tensor<T>& x2ch) const;
  ParamRefs<T> parameters();  // frozen: requires_grad is false, never optimized
  const FeatureExtractorConfig& config() const { return config_; }

 private:
  FeatureExtractorConfig config_;
  std::vector<Conv2dLayer<T>> convs_;
};

// --- segmentation network S ---------------------------------------------------------

template <typename T>
class SegmenterNet {
 public:
  explicit SegmenterNet(SegmenterConfig config);

  // [B,1,H,W] magnitude -> per-pixel foreground probability in (0,1).
  Tensor<T> forward(const Tensor<T>& magnitude, bool training);
  void init(RngStream& rng);
  ParamRefs<T> parameters();
  NamedBuffers<T> buffers();
  const SegmenterConfig& config() const { return config_; }

 private:
  SegmenterConfig config_;
  UNet<T> unet_;
};

// --- single-image entry points -------------------------------------------------------

template <typename T>
ComplexImage reconstruct(const ComplexImage& x_u, const KSpaceSample& sample,
                         const CascadeNet<T>& net);

template <typename T>
std::pair<ComplexImage, Tensor<T>> refine(const ComplexImage& x_rec, RefinerNet<T>& net);

// Probabilities binarized with p >= 0.5 -> foreground.
template <typename T>
std::vector<double> segment(const std::vector<double>& magnitude, int h, int w,
                            SegmenterNet<T>& net);
std::vector<uint8_t> binarize(const std::vector<double>& probabilities, double threshold = 0.5);

#define CSMRI_EXTERN_NETWORKS(T)                                                      \
  extern template struct Conv2dLayer<T>;                                              \
  extern template struct ConvTranspose2dLayer<T>;                                     \
  extern template struct BatchNorm2dLayer<T>;                                         \
  extern template class CascadeNet<T>;                                                \
  extern template class UNet<T>;                                                      \
  extern template class RefinerNet<T>;                                                \
  extern template UnitScale<T> unit_scale_coefficients(const Tensor<T>&);             \
  extern template class PatchDiscriminator<T>;                                        \
  extern template class FeatureExtractor<T>;                                          \
  extern template class SegmenterNet<T>;                                              \
  extern template ComplexImage reconstruct(const ComplexImage&, const KSpaceSample&,  \
                                           const CascadeNet<T>&);                     \
  extern template std::pair<ComplexImage, Tensor<T>> refine(const ComplexImage&,      \
                                                            RefinerNet<T>&);          \
  extern template std::vector<double> segment(const std::vector<double>&, int, int,   \
                                              SegmenterNet<T>&);
CSMRI_EXTERN_NETWORKS(float)
CSMRI_EXTERN_NETWORKS(double)
#undef CSMRI_EXTERN_NETWORKS

}  // namespace csmri
