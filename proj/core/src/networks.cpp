#include "csmri/networks.hpp"

#include <algorithm>
#include <cmath>

#include "csmri/autodiff.hpp"

namespace csmri {

using Json = nlohmann::ordered_json;

// --- presets -------------------------------------------------------------------

namespace {

void check_preset(const std::string& name) {
  if (name != "paper" && name != "desk") {
    throw ConfigError("unknown architecture preset '" + name + "' (expected paper or desk)");
  }
}

}  // namespace

CascadeConfig cascade_preset(const std::string& name) {
  check_preset(name);
  return CascadeConfig{};  // n_c=3, n_d=3, 32 filters of size 3 at both scales
}

RefinerConfig refiner_preset(const std::string& name) {
  check_preset(name);
  return RefinerConfig{};  // 32,64,128 encoding / 64,32 decoding at both scales
}

DiscriminatorConfig discriminator_preset(const std::string& name) {
  check_preset(name);
  DiscriminatorConfig c;
  if (name == "desk") {
    c.filters = {32, 64, 128};
    // With only three conv layers, "dropout after the last 3" touches the
    // whole stack; past ~0.05 the desk discriminator never leaves chance
    // against cascade reconstructions.
    c.dropout_rate = 0.05;
  }
  return c;
}

FeatureExtractorConfig feature_extractor_preset(const std::string& name) {
  check_preset(name);
  return FeatureExtractorConfig{};
}

SegmenterConfig segmenter_preset(const std::string& name) {
  check_preset(name);
  return SegmenterConfig{};
}

// --- config json ------------------------------------------------------------------

void to_json(Json& j, const CascadeConfig& c) {
  j = Json{{"n_c", c.n_c},
           {"n_d", c.n_d},
           {"filters", c.filters},
           {"kernel", c.kernel},
           {"leaky_slope", c.leaky_slope}};
  if (c.dc_soft_lambda) j["dc_soft_lambda"] = *c.dc_soft_lambda;
}
void from_json(const Json& j, CascadeConfig& c) {
  c.n_c = j.at("n_c").get<int>();
  c.n_d = j.at("n_d").get<int>();
  c.filters = j.at("filters").get<int>();
  c.kernel = j.at("kernel").get<int>();
  c.leaky_slope = j.at("leaky_slope").get<double>();
  if (j.contains("dc_soft_lambda")) c.dc_soft_lambda = j.at("dc_soft_lambda").get<double>();
}

void to_json(Json& j, const RefinerConfig& c) {
  j = Json{{"encoder_filters", c.encoder_filters},
           {"decoder_filters", c.decoder_filters},
           {"kernel", c.kernel},
           {"leaky_slope", c.leaky_slope}};
}
void from_json(const Json& j, RefinerConfig& c) {
  c.encoder_filters = j.at("encoder_filters").get<std::vector<int>>();
  c.decoder_filters = j.at("decoder_filters").get<std::vector<int>>();
  c.kernel = j.at("kernel").get<int>();
  c.leaky_slope = j.at("leaky_slope").get<double>();
}

void to_json(Json& j, const DiscriminatorConfig& c) {
  j = Json{{"filters", c.filters},         {"kernel", c.kernel},
           {"stride", c.stride},           {"dropout_rate", c.dropout_rate},
           {"dropout_layers", c.dropout_layers}, {"leaky_slope", c.leaky_slope},
           {"batch_norm", c.batch_norm}};
}
void from_json(const Json& j, DiscriminatorConfig& c) {
  c.filters = j.at("filters").get<std::vector<int>>();
  c.kernel = j.at("kernel").get<int>();
  c.stride = j.at("stride").get<int>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.dropout_layers = j.at("dropout_layers").get<int>();
  c.leaky_slope = j.at("leaky_slope").get<double>();
  c.batch_norm = j.value("batch_norm", true);
}

void to_json(Json& j, const FeatureExtractorConfig& c) {
  j = Json{{"source", c.source}, {"widths", c.widths},
           {"in_channels", c.in_channels}, {"kernel", c.kernel},
           {"stride", c.stride}, {"leaky_slope", c.leaky_slope},
           {"seed", c.seed}};
}
void from_json(const Json& j, FeatureExtractorConfig& c) {
  c.source = j.at("source").get<std::string>();
  c.widths = j.at("widths").get<std::vector<int>>();
  c.in_channels = j.at("in_channels").get<int>();
  c.kernel = j.at("kernel").get<int>();
  c.stride = j.at("stride").get<int>();
  c.leaky_slope = j.at("leaky_slope").get<double>();
  c.seed = j.at("seed").get<uint64_t>();
}

void to_json(Json& j, const SegmenterConfig& c) {
  j = Json{{"encoder_filters", c.encoder_filters},
           {"decoder_filters", c.decoder_filters},
           {"kernel", c.kernel},
           {"leaky_slope", c.leaky_slope}};
}
void from_json(const Json& j, SegmenterConfig& c) {
  c.encoder_filters = j.at("encoder_filters").get<std::vector<int>>();
  c.decoder_filters = j.at("decoder_filters").get<std::vector<int>>();
  c.kernel = j.at("kernel").get<int>();
  c.leaky_slope = j.at("leaky_slope").get<double>();
}

// --- cascade ---------------------------------------------------------------------

template <typename T>
CascadeNet<T>::CascadeNet(CascadeConfig config) : config_(std::move(config)) {
  if (config_.n_c < 1 || config_.n_d < 1 || config_.filters < 1) {
    throw ConfigError("cascade needs positive n_c, n_d and filter count");
  }
  if (config_.kernel % 2 != 1) {
    throw ConfigError("cascade kernel must be odd to preserve the image extent");
  }
  const int pad = (config_.kernel - 1) / 2;
  for (int i = 0; i < config_.n_c; ++i) {
    std::vector<Conv2dLayer<T>> block;
    for (int j = 0; j < config_.n_d; ++j) {
      const int in_ch = j == 0 ? 2 : config_.filters;
      const int out_ch = j == config_.n_d - 1 ? 2 : config_.filters;
      block.emplace_back("R/block" + std::to_string(i) + "/conv" + std::to_string(j), in_ch,
                         out_ch, config_.kernel, 1, pad);
    }
    blocks_.push_back(std::move(block));
  }
}

template <typename T>
Tensor<T> CascadeNet<T>::forward(const Tensor<T>& x_u, const KSpaceBatch<T>& kspace) const {
  Tensor<T> x = x_u;
  for (const auto& block : blocks_) {
    Tensor<T> h = x;
    for (size_t j = 0; j < block.size(); ++j) {
      h = block[j](h);
      if (j + 1 < block.size()) h = leaky_relu(h, config_.leaky_slope);
    }
    x = add(x, h);
    x = dc_layer(x, kspace);
  }
  return x;
}

template <typename T>
void CascadeNet<T>::init(RngStream& rng) {
  ParamRefs<T> params = parameters();
  for (auto* p : params) {
    const bool is_weight = p->tensor.shape().size() == 4;
    initialize(*p, is_weight ? InitScheme::gaussian(0.0, 0.02) : InitScheme::zeros(), rng);
  }
}

template <typename T>
ParamRefs<T> CascadeNet<T>::parameters() {
  ParamRefs<T> out;
  for (auto& block : blocks_) {
    for (auto& layer : block) layer.collect(out);
  }
  return out;
}

// --- U-Net -------------------------------------------------------------------------

template <typename T>
UNet<T>::UNet(const std::string& name, UNetShape shape) : shape_(std::move(shape)) {
  if (shape_.encoder_filters.size() < 2) {
    throw ConfigError("unet needs at least two encoder stages");
  }
  if (shape_.decoder_filters.size() + 1 != shape_.encoder_filters.size()) {
    throw ConfigError("unet decoder stage count must be encoder stages - 1");
  }
  if (shape_.kernel % 2 != 0) {
    throw ConfigError("unet kernel must be even for exact stride-2 halving");
  }
  const int pad = (shape_.kernel - 2) / 2;
  int ch = shape_.in_channels;
  for (size_t i = 0; i < shape_.encoder_filters.size(); ++i) {
    const int out_ch = shape_.encoder_filters[i];
    enc_.emplace_back(name + "/enc" + std::to_string(i), ch, out_ch, shape_.kernel, 2, pad);
    enc_bn_.emplace_back(name + "/enc" + std::to_string(i) + "/bn", out_ch);
    ch = out_ch;
  }
  for (size_t j = 0; j < shape_.decoder_filters.size(); ++j) {
    const int out_ch = shape_.decoder_filters[j];
    dec_.emplace_back(name + "/dec" + std::to_string(j), ch, out_ch, shape_.kernel, 2, pad);
    dec_bn_.emplace_back(name + "/dec" + std::to_string(j) + "/bn", out_ch);
    // Skip connection concatenates the encoder map at the matched resolution.
    ch = out_ch + shape_.encoder_filters[shape_.encoder_filters.size() - 2 - j];
  }
  out_ = ConvTranspose2dLayer<T>(name + "/out", ch, shape_.out_channels, shape_.kernel, 2, pad);
}

template <typename T>
Tensor<T> UNet<T>::forward(const Tensor<T>& x, bool training) {
  std::vector<Tensor<T>> skips;
  Tensor<T> h = x;
  for (size_t i = 0; i < enc_.size(); ++i) {
    h = enc_[i](h);
    h = enc_bn_[i](h, training);
    h = leaky_relu(h, shape_.leaky_slope);
    skips.push_back(h);
  }
  for (size_t j = 0; j < dec_.size(); ++j) {
    h = dec_[j](h);
    h = dec_bn_[j](h, training);
    h = leaky_relu(h, shape_.leaky_slope);
    h = concat_channels(h, skips[skips.size() - 2 - j]);
  }
  return out_(h);
}

template <typename T>
void UNet<T>::init(const InitScheme& conv_scheme, RngStream& rng) {
  for (auto* p : parameters()) {
    if (p->tensor.shape().size() == 4) {
      initialize(*p, conv_scheme, rng);
    } else if (p->name.ends_with("/gamma")) {
      initialize(*p, InitScheme::scalar(1.0), rng);
    } else {
      initialize(*p, InitScheme::zeros(), rng);
    }
  }
  for (auto& bn : enc_bn_) {
    std::fill(bn.running_mean.data().begin(), bn.running_mean.data().end(), T(0));
    std::fill(bn.running_var.data().begin(), bn.running_var.data().end(), T(1));
  }
  for (auto& bn : dec_bn_) {
    std::fill(bn.running_mean.data().begin(), bn.running_mean.data().end(), T(0));
    std::fill(bn.running_var.data().begin(), bn.running_var.data().end(), T(1));
  }
}

template <typename T>
ParamRefs<T> UNet<T>::parameters() {
  ParamRefs<T> out;
  for (size_t i = 0; i < enc_.size(); ++i) {
    enc_[i].collect(out);
    enc_bn_[i].collect(out);
  }
  for (size_t j = 0; j < dec_.size(); ++j) {
    dec_[j].collect(out);
    dec_bn_[j].collect(out);
  }
  out_.collect(out);
  return out;
}

template <typename T>
NamedBuffers<T> UNet<T>::buffers() {
  NamedBuffers<T> out;
  for (auto& bn : enc_bn_) bn.collect_buffers(out);
  for (auto& bn : dec_bn_) bn.collect_buffers(out);
  return out;
}

// --- refiner -------------------------------------------------------------------------

template <typename T>
UnitScale<T> unit_scale_coefficients(const Tensor<T>& x) {
  const size_t batch = static_cast<size_t>(x.dim(0));
  const size_t per = x.numel() / batch;
  UnitScale<T> out;
  out.fwd_scale.resize(batch);
  out.fwd_shift.resize(batch);
  out.inv_scale.resize(batch);
  auto xv = x.data();
  for (size_t b = 0; b < batch; ++b) {
    T mn = xv[b * per], mx = xv[b * per];
    for (size_t i = 1; i < per; ++i) {
      mn = std::min(mn, xv[b * per + i]);
      mx = std::max(mx, xv[b * per + i]);
    }
    if (mx > mn) {
      out.fwd_scale[b] = T(2) / (mx - mn);
      out.fwd_shift[b] = -mn * out.fwd_scale[b] - T(1);
      out.inv_scale[b] = (mx - mn) / T(2);
    } else {
      // Degenerate range maps to all zeros and back to the constant itself.
      out.fwd_scale[b] = T(0);
      out.fwd_shift[b] = T(0);
      out.inv_scale[b] = T(0);
    }
  }
  return out;
}

template <typename T>
RefinerNet<T>::RefinerNet(RefinerConfig config)
    : config_(std::move(config)),
      unet_("V/unet", UNetShape{2, 2, config_.encoder_filters, config_.decoder_filters,
                                config_.kernel, config_.leaky_slope}),
      lambda_("V/lambda", Shape{1}) {}

template <typename T>
typename RefinerNet<T>::Output RefinerNet<T>::forward(const Tensor<T>& x_rec, bool training) {
  const UnitScale<T> scale = unit_scale_coefficients(x_rec);
  Tensor<T> s = per_image_affine(x_rec, scale.fwd_scale, scale.fwd_shift);
  Tensor<T> x_v = unet_.forward(s, training);
  // x_hat = scale_back(s + lambda*x_v) written in residual form, which keeps
  // x_hat bit-identical to x_rec while lambda == 0.
  Tensor<T> scaled_v =
      per_image_affine(x_v, scale.inv_scale, std::vector<T>(scale.inv_scale.size(), T(0)));
  Tensor<T> x_hat = add(x_rec, gate(lambda_.tensor, scaled_v));
  return {x_hat, x_v};
}

template <typename T>
void RefinerNet<T>::init(RngStream& rng) {
  unet_.init(InitScheme::orthogonal(), rng);
  initialize(lambda_, InitScheme::scalar(0.0), rng);
}

template <typename T>
ParamRefs<T> RefinerNet<T>::parameters() {
  ParamRefs<T> out = unet_.parameters();
  out.push_back(&lambda_);
  return out;
}

template <typename T>
NamedBuffers<T> RefinerNet<T>::buffers() {
  return unet_.buffers();
}

// --- discriminator ----------------------------------------------------------------------

template <typename T>
PatchDiscriminator<T>::PatchDiscriminator(DiscriminatorConfig config)
    : config_(std::move(config)) {
  if (config_.filters.empty()) throw ConfigError("discriminator needs at least one conv layer");
  if (config_.kernel % 2 != 0) {
    throw ConfigError("discriminator kernel must be even for exact stride-2 halving");
  }
  const int pad = (config_.kernel - 2) / 2;
  int ch = 2;
  for (size_t i = 0; i < config_.filters.size(); ++i) {
    convs_.emplace_back("D/conv" + std::to_string(i), ch, config_.filters[i], config_.kernel,
                        config_.stride, pad);
    // The first conv runs un-normalized, as in the cited patch discriminator.
    if (config_.batch_norm && i > 0) {
      bns_.emplace_back("D/conv" + std::to_string(i) + "/bn", config_.filters[i]);
    }
    ch = config_.filters[i];
  }
  head_ = Conv2dLayer<T>("D/head", ch, 1, 3, 1, 1);
}

template <typename T>
typename PatchDiscriminator<T>::Output PatchDiscriminator<T>::forward(const Tensor<T>& x,
                                                                      bool training,
                                                                      RngStream* dropout_rng) {
  Output out;
  Tensor<T> h = x;
  const int first_dropout =
      static_cast<int>(convs_.size()) - std::min<int>(config_.dropout_layers, convs_.size());
  for (size_t i = 0; i < convs_.size(); ++i) {
    Tensor<T> z;
    try {
      z = convs_[i](h);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("discriminator input smaller than its receptive field: ") +
                        e.what());
    }
    if (config_.batch_norm && i > 0) z = bns_[i - 1](z, training);
    h = leaky_relu(z, config_.leaky_slope);
    out.features.push_back(h);
    if (training && config_.dropout_rate > 0 && static_cast<int>(i) >= first_dropout) {
      if (dropout_rng == nullptr) {
        throw ContractError("discriminator training forward needs a dropout rng stream");
      }
      h = channelwise_dropout(h, config_.dropout_rate, true, *dropout_rng);
    }
  }
  // Features stop before the head: matching the classifier output itself
  // would hand the generator a direct fooling objective.
  Tensor<T> logits = head_(h);
  out.patch_map = sigmoid(logits);

  const size_t batch = static_cast<size_t>(out.patch_map.dim(0));
  const size_t per = out.patch_map.numel() / batch;
  auto pv = out.patch_map.data();
  out.mean_prob.resize(batch);
  for (size_t b = 0; b < batch; ++b) {
    T acc = 0;
    for (size_t i = 0; i < per; ++i) acc += pv[b * per + i];
    out.mean_prob[b] = acc / static_cast<T>(per);
  }
  return out;
}

template <typename T>
void PatchDiscriminator<T>::init(RngStream& rng) {
  for (auto* p : parameters()) {
    if (p->tensor.shape().size() == 4) {
      initialize(*p, InitScheme::gaussian(0.0, 0.02), rng);
    } else if (p->name.ends_with("/gamma")) {
      initialize(*p, InitScheme::scalar(1.0), rng);
    } else {
      initialize(*p, InitScheme::zeros(), rng);
    }
  }
  for (auto& bn : bns_) {
    std::fill(bn.running_mean.data().begin(), bn.running_mean.data().end(), T(0));
    std::fill(bn.running_var.data().begin(), bn.running_var.data().end(), T(1));
  }
}

template <typename T>
ParamRefs<T> PatchDiscriminator<T>::parameters() {
  ParamRefs<T> out;
  for (auto& conv : convs_) conv.collect(out);
  for (auto& bn : bns_) bn.collect(out);
  head_.collect(out);
  return out;
}

template <typename T>
NamedBuffers<T> PatchDiscriminator<T>::buffers() {
  NamedBuffers<T> out;
  for (auto& bn : bns_) bn.collect_buffers(out);
  return out;
}

// --- feature extractor ----------------------------------------------------------------------

template <typename T>
FeatureExtractor<T>::FeatureExtractor(FeatureExtractorConfig config) : config_(std::move(config)) {
  if (config_.widths.empty()) throw ConfigError("feature extractor needs at least one layer");
  if (config_.kernel % 2 != 0) {
    throw ConfigError("feature extractor kernel must be even for exact stride-2 halving");
  }
  const int pad = (config_.kernel - 2) / 2;
  int ch = config_.in_channels;
  for (size_t i = 0; i < config_.widths.size(); ++i) {
    convs_.emplace_back("F/conv" + std::to_string(i), ch, config_.widths[i], config_.kernel,
                        config_.stride, pad);
    ch = config_.widths[i];
  }
  RngStream rng(config_.seed);
  for (auto* p : parameters()) {
    const bool is_weight = p->tensor.shape().size() == 4;
    initialize(*p, is_weight ? InitScheme::orthogonal() : InitScheme::zeros(), rng);
  }
  if (config_.source != "seeded-random") {
    const std::filesystem::path dir(config_.source);
    const auto manifest = load_manifest(dir);
    if (manifest.kind != "extractor") {
      throw IoError("feature extractor weights at " + dir.string() + " have kind '" +
                    manifest.kind + "', expected 'extractor'");
    }
    load_checkpoint_values<T>(dir, parameters());
  }
  for (auto* p : parameters()) p->tensor.set_requires_grad(false);
}

template <typename T>
Tensor<T> FeatureExtractor<T>::forward(const Tensor<T>& x2ch) const {
  Tensor<T> h = complex_magnitude(x2ch);
  h = replicate_channels(h, config_.in_channels);
  for (const auto& conv : convs_) {
    h = conv(h);
    h = leaky_relu(h, config_.leaky_slope);
  }
  return h;
}

template <typename T>
ParamRefs<T> FeatureExtractor<T>::parameters() {
  ParamRefs<T> out;
  for (auto& conv : convs_) conv.collect(out);
  return out;
}

// --- segmenter --------------------------------------------------------------------------------

template <typename T>
SegmenterNet<T>::SegmenterNet(SegmenterConfig config)
    : config_(std::move(config)),
      unet_("S/unet", UNetShape{1, 1, config_.encoder_filters, config_.decoder_filters,
                                config_.kernel, config_.leaky_slope}) {}

template <typename T>
Tensor<T> SegmenterNet<T>::forward(const Tensor<T>& magnitude, bool training) {
  return sigmoid(unet_.forward(magnitude, training));
}

template <typename T>
void SegmenterNet<T>::init(RngStream& rng) {
  unet_.init(InitScheme::orthogonal(), rng);
}

template <typename T>
ParamRefs<T> SegmenterNet<T>::parameters() {
  return unet_.parameters();
}

template <typename T>
NamedBuffers<T> SegmenterNet<T>::buffers() {
  return unet_.buffers();
}

// --- single-image wrappers -----------------------------------------------------------------------

template <typename T>
ComplexImage reconstruct(const ComplexImage& x_u, const KSpaceSample& sample,
                         const CascadeNet<T>& net) {
  NoGradScope<T> eval;
  Tensor<T> x = image_to_tensor<T>(x_u);
  auto batch = KSpaceBatch<T>::from_samples({&sample}, net.config().dc_soft_lambda);
  Tensor<T> y = net.forward(x, batch);
  return image_from_tensor(y, 0, x_u.intensity_scale);
}

template <typename T>
std::pair<ComplexImage, Tensor<T>> refine(const ComplexImage& x_rec, RefinerNet<T>& net) {
  NoGradScope<T> eval;
  Tensor<T> x = image_to_tensor<T>(x_rec);
  auto out = net.forward(x, false);
  return {image_from_tensor(out.x_hat, 0, x_rec.intensity_scale), out.x_v};
}

template <typename T>
std::vector<double> segment(const std::vector<double>& magnitude, int h, int w,
                            SegmenterNet<T>& net) {
  if (magnitude.size() != static_cast<size_t>(h) * w) {
    throw ShapeError("segment: magnitude buffer does not match extent");
  }
  NoGradScope<T> eval;
  Tensor<T> x({1, 1, h, w});
  auto xv = x.data();
  for (size_t i = 0; i < magnitude.size(); ++i) xv[i] = static_cast<T>(magnitude[i]);
  Tensor<T> probs = net.forward(x, false);
  std::vector<double> out(probs.numel());
  auto pv = probs.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(pv[i]);
  return out;
}

std::vector<uint8_t> binarize(const std::vector<double>& probabilities, double threshold) {
  std::vector<uint8_t> out(probabilities.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = probabilities[i] >= threshold ? 1 : 0;
  return out;
}

#define CSMRI_INSTANTIATE_NETWORKS(T)                                                  \
  template struct Conv2dLayer<T>;                                                      \
  template struct ConvTranspose2dLayer<T>;                                             \
  template struct BatchNorm2dLayer<T>;                                                 \
  template class CascadeNet<T>;                                                        \
  template class UNet<T>;                                                              \
  template class RefinerNet<T>;                                                        \
  template UnitScale<T> unit_scale_coefficients(const Tensor<T>&);                     \
  template class PatchDiscriminator<T>;                                                \
  template class FeatureExtractor<T>;                                                  \
  template class SegmenterNet<T>;                                                      \
  template ComplexImage reconstruct(const ComplexImage&, const KSpaceSample&,          \
                                    const CascadeNet<T>&);                             \
  template std::pair<ComplexImage, Tensor<T>> refine(const ComplexImage&,              \
                                                     RefinerNet<T>&);                  \
  template std::vector<double> segment(const std::vector<double>&, int, int,           \
                                       SegmenterNet<T>&);
CSMRI_INSTANTIATE_NETWORKS(float)
CSMRI_INSTANTIATE_NETWORKS(double)
#undef CSMRI_INSTANTIATE_NETWORKS

}  // namespace csmri
