#include "csmri/kspace.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "csmri/autodiff.hpp"
#include "csmri/fft.hpp"
#include "csmri/io.hpp"

namespace csmri {
namespace {

using Json = nlohmann::ordered_json;

std::vector<std::complex<double>> to_complex(const ComplexImage& img) {
  std::vector<std::complex<double>> buf(img.numel());
  for (size_t i = 0; i < buf.size(); ++i) buf[i] = {img.real[i], img.imag[i]};
  return buf;
}

ComplexImage from_complex(const std::vector<std::complex<double>>& buf, int h, int w,
                          double scale) {
  ComplexImage out(h, w);
  out.intensity_scale = scale;
  for (size_t i = 0; i < buf.size(); ++i) {
    out.real[i] = buf[i].real();
    out.imag[i] = buf[i].imag();
  }
  return out;
}

void check_same_extent(const ComplexImage& a, int h, int w, const char* what) {
  if (a.height != h || a.width != w) {
    throw ShapeError(std::string(what) + ": extent " + std::to_string(a.height) + "x" +
                     std::to_string(a.width) + " does not match " + std::to_string(h) + "x" +
                     std::to_string(w));
  }
}

}  // namespace

std::vector<double> magnitude(const ComplexImage& img) {
  std::vector<double> out(img.numel());
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = std::hypot(img.real[i], img.imag[i]);
  }
  return out;
}

size_t SamplingMask::kept_count() const {
  size_t n = 0;
  for (auto k : kept) n += k != 0;
  return n;
}

ComplexImage fft2_centered(const ComplexImage& img) {
  auto buf = to_complex(img);
  fft2_centered_inplace(buf.data(), img.height, img.width);
  return from_complex(buf, img.height, img.width, img.intensity_scale);
}

ComplexImage ifft2_centered(const ComplexImage& ksp) {
  auto buf = to_complex(ksp);
  ifft2_centered_inplace(buf.data(), ksp.height, ksp.width);
  return from_complex(buf, ksp.height, ksp.width, ksp.intensity_scale);
}

SamplingMask generate_mask(int width, int height, double ratio, RngStream& rng) {
  if (ratio <= 0.0 || ratio > 1.0) {
    throw ConfigError("sampling ratio must lie in (0, 1], got " + std::to_string(ratio));
  }
  const int budget = static_cast<int>(std::floor(ratio * width));
  if (budget < 1) throw ConfigError("sampling budget floor(ratio*width) must be >= 1");

  SamplingMask mask;
  mask.width = width;
  mask.height = height;
  mask.kept.assign(static_cast<size_t>(width), 0);
  mask.sampling_ratio = static_cast<double>(budget) / width;

  const int center = width / 2;  // zero-frequency column in the centered convention
  auto distance = [center](int col) { return std::abs(col - center); };

  // Always-kept low-frequency band.
  const int band = std::min(budget, std::max(4, width / 32));
  std::vector<int> order(width);
  for (int c = 0; c < width; ++c) order[c] = c;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return std::make_pair(distance(a), a) < std::make_pair(distance(b), b);
  });
  for (int i = 0; i < band; ++i) mask.kept[order[i]] = 1;

  // Remaining draws without replacement, Gaussian-weighted toward the center.
  const double sigma = static_cast<double>(width) / 6.0;
  std::vector<double> weight(width);
  for (int c = 0; c < width; ++c) {
    const double d = distance(c);
    weight[c] = mask.kept[c] ? 0.0 : std::exp(-d * d / (2.0 * sigma * sigma));
  }
  for (int drawn = band; drawn < budget; ++drawn) {
    double total = 0.0;
    for (auto w : weight) total += w;
    double u = rng.uniform() * total;
    int pick = -1;
    for (int c = 0; c < width; ++c) {
      if (weight[c] <= 0.0) continue;
      u -= weight[c];
      pick = c;
      if (u <= 0.0) break;
    }
    mask.kept[pick] = 1;
    weight[pick] = 0.0;
  }
  return mask;
}

KSpaceSample acquire(const ComplexImage& x, const SamplingMask& mask, double noise_std,
                     RngStream& rng) {
  check_same_extent(x, mask.height, mask.width, "acquire");
  if (noise_std < 0.0) throw ConfigError("noise_std must be >= 0");
  KSpaceSample sample;
  sample.mask = mask;
  sample.noise_std = noise_std;
  sample.measurements = fft2_centered(x);
  const double component_std = noise_std / std::sqrt(2.0);
  for (int r = 0; r < mask.height; ++r) {
    for (int c = 0; c < mask.width; ++c) {
      const size_t i = static_cast<size_t>(r) * mask.width + c;
      if (!mask.is_kept(c)) {
        sample.measurements.real[i] = 0.0;
        sample.measurements.imag[i] = 0.0;
      } else if (noise_std > 0.0) {
        sample.measurements.real[i] += rng.normal(0.0, component_std);
        sample.measurements.imag[i] += rng.normal(0.0, component_std);
      }
    }
  }
  return sample;
}

ComplexImage zero_fill(const KSpaceSample& sample) {
  return ifft2_centered(sample.measurements);
}

ComplexImage data_consistency(const ComplexImage& x_net, const KSpaceSample& sample,
                              std::optional<double> soft_lambda) {
  check_same_extent(x_net, sample.mask.height, sample.mask.width, "data_consistency");
  if (sample.mask.kept_count() == 0) return x_net;  // nothing to replace
  ComplexImage k = fft2_centered(x_net);
  for (int r = 0; r < k.height; ++r) {
    for (int c = 0; c < k.width; ++c) {
      if (!sample.mask.is_kept(c)) continue;
      const size_t i = static_cast<size_t>(r) * k.width + c;
      if (soft_lambda) {
        const double l = *soft_lambda;
        k.real[i] = (k.real[i] + l * sample.measurements.real[i]) / (1.0 + l);
        k.imag[i] = (k.imag[i] + l * sample.measurements.imag[i]) / (1.0 + l);
      } else {
        k.real[i] = sample.measurements.real[i];
        k.imag[i] = sample.measurements.imag[i];
      }
    }
  }
  ComplexImage out = ifft2_centered(k);
  out.intensity_scale = x_net.intensity_scale;
  return out;
}

// --- tensor bridge ------------------------------------------------------------

template <typename T>
Tensor<T> images_to_tensor(const std::vector<const ComplexImage*>& images) {
  if (images.empty()) throw ContractError("images_to_tensor: empty batch");
  const int h = images[0]->height, w = images[0]->width;
  const size_t plane = static_cast<size_t>(h) * w;
  Tensor<T> out({static_cast<int64_t>(images.size()), 2, h, w});
  auto ov = out.data();
  for (size_t b = 0; b < images.size(); ++b) {
    check_same_extent(*images[b], h, w, "images_to_tensor");
    const auto& img = *images[b];
    T* re = ov.data() + b * 2 * plane;
    T* im = re + plane;
    for (size_t i = 0; i < plane; ++i) {
      re[i] = static_cast<T>(img.real[i]);
      im[i] = static_cast<T>(img.imag[i]);
    }
  }
  return out;
}

template <typename T>
Tensor<T> image_to_tensor(const ComplexImage& image) {
  return images_to_tensor<T>({&image});
}

template <typename T>
ComplexImage image_from_tensor(const Tensor<T>& t, int batch_index, double intensity_scale) {
  if (t.shape().size() != 4 || t.dim(1) != 2) {
    throw ShapeError("image_from_tensor expects [B,2,H,W], got " + shape_str(t.shape()));
  }
  const int h = static_cast<int>(t.dim(2)), w = static_cast<int>(t.dim(3));
  const size_t plane = static_cast<size_t>(h) * w;
  ComplexImage out(h, w);
  out.intensity_scale = intensity_scale;
  auto tv = t.data();
  const T* re = tv.data() + static_cast<size_t>(batch_index) * 2 * plane;
  const T* im = re + plane;
  for (size_t i = 0; i < plane; ++i) {
    out.real[i] = static_cast<double>(re[i]);
    out.imag[i] = static_cast<double>(im[i]);
  }
  return out;
}

template <typename T>
KSpaceBatch<T> KSpaceBatch<T>::from_samples(const std::vector<const KSpaceSample*>& samples,
                                            std::optional<double> soft_lambda) {
  if (samples.empty()) throw ContractError("KSpaceBatch: empty batch");
  KSpaceBatch<T> batch;
  batch.height = samples[0]->mask.height;
  batch.width = samples[0]->mask.width;
  batch.soft_lambda = soft_lambda;
  for (const auto* s : samples) {
    if (s->mask.height != batch.height || s->mask.width != batch.width) {
      throw ShapeError("KSpaceBatch: inconsistent sample extents");
    }
    batch.kept_columns.push_back(s->mask.kept);
    std::vector<std::complex<T>> y(s->measurements.numel());
    for (size_t i = 0; i < y.size(); ++i) {
      y[i] = {static_cast<T>(s->measurements.real[i]), static_cast<T>(s->measurements.imag[i])};
    }
    batch.measurements.push_back(std::move(y));
  }
  return batch;
}

namespace {

// Applies F^H (P k-space edit) F to one 2-channel image plane pair.
// keep_scale: factor applied at sampled locations to the image's own
// frequencies (0 for hard replacement); y_scale: factor on the measurements.
template <typename T>
void dc_apply(const T* re_in, const T* im_in, T* re_out, T* im_out, int h, int w,
              const std::vector<uint8_t>& kept, const std::complex<T>* y, T keep_scale,
              T y_scale, std::vector<std::complex<T>>& buf) {
  const size_t plane = static_cast<size_t>(h) * w;
  buf.resize(plane);
  for (size_t i = 0; i < plane; ++i) buf[i] = {re_in[i], im_in[i]};
  fft2_centered_inplace(buf.data(), h, w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (!kept[static_cast<size_t>(c)]) continue;
      const size_t i = static_cast<size_t>(r) * w + c;
      buf[i] = buf[i] * keep_scale + (y ? y[i] * y_scale : std::complex<T>(0));
    }
  }
  ifft2_centered_inplace(buf.data(), h, w);
  for (size_t i = 0; i < plane; ++i) {
    re_out[i] = buf[i].real();
    im_out[i] = buf[i].imag();
  }
}

}  // namespace

template <typename T>
Tensor<T> dc_layer(const Tensor<T>& x, const KSpaceBatch<T>& batch) {
  if (x.shape().size() != 4 || x.dim(1) != 2) {
    throw ShapeError("dc_layer expects [B,2,H,W], got " + shape_str(x.shape()));
  }
  const int B = static_cast<int>(x.dim(0));
  const int h = static_cast<int>(x.dim(2)), w = static_cast<int>(x.dim(3));
  if (static_cast<size_t>(B) != batch.batch() || h != batch.height || w != batch.width) {
    throw ShapeError("dc_layer: tensor extents do not match the k-space batch");
  }
  const size_t plane = static_cast<size_t>(h) * w;
  bool any_kept = false;
  for (const auto& cols : batch.kept_columns) {
    for (auto k : cols) any_kept |= k != 0;
  }
  if (!any_kept) {
    // Identity, recorded as a plain gradient pass-through.
    Tensor<T> out(x.shape());
    std::copy(x.data().begin(), x.data().end(), out.data().begin());
    if (should_record<T>({&x})) {
      out.set_requires_grad(true);
      Tape<T>::current()->record({x}, out, [](typename Tape<T>::Record& rec) {
        accumulate_grad(rec.inputs[0], rec.output.grad());
      });
    }
    return out;
  }
  // Hard replacement zeroes the image's own sampled frequencies; the soft
  // variant blends them with weight 1/(1+lambda).
  T keep_scale = 0, y_scale = 1;
  if (batch.soft_lambda) {
    keep_scale = static_cast<T>(1.0 / (1.0 + *batch.soft_lambda));
    y_scale = static_cast<T>(*batch.soft_lambda / (1.0 + *batch.soft_lambda));
  }

  Tensor<T> out(x.shape());
  std::vector<std::complex<T>> buf;
  auto xv = x.data();
  auto ov = out.data();
  for (int b = 0; b < B; ++b) {
    const T* re = xv.data() + static_cast<size_t>(b) * 2 * plane;
    T* ore = ov.data() + static_cast<size_t>(b) * 2 * plane;
    dc_apply<T>(re, re + plane, ore, ore + plane, h, w, batch.kept_columns[b],
                batch.measurements[b].data(), keep_scale, y_scale, buf);
  }

  if (should_record<T>({&x})) {
    out.set_requires_grad(true);
    Tape<T>::current()->record(
        {x}, out,
        [kept = batch.kept_columns, B, h, w, plane, keep_scale](typename Tape<T>::Record& rec) {
          // The map is F^H diag(s) F + const with s real, hence self-adjoint:
          // reuse the forward kernel on the gradient with y = 0.
          auto g = rec.output.grad();
          std::vector<std::complex<T>> buf;
          std::vector<T> gx(2 * plane);
          auto gin = rec.inputs[0].ensure_grad();
          for (int b = 0; b < B; ++b) {
            const T* gre = g.data() + static_cast<size_t>(b) * 2 * plane;
            dc_apply<T>(gre, gre + plane, gx.data(), gx.data() + plane, h, w, kept[b], nullptr,
                        keep_scale, T(0), buf);
            for (size_t i = 0; i < 2 * plane; ++i) {
              gin[static_cast<size_t>(b) * 2 * plane + i] += gx[i];
            }
          }
        });
  }
  return out;
}

// --- file formats ------------------------------------------------------------

void save_mask(const SamplingMask& mask, const std::filesystem::path& dir, uint64_t seed) {
  std::filesystem::create_directories(dir);
  Json manifest;
  manifest["width"] = mask.width;
  manifest["height"] = mask.height;
  manifest["ratio"] = mask.sampling_ratio;
  manifest["seed"] = seed;
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  write_raw(dir / "columns.bin", mask.kept);
}

SamplingMask load_mask(const std::filesystem::path& dir) {
  Json manifest;
  try {
    manifest = Json::parse(read_text(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("mask manifest " + (dir / "manifest.json").string() + ": " + e.what());
  }
  SamplingMask mask;
  mask.width = manifest.at("width").get<int>();
  mask.height = manifest.at("height").get<int>();
  mask.sampling_ratio = manifest.at("ratio").get<double>();
  mask.kept = read_raw<uint8_t>(dir / "columns.bin", static_cast<size_t>(mask.width));
  return mask;
}

void save_complex_image(const ComplexImage& img, const std::filesystem::path& raw_path) {
  std::vector<float> interleaved(img.numel() * 2);
  for (size_t i = 0; i < img.numel(); ++i) {
    interleaved[2 * i] = static_cast<float>(img.real[i]);
    interleaved[2 * i + 1] = static_cast<float>(img.imag[i]);
  }
  write_raw(raw_path, interleaved);
  Json sidecar;
  sidecar["height"] = img.height;
  sidecar["width"] = img.width;
  sidecar["intensity_scale"] = img.intensity_scale;
  sidecar["dtype"] = "complex64";
  std::filesystem::path meta = raw_path;
  meta.replace_extension(".json");
  write_text(meta, sidecar.dump(2) + "\n");
}

ComplexImage load_complex_image(const std::filesystem::path& raw_path) {
  std::filesystem::path meta = raw_path;
  meta.replace_extension(".json");
  Json sidecar;
  try {
    sidecar = Json::parse(read_text(meta));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("image sidecar " + meta.string() + ": " + e.what());
  }
  ComplexImage img(sidecar.at("height").get<int>(), sidecar.at("width").get<int>());
  img.intensity_scale = sidecar.at("intensity_scale").get<double>();
  auto interleaved = read_raw<float>(raw_path, img.numel() * 2);
  for (size_t i = 0; i < img.numel(); ++i) {
    img.real[i] = interleaved[2 * i];
    img.imag[i] = interleaved[2 * i + 1];
  }
  return img;
}

#define CSMRI_INSTANTIATE_KSPACE(T)                                                  \
  template Tensor<T> images_to_tensor<T>(const std::vector<const ComplexImage*>&);   \
  template Tensor<T> image_to_tensor<T>(const ComplexImage&);                        \
  template ComplexImage image_from_tensor<T>(const Tensor<T>&, int, double);         \
  template struct KSpaceBatch<T>;                                                    \
  template Tensor<T> dc_layer<T>(const Tensor<T>&, const KSpaceBatch<T>&);
CSMRI_INSTANTIATE_KSPACE(float)
CSMRI_INSTANTIATE_KSPACE(double)
#undef CSMRI_INSTANTIATE_KSPACE

}  // namespace csmri
