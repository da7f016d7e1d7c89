#include "csmri/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "csmri/io.hpp"

namespace csmri {
namespace {

using Json = nlohmann::ordered_json;

struct Ellipse {
  double cx, cy, ax, ay, angle;

  bool contains(double px, double py) const {
    const double dx = px - cx, dy = py - cy;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (dx * c + dy * s) / ax;
    const double v = (-dx * s + dy * c) / ay;
    return u * u + v * v <= 1.0;
  }
};

Ellipse random_ellipse(RngStream& rng, int size, double center_margin, double ax_lo,
                       double ax_hi) {
  Ellipse e;
  e.cx = (center_margin + rng.uniform() * (1.0 - 2.0 * center_margin)) * size;
  e.cy = (center_margin + rng.uniform() * (1.0 - 2.0 * center_margin)) * size;
  e.ax = (ax_lo + rng.uniform() * (ax_hi - ax_lo)) * size;
  e.ay = (ax_lo + rng.uniform() * (ax_hi - ax_lo)) * size;
  e.angle = rng.uniform() * std::numbers::pi;
  return e;
}

// Bresenham-style quota: image `index` carries an ROI iff the running count
// of floor((i+1)*f) increments, giving floor(n*f) ROI images out of n.
bool roi_present(size_t index, double fraction) {
  const auto before = static_cast<uint64_t>(std::floor(static_cast<double>(index) * fraction));
  const auto after =
      static_cast<uint64_t>(std::floor(static_cast<double>(index + 1) * fraction));
  return after > before;
}

LabeledImage make_phantom(const PhantomSpec& spec, size_t global_index) {
  RngStream rng = RngSet::derive(spec.seed, "phantom", global_index);
  const int n = spec.image_size;
  LabeledImage out;
  out.image = ComplexImage(n, n);
  out.image.intensity_scale = spec.intensity_scale;
  out.label.assign(static_cast<size_t>(n) * n, 0);

  // Smooth background: a few low-frequency cosine modes over a positive bias.
  struct Mode {
    double amp, fx, fy, phase;
  };
  std::vector<Mode> modes(3);
  for (auto& m : modes) {
    m.amp = 0.08 + 0.10 * rng.uniform();
    m.fx = (rng.uniform() * 2.0 - 1.0) * 1.5;
    m.fy = (rng.uniform() * 2.0 - 1.0) * 1.5;
    m.phase = rng.uniform() * 2.0 * std::numbers::pi;
  }

  const int ellipse_count =
      spec.min_ellipses +
      static_cast<int>(rng.uniform_int(static_cast<uint64_t>(spec.max_ellipses -
                                                             spec.min_ellipses + 1)));
  // Background structures stay below the ROI's elevated contrast so the ROI
  // is identifiable from intensity alone, as its role requires.
  std::vector<std::pair<Ellipse, double>> ellipses;
  for (int i = 0; i < ellipse_count; ++i) {
    ellipses.emplace_back(random_ellipse(rng, n, 0.12, 0.06, 0.22),
                          -0.35 + rng.uniform() * 0.60);
  }

  const bool with_roi = roi_present(global_index, spec.roi_fraction);
  Ellipse roi{};
  if (with_roi) roi = random_ellipse(rng, n, 0.28, 0.08, 0.16);

  // Low-order phase field keeps the imaginary channel genuinely occupied.
  double pc[6];
  for (auto& c : pc) c = (rng.uniform() * 2.0 - 1.0) * 0.5 * spec.phase_smoothness;

  std::vector<double> mag(static_cast<size_t>(n) * n);
  double max_mag = 0.0;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const double px = c + 0.5, py = r + 0.5;  // center-of-pixel rasterization
      const double xn = px / n, yn = py / n;
      double v = 0.42;
      for (const auto& m : modes) {
        v += m.amp * std::cos(2.0 * std::numbers::pi * (m.fx * xn + m.fy * yn) + m.phase);
      }
      for (const auto& [e, intensity] : ellipses) {
        if (e.contains(px, py)) v += intensity;
      }
      if (with_roi && roi.contains(px, py)) {
        v += spec.roi_contrast;
        out.label[static_cast<size_t>(r) * n + c] = 1;
      }
      v = std::max(v, 0.0);
      mag[static_cast<size_t>(r) * n + c] = v;
      max_mag = std::max(max_mag, v);
    }
  }

  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const size_t i = static_cast<size_t>(r) * n + c;
      const double xn = (c + 0.5) / n, yn = (r + 0.5) / n;
      const double phase =
          pc[0] + pc[1] * xn + pc[2] * yn + pc[3] * xn * yn +
          pc[4] * std::sin(2.0 * std::numbers::pi * xn) +
          pc[5] * std::sin(2.0 * std::numbers::pi * yn);
      const double m = mag[i] / max_mag * spec.intensity_scale;
      // Quantize to the float32 storage precision at generation time.
      out.image.real[i] = static_cast<float>(m * std::cos(phase));
      out.image.imag[i] = static_cast<float>(m * std::sin(phase));
    }
  }
  return out;
}

std::string image_id(size_t global_index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "phantom_%06zu", global_index);
  return buf;
}

}  // namespace

PhantomDataset generate_dataset(const PhantomSpec& spec) {
  if (spec.train_count <= 0 || spec.val_count <= 0 || spec.test_count <= 0) {
    throw ConfigError("phantom split counts must be positive");
  }
  if (spec.min_ellipses < 0 || spec.max_ellipses < spec.min_ellipses) {
    throw ConfigError("phantom ellipse count range is invalid");
  }
  PhantomDataset ds;
  ds.spec = spec;
  size_t index = 0;
  auto fill = [&](std::vector<LabeledImage>& split, int count) {
    split.reserve(count);
    for (int i = 0; i < count; ++i, ++index) {
      LabeledImage img = make_phantom(spec, index);
      img.id = image_id(index);
      split.push_back(std::move(img));
    }
  };
  fill(ds.train, spec.train_count);
  fill(ds.val, spec.val_count);
  fill(ds.test, spec.test_count);
  return ds;
}

void to_json(Json& j, const PhantomSpec& s) {
  j = Json{{"image_size", s.image_size},
           {"train_count", s.train_count},
           {"val_count", s.val_count},
           {"test_count", s.test_count},
           {"min_ellipses", s.min_ellipses},
           {"max_ellipses", s.max_ellipses},
           {"roi_contrast", s.roi_contrast},
           {"roi_fraction", s.roi_fraction},
           {"phase_smoothness", s.phase_smoothness},
           {"intensity_scale", s.intensity_scale},
           {"seed", s.seed}};
}

void from_json(const Json& j, PhantomSpec& s) {
  s.image_size = j.at("image_size").get<int>();
  s.train_count = j.at("train_count").get<int>();
  s.val_count = j.at("val_count").get<int>();
  s.test_count = j.at("test_count").get<int>();
  s.min_ellipses = j.at("min_ellipses").get<int>();
  s.max_ellipses = j.at("max_ellipses").get<int>();
  s.roi_contrast = j.at("roi_contrast").get<double>();
  s.roi_fraction = j.at("roi_fraction").get<double>();
  s.phase_smoothness = j.at("phase_smoothness").get<double>();
  s.intensity_scale = j.at("intensity_scale").get<double>();
  s.seed = j.at("seed").get<uint64_t>();
}

namespace {

std::vector<float> interleave(const ComplexImage& img) {
  std::vector<float> buf(img.numel() * 2);
  for (size_t i = 0; i < img.numel(); ++i) {
    buf[2 * i] = static_cast<float>(img.real[i]);
    buf[2 * i + 1] = static_cast<float>(img.imag[i]);
  }
  return buf;
}

}  // namespace

void save_dataset(const PhantomDataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "labels");

  Json manifest;
  manifest["spec"] = dataset.spec;
  Json splits = Json::object();
  Json images = Json::object();
  uint64_t ds_hash = 0xcbf29ce484222325ull;
  auto dump_split = [&](const char* name, const std::vector<LabeledImage>& split) {
    Json ids = Json::array();
    for (const auto& item : split) {
      ids.push_back(item.id);
      const auto raw = interleave(item.image);
      const auto img_file = "images/" + item.id + ".bin";
      const auto label_file = "labels/" + item.id + ".bin";
      write_raw(dir / img_file, raw);
      write_raw(dir / label_file, item.label);
      const uint64_t ih = fnv1a(raw.data(), raw.size() * sizeof(float));
      const uint64_t lh = fnv1a(item.label.data(), item.label.size());
      ds_hash = fnv1a(&ih, sizeof(ih), ds_hash);
      ds_hash = fnv1a(&lh, sizeof(lh), ds_hash);
      images[item.id] = Json{{"image", img_file},
                             {"label", label_file},
                             {"height", item.image.height},
                             {"width", item.image.width},
                             {"intensity_scale", item.image.intensity_scale},
                             {"image_hash", hex64(ih)},
                             {"label_hash", hex64(lh)}};
    }
    splits[name] = std::move(ids);
  };
  dump_split("train", dataset.train);
  dump_split("val", dataset.val);
  dump_split("test", dataset.test);
  manifest["splits"] = std::move(splits);
  manifest["images"] = std::move(images);
  manifest["dataset_hash"] = hex64(ds_hash);
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

PhantomDataset load_dataset(const std::filesystem::path& dir) {
  Json manifest;
  try {
    manifest = Json::parse(read_text(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("dataset manifest " + (dir / "manifest.json").string() + ": " + e.what());
  }
  PhantomDataset ds;
  ds.spec = manifest.at("spec").get<PhantomSpec>();

  auto load_split = [&](const char* name, std::vector<LabeledImage>& split) {
    for (const auto& id_json : manifest.at("splits").at(name)) {
      const auto id = id_json.get<std::string>();
      const auto& meta = manifest.at("images").at(id);
      const int h = meta.at("height").get<int>(), w = meta.at("width").get<int>();
      LabeledImage item;
      item.id = id;
      item.image = ComplexImage(h, w);
      item.image.intensity_scale = meta.at("intensity_scale").get<double>();
      const auto raw =
          read_raw<float>(dir / meta.at("image").get<std::string>(), item.image.numel() * 2);
      for (size_t i = 0; i < item.image.numel(); ++i) {
        item.image.real[i] = raw[2 * i];
        item.image.imag[i] = raw[2 * i + 1];
      }
      item.label = read_raw<uint8_t>(dir / meta.at("label").get<std::string>(),
                                     static_cast<size_t>(h) * w);
      split.push_back(std::move(item));
    }
  };
  load_split("train", ds.train);
  load_split("val", ds.val);
  load_split("test", ds.test);
  return ds;
}

uint64_t dataset_hash(const PhantomDataset& dataset) {
  uint64_t h = 0xcbf29ce484222325ull;
  auto eat = [&](const std::vector<LabeledImage>& split) {
    for (const auto& item : split) {
      const auto raw = interleave(item.image);
      const uint64_t ih = fnv1a(raw.data(), raw.size() * sizeof(float));
      const uint64_t lh = fnv1a(item.label.data(), item.label.size());
      h = fnv1a(&ih, sizeof(ih), h);
      h = fnv1a(&lh, sizeof(lh), h);
    }
  };
  eat(dataset.train);
  eat(dataset.val);
  eat(dataset.test);
  return h;
}

BatchIterator::BatchIterator(size_t dataset_size, size_t batch_size, uint64_t seed, bool shuffled)
    : dataset_size_(dataset_size), batch_size_(batch_size), seed_(seed), shuffled_(shuffled) {
  if (batch_size_ < 1) throw ConfigError("batch size must be >= 1");
  if (dataset_size_ < 1) throw ConfigError("dataset is empty");
}

size_t BatchIterator::batches_per_epoch() const {
  return (dataset_size_ + batch_size_ - 1) / batch_size_;  // short final batch kept
}

std::vector<size_t> BatchIterator::batch(uint64_t epoch, size_t batch_index) const {
  if (batch_index >= batches_per_epoch()) {
    throw ContractError("batch index out of range");
  }
  std::vector<size_t> order;
  if (shuffled_) {
    RngStream rng = RngSet::derive(seed_, "batch_order", epoch);
    order = rng.permutation(dataset_size_);
  } else {
    order.resize(dataset_size_);
    for (size_t i = 0; i < dataset_size_; ++i) order[i] = i;
  }
  const size_t begin = batch_index * batch_size_;
  const size_t end = std::min(begin + batch_size_, dataset_size_);
  return std::vector<size_t>(order.begin() + begin, order.begin() + end);
}

}  // namespace csmri
