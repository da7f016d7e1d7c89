#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "csmri/kspace.hpp"
#include "csmri/rng.hpp"

namespace csmri {

// Synthetic complex-valued 2D phantoms: smooth background, a handful of
// random ellipses, one elevated-contrast ROI ellipse whose exact raster is
// the segmentation label, and a low-order random phase field.
struct PhantomSpec {
  int image_size = 64;
  int train_count = 600;
  int val_count = 150;
  int test_count = 150;
  int min_ellipses = 3;
  int max_ellipses = 8;
  double roi_contrast = 0.55;
  double roi_fraction = 0.9;      // fraction of images with a nonempty ROI
  double phase_smoothness = 1.0;  // scale of the phase field coefficients
  double intensity_scale = 1.0;
  uint64_t seed = 1234;
};

struct LabeledImage {
  ComplexImage image;
  std::vector<uint8_t> label;  // H*W, 1 inside the ROI ellipse
  std::string id;

  bool has_roi() const {
    for (auto v : label) {
      if (v) return true;
    }
    return false;
  }
};

struct PhantomDataset {
  PhantomSpec spec;
  std::vector<LabeledImage> train, val, test;
};

// Pure function of the spec; values are quantized to the float32 storage
// precision so save/load round-trips are bitwise.
PhantomDataset generate_dataset(const PhantomSpec& spec);

void save_dataset(const PhantomDataset& dataset, const std::filesystem::path& dir);
PhantomDataset load_dataset(const std::filesystem::path& dir);
uint64_t dataset_hash(const PhantomDataset& dataset);

void to_json(nlohmann::ordered_json& j, const PhantomSpec& s);
void from_json(const nlohmann::ordered_json& j, PhantomSpec& s);

// Minibatch index schedule; the order for an epoch is a pure function of
// (seed, epoch), so mid-epoch resumption just recomputes it.
class BatchIterator {
 public:
  BatchIterator(size_t dataset_size, size_t batch_size, uint64_t seed, bool shuffled = true);

  size_t batches_per_epoch() const;
  std::vector<size_t> batch(uint64_t epoch, size_t batch_index) const;

 private:
  size_t dataset_size_, batch_size_;
  uint64_t seed_;
  bool shuffled_;
};

}  // namespace csmri
