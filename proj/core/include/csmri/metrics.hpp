#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "csmri/networks.hpp"

namespace csmri {

// 10*log10(peak^2 / mse) in dB; +infinity when the images are identical.
double psnr(const std::vector<double>& x, const std::vector<double>& x_hat, double peak);

struct SsimParams {
  enum class Window { kGaussian11, kBox8NonOverlapping };
  Window window = Window::kGaussian11;
  double sigma = 1.5;  // Gaussian window only
  double k1 = 0.01;
  double k2 = 0.03;
  double level = 1.0;  // dynamic range L
};

double ssim(int h, int w, const std::vector<double>& x, const std::vector<double>& x_hat,
            const SsimParams& params = {});

// 2|a n b| / (|a| + |b|); defined as 1 when both masks are empty.
double dice(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b);

struct SisResult {
  double sis = 0.0;
  double mean_dice_recon = 0.0;
  double mean_dice_ground_truth = 0.0;
  size_t cohort_size = 0;  // images with at least one foreground pixel
};

// Mean Dice of the segmenter on reconstructions, normalized by its mean Dice
// on the ground-truth images (ratio of cohort means). Images without any
// foreground label pixel are excluded.
SisResult sis(const std::vector<const ComplexImage*>& reconstructions,
              const std::vector<const ComplexImage*>& ground_truth,
              const std::vector<const std::vector<uint8_t>*>& labels,
              SegmenterNet<float>& segmenter);

// The cohort aggregation rule behind sis(): mean(dice_recon) / mean(dice_gt).
double sis_from_cohort(const std::vector<double>& dice_recon,
                       const std::vector<double>& dice_ground_truth);

struct MetricsRecord {
  std::string id;
  double psnr_db = 0.0;
  double ssim = 0.0;
  std::optional<double> dice;
};

struct MetricAggregate {
  double mean = 0.0;
  double std_dev = 0.0;  // population
};

struct MetricsReport {
  std::vector<MetricsRecord> records;
  MetricAggregate psnr_db, ssim;
  std::optional<MetricAggregate> dice;
  std::optional<double> sis;
  nlohmann::ordered_json provenance = nlohmann::ordered_json::object();

  nlohmann::ordered_json to_json() const;
  // Fixed column order: id, psnr_db, ssim, dice.
  std::string to_csv() const;
  static MetricsReport from_json(const nlohmann::ordered_json& j);
};

MetricsReport aggregate_report(std::vector<MetricsRecord> records, std::optional<double> sis,
                               nlohmann::ordered_json provenance);

}  // namespace csmri
