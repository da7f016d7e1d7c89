#include "csmri/metrics.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace csmri {
namespace {

using Json = nlohmann::ordered_json;

// Separable Gaussian-weighted local moments over valid window positions.
struct LocalMoments {
  int out_h, out_w;
  std::vector<double> mu_x, mu_y, xx, yy, xy;
};

std::vector<double> gaussian_kernel(int radius, double sigma) {
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    total += k[i + radius];
  }
  for (auto& v : k) v /= total;
  return k;
}

std::vector<double> filter_rows(const std::vector<double>& img, int h, int w,
                                const std::vector<double>& k) {
  const int radius = static_cast<int>(k.size() / 2);
  const int out_w = w - 2 * radius;
  std::vector<double> out(static_cast<size_t>(h) * out_w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < out_w; ++c) {
      double acc = 0.0;
      for (size_t i = 0; i < k.size(); ++i) acc += k[i] * img[static_cast<size_t>(r) * w + c + i];
      out[static_cast<size_t>(r) * out_w + c] = acc;
    }
  }
  return out;
}

std::vector<double> filter_cols(const std::vector<double>& img, int h, int w,
                                const std::vector<double>& k) {
  const int radius = static_cast<int>(k.size() / 2);
  const int out_h = h - 2 * radius;
  std::vector<double> out(static_cast<size_t>(out_h) * w);
  for (int r = 0; r < out_h; ++r) {
    for (int c = 0; c < w; ++c) {
      double acc = 0.0;
      for (size_t i = 0; i < k.size(); ++i) acc += k[i] * img[(r + i) * static_cast<size_t>(w) + c];
      out[static_cast<size_t>(r) * w + c] = acc;
    }
  }
  return out;
}

std::vector<double> gaussian_filter(const std::vector<double>& img, int h, int w,
                                    const std::vector<double>& k) {
  return filter_cols(filter_rows(img, h, w, k), h, w - 2 * static_cast<int>(k.size() / 2), k);
}

double ssim_from_moments(double mx, double my, double sxx, double syy, double sxy, double c1,
                         double c2) {
  const double vx = sxx - mx * mx;
  const double vy = syy - my * my;
  const double cov = sxy - mx * my;
  return ((2.0 * mx * my + c1) * (2.0 * cov + c2)) /
         ((mx * mx + my * my + c1) * (vx + vy + c2));
}

}  // namespace

double psnr(const std::vector<double>& x, const std::vector<double>& x_hat, double peak) {
  if (x.size() != x_hat.size() || x.empty()) {
    throw ShapeError("psnr: image sizes differ or are empty");
  }
  if (peak <= 0.0) throw ConfigError("psnr: peak must be positive");
  double mse = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - x_hat[i];
    mse += d * d;
  }
  mse /= static_cast<double>(x.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

double ssim(int h, int w, const std::vector<double>& x, const std::vector<double>& x_hat,
            const SsimParams& params) {
  if (x.size() != x_hat.size() || x.size() != static_cast<size_t>(h) * w) {
    throw ShapeError("ssim: image sizes do not match the stated extent");
  }
  const double c1 = (params.k1 * params.level) * (params.k1 * params.level);
  const double c2 = (params.k2 * params.level) * (params.k2 * params.level);

  if (params.window == SsimParams::Window::kBox8NonOverlapping) {
    constexpr int kWin = 8;
    if (h < kWin || w < kWin) throw ShapeError("ssim: image smaller than the 8x8 window");
    double acc = 0.0;
    size_t count = 0;
    for (int r = 0; r + kWin <= h; r += kWin) {
      for (int c = 0; c + kWin <= w; c += kWin) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int i = 0; i < kWin; ++i) {
          for (int j = 0; j < kWin; ++j) {
            const double a = x[static_cast<size_t>(r + i) * w + c + j];
            const double b = x_hat[static_cast<size_t>(r + i) * w + c + j];
            mx += a;
            my += b;
            sxx += a * a;
            syy += b * b;
            sxy += a * b;
          }
        }
        const double n = kWin * kWin;
        acc += ssim_from_moments(mx / n, my / n, sxx / n, syy / n, sxy / n, c1, c2);
        ++count;
      }
    }
    return acc / static_cast<double>(count);
  }

  constexpr int kRadius = 5;  // 11x11
  if (h < 2 * kRadius + 1 || w < 2 * kRadius + 1) {
    throw ShapeError("ssim: image smaller than the 11x11 window");
  }
  const auto kernel = gaussian_kernel(kRadius, params.sigma);
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = x_hat[i] * x_hat[i];
    xy[i] = x[i] * x_hat[i];
  }
  const auto mx = gaussian_filter(x, h, w, kernel);
  const auto my = gaussian_filter(x_hat, h, w, kernel);
  const auto sxx = gaussian_filter(xx, h, w, kernel);
  const auto syy = gaussian_filter(yy, h, w, kernel);
  const auto sxy = gaussian_filter(xy, h, w, kernel);
  double acc = 0.0;
  for (size_t i = 0; i < mx.size(); ++i) {
    acc += ssim_from_moments(mx[i], my[i], sxx[i], syy[i], sxy[i], c1, c2);
  }
  return acc / static_cast<double>(mx.size());
}

double dice(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b) {
  if (a.size() != b.size()) throw ShapeError("dice: mask sizes differ");
  size_t inter = 0, ca = 0, cb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const bool va = a[i] != 0, vb = b[i] != 0;
    inter += va && vb;
    ca += va;
    cb += vb;
  }
  if (ca + cb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(ca + cb);
}

SisResult sis(const std::vector<const ComplexImage*>& reconstructions,
              const std::vector<const ComplexImage*>& ground_truth,
              const std::vector<const std::vector<uint8_t>*>& labels,
              SegmenterNet<float>& segmenter) {
  if (reconstructions.size() != ground_truth.size() || labels.size() != ground_truth.size()) {
    throw ShapeError("sis: cohort lists must have equal lengths");
  }
  SisResult result;
  double acc_rec = 0.0, acc_gt = 0.0;
  for (size_t i = 0; i < labels.size(); ++i) {
    const auto& label = *labels[i];
    bool any = false;
    for (auto v : label) {
      if (v) {
        any = true;
        break;
      }
    }
    if (!any) continue;  // at least one foreground instance required
    const auto* gt = ground_truth[i];
    const auto* rec = reconstructions[i];
    const auto pred_rec =
        binarize(segment(magnitude(*rec), rec->height, rec->width, segmenter));
    const auto pred_gt = binarize(segment(magnitude(*gt), gt->height, gt->width, segmenter));
    acc_rec += dice(pred_rec, label);
    acc_gt += dice(pred_gt, label);
    ++result.cohort_size;
  }
  if (result.cohort_size == 0) {
    throw ContractError("sis: no image with a foreground instance in the cohort");
  }
  result.mean_dice_recon = acc_rec / static_cast<double>(result.cohort_size);
  result.mean_dice_ground_truth = acc_gt / static_cast<double>(result.cohort_size);
  if (result.mean_dice_ground_truth == 0.0) {
    throw ContractError("sis: segmenter scores zero Dice on ground truth images");
  }
  result.sis = result.mean_dice_recon / result.mean_dice_ground_truth;
  return result;
}

double sis_from_cohort(const std::vector<double>& dice_recon,
                       const std::vector<double>& dice_ground_truth) {
  if (dice_recon.empty() || dice_recon.size() != dice_ground_truth.size()) {
    throw ContractError("sis_from_cohort: cohort lists must be non-empty and equal-length");
  }
  double rec = 0.0, gt = 0.0;
  for (auto v : dice_recon) rec += v;
  for (auto v : dice_ground_truth) gt += v;
  rec /= static_cast<double>(dice_recon.size());
  gt /= static_cast<double>(dice_ground_truth.size());
  if (gt == 0.0) throw ContractError("sis_from_cohort: ground-truth Dice mean is zero");
  return rec / gt;
}

namespace {

MetricAggregate aggregate(const std::vector<double>& values) {
  MetricAggregate a;
  const double n = static_cast<double>(values.size());
  for (auto v : values) a.mean += v;
  a.mean /= n;
  if (!std::isfinite(a.mean)) {
    // Identity reconstructions hit the +inf PSNR sentinel; report no spread.
    a.std_dev = 0.0;
    return a;
  }
  for (auto v : values) a.std_dev += (v - a.mean) * (v - a.mean);
  a.std_dev = std::sqrt(a.std_dev / n);
  return a;
}

Json number_or_inf(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

double parse_number_or_inf(const Json& j) {
  if (j.is_string()) {
    return j.get<std::string>() == "-inf" ? -std::numeric_limits<double>::infinity()
                                          : std::numeric_limits<double>::infinity();
  }
  return j.get<double>();
}

std::string csv_number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

MetricsReport aggregate_report(std::vector<MetricsRecord> records, std::optional<double> sis_value,
                               Json provenance) {
  if (records.empty()) throw ContractError("aggregate_report: no records");
  MetricsReport report;
  report.records = std::move(records);
  report.sis = sis_value;
  report.provenance = std::move(provenance);

  std::vector<double> psnrs, ssims, dices;
  for (const auto& r : report.records) {
    psnrs.push_back(r.psnr_db);
    ssims.push_back(r.ssim);
    if (r.dice) dices.push_back(*r.dice);
  }
  report.psnr_db = aggregate(psnrs);
  report.ssim = aggregate(ssims);
  if (!dices.empty()) report.dice = aggregate(dices);
  return report;
}

Json MetricsReport::to_json() const {
  Json j;
  Json recs = Json::array();
  for (const auto& r : records) {
    Json e;
    e["id"] = r.id;
    e["psnr_db"] = number_or_inf(r.psnr_db);
    e["ssim"] = r.ssim;
    if (r.dice) e["dice"] = *r.dice;
    recs.push_back(std::move(e));
  }
  j["records"] = std::move(recs);
  Json agg;
  agg["psnr_db"] = Json{{"mean", number_or_inf(psnr_db.mean)}, {"std", number_or_inf(psnr_db.std_dev)}};
  agg["ssim"] = Json{{"mean", ssim.mean}, {"std", ssim.std_dev}};
  if (dice) agg["dice"] = Json{{"mean", dice->mean}, {"std", dice->std_dev}};
  j["aggregates"] = std::move(agg);
  if (sis) j["sis"] = *sis;
  j["provenance"] = provenance;
  return j;
}

MetricsReport MetricsReport::from_json(const Json& j) {
  MetricsReport r;
  for (const auto& e : j.at("records")) {
    MetricsRecord rec;
    rec.id = e.at("id").get<std::string>();
    rec.psnr_db = parse_number_or_inf(e.at("psnr_db"));
    rec.ssim = e.at("ssim").get<double>();
    if (e.contains("dice")) rec.dice = e.at("dice").get<double>();
    r.records.push_back(std::move(rec));
  }
  const auto& agg = j.at("aggregates");
  r.psnr_db = {parse_number_or_inf(agg.at("psnr_db").at("mean")),
               parse_number_or_inf(agg.at("psnr_db").at("std"))};
  r.ssim = {agg.at("ssim").at("mean").get<double>(), agg.at("ssim").at("std").get<double>()};
  if (agg.contains("dice")) {
    r.dice = MetricAggregate{agg.at("dice").at("mean").get<double>(),
                             agg.at("dice").at("std").get<double>()};
  }
  if (j.contains("sis")) r.sis = j.at("sis").get<double>();
  r.provenance = j.at("provenance");
  return r;
}

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os << "id,psnr_db,ssim,dice\n";
  for (const auto& r : records) {
    os << r.id << ',' << csv_number(r.psnr_db) << ',' << csv_number(r.ssim) << ',';
    if (r.dice) os << csv_number(*r.dice);
    os << '\n';
  }
  return os.str();
}

}  // namespace csmri
