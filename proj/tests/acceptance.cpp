// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Heavier criteria share one desk-scale workflow (dataset, trained
// checkpoints) built on first use.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <vector>

#include "csmri/checkpoint.hpp"
#include "csmri/io.hpp"
#include "csmri/training.hpp"
#include "test_util.hpp"

using namespace csmri;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

void report(const std::string& id, bool pass, const std::string& detail, double seconds) {
  std::ostringstream line;
  line << id << ": " << (pass ? "PASS" : "FAIL") << " (" << detail << ", "
       << static_cast<int>(seconds) << "s)";
  std::cout << line.str() << std::endl;
  if (!pass) ++g_failures;
}

template <typename Fn>
void criterion(const std::string& id, Fn&& fn) {
  Timer timer;
  try {
    auto [pass, detail] = fn();
    report(id, pass, detail, timer.seconds());
  } catch (const std::exception& e) {
    report(id, false, std::string("exception: ") + e.what(), timer.seconds());
  }
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

// --- shared desk-scale workflow -----------------------------------------------------

// Tuned desk-scale budgets: small enough to fit the stated runtimes on one
// core, large enough for the orderings to be stable across seeds.
constexpr int kStage1Epochs = 12;
constexpr int kStage2Epochs = 8;
constexpr int kJointEpochs = 20;  // same total step budget as stage1+stage2
constexpr int kGanTrainSubset = 256;
constexpr double kStage1Lr = 1e-3;
constexpr int kSegEpochs = 12;
constexpr double kSegLr = 1e-3;
const uint64_t kSeeds[3] = {1, 2, 3};

struct SeedRun {
  fs::path stage1, two_stage, joint;
};

struct Workflow {
  fs::path root;
  fs::path dataset_dir;
  PhantomDataset dataset;
  fs::path segmenter;
  double segmenter_test_dice = 0;
  std::map<uint64_t, SeedRun> seeds;
  double train_seconds = 0;
};

Workflow* g_workflow = nullptr;

TrainConfig base_config(TrainConfig::Stage stage, uint64_t seed, const fs::path& out) {
  TrainConfig cfg;
  cfg.stage = stage;
  cfg.seed = seed;
  cfg.output_dir = out;
  cfg.batch_size = 8;
  cfg.undersampling_ratio = 0.25;
  cfg.state_every_epochs = 50;
  cfg.val_subset = 40;
  return cfg;
}

Workflow& workflow() {
  if (g_workflow != nullptr) return *g_workflow;
  static Workflow wf;
  wf.root = fs::temp_directory_path() / "csmri_acceptance";
  fs::remove_all(wf.root);
  fs::create_directories(wf.root);

  Timer timer;
  PhantomSpec spec;  // library defaults: 64x64, 600/150/150
  wf.dataset = generate_dataset(spec);
  wf.dataset_dir = wf.root / "dataset";
  save_dataset(wf.dataset, wf.dataset_dir);

  for (uint64_t seed : kSeeds) {
    SeedRun run;
    TrainConfig s1 = base_config(TrainConfig::Stage::kRecon, seed,
                                 wf.root / ("s1_" + std::to_string(seed)));
    s1.epochs = kStage1Epochs;
    s1.lr = kStage1Lr;
    s1.train_subset = seed == kSeeds[0] ? 0 : kGanTrainSubset;  // seed 1 doubles as AC-3
    run.stage1 = train_stage1(s1, wf.dataset).best_checkpoint;

    TrainConfig s2 = base_config(TrainConfig::Stage::kRefine, seed,
                                 wf.root / ("s2_" + std::to_string(seed)));
    s2.epochs = kStage2Epochs;
    s2.train_subset = kGanTrainSubset;
    s2.stage1_checkpoint = run.stage1;
    run.two_stage = train_stage2(s2, wf.dataset).best_checkpoint;

    TrainConfig jt = base_config(TrainConfig::Stage::kJoint, seed,
                                 wf.root / ("joint_" + std::to_string(seed)));
    jt.epochs = kJointEpochs;
    jt.train_subset = kGanTrainSubset;
    run.joint = train_joint_ablation(jt, wf.dataset).best_checkpoint;
    wf.seeds[seed] = run;
  }

  TrainConfig sg =
      base_config(TrainConfig::Stage::kSegment, kSeeds[0], wf.root / "segmenter");
  sg.epochs = kSegEpochs;
  sg.lr = kSegLr;
  wf.segmenter = train_segmenter(sg, wf.dataset).best_checkpoint;

  // Ground-truth Dice of the segmenter on the full test split.
  SegmenterModel seg = load_segmenter_checkpoint(wf.segmenter);
  double acc = 0;
  size_t n = 0;
  for (const auto& item : wf.dataset.test) {
    const auto probs =
        segment(magnitude(item.image), item.image.height, item.image.width, seg.net);
    acc += dice(binarize(probs), item.label);
    ++n;
  }
  wf.segmenter_test_dice = acc / static_cast<double>(n);
  wf.train_seconds = timer.seconds();
  g_workflow = &wf;
  return wf;
}

std::map<std::string, MetricsReport> eval_seed(uint64_t seed, bool with_sis) {
  Workflow& wf = workflow();
  EvalConfig ev;
  ev.seed = seed + 9000;
  ev.undersampling_ratio = 0.25;
  const SeedRun& run = wf.seeds.at(seed);
  ev.checkpoints = {run.stage1, run.two_stage, run.joint};
  if (with_sis) ev.segmenter_checkpoint = wf.segmenter;
  std::map<std::string, MetricsReport> out;
  for (auto& r : evaluate(ev, wf.dataset)) out.emplace(r.method, std::move(r.report));
  return out;
}

std::map<uint64_t, std::map<std::string, MetricsReport>>& seed_reports() {
  static std::map<uint64_t, std::map<std::string, MetricsReport>> reports;
  if (reports.empty()) {
    for (uint64_t seed : kSeeds) reports[seed] = eval_seed(seed, true);
  }
  return reports;
}

// --- AC-1 ------------------------------------------------------------------------------

std::pair<bool, std::string> ac1() {
  RngStream rng(101);
  double worst = 0;
  int checks = 0;
  auto track = [&](double err) {
    worst = std::max(worst, err);
    ++checks;
  };

  for (int trial = 0; trial < 20; ++trial) {
    {
      auto x = testutil::random_tensor({1, 2, 6, 6}, rng);
      auto w = testutil::random_tensor({3, 2, 3, 3}, rng);
      auto b = testutil::random_tensor({3}, rng);
      track(testutil::gradcheck_elementwise({&x, &w, &b},
                                            [&] { return conv2d(x, w, b, 1, 1); }, rng));
      track(testutil::gradcheck_elementwise(
          {&x, &w, &b}, [&] { return conv_transpose2d(x, w, b, 2, 1); }, rng));
    }
    {
      auto x = testutil::random_tensor({2, 2, 3, 3}, rng);
      auto gamma = testutil::random_tensor({2}, rng, 0.5, 1.5);
      auto beta = testutil::random_tensor({2}, rng);
      for (bool training : {true, false}) {
        Tensor<double> rm({2}, 0.1), rv({2}, 1.1);
        track(testutil::gradcheck_elementwise(
            {&x, &gamma, &beta},
            [&] {
              Tensor<double> m = rm.detached(), v = rv.detached();
              return batch_norm(x, gamma, beta, m, v, training, 0.1, 1e-5);
            },
            rng));
      }
      Tensor<double> safe({2, 2, 3, 3});
      for (size_t i = 0; i < safe.numel(); ++i) {
        double v = rng.uniform() * 2 - 1;
        safe.data()[i] = std::abs(v) < 0.05 ? v + 0.2 : v;
      }
      for (auto kind : {Activation::kLeakyRelu, Activation::kSigmoid, Activation::kTanh}) {
        track(testutil::gradcheck_elementwise(
            {&safe}, [&] { return activation(safe, kind, 0.1); }, rng));
      }
      // Dropout with a replayed mask stream so every forward sees one mask.
      const uint64_t mask_seed = rng.next_u64();
      track(testutil::gradcheck_elementwise(
          {&x},
          [&] {
            RngStream drop(mask_seed);
            return channelwise_dropout(x, 0.4, true, drop);
          },
          rng));
    }
    {
      ComplexImage truth = testutil::random_image(6, 6, rng);
      RngStream mrng(rng.next_u64());
      SamplingMask mask = generate_mask(6, 6, 0.5, mrng);
      KSpaceSample sample = acquire(truth, mask, 0.0, mrng);
      auto batch = KSpaceBatch<double>::from_samples({&sample});
      auto x = testutil::random_tensor({1, 2, 6, 6}, rng);
      track(testutil::gradcheck_elementwise({&x}, [&] { return dc_layer(x, batch); }, rng));
    }
    {
      auto a = testutil::random_tensor({3, 4}, rng, 0.2, 1.5);
      auto b = testutil::random_tensor({3, 4}, rng, 0.2, 1.5);
      auto lam = Tensor<double>::scalar(rng.uniform());
      track(testutil::gradcheck_elementwise({&a, &b}, [&] { return mul(a, b); }, rng));
      track(testutil::gradcheck_elementwise({&a}, [&] { return log_op(a); }, rng));
      track(testutil::gradcheck_elementwise({&a}, [&] { return abs_op(a); }, rng));
      track(testutil::gradcheck_elementwise({&lam, &a}, [&] { return gate(lam, a); }, rng));
      track(testutil::gradcheck_elementwise({&a}, [&] { return mean_all(a); }, rng));
    }
  }

  // Full composed networks, 20 random instances each, directional probes.
  for (int trial = 0; trial < 20; ++trial) {
    {
      CascadeConfig cfg;
      cfg.filters = 8;
      CascadeNet<double> net(cfg);
      RngStream init(rng.next_u64());
      net.init(init);
      ComplexImage truth = testutil::random_image(8, 8, rng);
      RngStream mrng(rng.next_u64());
      SamplingMask mask = generate_mask(8, 8, 0.5, mrng);
      KSpaceSample sample = acquire(truth, mask, 0.0, mrng);
      auto batch = KSpaceBatch<double>::from_samples({&sample});
      Tensor<double> x_u = image_to_tensor<double>(zero_fill(sample));
      Tensor<double> gt = image_to_tensor<double>(truth);
      std::vector<Tensor<double>*> inputs;
      for (auto* p : net.parameters()) inputs.push_back(&p->tensor);
      track(testutil::gradcheck_directional(
          inputs,
          [&] {
            Tensor<double> out = net.forward(x_u, batch);
            Tensor<double> d = sub(gt, out);
            return mean_all(mul(d, d));
          },
          rng, 1e-6));
    }
    {
      RefinerNet<double> net(refiner_preset("desk"));
      RngStream init(rng.next_u64());
      net.init(init);
      net.lambda().tensor.data()[0] = 0.3;
      Tensor<double> x_rec = testutil::random_tensor({1, 2, 16, 16}, rng);
      Tensor<double> target = testutil::random_tensor({1, 2, 16, 16}, rng);
      std::vector<Tensor<double>*> inputs;
      for (auto* p : net.parameters()) inputs.push_back(&p->tensor);
      track(testutil::gradcheck_directional(
          inputs,
          [&] {
            auto out = net.forward(x_rec, false);
            Tensor<double> d = sub(target, out.x_hat);
            return mean_all(mul(d, d));
          },
          rng, 1e-6));
    }
    {
      PatchDiscriminator<double> net(discriminator_preset("desk"));
      RngStream init(rng.next_u64());
      net.init(init);
      Tensor<double> x = testutil::random_tensor({1, 2, 16, 16}, rng);
      std::vector<Tensor<double>*> inputs;
      for (auto* p : net.parameters()) inputs.push_back(&p->tensor);
      track(testutil::gradcheck_directional(
          inputs,
          [&] {
            auto out = net.forward(x, false);
            return mean_all(out.patch_map);
          },
          rng, 1e-6));
    }
    {
      SegmenterNet<double> net(segmenter_preset("desk"));
      RngStream init(rng.next_u64());
      net.init(init);
      Tensor<double> x = testutil::random_tensor({1, 1, 16, 16}, rng, 0.0, 1.0);
      std::vector<Tensor<double>*> inputs;
      for (auto* p : net.parameters()) inputs.push_back(&p->tensor);
      track(testutil::gradcheck_directional(
          inputs,
          [&] {
            Tensor<double> probs = net.forward(x, false);
            return mean_all(mul(probs, probs));
          },
          rng, 1e-6));
    }
  }
  return {worst <= 1e-4, "max rel err " + fmt(worst) + " over " + std::to_string(checks) +
                             " checks (tol 1e-4)"};
}

// --- AC-2 ------------------------------------------------------------------------------

std::pair<bool, std::string> ac2() {
  RngStream rng(202);
  double fft_worst = 0, dc_worst = 0, adjoint_worst = 0;

  for (const auto [h, w] : {std::pair{64, 64}, {32, 48}, {16, 16}}) {
    ComplexImage x = testutil::random_image(h, w, rng);
    ComplexImage back = ifft2_centered(fft2_centered(x));
    for (size_t i = 0; i < x.numel(); ++i) {
      fft_worst = std::max(fft_worst, std::abs(back.real[i] - x.real[i]));
      fft_worst = std::max(fft_worst, std::abs(back.imag[i] - x.imag[i]));
    }
    double nx = 0, nk = 0;
    ComplexImage k = fft2_centered(x);
    for (size_t i = 0; i < x.numel(); ++i) {
      nx += x.real[i] * x.real[i] + x.imag[i] * x.imag[i];
      nk += k.real[i] * k.real[i] + k.imag[i] * k.imag[i];
    }
    fft_worst = std::max(fft_worst, std::abs(std::sqrt(nx) - std::sqrt(nk)));
  }

  for (int trial = 0; trial < 10; ++trial) {
    ComplexImage truth = testutil::random_image(32, 32, rng);
    RngStream mrng(rng.next_u64());
    SamplingMask mask = generate_mask(32, 32, 0.25, mrng);
    KSpaceSample sample = acquire(truth, mask, 0.0, mrng);
    ComplexImage x_net = testutil::random_image(32, 32, rng);
    ComplexImage once = data_consistency(x_net, sample);
    ComplexImage twice = data_consistency(once, sample);
    for (size_t i = 0; i < once.numel(); ++i) {
      dc_worst = std::max(dc_worst, std::abs(once.real[i] - twice.real[i]));
      dc_worst = std::max(dc_worst, std::abs(once.imag[i] - twice.imag[i]));
    }
    ComplexImage k = fft2_centered(once);
    for (int r = 0; r < 32; ++r) {
      for (int c = 0; c < 32; ++c) {
        if (!mask.is_kept(c)) continue;
        dc_worst = std::max(dc_worst, std::abs(k.at(r, c) - sample.measurements.at(r, c)));
      }
    }
  }

  for (int trial = 0; trial < 20; ++trial) {
    const int stride = 1 + static_cast<int>(rng.uniform_int(2));
    const int kernel = stride == 1 ? 3 : 4;
    Tensor<double> u = testutil::random_tensor({2, 3, 8, 8}, rng);
    Tensor<double> w = testutil::random_tensor({4, 3, kernel, kernel}, rng);
    Tensor<double> zf({4}, 0.0), zc({3}, 0.0);
    Tensor<double> cu = conv2d(u, w, zf, stride, 1);
    Tensor<double> v = testutil::random_tensor(cu.shape(), rng);
    Tensor<double> av = conv_transpose2d(v, w, zc, stride, 1);
    double lhs = 0, rhs = 0;
    for (size_t i = 0; i < cu.numel(); ++i) lhs += cu.data()[i] * v.data()[i];
    for (size_t i = 0; i < u.numel(); ++i) rhs += u.data()[i] * av.data()[i];
    adjoint_worst = std::max(adjoint_worst, testutil::rel_err(lhs, rhs));
  }

  const bool pass = fft_worst <= 1e-6 && dc_worst <= 1e-5 && adjoint_worst <= 1e-5;
  return {pass, "fft " + fmt(fft_worst) + " (tol 1e-6), dc " + fmt(dc_worst) +
                    " (tol 1e-5), adjoint " + fmt(adjoint_worst) + " (tol 1e-5)"};
}

// --- AC-3 ------------------------------------------------------------------------------

std::pair<bool, std::string> ac3() {
  Workflow& wf = workflow();
  auto reports = eval_seed(kSeeds[0], false);
  const double zf = reports.at("zero_filled").psnr_db.mean;
  const double s1 = reports.at("stage1").psnr_db.mean;
  (void)wf;
  return {s1 >= zf + 3.0, "stage1 " + fmt(s1) + " dB vs zero-filled " + fmt(zf) +
                              " dB (need +3.0, got +" + fmt(s1 - zf) + ")"};
}

// --- AC-4 / AC-5 --------------------------------------------------------------------------

std::pair<bool, std::string> ac4() {
  auto& reports = seed_reports();
  int ok = 0;
  std::string detail;
  for (uint64_t seed : kSeeds) {
    const double s1 = reports.at(seed).at("stage1").psnr_db.mean;
    const double ts = reports.at(seed).at("two_stage").psnr_db.mean;
    const double jt = reports.at(seed).at("joint").psnr_db.mean;
    const bool seed_ok = s1 >= ts && ts >= jt && (s1 - ts) <= 1.5;
    ok += seed_ok;
    detail += "seed" + std::to_string(seed) + " [s1 " + fmt(s1) + " >= 2stage " + fmt(ts) +
              " >= joint " + fmt(jt) + ", gap " + fmt(s1 - ts) + "]" + (seed_ok ? " ok; " : " X; ");
  }
  return {ok >= 2, detail + std::to_string(ok) + "/3 seeds (need >= 2)"};
}

std::pair<bool, std::string> ac5() {
  Workflow& wf = workflow();
  auto& reports = seed_reports();
  int ok = 0;
  std::string detail;
  for (uint64_t seed : kSeeds) {
    const double s1 = *reports.at(seed).at("stage1").sis;
    const double ts = *reports.at(seed).at("two_stage").sis;
    ok += ts >= s1;
    detail += "seed" + std::to_string(seed) + " [sis 2stage " + fmt(ts) + " vs s1 " + fmt(s1) +
              "]; ";
  }
  const double identity_sis = *reports.at(kSeeds[0]).at("identity").sis;
  const bool pass = ok >= 2 && wf.segmenter_test_dice >= 0.85 && identity_sis == 1.0;
  return {pass, detail + std::to_string(ok) + "/3 seeds (need >= 2); segmenter gt dice " +
                    fmt(wf.segmenter_test_dice) + " (need 0.85); identity sis " +
                    fmt(identity_sis) + " (need exactly 1)"};
}

// --- AC-6 ------------------------------------------------------------------------------

std::pair<bool, std::string> ac6() {
  Workflow& wf = workflow();
  CascadeModel stage1 = load_cascade_checkpoint(wf.seeds.at(kSeeds[0]).stage1);
  RefinerNet<float> refiner(refiner_preset("desk"));
  RngStream init(4242);
  refiner.init(init);  // lambda starts at zero

  RngStream mrng = RngSet::derive(777, "masks.test");
  double worst = 0;
  for (const auto& item : wf.dataset.test) {
    SamplingMask mask = generate_mask(64, 64, 0.25, mrng);
    KSpaceSample sample = acquire(item.image, mask, 0.0, mrng);
    ComplexImage x_rec = reconstruct(zero_fill(sample), sample, stage1.net);
    auto [x_hat, x_v] = refine(x_rec, refiner);
    for (size_t i = 0; i < x_rec.numel(); ++i) {
      worst = std::max(worst, std::abs(x_hat.real[i] - x_rec.real[i]));
      worst = std::max(worst, std::abs(x_hat.imag[i] - x_rec.imag[i]));
    }
  }
  return {worst == 0.0, "max |x_hat - R(x_u)| = " + fmt(worst) + " over " +
                            std::to_string(wf.dataset.test.size()) + " test images (need 0)"};
}

// --- AC-7 ------------------------------------------------------------------------------

std::pair<bool, std::string> ac7() {
  // Miniature stage-2 run long enough for 1000 steps.
  const fs::path root = fs::temp_directory_path() / "csmri_acceptance_ac7";
  fs::remove_all(root);
  PhantomSpec spec;
  spec.image_size = 32;
  spec.train_count = 40;
  spec.val_count = 8;
  spec.test_count = 8;
  spec.seed = 7001;
  PhantomDataset ds = generate_dataset(spec);

  TrainConfig s1 = base_config(TrainConfig::Stage::kRecon, 70, root / "s1");
  s1.epochs = 2;
  s1.batch_size = 4;
  s1.val_subset = 4;
  TrainResult r1 = train_stage1(s1, ds);

  TrainConfig s2 = base_config(TrainConfig::Stage::kRefine, 70, root / "s2");
  s2.epochs = 100;  // 10 steps per epoch -> exactly 1000 steps
  s2.batch_size = 4;
  s2.val_subset = 4;
  s2.stage1_checkpoint = r1.best_checkpoint;
  s2.state_every_epochs = 100;
  train_stage2(s2, ds);

  // First-step losses and the frozen constants from the training log.
  std::ifstream log(root / "s2" / "train_log.jsonl");
  nlohmann::ordered_json step0, calib_event;
  std::string line;
  int64_t last_step = -1;
  while (std::getline(log, line)) {
    auto j = nlohmann::ordered_json::parse(line);
    if (j.contains("event") && j.at("event") == "calibration") calib_event = j;
    if (!j.contains("event") && j.contains("adv") && j.at("step").get<int64_t>() == 0) step0 = j;
    if (!j.contains("event") && j.contains("step")) last_step = j.at("step").get<int64_t>();
  }
  if (step0.is_null() || calib_event.is_null()) {
    return {false, "missing step-0 record or calibration event in the log"};
  }
  const auto calib = calib_event.at("calibration");
  const double m = calib.at("m").get<double>(), n = calib.at("n").get<double>();
  const double o = calib.at("o").get<double>(), alpha = calib.at("alpha").get<double>();
  const double adv = step0.at("adv").get<double>(), feat = step0.at("feat").get<double>();
  const double vgg = step0.at("vgg").get<double>(), pen = step0.at("pen").get<double>();

  const bool ratios = adv / m == 1.0 && feat / n == 1.0 && vgg / o == 1.0;
  const double pen_term = alpha * pen;
  const bool pen_ok = std::abs(pen_term - 0.1) <= 1e-6;

  // Constants at step 1000: the final state's calibration must be bit-identical.
  const CheckpointManifest state = load_manifest(root / "s2" / "state");
  const auto final_calib = state.extra.at("calibration");
  const bool frozen = final_calib.at("m").get<double>() == m &&
                      final_calib.at("n").get<double>() == n &&
                      final_calib.at("o").get<double>() == o &&
                      final_calib.at("alpha").get<double>() == alpha;
  const bool ran_1000 = last_step >= 999;
  const bool pass = ratios && pen_ok && frozen && ran_1000;
  return {pass, std::string("ratios==1 ") + (ratios ? "yes" : "NO") + ", alpha*pen " +
                    fmt(pen_term) + " (tol 1e-6 of 0.1), constants at step " +
                    std::to_string(last_step + 1) + (frozen ? " unchanged" : " CHANGED")};
}

// --- AC-8 ------------------------------------------------------------------------------

std::pair<bool, std::string> ac8() {
  RngStream rng(808);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int h = 16, w = 16;
    std::vector<double> x(h * w), y(h * w);
    for (auto& v : x) v = rng.uniform();
    for (auto& v : y) v = rng.uniform();

    // PSNR reference.
    double mse = 0;
    for (size_t i = 0; i < x.size(); ++i) mse += (x[i] - y[i]) * (x[i] - y[i]);
    mse /= static_cast<double>(x.size());
    worst = std::max(worst, testutil::rel_err(psnr(x, y, 1.0), 10.0 * std::log10(1.0 / mse)));

    // SSIM reference: direct per-window weighted sums.
    constexpr int kR = 5;
    std::vector<double> kernel;
    double ksum = 0;
    for (int i = -kR; i <= kR; ++i) {
      for (int j = -kR; j <= kR; ++j) {
        kernel.push_back(std::exp(-0.5 * (i * i + j * j) / 2.25));
        ksum += kernel.back();
      }
    }
    for (auto& v : kernel) v /= ksum;
    double acc = 0;
    size_t count = 0;
    for (int r = kR; r < h - kR; ++r) {
      for (int c = kR; c < w - kR; ++c) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        size_t ki = 0;
        for (int i = -kR; i <= kR; ++i) {
          for (int j = -kR; j <= kR; ++j, ++ki) {
            const double a = x[(r + i) * w + c + j], b = y[(r + i) * w + c + j];
            mx += kernel[ki] * a;
            my += kernel[ki] * b;
            sxx += kernel[ki] * a * a;
            syy += kernel[ki] * b * b;
            sxy += kernel[ki] * a * b;
          }
        }
        const double c1 = 1e-4, c2 = 9e-4;
        acc += ((2 * mx * my + c1) * (2 * (sxy - mx * my) + c2)) /
               ((mx * mx + my * my + c1) * ((sxx - mx * mx) + (syy - my * my) + c2));
        ++count;
      }
    }
    worst = std::max(worst, std::abs(ssim(h, w, x, y) - acc / count));

    // Dice reference.
    std::vector<uint8_t> a(h * w), b(h * w);
    for (auto& v : a) v = rng.uniform() < 0.3;
    for (auto& v : b) v = rng.uniform() < 0.3;
    size_t inter = 0, ca = 0, cb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
      inter += a[i] && b[i];
      ca += a[i];
      cb += b[i];
    }
    const double dref = (ca + cb) == 0 ? 1.0 : 2.0 * inter / static_cast<double>(ca + cb);
    worst = std::max(worst, std::abs(dice(a, b) - dref));
  }

  const double hand = sis_from_cohort({0.6, 0.8}, {0.8, 0.95});
  const bool hand_ok = hand == (0.6 + 0.8) / 2.0 / ((0.8 + 0.95) / 2.0) &&
                       std::abs(hand - 0.8) < 1e-12;
  return {worst <= 1e-6 && hand_ok,
          "max oracle deviation " + fmt(worst) + " over 100 instances (tol 1e-6); sis example " +
              fmt(hand)};
}

// --- AC-9 ------------------------------------------------------------------------------

std::pair<bool, std::string> ac9() {
  RngStream rng(909);
  ReplayBuffer<float> buffer(80, 0.5);
  auto item = [](float v) { return Tensor<float>({2, 1, 1}, v); };

  size_t max_size = 0;
  for (int round = 0; round < 50; ++round) {
    std::vector<Tensor<float>> fresh{item(round), item(round + 0.25f), item(round + 0.5f),
                                     item(round + 0.75f)};
    buffer.push_sample(fresh, rng);
    max_size = std::max(max_size, buffer.size());
  }
  const bool size_ok = buffer.size() == 80 && max_size == 80;  // 200 pushed

  size_t drawn = 0, total = 0;
  for (int round = 0; round < 2500; ++round) {
    std::vector<Tensor<float>> fresh{item(10000 + round), item(20000 + round),
                                     item(30000 + round), item(40000 + round)};
    auto batch = buffer.push_sample(fresh, rng);
    for (size_t i = 0; i < batch.size(); ++i) {
      drawn += batch[i].data()[0] != fresh[i].data()[0];
      ++total;
    }
  }
  const double fraction = static_cast<double>(drawn) / static_cast<double>(total);
  const bool fraction_ok = total == 10000 && std::abs(fraction - 0.5) <= 0.05;

  const double loss =
      discriminator_loss(Tensor<double>::scalar(0.9), Tensor<double>::scalar(0.0), 0.1).item();
  const bool loss_ok = std::abs(loss - 0.3251) <= 1e-4;

  return {size_ok && fraction_ok && loss_ok,
          "buffer size " + std::to_string(buffer.size()) + " (need 80), draw fraction " +
              fmt(fraction) + " (0.5 +- 0.05), real-target loss " + fmt(loss) +
              " (0.3251 +- 1e-4)"};
}

// --- AC-10 -----------------------------------------------------------------------------

std::pair<bool, std::string> ac10() {
  const fs::path root = fs::temp_directory_path() / "csmri_acceptance_ac10";
  fs::remove_all(root);
  PhantomSpec spec;
  spec.image_size = 32;
  spec.train_count = 48;
  spec.val_count = 12;
  spec.test_count = 12;
  spec.seed = 1001;
  PhantomDataset ds = generate_dataset(spec);

  // Two identical end-to-end workflows must emit byte-identical metrics JSON.
  auto run_workflow = [&](const fs::path& ws) {
    TrainConfig s1 = base_config(TrainConfig::Stage::kRecon, 5, ws / "s1");
    s1.epochs = 3;
    s1.val_subset = 8;
    TrainResult r1 = train_stage1(s1, ds);
    TrainConfig sg = base_config(TrainConfig::Stage::kSegment, 5, ws / "seg");
    sg.epochs = 4;
    sg.val_subset = 8;
    TrainResult r2 = train_segmenter(sg, ds);
    EvalConfig ev;
    ev.seed = 55;
    ev.undersampling_ratio = 0.25;
    ev.checkpoints = {r1.best_checkpoint};
    ev.segmenter_checkpoint = r2.best_checkpoint;
    std::string all;
    for (const auto& r : evaluate(ev, ds)) {
      all += r.method + "\n" + r.report.to_json().dump(2) + "\n";
    }
    return all;
  };
  const std::string json_a = run_workflow(root / "a");
  const std::string json_b = run_workflow(root / "b");
  const bool identical = json_a == json_b;

  // Mid-epoch halt/resume must match the uninterrupted stage-2 trajectory.
  TrainConfig s1 = base_config(TrainConfig::Stage::kRecon, 6, root / "res_s1");
  s1.epochs = 2;
  s1.val_subset = 8;
  TrainResult base = train_stage1(s1, ds);
  auto gan_cfg = [&](const fs::path& out) {
    TrainConfig cfg = base_config(TrainConfig::Stage::kRefine, 6, out);
    cfg.epochs = 2;  // 6 steps per epoch
    cfg.val_subset = 8;
    cfg.stage1_checkpoint = base.best_checkpoint;
    return cfg;
  };
  TrainResult full = train_stage2(gan_cfg(root / "full"), ds);
  TrainConfig halted = gan_cfg(root / "part");
  halted.halt_after_steps = 7;  // mid second epoch
  train_stage2(halted, ds);
  TrainConfig resumed = gan_cfg(root / "part");
  resumed.resume = true;
  TrainResult part = train_stage2(resumed, ds);
  const bool resume_ok = load_manifest(full.final_checkpoint).params_hash ==
                         load_manifest(part.final_checkpoint).params_hash;

  // Per-step losses also line up exactly in the logs.
  auto losses = [&](const fs::path& dir) {
    std::ifstream in(dir / "train_log.jsonl");
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
      if (line.find("\"total\":") == std::string::npos) continue;
      out.push_back(line.substr(line.find("\"total\":")));
    }
    return out;
  };
  const bool losses_ok = losses(root / "full") == losses(root / "part");

  return {identical && resume_ok && losses_ok,
          std::string("workflow JSON ") + (identical ? "byte-identical" : "DIFFERS") +
              "; resumed params " + (resume_ok ? "bit-identical" : "DIFFER") +
              "; per-step losses " + (losses_ok ? "identical" : "DIFFER")};
}

}  // namespace

int main() {
  std::cout << "acceptance suite (desk scale, single thread)\n";
  criterion("AC-1 gradient correctness", [] {
    Timer t;
    auto r = ac1();
    if (t.seconds() > 120 && r.first) {
      r = {false, r.second + "; over the 2 min budget"};
    }
    return r;
  });
  criterion("AC-2 operator identities", [] {
    Timer t;
    auto r = ac2();
    if (t.seconds() > 60 && r.first) r = {false, r.second + "; over the 1 min budget"};
    return r;
  });
  criterion("AC-3 stage-1 learning", [] {
    Timer t;
    auto r = ac3();
    // Budget covers this criterion's training (shared workflow, seed 1).
    if (t.seconds() > 900 && r.first) r = {false, r.second + "; over the 15 min budget"};
    return r;
  });
  criterion("AC-4 ordering claim", [] {
    Timer t;
    auto r = ac4();
    if (workflow().train_seconds > 2700 && r.first) {
      r = {false, r.second + "; training exceeded the 45 min budget (" +
                      fmt(workflow().train_seconds) + "s)"};
    }
    (void)t;
    return r;
  });
  criterion("AC-5 SIS improvement", ac5);
  criterion("AC-6 gate identity", ac6);
  criterion("AC-7 calibration contract", ac7);
  criterion("AC-8 metric oracles", ac8);
  criterion("AC-9 replay and smoothing mechanics", ac9);
  criterion("AC-10 determinism", ac10);

  std::cout << (g_failures == 0 ? "all criteria passed"
                                : std::to_string(g_failures) + " criterion(s) failed")
            << std::endl;
  return g_failures == 0 ? 0 : 1;
}
