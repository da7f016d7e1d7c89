#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>

#include "csmri/checkpoint.hpp"
#include "csmri/io.hpp"
#include "csmri/training.hpp"

using namespace csmri;

namespace {

PhantomDataset tiny_dataset(uint64_t seed = 900) {
  PhantomSpec spec;
  spec.image_size = 32;
  spec.train_count = 16;
  spec.val_count = 6;
  spec.test_count = 6;
  spec.seed = seed;
  return generate_dataset(spec);
}

TrainConfig base_config(TrainConfig::Stage stage, const std::filesystem::path& out) {
  TrainConfig cfg;
  cfg.stage = stage;
  cfg.output_dir = out;
  cfg.seed = 11;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.undersampling_ratio = 0.25;
  return cfg;
}

std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("csmri_train_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

std::string manifest_params_hash(const std::filesystem::path& ckpt) {
  return load_manifest(ckpt).params_hash;
}

std::vector<std::string> log_values(const std::filesystem::path& log, const std::string& key) {
  std::ifstream in(log);
  REQUIRE(in);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    const auto pos = line.find("\"" + key + "\":");
    if (pos == std::string::npos) continue;
    const auto start = pos + key.size() + 3;
    const auto end = line.find_first_of(",}", start);
    out.push_back(line.substr(start, end - start));
  }
  return out;
}

}  // namespace

TEST_CASE("zero epochs publishes the initialization") {
  PhantomDataset ds = tiny_dataset();
  TrainConfig cfg = base_config(TrainConfig::Stage::kRecon, fresh_dir("zero_epochs"));
  cfg.epochs = 0;
  TrainResult result = train_stage1(cfg, ds);
  CHECK(result.completed);

  // Rebuild the initialization by hand: same preset, same seed, same stream.
  CascadeConfig arch = cascade_preset("desk");
  CascadeNet<float> fresh(arch);
  RngSet rngs(cfg.seed);
  fresh.init(rngs.stream("init"));
  auto params = fresh.parameters();
  const uint64_t fresh_hash = params_hash(params);

  CascadeModel loaded = load_cascade_checkpoint(result.final_checkpoint);
  auto loaded_params = loaded.net.parameters();
  CHECK(hex64(fresh_hash) == manifest_params_hash(result.final_checkpoint));
  CHECK(params_hash(loaded_params) == fresh_hash);
}

TEST_CASE("stage-1 losses stay finite and the log is well formed") {
  PhantomDataset ds = tiny_dataset();
  TrainConfig cfg = base_config(TrainConfig::Stage::kRecon, fresh_dir("finite"));
  cfg.epochs = 3;
  train_stage1(cfg, ds);
  const auto values = log_values(cfg.output_dir / "train_log.jsonl", "mse");
  CHECK(values.size() == 6);  // 2 batches per epoch
  for (const auto& v : values) {
    CHECK(std::isfinite(std::stod(v)));
  }
}

TEST_CASE("stage-1 overfits a small training set") {
  PhantomSpec spec;
  spec.image_size = 64;
  spec.train_count = 8;
  spec.val_count = 4;
  spec.test_count = 4;
  spec.seed = 901;
  PhantomDataset ds = generate_dataset(spec);

  TrainConfig cfg = base_config(TrainConfig::Stage::kRecon, fresh_dir("overfit"));
  cfg.epochs = 500;
  cfg.batch_size = 8;
  cfg.lr = 2e-3;
  cfg.state_every_epochs = 100;
  TrainResult result = train_stage1(cfg, ds);
  CascadeModel model = load_cascade_checkpoint(result.final_checkpoint);

  // Training-set PSNR versus the zero-filled baseline, fixed masks.
  RngStream mask_rng(1234), noise_rng(1);
  double zf_psnr = 0.0, net_psnr = 0.0;
  for (const auto& item : ds.train) {
    SamplingMask mask = generate_mask(64, 64, 0.25, mask_rng);
    KSpaceSample sample = acquire(item.image, mask, 0.0, noise_rng);
    ComplexImage x_u = zero_fill(sample);
    ComplexImage recon = reconstruct(x_u, sample, model.net);
    const auto gt_mag = magnitude(item.image);
    zf_psnr += psnr(gt_mag, magnitude(x_u), 1.0);
    net_psnr += psnr(gt_mag, magnitude(recon), 1.0);
  }
  zf_psnr /= 8.0;
  net_psnr /= 8.0;
  MESSAGE("zero-filled ", zf_psnr, " dB, trained ", net_psnr, " dB");
  CHECK(net_psnr >= zf_psnr + 6.0);
}

TEST_CASE("stage-2 freezes the cascade and starts from the identity") {
  PhantomDataset ds = tiny_dataset();
  TrainConfig s1 = base_config(TrainConfig::Stage::kRecon, fresh_dir("s2_stage1"));
  s1.epochs = 2;
  TrainResult r1 = train_stage1(s1, ds);

  TrainConfig s2 = base_config(TrainConfig::Stage::kRefine, fresh_dir("s2_refine"));
  s2.epochs = 2;
  s2.stage1_checkpoint = r1.best_checkpoint;
  TrainResult r2 = train_stage2(s2, ds);
  CHECK(r2.completed);

  // R inside the refine checkpoint is bit-identical to the stage-1 result.
  CascadeModel before = load_cascade_checkpoint(r1.best_checkpoint);
  RefineModel after = load_refine_checkpoint(r2.final_checkpoint);
  auto before_params = before.net.parameters();
  auto after_params = after.cascade.parameters();
  CHECK(params_hash(before_params) == params_hash(after_params));

  // Lambda moved off zero once training ran.
  CHECK(after.refiner.lambda().tensor.data()[0] != 0.0f);
  CHECK(after.calibration.frozen());

  SUBCASE("missing stage-1 checkpoint is a contract error") {
    TrainConfig bad = base_config(TrainConfig::Stage::kRefine, fresh_dir("s2_bad"));
    bad.stage1_checkpoint.clear();
    CHECK_THROWS_AS(train_stage2(bad, ds), ContractError);
  }

  SUBCASE("gan losses are finite throughout") {
    for (const char* key : {"d_loss", "adv", "feat", "vgg", "pen", "total"}) {
      for (const auto& v : log_values(s2.output_dir / "train_log.jsonl", key)) {
        CHECK(std::isfinite(std::stod(v)));
      }
    }
  }
}

TEST_CASE("joint ablation trains both networks against the same protocol") {
  PhantomDataset ds = tiny_dataset();
  TrainConfig cfg = base_config(TrainConfig::Stage::kJoint, fresh_dir("joint"));
  cfg.epochs = 2;
  TrainResult result = train_joint_ablation(cfg, ds);
  CHECK(result.completed);
  RefineModel model = load_refine_checkpoint(result.final_checkpoint);
  CHECK(model.kind == "joint");
  for (const auto& v : log_values(cfg.output_dir / "train_log.jsonl", "total")) {
    CHECK(std::isfinite(std::stod(v)));
  }
}

TEST_CASE("segmenter training improves validation dice") {
  PhantomDataset ds = tiny_dataset();
  TrainConfig cfg = base_config(TrainConfig::Stage::kSegment, fresh_dir("segment"));
  cfg.epochs = 30;
  cfg.lr = 1e-3;
  cfg.state_every_epochs = 10;
  TrainResult result = train_segmenter(cfg, ds);
  CHECK(result.completed);
  CHECK(result.best_metric > 0.3);  // tiny run; the acceptance suite demands 0.85
}

TEST_CASE("checkpoint save and load round-trips bitwise") {
  PhantomDataset ds = tiny_dataset();
  TrainConfig cfg = base_config(TrainConfig::Stage::kRecon, fresh_dir("roundtrip"));
  cfg.epochs = 1;
  TrainResult result = train_stage1(cfg, ds);

  CascadeModel a = load_cascade_checkpoint(result.final_checkpoint);
  CascadeModel b = load_cascade_checkpoint(result.final_checkpoint);
  auto pa = a.net.parameters();
  auto pb = b.net.parameters();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->tensor.data()[0] == pb[i]->tensor.data()[0]);
    CHECK(pa[i]->adam_m == pb[i]->adam_m);
    CHECK(pa[i]->adam_v == pb[i]->adam_v);
    CHECK(pa[i]->step_count == pb[i]->step_count);
  }

  SUBCASE("corrupted parameter file names the tensor") {
    const auto victim = result.final_checkpoint / "params" / "R_block0_conv0_weight.bin";
    write_text(victim, "nonsense");
    try {
      load_cascade_checkpoint(result.final_checkpoint);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("R/block0/conv0/weight") != std::string::npos);
    }
  }
}

TEST_CASE("mid-epoch resume reproduces the uninterrupted trajectory bit for bit") {
  PhantomDataset ds = tiny_dataset();

  for (const auto stage : {TrainConfig::Stage::kRecon, TrainConfig::Stage::kRefine}) {
    CAPTURE(static_cast<int>(stage));
    std::filesystem::path stage1_ckpt;
    if (stage == TrainConfig::Stage::kRefine) {
      TrainConfig s1 = base_config(TrainConfig::Stage::kRecon, fresh_dir("resume_s1"));
      s1.epochs = 1;
      stage1_ckpt = train_stage1(s1, ds).best_checkpoint;
    }

    auto make = [&](const std::filesystem::path& out) {
      TrainConfig cfg = base_config(stage, out);
      cfg.epochs = 3;  // 2 batches/epoch -> 6 steps
      cfg.stage1_checkpoint = stage1_ckpt;
      return cfg;
    };

    // Uninterrupted run.
    const auto full_dir = fresh_dir(stage == TrainConfig::Stage::kRecon ? "full_r" : "full_v");
    TrainResult full = train(make(full_dir), ds);

    // Halt mid-epoch (after 3 of 6 steps), then resume to completion.
    const auto part_dir = fresh_dir(stage == TrainConfig::Stage::kRecon ? "part_r" : "part_v");
    TrainConfig halted = make(part_dir);
    halted.halt_after_steps = 3;
    TrainResult first = train(halted, ds);
    CHECK_FALSE(first.completed);
    CHECK(first.global_steps == 3);

    TrainConfig resumed = make(part_dir);
    resumed.resume = true;
    TrainResult second = train(resumed, ds);
    CHECK(second.completed);
    CHECK(second.global_steps == 6);

    CHECK(manifest_params_hash(full.final_checkpoint) ==
          manifest_params_hash(second.final_checkpoint));

    // Per-step losses line up exactly (shortest-round-trip doubles in JSONL).
    const std::string key = stage == TrainConfig::Stage::kRecon ? "mse" : "total";
    const auto full_losses = log_values(full_dir / "train_log.jsonl", key);
    const auto part_losses = log_values(part_dir / "train_log.jsonl", key);
    REQUIRE(full_losses.size() == 6);
    REQUIRE(part_losses.size() == 6);
    for (size_t i = 0; i < 6; ++i) CHECK(full_losses[i] == part_losses[i]);
  }
}

TEST_CASE("resume refuses a mismatched configuration") {
  PhantomDataset ds = tiny_dataset();
  TrainConfig cfg = base_config(TrainConfig::Stage::kRecon, fresh_dir("mismatch"));
  cfg.epochs = 1;
  train_stage1(cfg, ds);
  TrainConfig other = cfg;
  other.resume = true;
  other.undersampling_ratio = 0.5;
  other.epochs = 2;
  CHECK_THROWS_AS(train_stage1(other, ds), ContractError);
}

TEST_CASE("evaluate produces one report per method with shared masks") {
  PhantomDataset ds = tiny_dataset();
  TrainConfig cfg = base_config(TrainConfig::Stage::kRecon, fresh_dir("eval_ckpt"));
  cfg.epochs = 1;
  TrainResult r = train_stage1(cfg, ds);

  EvalConfig eval_cfg;
  eval_cfg.seed = 3;
  eval_cfg.undersampling_ratio = 0.25;
  eval_cfg.checkpoints = {r.best_checkpoint};
  eval_cfg.include_identity = true;
  auto results = evaluate(eval_cfg, ds);
  REQUIRE(results.size() == 3);
  CHECK(results[0].method == "zero_filled");
  CHECK(results[1].method == "stage1");
  CHECK(results[2].method == "identity");
  CHECK(results[2].report.records.size() == ds.test.size());
  for (const auto& rec : results[2].report.records) {
    CHECK(std::isinf(rec.psnr_db));
    CHECK(rec.ssim == doctest::Approx(1.0));
  }
  // Determinism: byte-identical JSON across reruns.
  auto again = evaluate(eval_cfg, ds);
  for (size_t i = 0; i < results.size(); ++i) {
    CHECK(results[i].report.to_json().dump() == again[i].report.to_json().dump());
  }
}
