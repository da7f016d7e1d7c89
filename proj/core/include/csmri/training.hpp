#pragma once

#include <filesystem>
#include <optional>

#include "csmri/losses.hpp"
#include "csmri/metrics.hpp"
#include "csmri/phantom.hpp"

namespace csmri {

struct TrainConfig {
  enum class Stage { kRecon, kRefine, kJoint, kSegment };

  Stage stage = Stage::kRecon;
  std::string preset = "desk";
  int epochs = -1;      // -1 takes the stage/preset default
  int batch_size = -1;
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  uint64_t seed = 1;
  std::filesystem::path dataset_dir;
  std::filesystem::path output_dir;
  std::filesystem::path stage1_checkpoint;  // required for kRefine
  double undersampling_ratio = 0.25;
  double noise_std = 0.0;
  double label_smoothing = 0.1;
  size_t replay_capacity = 80;
  double replay_probability = 0.5;
  std::optional<double> dc_soft_lambda;
  std::string feature_source = "seeded-random";  // or extractor checkpoint dir
  bool resume = false;
  int64_t halt_after_steps = 0;  // pause (state saved) once this global step is reached
  int train_subset = 0;          // first N training images, 0 = full split
  int val_subset = 0;
  int state_every_epochs = 1;    // resume-state save cadence (always at halt/completion)
  int validate_every_epochs = 1;
  double disc_lr = 0.0;          // discriminator learning rate; 0 = same as lr
  // Stage-2 only: D-only steps before the refiner's optimizer engages. The
  // gate starts at zero, so the discriminator trains on clean cascade
  // reconstructions first.
  int64_t disc_warmup_steps = 0;

  // Fills epochs/batch_size with the stage defaults: paper scale trains the
  // reconstruction for 1500 epochs at batch 20 and the refinement for 200 at
  // batch 5; the desk preset uses 60/40 epochs at batch 8.
  void apply_stage_defaults();
};

struct TrainResult {
  std::filesystem::path best_checkpoint;
  std::filesystem::path final_checkpoint;
  std::filesystem::path state_dir;
  double best_metric = 0.0;
  int64_t global_steps = 0;
  bool completed = true;  // false when halted by halt_after_steps
};

TrainResult train_stage1(const TrainConfig& config, const PhantomDataset& dataset);
TrainResult train_stage2(const TrainConfig& config, const PhantomDataset& dataset);
TrainResult train_joint_ablation(const TrainConfig& config, const PhantomDataset& dataset);
TrainResult train_segmenter(const TrainConfig& config, const PhantomDataset& dataset);

TrainResult train(const TrainConfig& config, const PhantomDataset& dataset);

// --- checkpoint loading ----------------------------------------------------------

struct CascadeModel {
  CascadeConfig config;
  CascadeNet<float> net;
};
CascadeModel load_cascade_checkpoint(const std::filesystem::path& dir);

struct RefineModel {
  CascadeConfig cascade_config;
  CascadeNet<float> cascade;
  RefinerConfig refiner_config;
  RefinerNet<float> refiner;
  FeatureExtractorConfig extractor_config;
  LossCalibration calibration;
  std::string kind;  // refine | joint
};
RefineModel load_refine_checkpoint(const std::filesystem::path& dir);

struct SegmenterModel {
  SegmenterConfig config;
  SegmenterNet<float> net;
};
SegmenterModel load_segmenter_checkpoint(const std::filesystem::path& dir);

// --- evaluation -------------------------------------------------------------------

struct EvalConfig {
  uint64_t seed = 1;
  double undersampling_ratio = 0.25;
  double noise_std = 0.0;
  std::vector<std::filesystem::path> checkpoints;
  std::filesystem::path segmenter_checkpoint;  // empty = no Dice/SIS
  bool include_identity = false;               // ground truth as reconstruction
  std::optional<double> dc_soft_lambda;
  int test_subset = 0;
};

struct EvalMethodResult {
  std::string method;
  MetricsReport report;
};

// Evaluates the zero-filled baseline plus one method per checkpoint on the
// test split. Each test image gets one freshly drawn mask, shared across all
// methods.
std::vector<EvalMethodResult> evaluate(const EvalConfig& config, const PhantomDataset& dataset);

// Reconstructions of one test image under every supplied method.
struct ReconOutputs {
  std::string id;
  ComplexImage ground_truth;
  ComplexImage zero_filled;
  std::optional<ComplexImage> stage1;
  std::optional<ComplexImage> refined;
  std::vector<uint8_t> label;
};
std::vector<ReconOutputs> reconstruct_test_split(const EvalConfig& config,
                                                 const PhantomDataset& dataset);

}  // namespace csmri
