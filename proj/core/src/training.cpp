#include "csmri/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "csmri/autodiff.hpp"
#include "csmri/checkpoint.hpp"
#include "csmri/io.hpp"

namespace csmri {
namespace {

using Json = nlohmann::ordered_json;
using F = float;

std::string stage_name(TrainConfig::Stage stage) {
  switch (stage) {
    case TrainConfig::Stage::kRecon: return "recon";
    case TrainConfig::Stage::kRefine: return "refine";
    case TrainConfig::Stage::kJoint: return "joint";
    case TrainConfig::Stage::kSegment: return "segment";
  }
  return "?";
}

// --- batching ------------------------------------------------------------------

std::vector<const LabeledImage*> subset_view(const std::vector<LabeledImage>& split, int subset) {
  std::vector<const LabeledImage*> out;
  const size_t n = subset > 0 ? std::min<size_t>(subset, split.size()) : split.size();
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) out.push_back(&split[i]);
  return out;
}

struct StepBatch {
  Tensor<F> gt;   // [B,2,H,W]
  Tensor<F> x_u;  // [B,2,H,W]
  KSpaceBatch<F> kspace;
};

StepBatch make_step_batch(const std::vector<const LabeledImage*>& items,
                          const std::vector<size_t>& indices, RngStream& mask_rng,
                          RngStream& noise_rng, double ratio, double noise_std,
                          std::optional<double> dc_soft_lambda) {
  std::vector<const ComplexImage*> gts;
  std::vector<ComplexImage> zero_filled;
  std::vector<KSpaceSample> samples;
  for (size_t idx : indices) {
    const auto& img = items[idx]->image;
    SamplingMask mask = generate_mask(img.width, img.height, ratio, mask_rng);
    samples.push_back(acquire(img, mask, noise_std, noise_rng));
    zero_filled.push_back(zero_fill(samples.back()));
    gts.push_back(&img);
  }
  std::vector<const ComplexImage*> zf_ptrs;
  std::vector<const KSpaceSample*> sample_ptrs;
  for (size_t i = 0; i < samples.size(); ++i) {
    zf_ptrs.push_back(&zero_filled[i]);
    sample_ptrs.push_back(&samples[i]);
  }
  return StepBatch{images_to_tensor<F>(gts), images_to_tensor<F>(zf_ptrs),
                   KSpaceBatch<F>::from_samples(sample_ptrs, dc_soft_lambda)};
}

Tensor<F> slice_item(const Tensor<F>& t, size_t b) {
  const size_t per = t.numel() / static_cast<size_t>(t.dim(0));
  Shape shape(t.shape().begin() + 1, t.shape().end());
  std::vector<F> values(t.data().begin() + b * per, t.data().begin() + (b + 1) * per);
  return Tensor<F>(std::move(shape), std::move(values));
}

Tensor<F> stack_items(const std::vector<Tensor<F>>& items) {
  Shape shape = items[0].shape();
  shape.insert(shape.begin(), static_cast<int64_t>(items.size()));
  Tensor<F> out(shape);
  const size_t per = items[0].numel();
  auto ov = out.data();
  for (size_t b = 0; b < items.size(); ++b) {
    std::copy(items[b].data().begin(), items[b].data().end(), ov.begin() + b * per);
  }
  return out;
}

double mean_batch_psnr(const Tensor<F>& recon, const std::vector<const LabeledImage*>& items,
                       const std::vector<size_t>& indices) {
  double acc = 0.0;
  for (size_t b = 0; b < indices.size(); ++b) {
    const auto& gt = items[indices[b]]->image;
    ComplexImage rec = image_from_tensor(recon, static_cast<int>(b), gt.intensity_scale);
    acc += psnr(magnitude(gt), magnitude(rec), gt.intensity_scale);
  }
  return acc / static_cast<double>(indices.size());
}

// Fixed validation acquisitions, regenerated identically on resume.
struct ValSet {
  std::vector<const LabeledImage*> items;
  std::vector<KSpaceSample> samples;
  std::vector<ComplexImage> zero_filled;
};

ValSet make_val_set(const std::vector<const LabeledImage*>& items, uint64_t seed, double ratio,
                    double noise_std) {
  ValSet v;
  v.items = items;
  RngStream mask_rng = RngSet::derive(seed, "masks.val");
  RngStream noise_rng = RngSet::derive(seed, "noise.val");
  for (const auto* item : items) {
    SamplingMask mask = generate_mask(item->image.width, item->image.height, ratio, mask_rng);
    v.samples.push_back(acquire(item->image, mask, noise_std, noise_rng));
    v.zero_filled.push_back(zero_fill(v.samples.back()));
  }
  return v;
}

// --- trainer scaffolding -----------------------------------------------------------

struct JsonlLogger {
  std::ofstream out;
  explicit JsonlLogger(const std::filesystem::path& path)
      : out(path, std::ios::app) {
    if (!out) throw IoError("cannot open training log: " + path.string());
  }
  void write(const Json& j) { out << j.dump() << "\n" << std::flush; }
};

struct TrainerState {
  int64_t epoch = 0;
  int64_t batch_in_epoch = 0;
  int64_t global_step = 0;
  double best_metric = 0.0;
  bool has_best = false;
};

constexpr const char* kStateDirName = "state";

struct Harness {
  const TrainConfig& cfg;
  const PhantomDataset& dataset;
  RngSet rngs;
  AdamConfig adam;
  std::vector<const LabeledImage*> train_items;
  std::vector<const LabeledImage*> val_items;
  BatchIterator iterator;
  TrainerState state;

  Harness(const TrainConfig& cfg_, const PhantomDataset& ds)
      : cfg(cfg_), dataset(ds), rngs(cfg_.seed),
        train_items(subset_view(ds.train, cfg_.train_subset)),
        val_items(subset_view(ds.val, cfg_.val_subset)),
        iterator(train_items.size(), static_cast<size_t>(cfg_.batch_size), cfg_.seed) {
    adam.lr = cfg.lr;
    adam.beta1 = cfg.beta1;
    adam.beta2 = cfg.beta2;
    adam.epsilon = cfg.adam_epsilon;
  }

  RngStream& stream(const char* name) { return rngs.stream(name); }
};

Json config_echo(const TrainConfig& cfg) {
  return Json{{"stage", stage_name(cfg.stage)},
              {"preset", cfg.preset},
              {"epochs", cfg.epochs},
              {"batch_size", cfg.batch_size},
              {"lr", cfg.lr},
              {"beta1", cfg.beta1},
              {"beta2", cfg.beta2},
              {"seed", cfg.seed},
              {"undersampling_ratio", cfg.undersampling_ratio},
              {"noise_std", cfg.noise_std},
              {"train_subset", cfg.train_subset},
              {"val_subset", cfg.val_subset},
              {"disc_lr", cfg.disc_lr},
              {"disc_warmup_steps", cfg.disc_warmup_steps}};
}

void check_resume_compatible(const Json& stored, const TrainConfig& cfg) {
  const Json now = config_echo(cfg);
  for (const auto& key : {"stage", "preset", "batch_size", "lr", "seed",
                          "undersampling_ratio", "noise_std", "train_subset", "disc_lr",
                          "disc_warmup_steps"}) {
    if (stored.at(key) != now.at(key)) {
      throw ContractError(std::string("resume: config field '") + key +
                          "' differs from the saved run");
    }
  }
}

// --- state + checkpoint plumbing ------------------------------------------------------

struct NetBundle {
  std::optional<CascadeNet<F>> cascade;
  std::optional<RefinerNet<F>> refiner;
  std::optional<PatchDiscriminator<F>> disc;
  std::optional<FeatureExtractor<F>> extractor;
  std::optional<SegmenterNet<F>> segmenter;

  ParamRefs<F> all_params() {
    ParamRefs<F> out;
    auto append = [&](ParamRefs<F> add) { out.insert(out.end(), add.begin(), add.end()); };
    if (cascade) append(cascade->parameters());
    if (refiner) append(refiner->parameters());
    if (disc) append(disc->parameters());
    if (segmenter) append(segmenter->parameters());
    return out;
  }
  NamedBuffers<F> all_buffers() {
    NamedBuffers<F> out;
    if (refiner) {
      auto b = refiner->buffers();
      out.insert(out.end(), b.begin(), b.end());
    }
    if (disc) {
      auto b = disc->buffers();
      out.insert(out.end(), b.begin(), b.end());
    }
    if (segmenter) {
      auto b = segmenter->buffers();
      out.insert(out.end(), b.begin(), b.end());
    }
    return out;
  }

  Json architecture(const std::string& preset) {
    Json arch;
    arch["preset"] = preset;
    if (cascade) arch["cascade"] = cascade->config();
    if (refiner) arch["refiner"] = refiner->config();
    if (disc) arch["discriminator"] = disc->config();
    if (extractor) arch["extractor"] = extractor->config();
    if (segmenter) arch["segmenter"] = segmenter->config();
    return arch;
  }
};

void save_state(const std::filesystem::path& dir, Harness& h, NetBundle& nets,
                const LossCalibration& calib, const ReplayBuffer<F>* replay, bool completed) {
  CheckpointManifest manifest;
  manifest.kind = "state";
  manifest.element_type = element_type_name<F>();
  manifest.architecture = nets.architecture(h.cfg.preset);
  manifest.rng_states = h.rngs.states();
  Json extra;
  extra["config"] = config_echo(h.cfg);
  extra["epoch"] = h.state.epoch;
  extra["batch_in_epoch"] = h.state.batch_in_epoch;
  extra["global_step"] = h.state.global_step;
  extra["best_metric"] = h.state.best_metric;
  extra["has_best"] = h.state.has_best;
  extra["completed"] = completed;
  extra["calibration"] = calib.to_json();
  if (replay != nullptr) {
    extra["replay_count"] = replay->size();
    std::filesystem::create_directories(dir / "replay");
    size_t i = 0;
    for (const auto& item : replay->contents()) {
      std::vector<F> values(item.data().begin(), item.data().end());
      write_raw(dir / "replay" / ("item_" + std::to_string(i++) + ".bin"), values);
    }
    if (!replay->contents().empty()) {
      Json shape = Json::array();
      for (auto e : replay->contents().front().shape()) shape.push_back(e);
      extra["replay_shape"] = shape;
    }
  }
  manifest.extra = std::move(extra);
  save_checkpoint(dir, manifest, nets.all_params(), nets.all_buffers());
}

Json load_state(const std::filesystem::path& dir, Harness& h, NetBundle& nets,
                LossCalibration& calib, ReplayBuffer<F>* replay) {
  const CheckpointManifest manifest = load_manifest(dir);
  if (manifest.kind != "state") {
    throw IoError("expected a training state at " + dir.string() + ", found kind '" +
                  manifest.kind + "'");
  }
  check_resume_compatible(manifest.extra.at("config"), h.cfg);
  load_checkpoint_values(dir, nets.all_params(), nets.all_buffers());
  h.rngs.restore(manifest.rng_states);
  h.state.epoch = manifest.extra.at("epoch").get<int64_t>();
  h.state.batch_in_epoch = manifest.extra.at("batch_in_epoch").get<int64_t>();
  h.state.global_step = manifest.extra.at("global_step").get<int64_t>();
  h.state.best_metric = manifest.extra.at("best_metric").get<double>();
  h.state.has_best = manifest.extra.at("has_best").get<bool>();
  calib = LossCalibration::from_json(manifest.extra.at("calibration"));
  if (replay != nullptr && manifest.extra.contains("replay_count")) {
    const auto count = manifest.extra.at("replay_count").get<size_t>();
    std::deque<Tensor<F>> items;
    if (count > 0) {
      Shape shape;
      for (const auto& e : manifest.extra.at("replay_shape")) shape.push_back(e.get<int64_t>());
      const size_t numel = shape_numel(shape);
      for (size_t i = 0; i < count; ++i) {
        auto values = read_raw<F>(dir / "replay" / ("item_" + std::to_string(i) + ".bin"), numel);
        items.emplace_back(shape, std::move(values));
      }
    }
    replay->restore(std::move(items));
  }
  return manifest.extra;
}

void save_model(const std::filesystem::path& dir, const std::string& kind, Harness& h,
                NetBundle& nets, const LossCalibration& calib) {
  CheckpointManifest manifest;
  manifest.kind = kind;
  manifest.element_type = element_type_name<F>();
  manifest.architecture = nets.architecture(h.cfg.preset);
  manifest.rng_states = h.rngs.states();
  Json extra;
  extra["config"] = config_echo(h.cfg);
  extra["epoch"] = h.state.epoch;
  extra["global_step"] = h.state.global_step;
  extra["best_metric"] = h.state.best_metric;
  extra["calibration"] = calib.to_json();
  manifest.extra = std::move(extra);
  save_checkpoint(dir, manifest, nets.all_params(), nets.all_buffers());
}

// Shared epoch/step loop: `step` runs one minibatch, `validate` returns the
// epoch's selection metric (higher is better when `maximize`).
template <typename StepFn, typename ValidateFn>
TrainResult run_loop(Harness& h, NetBundle& nets, LossCalibration& calib,
                     ReplayBuffer<F>* replay, JsonlLogger& log, const std::string& kind,
                     bool maximize, StepFn&& step, ValidateFn&& validate) {
  TrainResult result;
  const auto out_dir = h.cfg.output_dir;
  result.best_checkpoint = out_dir / "best";
  result.final_checkpoint = out_dir / "final";
  result.state_dir = out_dir / kStateDirName;

  const size_t batches = h.iterator.batches_per_epoch();
  for (; h.state.epoch < h.cfg.epochs; ++h.state.epoch) {
    for (; h.state.batch_in_epoch < static_cast<int64_t>(batches); ++h.state.batch_in_epoch) {
      const auto indices =
          h.iterator.batch(static_cast<uint64_t>(h.state.epoch), h.state.batch_in_epoch);
      step(indices);
      ++h.state.global_step;
      if (h.cfg.halt_after_steps > 0 && h.state.global_step >= h.cfg.halt_after_steps) {
        ++h.state.batch_in_epoch;
        if (h.state.batch_in_epoch == static_cast<int64_t>(batches)) {
          h.state.batch_in_epoch = 0;
          ++h.state.epoch;
        }
        save_state(result.state_dir, h, nets, calib, replay, false);
        result.completed = false;
        result.global_steps = h.state.global_step;
        result.best_metric = h.state.best_metric;
        return result;
      }
    }
    h.state.batch_in_epoch = 0;

    const bool last_epoch = h.state.epoch + 1 >= h.cfg.epochs;
    if (!last_epoch && h.cfg.validate_every_epochs > 1 &&
        (h.state.epoch + 1) % h.cfg.validate_every_epochs != 0) {
      continue;
    }
    const double metric = validate();
    log.write(Json{{"event", "validation"},
                   {"epoch", h.state.epoch},
                   {"step", h.state.global_step},
                   {"metric", metric}});
    const bool better =
        !h.state.has_best || (maximize ? metric > h.state.best_metric
                                       : metric < h.state.best_metric);
    if (better) {
      h.state.best_metric = metric;
      h.state.has_best = true;
      save_model(result.best_checkpoint, kind, h, nets, calib);
    }
    if (h.cfg.state_every_epochs > 0 &&
        h.state.epoch % static_cast<int64_t>(h.cfg.state_every_epochs) == 0) {
      // The stored position is the next epoch to run.
      ++h.state.epoch;
      save_state(result.state_dir, h, nets, calib, replay, false);
      --h.state.epoch;
    }
  }

  save_model(result.final_checkpoint, kind, h, nets, calib);
  if (!h.state.has_best) {
    // Zero-epoch runs still publish the initialization as "best".
    save_model(result.best_checkpoint, kind, h, nets, calib);
  }
  save_state(result.state_dir, h, nets, calib, replay, true);
  result.best_metric = h.state.best_metric;
  result.global_steps = h.state.global_step;
  result.completed = true;
  return result;
}

}  // namespace

void TrainConfig::apply_stage_defaults() {
  const bool paper = preset == "paper";
  if (epochs < 0) {
    switch (stage) {
      case Stage::kRecon: epochs = paper ? 1500 : 60; break;
      case Stage::kRefine: epochs = paper ? 200 : 40; break;
      case Stage::kJoint: epochs = paper ? 200 : 40; break;
      case Stage::kSegment: epochs = paper ? 100 : 15; break;
    }
  }
  if (batch_size < 0) {
    switch (stage) {
      case Stage::kRecon: batch_size = paper ? 20 : 8; break;
      case Stage::kRefine:
      case Stage::kJoint: batch_size = paper ? 5 : 8; break;
      case Stage::kSegment: batch_size = paper ? 20 : 8; break;
    }
  }
}

// --- stage 1 -------------------------------------------------------------------------

TrainResult train_stage1(const TrainConfig& config, const PhantomDataset& dataset) {
  TrainConfig cfg = config;
  cfg.apply_stage_defaults();
  std::filesystem::create_directories(cfg.output_dir);
  Harness h(cfg, dataset);
  JsonlLogger log(cfg.output_dir / "train_log.jsonl");

  NetBundle nets;
  CascadeConfig cascade_cfg = cascade_preset(cfg.preset);
  cascade_cfg.dc_soft_lambda = cfg.dc_soft_lambda;
  nets.cascade.emplace(cascade_cfg);
  LossCalibration calib;

  const auto state_dir = cfg.output_dir / kStateDirName;
  if (cfg.resume && std::filesystem::exists(state_dir / "manifest.json")) {
    load_state(state_dir, h, nets, calib, nullptr);
  } else {
    nets.cascade->init(h.stream("init"));
  }
  auto params = nets.cascade->parameters();

  ValSet val = make_val_set(h.val_items, cfg.seed, cfg.undersampling_ratio, cfg.noise_std);

  auto step = [&](const std::vector<size_t>& indices) {
    StepBatch batch = make_step_batch(h.train_items, indices, h.stream("masks"),
                                      h.stream("noise"), cfg.undersampling_ratio, cfg.noise_std,
                                      cfg.dc_soft_lambda);
    Tape<F> tape;
    double loss_value = 0.0;
    {
      TapeScope<F> scope(tape);
      Tensor<F> recon = nets.cascade->forward(batch.x_u, batch.kspace);
      Tensor<F> loss = mse_loss(batch.gt, recon);
      loss_value = loss.item();
      tape.backward(loss);
    }
    adam_step(params, h.adam);
    log.write(Json{{"stage", "recon"},
                   {"epoch", h.state.epoch},
                   {"step", h.state.global_step},
                   {"mse", loss_value}});
  };

  auto validate = [&]() {
    NoGradScope<F> eval;
    double acc = 0.0;
    size_t done = 0;
    while (done < val.items.size()) {
      const size_t take = std::min<size_t>(cfg.batch_size, val.items.size() - done);
      std::vector<const ComplexImage*> zf;
      std::vector<const KSpaceSample*> samples;
      std::vector<size_t> ids;
      for (size_t i = 0; i < take; ++i) {
        zf.push_back(&val.zero_filled[done + i]);
        samples.push_back(&val.samples[done + i]);
        ids.push_back(done + i);
      }
      Tensor<F> x_u = images_to_tensor<F>(zf);
      Tensor<F> recon = nets.cascade->forward(
          x_u, KSpaceBatch<F>::from_samples(samples, cfg.dc_soft_lambda));
      acc += mean_batch_psnr(recon, val.items, ids) * static_cast<double>(take);
      done += take;
    }
    return acc / static_cast<double>(val.items.size());
  };

  return run_loop(h, nets, calib, nullptr, log, "recon", /*maximize=*/true, step, validate);
}

// --- stages 2 and joint ---------------------------------------------------------------

namespace {

struct GanParts {
  double d_loss = 0.0, adv = 0.0, feat = 0.0, vgg = 0.0, pen = 0.0, total = 0.0;
};

TrainResult train_gan_stage(const TrainConfig& config, const PhantomDataset& dataset,
                            bool joint) {
  TrainConfig cfg = config;
  cfg.apply_stage_defaults();
  std::filesystem::create_directories(cfg.output_dir);
  Harness h(cfg, dataset);
  JsonlLogger log(cfg.output_dir / "train_log.jsonl");
  const std::string kind = joint ? "joint" : "refine";

  NetBundle nets;
  CascadeConfig cascade_cfg = cascade_preset(cfg.preset);
  cascade_cfg.dc_soft_lambda = cfg.dc_soft_lambda;
  if (!joint) {
    if (cfg.stage1_checkpoint.empty()) {
      throw ContractError("train refine: --stage1-ckpt is required");
    }
    CascadeModel stage1 = load_cascade_checkpoint(cfg.stage1_checkpoint);
    cascade_cfg = stage1.config;
    nets.cascade.emplace(std::move(stage1.net));
  } else {
    nets.cascade.emplace(cascade_cfg);
  }
  nets.refiner.emplace(refiner_preset(cfg.preset));
  nets.disc.emplace(discriminator_preset(cfg.preset));
  FeatureExtractorConfig fe_cfg = feature_extractor_preset(cfg.preset);
  fe_cfg.source = cfg.feature_source;
  nets.extractor.emplace(fe_cfg);

  LossCalibration calib;
  ReplayBuffer<F> replay(cfg.replay_capacity, cfg.replay_probability);

  const auto state_dir = cfg.output_dir / kStateDirName;
  if (cfg.resume && std::filesystem::exists(state_dir / "manifest.json")) {
    load_state(state_dir, h, nets, calib, &replay);
  } else {
    if (joint) nets.cascade->init(h.stream("init"));
    nets.refiner->init(h.stream("init"));
    if (joint) {
      // The ablation needs the visual path live from step one.
      initialize(nets.refiner->lambda(), InitScheme::scalar(1.0), h.stream("init"));
    }
    nets.disc->init(h.stream("init"));
  }

  auto r_params = nets.cascade->parameters();
  auto v_params = nets.refiner->parameters();
  auto d_params = nets.disc->parameters();
  AdamConfig adam_d = h.adam;
  if (cfg.disc_lr > 0) adam_d.lr = cfg.disc_lr;
  const int64_t warmup = joint ? 0 : cfg.disc_warmup_steps;
  ParamRefs<F> gen_params;
  if (joint) gen_params = r_params;
  gen_params.insert(gen_params.end(), v_params.begin(), v_params.end());
  if (!joint) set_requires_grad(r_params, false);  // stage 2 never touches R

  ValSet val = make_val_set(h.val_items, cfg.seed, cfg.undersampling_ratio, cfg.noise_std);

  auto gan_losses = [&](const Tensor<F>& gt, const Tensor<F>& x_hat, const Tensor<F>& x_v,
                        bool allow_calibration) {
    // Eval-mode D here: dropout masks off so the feature-matching pair is
    // computed under one deterministic network.
    auto real_out = [&] {
      NoGradScope<F> ng;
      return nets.disc->forward(gt, false);
    }();
    auto fake_out = nets.disc->forward(x_hat, false);
    Tensor<F> adv = adversarial_loss(fake_out.patch_map);
    Tensor<F> feat = feature_matching_loss(real_out.features, fake_out.features);
    Tensor<F> vgg = perceptual_loss(gt, x_hat, *nets.extractor);
    Tensor<F> pen = l1_penalty(x_v);
    if (allow_calibration && !calib.frozen()) {
      calib.calibrate(adv.item(), feat.item(), vgg.item(), pen.item());
      log.write(Json{{"event", "calibration"}, {"step", h.state.global_step},
                     {"calibration", calib.to_json()}});
    }
    Tensor<F> total = total_refiner_loss(adv, feat, vgg, pen, calib);
    return std::tuple{total, adv.item(), feat.item(), vgg.item(), pen.item()};
  };

  auto step = [&](const std::vector<size_t>& indices) {
    StepBatch batch = make_step_batch(h.train_items, indices, h.stream("masks"),
                                      h.stream("noise"), cfg.undersampling_ratio, cfg.noise_std,
                                      cfg.dc_soft_lambda);
    GanParts parts;
    // During the discriminator warm-up the gate is exactly zero, so
    // x_hat == R(x_u) and the refiner forward can be skipped outright
    // (step 0 still runs it once to calibrate the loss normalizers).
    const bool warming = h.state.global_step < warmup;
    const bool v_phase = !warming || h.state.global_step == 0;

    Tape<F> gen_tape;
    Tensor<F> x_hat, x_v;
    {
      TapeScope<F> scope(gen_tape);
      Tensor<F> x_rec;
      if (joint) {
        x_rec = nets.cascade->forward(batch.x_u, batch.kspace);
      } else {
        NoGradScope<F> frozen;
        x_rec = nets.cascade->forward(batch.x_u, batch.kspace);
      }
      if (v_phase) {
        auto out = nets.refiner->forward(x_rec, !warming);
        x_hat = out.x_hat;
        x_v = out.x_v;
      } else {
        x_hat = x_rec;
      }
    }

    // Discriminator first: replay-mixed detached fakes, one-sided smoothing.
    std::vector<Tensor<F>> fresh;
    for (size_t b = 0; b < indices.size(); ++b) fresh.push_back(slice_item(x_hat, b));
    Tensor<F> mixed = stack_items(replay.push_sample(fresh, h.stream("replay")));
    double p_real = 0.0, p_fake = 0.0;
    {
      Tape<F> d_tape;
      TapeScope<F> scope(d_tape);
      auto real_out = nets.disc->forward(batch.gt, true, &h.stream("dropout"));
      auto fake_out = nets.disc->forward(mixed, true, &h.stream("dropout"));
      Tensor<F> d_loss =
          discriminator_loss(real_out.patch_map, fake_out.patch_map, cfg.label_smoothing);
      parts.d_loss = d_loss.item();
      for (auto v : real_out.mean_prob) p_real += v / real_out.mean_prob.size();
      for (auto v : fake_out.mean_prob) p_fake += v / fake_out.mean_prob.size();
      d_tape.backward(d_loss);
    }
    adam_step(d_params, adam_d);

    // Generator side against the updated discriminator; idle during warm-up
    // apart from the calibration pass.
    if (v_phase) {
      TapeScope<F> scope(gen_tape);
      set_requires_grad(d_params, false);
      auto [total, adv, feat, vgg, pen] = gan_losses(batch.gt, x_hat, x_v, true);
      parts.adv = adv;
      parts.feat = feat;
      parts.vgg = vgg;
      parts.pen = pen;
      Tensor<F> gen_loss = total;
      if (joint) gen_loss = add(mse_loss(batch.gt, x_hat), total);
      parts.total = gen_loss.item();
      if (!warming) {
        gen_tape.backward(gen_loss);
      }
      set_requires_grad(d_params, true);
    }
    if (!warming) adam_step(gen_params, h.adam);

    log.write(Json{{"stage", kind},
                   {"epoch", h.state.epoch},
                   {"step", h.state.global_step},
                   {"d_loss", parts.d_loss},
                   {"p_real", p_real},
                   {"p_fake", p_fake},
                   {"adv", parts.adv},
                   {"feat", parts.feat},
                   {"vgg", parts.vgg},
                   {"pen", parts.pen},
                   {"total", parts.total},
                   {"lambda", static_cast<double>(nets.refiner->lambda().tensor.data()[0])}});
  };

  auto validate = [&]() {
    NoGradScope<F> eval;
    double total_acc = 0.0;
    double psnr_acc = 0.0;
    size_t done = 0;
    while (done < val.items.size()) {
      const size_t take = std::min<size_t>(cfg.batch_size, val.items.size() - done);
      std::vector<const ComplexImage*> zf, gts;
      std::vector<const KSpaceSample*> samples;
      std::vector<size_t> ids;
      for (size_t i = 0; i < take; ++i) {
        zf.push_back(&val.zero_filled[done + i]);
        gts.push_back(&val.items[done + i]->image);
        samples.push_back(&val.samples[done + i]);
        ids.push_back(done + i);
      }
      Tensor<F> x_u = images_to_tensor<F>(zf);
      Tensor<F> gt = images_to_tensor<F>(gts);
      Tensor<F> x_rec = nets.cascade->forward(
          x_u, KSpaceBatch<F>::from_samples(samples, cfg.dc_soft_lambda));
      auto out = nets.refiner->forward(x_rec, false);
      psnr_acc += mean_batch_psnr(out.x_hat, val.items, ids) * static_cast<double>(take);
      if (calib.frozen()) {
        auto [total, adv, feat, vgg, pen] = gan_losses(gt, out.x_hat, out.x_v, false);
        total_acc += static_cast<double>(total.item()) * static_cast<double>(take);
      }
      done += take;
    }
    const double n = static_cast<double>(val.items.size());
    log.write(Json{{"event", "validation_psnr"},
                   {"epoch", h.state.epoch},
                   {"psnr", psnr_acc / n}});
    // Selection by validation refinement loss (lower is better).
    return calib.frozen() ? total_acc / n : std::numeric_limits<double>::max();
  };

  TrainResult result = run_loop(h, nets, calib, &replay, log, kind, /*maximize=*/false, step,
                                validate);
  if (!joint) set_requires_grad(r_params, true);  // leave the nets reusable
  return result;
}

}  // namespace

TrainResult train_stage2(const TrainConfig& config, const PhantomDataset& dataset) {
  return train_gan_stage(config, dataset, /*joint=*/false);
}

TrainResult train_joint_ablation(const TrainConfig& config, const PhantomDataset& dataset) {
  return train_gan_stage(config, dataset, /*joint=*/true);
}

// --- segmenter --------------------------------------------------------------------------

namespace {

Tensor<F> magnitude_batch(const std::vector<const LabeledImage*>& items,
                          const std::vector<size_t>& indices) {
  const int h = items[indices[0]]->image.height, w = items[indices[0]]->image.width;
  const size_t plane = static_cast<size_t>(h) * w;
  Tensor<F> out({static_cast<int64_t>(indices.size()), 1, h, w});
  auto ov = out.data();
  for (size_t b = 0; b < indices.size(); ++b) {
    const auto mag = magnitude(items[indices[b]]->image);
    for (size_t i = 0; i < plane; ++i) ov[b * plane + i] = static_cast<F>(mag[i]);
  }
  return out;
}

Tensor<F> label_batch(const std::vector<const LabeledImage*>& items,
                      const std::vector<size_t>& indices) {
  const int h = items[indices[0]]->image.height, w = items[indices[0]]->image.width;
  const size_t plane = static_cast<size_t>(h) * w;
  Tensor<F> out({static_cast<int64_t>(indices.size()), 1, h, w});
  auto ov = out.data();
  for (size_t b = 0; b < indices.size(); ++b) {
    const auto& label = items[indices[b]]->label;
    for (size_t i = 0; i < plane; ++i) ov[b * plane + i] = label[i] ? F(1) : F(0);
  }
  return out;
}

Tensor<F> pixel_bce(const Tensor<F>& probs, const Tensor<F>& targets) {
  Tensor<F> pc = clamp(probs, kProbabilityClamp, 1.0 - kProbabilityClamp);
  Tensor<F> one_minus_p = add_scalar(mul_scalar(pc, -1.0), 1.0);
  Tensor<F> one_minus_t = add_scalar(mul_scalar(targets, -1.0), 1.0);
  Tensor<F> term = add(mul(targets, log_op(pc)), mul(one_minus_t, log_op(one_minus_p)));
  return mul_scalar(mean_all(term), -1.0);
}

}  // namespace

TrainResult train_segmenter(const TrainConfig& config, const PhantomDataset& dataset) {
  TrainConfig cfg = config;
  cfg.apply_stage_defaults();
  std::filesystem::create_directories(cfg.output_dir);
  Harness h(cfg, dataset);
  JsonlLogger log(cfg.output_dir / "train_log.jsonl");

  NetBundle nets;
  nets.segmenter.emplace(segmenter_preset(cfg.preset));
  LossCalibration calib;

  const auto state_dir = cfg.output_dir / kStateDirName;
  if (cfg.resume && std::filesystem::exists(state_dir / "manifest.json")) {
    load_state(state_dir, h, nets, calib, nullptr);
  } else {
    nets.segmenter->init(h.stream("init"));
  }
  auto params = nets.segmenter->parameters();

  auto step = [&](const std::vector<size_t>& indices) {
    Tensor<F> x = magnitude_batch(h.train_items, indices);
    Tensor<F> t = label_batch(h.train_items, indices);
    Tape<F> tape;
    double loss_value = 0.0;
    {
      TapeScope<F> scope(tape);
      Tensor<F> probs = nets.segmenter->forward(x, true);
      Tensor<F> loss = pixel_bce(probs, t);
      loss_value = loss.item();
      tape.backward(loss);
    }
    adam_step(params, h.adam);
    log.write(Json{{"stage", "segment"},
                   {"epoch", h.state.epoch},
                   {"step", h.state.global_step},
                   {"bce", loss_value}});
  };

  auto validate = [&]() {
    NoGradScope<F> eval;
    double acc = 0.0;
    size_t done = 0;
    while (done < h.val_items.size()) {
      const size_t take = std::min<size_t>(cfg.batch_size, h.val_items.size() - done);
      std::vector<size_t> ids(take);
      for (size_t i = 0; i < take; ++i) ids[i] = done + i;
      Tensor<F> x = magnitude_batch(h.val_items, ids);
      Tensor<F> probs = nets.segmenter->forward(x, false);
      const size_t plane = probs.numel() / take;
      auto pv = probs.data();
      for (size_t b = 0; b < take; ++b) {
        std::vector<uint8_t> pred(plane);
        for (size_t i = 0; i < plane; ++i) pred[i] = pv[b * plane + i] >= F(0.5) ? 1 : 0;
        acc += dice(pred, h.val_items[done + b]->label);
      }
      done += take;
    }
    return acc / static_cast<double>(h.val_items.size());
  };

  return run_loop(h, nets, calib, nullptr, log, "segment", /*maximize=*/true, step, validate);
}

TrainResult train(const TrainConfig& config, const PhantomDataset& dataset) {
  switch (config.stage) {
    case TrainConfig::Stage::kRecon: return train_stage1(config, dataset);
    case TrainConfig::Stage::kRefine: return train_stage2(config, dataset);
    case TrainConfig::Stage::kJoint: return train_joint_ablation(config, dataset);
    case TrainConfig::Stage::kSegment: return train_segmenter(config, dataset);
  }
  throw ContractError("unknown training stage");
}

// --- checkpoint loading --------------------------------------------------------------------

CascadeModel load_cascade_checkpoint(const std::filesystem::path& dir) {
  const CheckpointManifest manifest = load_manifest(dir);
  if (manifest.kind != "recon" && manifest.kind != "refine" && manifest.kind != "joint" &&
      manifest.kind != "state") {
    throw IoError("checkpoint " + dir.string() + " (kind '" + manifest.kind +
                  "') does not contain a reconstruction cascade");
  }
  CascadeConfig config = manifest.architecture.at("cascade").get<CascadeConfig>();
  CascadeModel model{config, CascadeNet<F>(config)};
  auto params = model.net.parameters();
  load_checkpoint_values(dir, params);
  return model;
}

RefineModel load_refine_checkpoint(const std::filesystem::path& dir) {
  const CheckpointManifest manifest = load_manifest(dir);
  if (manifest.kind != "refine" && manifest.kind != "joint") {
    throw IoError("checkpoint " + dir.string() + " has kind '" + manifest.kind +
                  "', expected refine or joint");
  }
  CascadeConfig cascade_cfg = manifest.architecture.at("cascade").get<CascadeConfig>();
  RefinerConfig refiner_cfg = manifest.architecture.at("refiner").get<RefinerConfig>();
  FeatureExtractorConfig fe_cfg =
      manifest.architecture.at("extractor").get<FeatureExtractorConfig>();
  RefineModel model{cascade_cfg,  CascadeNet<F>(cascade_cfg), refiner_cfg,
                    RefinerNet<F>(refiner_cfg), fe_cfg, LossCalibration{}, manifest.kind};
  ParamRefs<F> params = model.cascade.parameters();
  auto v = model.refiner.parameters();
  params.insert(params.end(), v.begin(), v.end());
  // Discriminator weights also live in the checkpoint but are not needed here.
  NamedBuffers<F> buffers = model.refiner.buffers();
  load_checkpoint_values(dir, params, buffers);
  if (manifest.extra.contains("calibration")) {
    model.calibration = LossCalibration::from_json(manifest.extra.at("calibration"));
  }
  return model;
}

SegmenterModel load_segmenter_checkpoint(const std::filesystem::path& dir) {
  const CheckpointManifest manifest = load_manifest(dir);
  if (manifest.kind != "segment") {
    throw IoError("checkpoint " + dir.string() + " has kind '" + manifest.kind +
                  "', expected segment");
  }
  SegmenterConfig config = manifest.architecture.at("segmenter").get<SegmenterConfig>();
  SegmenterModel model{config, SegmenterNet<F>(config)};
  auto params = model.net.parameters();
  auto buffers = model.net.buffers();
  load_checkpoint_values(dir, params, buffers);
  return model;
}

// --- evaluation ------------------------------------------------------------------------------

namespace {

struct Method {
  std::string name;
  std::optional<CascadeModel> cascade;
  std::optional<RefineModel> refine;
  bool identity = false;
  bool zero_filled = false;
  std::string checkpoint_id;
};

std::vector<Method> build_methods(const EvalConfig& config) {
  std::vector<Method> methods;
  methods.push_back(Method{.name = "zero_filled", .zero_filled = true});
  for (const auto& path : config.checkpoints) {
    const CheckpointManifest manifest = load_manifest(path);
    Method m;
    m.checkpoint_id = manifest.params_hash;
    if (manifest.kind == "recon") {
      m.name = "stage1";
      m.cascade = load_cascade_checkpoint(path);
    } else if (manifest.kind == "refine") {
      m.name = "two_stage";
      m.refine = load_refine_checkpoint(path);
    } else if (manifest.kind == "joint") {
      m.name = "joint";
      m.refine = load_refine_checkpoint(path);
    } else {
      throw IoError("checkpoint " + path.string() + " has kind '" + manifest.kind +
                    "', expected recon, refine or joint");
    }
    methods.push_back(std::move(m));
  }
  if (config.include_identity) methods.push_back(Method{.name = "identity", .identity = true});
  // Disambiguate duplicate kinds.
  for (size_t i = 0; i < methods.size(); ++i) {
    size_t dup = 0;
    for (size_t j = 0; j < i; ++j) {
      if (methods[j].name.starts_with(methods[i].name)) ++dup;
    }
    if (dup > 0) methods[i].name += "_" + std::to_string(dup + 1);
  }
  return methods;
}

ComplexImage run_method(Method& method, const ComplexImage& gt, const KSpaceSample& sample,
                        const ComplexImage& x_u) {
  if (method.zero_filled) return x_u;
  if (method.identity) return gt;
  if (method.cascade) return reconstruct(x_u, sample, method.cascade->net);
  ComplexImage x_rec = reconstruct(x_u, sample, method.refine->cascade);
  return refine(x_rec, method.refine->refiner).first;
}

}  // namespace

std::vector<EvalMethodResult> evaluate(const EvalConfig& config, const PhantomDataset& dataset) {
  auto items = subset_view(dataset.test, config.test_subset);
  if (items.empty()) throw ContractError("evaluate: empty test split");
  std::vector<Method> methods = build_methods(config);
  std::optional<SegmenterModel> segmenter;
  if (!config.segmenter_checkpoint.empty()) {
    segmenter = load_segmenter_checkpoint(config.segmenter_checkpoint);
  }

  // One freshly drawn mask per test image, shared across every method.
  RngStream mask_rng = RngSet::derive(config.seed, "masks.test");
  RngStream noise_rng = RngSet::derive(config.seed, "noise.test");
  std::vector<KSpaceSample> samples;
  std::vector<ComplexImage> zero_filled;
  for (const auto* item : items) {
    SamplingMask mask =
        generate_mask(item->image.width, item->image.height, config.undersampling_ratio, mask_rng);
    samples.push_back(acquire(item->image, mask, config.noise_std, noise_rng));
    zero_filled.push_back(zero_fill(samples.back()));
  }

  std::vector<EvalMethodResult> results;
  for (auto& method : methods) {
    std::vector<MetricsRecord> records;
    std::vector<ComplexImage> recons;
    recons.reserve(items.size());
    for (size_t i = 0; i < items.size(); ++i) {
      recons.push_back(run_method(method, items[i]->image, samples[i], zero_filled[i]));
      const auto& gt = items[i]->image;
      MetricsRecord rec;
      rec.id = items[i]->id;
      const auto gt_mag = magnitude(gt);
      const auto rec_mag = magnitude(recons.back());
      rec.psnr_db = psnr(gt_mag, rec_mag, gt.intensity_scale);
      SsimParams ssim_params;
      ssim_params.level = gt.intensity_scale;
      rec.ssim = ssim(gt.height, gt.width, gt_mag, rec_mag, ssim_params);
      if (segmenter) {
        rec.dice = dice(binarize(segment(rec_mag, gt.height, gt.width, segmenter->net)),
                        items[i]->label);
      }
      records.push_back(std::move(rec));
    }
    std::optional<double> sis_value;
    if (segmenter) {
      std::vector<const ComplexImage*> rec_ptrs, gt_ptrs;
      std::vector<const std::vector<uint8_t>*> label_ptrs;
      for (size_t i = 0; i < items.size(); ++i) {
        rec_ptrs.push_back(&recons[i]);
        gt_ptrs.push_back(&items[i]->image);
        label_ptrs.push_back(&items[i]->label);
      }
      sis_value = sis(rec_ptrs, gt_ptrs, label_ptrs, segmenter->net).sis;
    }
    Json provenance;
    provenance["method"] = method.name;
    provenance["dataset_hash"] = hex64(dataset_hash(dataset));
    provenance["seed"] = config.seed;
    provenance["undersampling_ratio"] = config.undersampling_ratio;
    provenance["noise_std"] = config.noise_std;
    provenance["checkpoint_id"] = method.checkpoint_id;
    results.push_back(EvalMethodResult{method.name,
                                       aggregate_report(std::move(records), sis_value,
                                                        std::move(provenance))});
  }
  return results;
}

std::vector<ReconOutputs> reconstruct_test_split(const EvalConfig& config,
                                                 const PhantomDataset& dataset) {
  auto items = subset_view(dataset.test, config.test_subset);
  if (items.empty()) throw ContractError("reconstruct: empty test split");
  std::optional<CascadeModel> cascade;
  std::optional<RefineModel> refiner;
  for (const auto& path : config.checkpoints) {
    const CheckpointManifest manifest = load_manifest(path);
    if (manifest.kind == "recon") {
      cascade = load_cascade_checkpoint(path);
    } else if (manifest.kind == "refine" || manifest.kind == "joint") {
      refiner = load_refine_checkpoint(path);
    } else {
      throw IoError("checkpoint " + path.string() + " has kind '" + manifest.kind +
                    "', expected recon, refine or joint");
    }
  }

  RngStream mask_rng = RngSet::derive(config.seed, "masks.test");
  RngStream noise_rng = RngSet::derive(config.seed, "noise.test");
  std::vector<ReconOutputs> out;
  for (const auto* item : items) {
    const auto& gt = item->image;
    SamplingMask mask = generate_mask(gt.width, gt.height, config.undersampling_ratio, mask_rng);
    KSpaceSample sample = acquire(gt, mask, config.noise_std, noise_rng);
    ReconOutputs rec;
    rec.id = item->id;
    rec.ground_truth = gt;
    rec.zero_filled = zero_fill(sample);
    rec.label = item->label;
    if (cascade) rec.stage1 = reconstruct(rec.zero_filled, sample, cascade->net);
    if (refiner) {
      ComplexImage base = reconstruct(rec.zero_filled, sample, refiner->cascade);
      rec.refined = refine(base, refiner->refiner).first;
    }
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace csmri
