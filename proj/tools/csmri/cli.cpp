#include "csmri/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "csmri/io.hpp"
#include "csmri/metrics.hpp"
#include "csmri/phantom.hpp"
#include "csmri/plots.hpp"
#include "csmri/png.hpp"
#include "csmri/training.hpp"

namespace csmri::cli {
namespace {

using Json = nlohmann::ordered_json;

void write_resolved_config(CLI::App* cmd, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::string text = "# resolved configuration (" + cmd->get_name() + ")\n";
  text += cmd->config_to_str(true, false);
  write_text(out_dir / "resolved_config.txt", text);
}

// Config files are plain `key = value` lines with `#` comments; keys name the
// subcommand's long flags. Values from the file are injected before parsing,
// skipping any key also given on the command line, so flags override the file.
std::vector<std::pair<std::string, std::string>> parse_key_value_file(
    const std::filesystem::path& path) {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::istringstream in(read_text(path));
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) +
                        ": expected 'key = value'");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
      value = value.substr(1, value.size() - 2);
    }
    if (key.empty() || value.empty()) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) +
                        ": expected 'key = value'");
    }
    pairs.emplace_back(std::move(key), std::move(value));
  }
  return pairs;
}

std::vector<std::string> inject_config_file(std::vector<std::string> tokens,
                                            const std::string& flag) {
  std::string file;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == flag && i + 1 < tokens.size()) {
      file = tokens[i + 1];
    } else if (tokens[i].starts_with(flag + "=")) {
      file = tokens[i].substr(flag.size() + 1);
    }
  }
  if (file.empty()) return tokens;

  std::set<std::string> given;
  for (const auto& t : tokens) {
    if (t.starts_with("--")) given.insert(t.substr(0, t.find('=')));
  }
  std::vector<std::string> injected;
  for (const auto& [key, value] : parse_key_value_file(file)) {
    if (given.count("--" + key)) continue;
    injected.push_back("--" + key);
    injected.push_back(value);
  }
  // tokens[0] is the subcommand name.
  tokens.insert(tokens.begin() + 1, injected.begin(), injected.end());
  return tokens;
}

// --- gen-data ---------------------------------------------------------------------

struct GenDataArgs {
  std::string out;
  std::string spec_file;
  PhantomSpec spec;
};

void setup_gen_data(CLI::App& app, GenDataArgs& args) {
  CLI::App* cmd = app.add_subcommand("gen-data", "Generate a synthetic phantom dataset");
  cmd->add_option("--spec", args.spec_file, "Spec file (key = value lines, # comments)");
  cmd->add_option("--out", args.out, "Output dataset directory")->required();
  cmd->add_option("--seed", args.spec.seed, "Generation seed");
  cmd->add_option("--size", args.spec.image_size, "Image size in pixels");
  cmd->add_option("--train", args.spec.train_count, "Training image count");
  cmd->add_option("--val", args.spec.val_count, "Validation image count");
  cmd->add_option("--test", args.spec.test_count, "Test image count");
  cmd->add_option("--roi-contrast", args.spec.roi_contrast, "ROI intensity contrast");
  cmd->add_option("--roi-fraction", args.spec.roi_fraction, "Fraction of images with an ROI");
  cmd->add_option("--phase-smoothness", args.spec.phase_smoothness, "Phase field scale");
  cmd->callback([cmd, &args] {
    PhantomDataset dataset = generate_dataset(args.spec);
    save_dataset(dataset, args.out);
    write_resolved_config(cmd, args.out);
    std::cout << "dataset written to " << args.out << " (hash "
              << hex64(dataset_hash(dataset)) << ")\n";
  });
}

// --- train family ------------------------------------------------------------------

struct TrainArgs {
  TrainConfig config;
  std::string data, out, stage1, config_file;
};

void add_train_options(CLI::App* cmd, TrainArgs& args) {
  cmd->add_option("--config", args.config_file, "Config file (key = value lines, # comments)");
  cmd->add_option("--data", args.data, "Dataset directory")->required();
  cmd->add_option("--out", args.out, "Output directory")->required();
  cmd->add_option("--seed", args.config.seed, "Run seed (fans out to all rng streams)");
  cmd->add_option("--epochs", args.config.epochs, "Epoch count (-1 = stage default)");
  cmd->add_option("--batch-size", args.config.batch_size, "Batch size (-1 = stage default)");
  cmd->add_option("--lr", args.config.lr, "Adam learning rate");
  cmd->add_option("--beta1", args.config.beta1, "Adam beta1");
  cmd->add_option("--beta2", args.config.beta2, "Adam beta2");
  cmd->add_option("--ratio", args.config.undersampling_ratio,
                  "Undersampling ratio (0.25 = 4x, 0.125 = 8x)");
  cmd->add_option("--noise-std", args.config.noise_std, "Acquisition noise std");
  cmd->add_option("--preset", args.config.preset, "Architecture preset: desk or paper");
  cmd->add_option("--train-subset", args.config.train_subset,
                  "Use only the first N training images (0 = all)");
  cmd->add_option("--val-subset", args.config.val_subset,
                  "Use only the first N validation images (0 = all)");
  cmd->add_option("--halt-steps", args.config.halt_after_steps,
                  "Pause after this many global steps (state saved, 0 = off)");
  cmd->add_option("--disc-lr", args.config.disc_lr,
                  "Discriminator learning rate (0 = same as --lr)");
  cmd->add_option("--disc-warmup-steps", args.config.disc_warmup_steps,
                  "Discriminator-only steps before the refiner optimizer engages");
  cmd->add_option("--validate-every", args.config.validate_every_epochs,
                  "Validation cadence in epochs");
  cmd->add_flag("--resume", args.config.resume, "Resume from <out>/state");
  cmd->add_option("--feature-source", args.config.feature_source,
                  "Perceptual feature weights: seeded-random or a checkpoint dir");
}

void run_training(CLI::App* cmd, TrainArgs& args, TrainConfig::Stage stage) {
  args.config.stage = stage;
  args.config.dataset_dir = args.data;
  args.config.output_dir = args.out;
  args.config.stage1_checkpoint = args.stage1;
  std::filesystem::create_directories(args.out);
  write_resolved_config(cmd, args.out);
  PhantomDataset dataset = load_dataset(args.data);
  TrainResult result = train(args.config, dataset);
  if (!result.completed) {
    std::cout << "halted after " << result.global_steps << " steps; state saved to "
              << result.state_dir.string() << "\n";
    return;
  }
  std::cout << "training complete: best metric " << result.best_metric << ", best checkpoint "
            << result.best_checkpoint.string() << "\n";
}

void setup_train(CLI::App& app, const char* name, const char* help, TrainConfig::Stage stage,
                 TrainArgs& args) {
  CLI::App* cmd = app.add_subcommand(name, help);
  add_train_options(cmd, args);
  if (stage == TrainConfig::Stage::kRefine) {
    cmd->add_option("--stage1-ckpt", args.stage1, "Stage-1 reconstruction checkpoint")
        ->required();
  }
  cmd->callback([cmd, &args, stage] { run_training(cmd, args, stage); });
}

// --- recon ---------------------------------------------------------------------------

struct ReconArgs {
  std::string data, out, ckpt, refine_ckpt;
  EvalConfig config;
};

void setup_recon(CLI::App& app, ReconArgs& args) {
  CLI::App* cmd = app.add_subcommand("recon", "Reconstruct the test split to image files");
  cmd->add_option("--ckpt", args.ckpt, "Stage-1 reconstruction checkpoint")->required();
  cmd->add_option("--refine-ckpt", args.refine_ckpt, "Refinement checkpoint");
  cmd->add_option("--data", args.data, "Dataset directory")->required();
  cmd->add_option("--out", args.out, "Output directory")->required();
  cmd->add_option("--seed", args.config.seed, "Mask seed");
  cmd->add_option("--ratio", args.config.undersampling_ratio, "Undersampling ratio");
  cmd->add_option("--noise-std", args.config.noise_std, "Acquisition noise std");
  cmd->add_option("--subset", args.config.test_subset, "First N test images (0 = all)");
  cmd->callback([cmd, &args] {
    args.config.checkpoints = {args.ckpt};
    if (!args.refine_ckpt.empty()) args.config.checkpoints.push_back(args.refine_ckpt);
    PhantomDataset dataset = load_dataset(args.data);
    auto outputs = reconstruct_test_split(args.config, dataset);
    const std::filesystem::path out_dir(args.out);
    for (const char* sub : {"zero_filled", "stage1", "refined", "ground_truth"}) {
      std::filesystem::create_directories(out_dir / sub);
    }
    Json index = Json::array();
    for (const auto& rec : outputs) {
      save_complex_image(rec.zero_filled, out_dir / "zero_filled" / (rec.id + ".bin"));
      save_complex_image(rec.ground_truth, out_dir / "ground_truth" / (rec.id + ".bin"));
      if (rec.stage1) save_complex_image(*rec.stage1, out_dir / "stage1" / (rec.id + ".bin"));
      if (rec.refined) save_complex_image(*rec.refined, out_dir / "refined" / (rec.id + ".bin"));
      write_raw(out_dir / "ground_truth" / (rec.id + ".label.bin"), rec.label);
      index.push_back(rec.id);
    }
    Json manifest;
    manifest["ids"] = std::move(index);
    manifest["has_stage1"] = !outputs.empty() && outputs.front().stage1.has_value();
    manifest["has_refined"] = !outputs.empty() && outputs.front().refined.has_value();
    write_text(out_dir / "index.json", manifest.dump(2) + "\n");
    write_resolved_config(cmd, out_dir);
    std::cout << outputs.size() << " test images reconstructed into " << args.out << "\n";
  });
}

// --- eval ----------------------------------------------------------------------------

struct EvalArgs {
  std::string data, out, seg_ckpt;
  std::vector<std::string> ckpts;
  EvalConfig config;
};

void setup_eval(CLI::App& app, EvalArgs& args) {
  CLI::App* cmd = app.add_subcommand("eval", "Compute metrics reports on the test split");
  cmd->add_option("--data", args.data, "Dataset directory")->required();
  cmd->add_option("--ckpts", args.ckpts, "Checkpoints to evaluate (recon/refine/joint)");
  cmd->add_option("--seg-ckpt", args.seg_ckpt, "Segmenter checkpoint (enables Dice and SIS)");
  cmd->add_option("--out", args.out, "Output directory")->required();
  cmd->add_option("--seed", args.config.seed, "Mask seed (fixed across methods)");
  cmd->add_option("--ratio", args.config.undersampling_ratio, "Undersampling ratio");
  cmd->add_option("--noise-std", args.config.noise_std, "Acquisition noise std");
  cmd->add_flag("--include-identity", args.config.include_identity,
                "Also evaluate the ground truth as a reconstruction");
  cmd->add_option("--subset", args.config.test_subset, "First N test images (0 = all)");
  cmd->callback([cmd, &args] {
    for (const auto& c : args.ckpts) args.config.checkpoints.emplace_back(c);
    args.config.segmenter_checkpoint = args.seg_ckpt;
    PhantomDataset dataset = load_dataset(args.data);
    auto results = evaluate(args.config, dataset);
    const std::filesystem::path out_dir(args.out);
    for (const auto& r : results) {
      std::filesystem::create_directories(out_dir / r.method);
      write_text(out_dir / r.method / "report.json", r.report.to_json().dump(2) + "\n");
      write_text(out_dir / r.method / "report.csv", r.report.to_csv());
      std::cout << r.method << ": psnr " << r.report.psnr_db.mean << " +- "
                << r.report.psnr_db.std_dev << " dB, ssim " << r.report.ssim.mean;
      if (r.report.sis) std::cout << ", sis " << *r.report.sis;
      std::cout << "\n";
    }
    write_resolved_config(cmd, out_dir);
  });
}

// --- report --------------------------------------------------------------------------

struct ReportArgs {
  std::vector<std::string> eval_dirs, train_dirs;
  std::string recon_dir, seg_ckpt, out;
  int panel_count = 6;
};

std::vector<uint8_t> contour_of(const std::vector<uint8_t>& mask, int h, int w) {
  std::vector<uint8_t> edge(mask.size(), 0);
  auto at = [&](int r, int c) -> bool {
    if (r < 0 || r >= h || c < 0 || c >= w) return false;
    return mask[static_cast<size_t>(r) * w + c] != 0;
  };
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (!at(r, c)) continue;
      if (!at(r - 1, c) || !at(r + 1, c) || !at(r, c - 1) || !at(r, c + 1)) {
        edge[static_cast<size_t>(r) * w + c] = 1;
      }
    }
  }
  return edge;
}

void blit_panel(std::vector<uint8_t>& canvas, int canvas_w, int x0, const ComplexImage& img,
                const std::vector<uint8_t>* predicted, const std::vector<uint8_t>* truth) {
  const int h = img.height, w = img.width;
  const auto mag = magnitude(img);
  double peak = img.intensity_scale > 0 ? img.intensity_scale : 1.0;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const size_t i = static_cast<size_t>(r) * w + c;
      const double v = std::clamp(mag[i] / peak, 0.0, 1.0);
      auto g = static_cast<uint8_t>(v * 255.0 + 0.5);
      uint8_t rgb[3] = {g, g, g};
      if (truth && (*truth)[i]) {
        rgb[0] = 220; rgb[1] = 30; rgb[2] = 30;
      }
      if (predicted && (*predicted)[i]) {
        rgb[0] = 255; rgb[1] = 220; rgb[2] = 0;
      }
      const size_t o = (static_cast<size_t>(r) * canvas_w + x0 + c) * 3;
      canvas[o] = rgb[0];
      canvas[o + 1] = rgb[1];
      canvas[o + 2] = rgb[2];
    }
  }
}

void emit_panels(const ReportArgs& args, const std::filesystem::path& out_dir) {
  const std::filesystem::path recon_dir(args.recon_dir);
  Json index;
  try {
    index = Json::parse(read_text(recon_dir / "index.json"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("recon index " + (recon_dir / "index.json").string() + ": " + e.what());
  }
  std::optional<SegmenterModel> segmenter;
  if (!args.seg_ckpt.empty()) segmenter = load_segmenter_checkpoint(args.seg_ckpt);

  std::vector<std::string> columns{"zero_filled"};
  if (index.value("has_stage1", false)) columns.push_back("stage1");
  if (index.value("has_refined", false)) columns.push_back("refined");
  columns.push_back("ground_truth");

  std::filesystem::create_directories(out_dir / "panels");
  int done = 0;
  for (const auto& id_json : index.at("ids")) {
    if (done++ >= args.panel_count) break;
    const auto id = id_json.get<std::string>();
    std::vector<ComplexImage> images;
    for (const auto& col : columns) {
      images.push_back(load_complex_image(recon_dir / col / (id + ".bin")));
    }
    const int h = images[0].height, w = images[0].width;
    auto label = read_raw<uint8_t>(recon_dir / "ground_truth" / (id + ".label.bin"),
                                   static_cast<size_t>(h) * w);
    const auto truth_edge = contour_of(label, h, w);

    const int gap = 2;
    const int canvas_w = static_cast<int>(columns.size()) * (w + gap) - gap;
    std::vector<uint8_t> canvas(static_cast<size_t>(canvas_w) * h * 3, 255);
    for (size_t k = 0; k < columns.size(); ++k) {
      std::optional<std::vector<uint8_t>> predicted;
      if (segmenter) {
        const auto probs = segment(magnitude(images[k]), h, w, segmenter->net);
        predicted = contour_of(binarize(probs), h, w);
      }
      blit_panel(canvas, canvas_w, static_cast<int>(k) * (w + gap), images[k],
                 predicted ? &*predicted : nullptr, &truth_edge);
    }
    write_png_rgb8(out_dir / "panels" / (id + ".png"), canvas_w, h, canvas);
  }
  // Column order note for readers of the panels.
  std::string legend = "panel columns:";
  for (const auto& c : columns) legend += " " + c;
  legend += "\ncontours: yellow = predicted segmentation, red = ground truth\n";
  write_text(out_dir / "panels" / "README.txt", legend);
}

void emit_loss_curves(const ReportArgs& args, const std::filesystem::path& out_dir) {
  for (const auto& dir : args.train_dirs) {
    std::ifstream in(std::filesystem::path(dir) / "train_log.jsonl");
    if (!in) throw IoError("no train_log.jsonl under " + dir);
    std::map<std::string, Series> series;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      Json j = Json::parse(line);
      if (!j.contains("step") || j.contains("event")) continue;
      const double step = j.at("step").get<double>();
      for (const auto& key : {"mse", "d_loss", "adv", "feat", "vgg", "pen", "total", "bce"}) {
        if (!j.contains(key)) continue;
        auto& s = series[key];
        s.label = key;
        s.xs.push_back(step);
        s.ys.push_back(j.at(key).get<double>());
      }
    }
    std::vector<Series> all;
    for (auto& [_, s] : series) all.push_back(std::move(s));
    const auto name = std::filesystem::path(dir).filename().string();
    write_line_chart_svg(out_dir / ("losses_" + name + ".svg"), "training losses: " + name,
                         "step", "loss", all);
  }
}

void setup_report(CLI::App& app, ReportArgs& args) {
  CLI::App* cmd = app.add_subcommand(
      "report", "Comparison tables and plots from eval and training outputs");
  cmd->add_option("--eval-dirs", args.eval_dirs, "Directories written by eval")->required();
  cmd->add_option("--train-dirs", args.train_dirs, "Training output dirs for loss curves");
  cmd->add_option("--recon-dir", args.recon_dir, "Directory written by recon (panels)");
  cmd->add_option("--seg-ckpt", args.seg_ckpt, "Segmenter for panel contours");
  cmd->add_option("--panel-count", args.panel_count, "Number of side-by-side panels");
  cmd->add_option("--out", args.out, "Output directory")->required();
  cmd->callback([cmd, &args] {
    const std::filesystem::path out_dir(args.out);
    std::filesystem::create_directories(out_dir);

    // Comparison table over every method report found.
    struct Row {
      std::string method;
      MetricsReport report;
    };
    std::vector<Row> rows;
    for (const auto& dir : args.eval_dirs) {
      for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (!entry.is_directory()) continue;
        const auto report_path = entry.path() / "report.json";
        if (!std::filesystem::exists(report_path)) continue;
        Json j = Json::parse(read_text(report_path));
        rows.push_back({entry.path().filename().string(), MetricsReport::from_json(j)});
      }
    }
    if (rows.empty()) throw ContractError("report: no report.json found under --eval-dirs");
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
      return a.method < b.method;
    });

    std::ostringstream csv;
    csv << "method,psnr_mean,psnr_std,ssim_mean,ssim_std,dice_mean,sis\n";
    for (const auto& row : rows) {
      csv << row.method << ',' << row.report.psnr_db.mean << ',' << row.report.psnr_db.std_dev
          << ',' << row.report.ssim.mean << ',' << row.report.ssim.std_dev << ',';
      if (row.report.dice) csv << row.report.dice->mean;
      csv << ',';
      if (row.report.sis) csv << *row.report.sis;
      csv << '\n';
    }
    write_text(out_dir / "comparison.csv", csv.str());

    // Per-method metric distributions as sorted-value curves.
    for (const char* metric : {"psnr", "ssim"}) {
      std::vector<Series> dist;
      for (const auto& row : rows) {
        Series s;
        s.label = row.method;
        std::vector<double> values;
        for (const auto& r : row.report.records) {
          values.push_back(std::string(metric) == "psnr" ? r.psnr_db : r.ssim);
        }
        std::sort(values.begin(), values.end());
        for (size_t i = 0; i < values.size(); ++i) {
          if (!std::isfinite(values[i])) continue;
          s.xs.push_back(static_cast<double>(i) / static_cast<double>(values.size()));
          s.ys.push_back(values[i]);
        }
        dist.push_back(std::move(s));
      }
      write_line_chart_svg(out_dir / (std::string(metric) + "_distribution.svg"),
                           std::string(metric) + " distribution per method", "quantile",
                           metric, dist);
    }

    if (!args.train_dirs.empty()) emit_loss_curves(args, out_dir);
    if (!args.recon_dir.empty()) emit_panels(args, out_dir);
    std::cout << "report written to " << args.out << "\n";
  });
}

}  // namespace

int run_parsed(int argc, const char* const* argv) {
  CLI::App app{"compressed-sensing MRI reconstruction laboratory"};
  app.require_subcommand(1);

  GenDataArgs gen_args;
  TrainArgs recon_args, refine_args, seg_args, joint_args;
  ReconArgs rec_args;
  EvalArgs eval_args;
  ReportArgs report_args;

  setup_gen_data(app, gen_args);
  setup_train(app, "train-recon", "Train the de-aliasing reconstruction cascade",
              TrainConfig::Stage::kRecon, recon_args);
  setup_train(app, "train-refine", "Train the visual refinement network on a fixed cascade",
              TrainConfig::Stage::kRefine, refine_args);
  setup_train(app, "train-seg", "Train the ROI segmentation network",
              TrainConfig::Stage::kSegment, seg_args);
  setup_train(app, "ablate-joint", "Joint-training ablation (cascade and refiner together)",
              TrainConfig::Stage::kJoint, joint_args);
  setup_recon(app, rec_args);
  setup_eval(app, eval_args);
  setup_report(app, report_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> tokens;
  for (int i = 1; i < argc; ++i) tokens.emplace_back(argv[i]);
  return run(tokens);
}

int run(const std::vector<std::string>& args) {
  std::vector<std::string> tokens = args;
  try {
    if (!tokens.empty()) {
      tokens = inject_config_file(std::move(tokens), "--spec");
      tokens = inject_config_file(std::move(tokens), "--config");
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::vector<std::string> full;
  full.push_back("csmri");
  full.insert(full.end(), tokens.begin(), tokens.end());
  std::vector<const char*> argv;
  for (const auto& a : full) argv.push_back(a.c_str());
  return run_parsed(static_cast<int>(argv.size()), argv.data());
}

}  // namespace csmri::cli
