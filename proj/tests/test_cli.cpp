#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include "csmri/cli.hpp"
#include "csmri/io.hpp"

using csmri::cli::run;
using Json = nlohmann::ordered_json;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("csmri_cli_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

std::string dataset_hash_of(const std::filesystem::path& dir) {
  const Json manifest = Json::parse(csmri::read_text(dir / "manifest.json"));
  return manifest.at("dataset_hash").get<std::string>();
}

}  // namespace

TEST_CASE("gen-data is deterministic per seed") {
  const auto a = fresh_dir("gen_a"), b = fresh_dir("gen_b"), c = fresh_dir("gen_c");
  const std::vector<std::string> base{"gen-data", "--size", "32", "--train", "8",
                                      "--val", "4", "--test", "4", "--seed", "21"};
  auto with_out = [&](const std::vector<std::string>& args, const std::filesystem::path& out) {
    auto full = args;
    full.push_back("--out");
    full.push_back(out.string());
    return full;
  };
  CHECK(run(with_out(base, a)) == 0);
  CHECK(run(with_out(base, b)) == 0);
  CHECK(dataset_hash_of(a) == dataset_hash_of(b));

  auto other = base;
  other.back() = "22";
  CHECK(run(with_out(other, c)) == 0);
  CHECK(dataset_hash_of(a) != dataset_hash_of(c));

  CHECK(std::filesystem::exists(a / "resolved_config.txt"));
}

TEST_CASE("gen-data reads a spec file with flag overrides") {
  const auto dir = fresh_dir("gen_spec");
  const auto spec_file = fresh_dir("spec_dir") / "phantom.cfg";
  std::filesystem::create_directories(spec_file.parent_path());
  csmri::write_text(spec_file,
                    "# phantom spec\n"
                    "size = 32\n"
                    "train = 8\n"
                    "val = 4\n"
                    "test = 4\n"
                    "seed = 21\n");
  CHECK(run({"gen-data", "--spec", spec_file.string(), "--out", dir.string()}) == 0);
  const Json manifest = Json::parse(csmri::read_text(dir / "manifest.json"));
  CHECK(manifest.at("spec").at("image_size").get<int>() == 32);
  CHECK(manifest.at("spec").at("seed").get<uint64_t>() == 21);

  // A flag on the command line beats the file value.
  const auto dir2 = fresh_dir("gen_spec2");
  CHECK(run({"gen-data", "--spec", spec_file.string(), "--seed", "99", "--out",
             dir2.string()}) == 0);
  const Json manifest2 = Json::parse(csmri::read_text(dir2 / "manifest.json"));
  CHECK(manifest2.at("spec").at("seed").get<uint64_t>() == 99);
}

TEST_CASE("unknown flags and missing artifacts exit nonzero") {
  CHECK(run({"gen-data", "--out", "/tmp/x", "--bogus-flag", "1"}) != 0);
  CHECK(run({"train-recon", "--data", "/nonexistent/ds", "--out", "/tmp/x"}) != 0);
  CHECK(run({"eval", "--data", "/nonexistent/ds", "--out", "/tmp/x"}) != 0);
  CHECK(run({"no-such-command"}) != 0);
  CHECK(run({"train-refine", "--data", "/tmp", "--out", "/tmp/x"}) != 0);  // missing --stage1-ckpt
}

TEST_CASE("desk workflow produces consistent reports and identity metrics") {
  const auto data = fresh_dir("wf_data");
  const auto recon_out = fresh_dir("wf_recon");
  const auto seg_out = fresh_dir("wf_seg");
  const auto eval_out = fresh_dir("wf_eval");
  const auto eval_out2 = fresh_dir("wf_eval2");
  const auto report_out = fresh_dir("wf_report");
  const auto images_out = fresh_dir("wf_images");

  REQUIRE(run({"gen-data", "--size", "32", "--train", "12", "--val", "6", "--test", "6",
               "--seed", "31", "--out", data.string()}) == 0);
  REQUIRE(run({"train-recon", "--data", data.string(), "--out", recon_out.string(),
               "--epochs", "2", "--seed", "31"}) == 0);
  REQUIRE(run({"train-seg", "--data", data.string(), "--out", seg_out.string(),
               "--epochs", "2", "--seed", "31"}) == 0);

  const std::string ckpt = (recon_out / "best").string();
  const std::string seg_ckpt = (seg_out / "best").string();
  REQUIRE(run({"eval", "--data", data.string(), "--ckpts", ckpt, "--seg-ckpt", seg_ckpt,
               "--include-identity", "--seed", "31", "--out", eval_out.string()}) == 0);

  SUBCASE("identity method hits the metric identities") {
    const Json report = Json::parse(csmri::read_text(eval_out / "identity" / "report.json"));
    CHECK(report.at("aggregates").at("psnr_db").at("mean") == "inf");
    CHECK(report.at("aggregates").at("ssim").at("mean").get<double>() ==
          doctest::Approx(1.0).epsilon(1e-9));
    CHECK(report.at("sis").get<double>() == 1.0);
  }

  SUBCASE("eval reruns byte-identical") {
    REQUIRE(run({"eval", "--data", data.string(), "--ckpts", ckpt, "--seg-ckpt", seg_ckpt,
                 "--include-identity", "--seed", "31", "--out", eval_out2.string()}) == 0);
    for (const char* method : {"zero_filled", "stage1", "identity"}) {
      const auto a = csmri::read_text(eval_out / method / "report.json");
      const auto b = csmri::read_text(eval_out2 / method / "report.json");
      CHECK(a == b);
    }
  }

  SUBCASE("recon and report emit images, tables and plots") {
    REQUIRE(run({"recon", "--ckpt", ckpt, "--data", data.string(), "--seed", "31", "--out",
                 images_out.string()}) == 0);
    REQUIRE(run({"report", "--eval-dirs", eval_out.string(), "--train-dirs",
                 recon_out.string(), "--recon-dir", images_out.string(), "--seg-ckpt", seg_ckpt,
                 "--panel-count", "2", "--out", report_out.string()}) == 0);
    CHECK(std::filesystem::exists(report_out / "comparison.csv"));
    CHECK(std::filesystem::exists(report_out / "psnr_distribution.svg"));
    CHECK(std::filesystem::exists(report_out / "ssim_distribution.svg"));
    CHECK(std::filesystem::exists(report_out / "losses_csmri_cli_wf_recon.svg"));
    size_t panels = 0;
    for (const auto& e : std::filesystem::directory_iterator(report_out / "panels")) {
      panels += e.path().extension() == ".png";
    }
    CHECK(panels == 2);

    const auto png = csmri::read_bytes(report_out / "panels" / "phantom_000018.png");
    REQUIRE(png.size() > 8);
    CHECK(png[1] == 'P');
    CHECK(png[2] == 'N');
    CHECK(png[3] == 'G');
    const std::string csv = csmri::read_text(report_out / "comparison.csv");
    CHECK(csv.find("method,psnr_mean") == 0);
    CHECK(csv.find("stage1") != std::string::npos);
    CHECK(csv.find("zero_filled") != std::string::npos);
  }
}
