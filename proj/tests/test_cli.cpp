#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "fddm/networks.hpp"
#include "fddm/phantom.hpp"

using namespace fddm;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) out.push_back(line);
  return out;
}

std::vector<std::string> cells_of(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

struct Workspace {
  fs::path root;

  explicit Workspace(const char* tag) {
    static int counter = 0;
    root = fs::temp_directory_path() /
           ("fddm_cli_" + std::string(tag) + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(root);
  }
  ~Workspace() { fs::remove_all(root); }

  [[nodiscard]] RunResult run(const std::string& args, const std::string& env = "") const {
    const fs::path out = root / "stdout.txt", err = root / "stderr.txt";
    std::string cmd = env.empty() ? std::string() : env + " ";
    cmd += std::string(FDDM_BINARY) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  [[nodiscard]] std::string path(const std::string& rel) const { return (root / rel).string(); }

  void write_file(const std::string& rel, const std::string& content) const {
    std::ofstream f(root / rel);
    f << content;
  }
};

constexpr const char* kPhantomCfg =
    "size = 16\n"
    "count = 12\n"
    "seed = 3\n";

constexpr const char* kTrainCfg =
    "mode = A\n"
    "max_steps = 4\n"
    "batch_size = 2\n"
    "learning_rate = 1e-3\n"
    "diffusion_steps = 20\n"
    "eval_stride = 5\n"
    "levels = 2\n"
    "base_channels = 4\n"
    "channel_multipliers = 1,2\n"
    "groupnorm_groups = 2\n"
    "seed = 9\n"
    "checkpoint_every = 2\n";

// One dataset + trained mode-A checkpoint shared by the read-only cases.
const Workspace& fixture() {
  static Workspace ws("fixture");
  static bool ready = false;
  if (!ready) {
    ws.write_file("phantom.cfg", kPhantomCfg);
    ws.write_file("train.cfg", kTrainCfg);
    REQUIRE(ws.run("gen-data --config " + ws.path("phantom.cfg") + " --out " + ws.path("data")).code == 0);
    REQUIRE(ws.run("train --config " + ws.path("train.cfg") + " --data " + ws.path("data") + " --out " +
                   ws.path("a.ckpt")).code == 0);
    REQUIRE(ws.run("predict --ckpt " + ws.path("a.ckpt") + " --data " + ws.path("data") + " --out " +
                   ws.path("preds")).code == 0);
    ready = true;
  }
  return ws;
}

void expect_identical_trees(const fs::path& a, const fs::path& b) {
  std::vector<std::string> rel_a;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) rel_a.push_back(fs::relative(e.path(), a).string());
  std::sort(rel_a.begin(), rel_a.end());
  std::vector<std::string> rel_b;
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file()) rel_b.push_back(fs::relative(e.path(), b).string());
  std::sort(rel_b.begin(), rel_b.end());
  REQUIRE(rel_a == rel_b);
  for (const std::string& rel : rel_a) CHECK(slurp(a / rel) == slurp(b / rel));
}

}  // namespace

TEST_CASE("gen-data is deterministic and honors --count 0") {
  Workspace ws("gendata");
  ws.write_file("phantom.cfg", kPhantomCfg);
  const std::string cfg = " --config " + ws.path("phantom.cfg");
  REQUIRE(ws.run("gen-data" + cfg + " --out " + ws.path("d1")).code == 0);
  REQUIRE(ws.run("gen-data" + cfg + " --out " + ws.path("d2")).code == 0);
  expect_identical_trees(ws.root / "d1", ws.root / "d2");

  RunResult empty = ws.run("gen-data" + cfg + " --count 0 --out " + ws.path("d0"));
  CHECK(empty.code == 0);
  CHECK(read_dataset(ws.path("d0")).empty());

  CHECK(ws.run("gen-data" + cfg).code == 1);  // missing --out is a usage error
  CHECK(ws.run("gen-data" + cfg + " --out " + ws.path("d3") + " --bogus-flag 1").code == 1);
}

TEST_CASE("train writes a loss csv whose rows satisfy the loss sum") {
  const Workspace& ws = fixture();
  const auto rows = lines_of(slurp(ws.root / "a.ckpt.loss.csv"));
  REQUIRE(rows.size() == 5);  // header + 4 steps
  CHECK(rows[0] == "step,epoch,l_cdpm,l_hfrm,l_total");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto cells = cells_of(rows[i]);
    REQUIRE(cells.size() == 5);
    CHECK(cells[0] == std::to_string(i));
    const double sum = std::stod(cells[2]) + std::stod(cells[3]);
    CHECK(std::stod(cells[4]) == doctest::Approx(sum).epsilon(1e-9));
  }
}

TEST_CASE("mode A checkpoints carry no denoiser weights") {
  const Workspace& ws = fixture();
  Checkpoint ckpt = load_checkpoint(ws.path("a.ckpt"));
  CHECK(ckpt.mode == "A");
  CHECK(ckpt.find("cdpm") != nullptr);
  CHECK(ckpt.find("hfrm") == nullptr);
  CHECK(ckpt.find("refiner") == nullptr);
}

TEST_CASE("predict writes non-negative doses, a manifest, and repeats exactly") {
  const Workspace& ws = fixture();
  for (const auto& e : fs::directory_iterator(ws.root / "preds")) {
    if (e.path().extension() != ".arr") continue;
    const Grid2D dose = read_array(e.path().string());
    for (double v : dose.values) CHECK(v >= 0.0);
  }
  CHECK(fs::exists(ws.root / "preds" / "predictions.json"));
  const std::string manifest = slurp(ws.root / "preds" / "predictions.json");
  CHECK(manifest.find("\"mode\": \"A\"") != std::string::npos);
  CHECK(manifest.find("\"seed\"") != std::string::npos);
  CHECK(manifest.find("\"stride\"") != std::string::npos);

  const std::string base = "predict --ckpt " + ws.path("a.ckpt") + " --data " + ws.path("data");
  REQUIRE(ws.run(base + " --out " + ws.path("p_again")).code == 0);
  expect_identical_trees(ws.root / "preds", ws.root / "p_again");

  RunResult warned = ws.run(base + " --stride 7 --out " + ws.path("p_warn"));
  CHECK(warned.code == 0);
  CHECK(warned.err.find("ignored in mode A") != std::string::npos);

  CHECK(ws.run("predict --ckpt " + ws.path("data") + "/manifest.json --data " + ws.path("data") +
               " --out " + ws.path("p_bad")).code == 2);
}

TEST_CASE("the sampling seed comes from the flag, then the environment") {
  Workspace ws("seeds");
  ws.write_file("phantom.cfg", kPhantomCfg);
  ws.write_file("train.cfg", kTrainCfg);
  REQUIRE(ws.run("gen-data --config " + ws.path("phantom.cfg") + " --out " + ws.path("data")).code == 0);
  std::string train_cmd = "train --config " + ws.path("train.cfg") + " --data " + ws.path("data") +
                          " --mode D --out " + ws.path("d.ckpt");
  REQUIRE(ws.run(train_cmd).code == 0);

  const std::string base = "predict --ckpt " + ws.path("d.ckpt") + " --data " + ws.path("data");
  REQUIRE(ws.run(base + " --out " + ws.path("p_default")).code == 0);
  REQUIRE(ws.run(base + " --out " + ws.path("p_env"), "FDDM_SEED=123").code == 0);
  REQUIRE(ws.run(base + " --out " + ws.path("p_env2"), "FDDM_SEED=123").code == 0);
  REQUIRE(ws.run(base + " --seed 7 --out " + ws.path("p_flag"), "FDDM_SEED=123").code == 0);
  REQUIRE(ws.run(base + " --seed 7 --out " + ws.path("p_flag2")).code == 0);

  auto first_arr = [&](const char* dir) {
    for (const auto& e : fs::directory_iterator(ws.root / dir))
      if (e.path().extension() == ".arr") return slurp(e.path());
    return std::string();
  };
  // Same env seed → same bytes; env differs from default; flag beats env.
  CHECK(first_arr("p_env") == first_arr("p_env2"));
  CHECK(first_arr("p_env") != first_arr("p_default"));
  CHECK(first_arr("p_flag") == first_arr("p_flag2"));
  CHECK(first_arr("p_flag") != first_arr("p_env"));

  CHECK(ws.run(base + " --out " + ws.path("p_badenv"), "FDDM_SEED=bogus").code == 1);
}

TEST_CASE("evaluating the ground truth against itself yields all-zero deltas") {
  const Workspace& ws = fixture();
  fs::create_directories(ws.root / "gt_preds");
  int test_cases = 0;
  for (const PlanningSample& s : read_dataset_split(ws.path("data"), "test")) {
    write_array((ws.root / "gt_preds" / (s.id + ".arr")).string(), s.dose);
    ++test_cases;
  }
  REQUIRE(test_cases > 0);

  RunResult r = ws.run("evaluate --pred " + ws.path("gt_preds") + " --data " + ws.path("data") +
                       " --out " + ws.path("self.csv"));
  REQUIRE(r.code == 0);
  const auto rows = lines_of(slurp(ws.root / "self.csv"));
  REQUIRE(rows.size() == 6);  // header + 5 structures
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto cells = cells_of(rows[i]);
    REQUIRE(cells.size() == 10);
    CHECK(cells[1] == std::to_string(test_cases));
    for (std::size_t j = 2; j < cells.size(); ++j)
      if (!cells[j].empty()) CHECK(std::stod(cells[j]) == 0.0);
  }
  // CI columns are populated for the target volume only.
  CHECK_FALSE(cells_of(rows[1])[2].empty());  // ptv row
  CHECK(cells_of(rows[2])[2].empty());

  const auto case_rows = lines_of(slurp(ws.root / "self_cases.csv"));
  CHECK(case_rows.size() == static_cast<std::size_t>(1 + 5 * test_cases));
}

TEST_CASE("evaluate names the case whose prediction is missing") {
  const Workspace& ws = fixture();
  fs::create_directories(ws.root / "partial_preds");
  const auto test_set = read_dataset_split(ws.path("data"), "test");
  REQUIRE(test_set.size() >= 2);
  // Provide every prediction except the first.
  for (std::size_t i = 1; i < test_set.size(); ++i)
    write_array((ws.root / "partial_preds" / (test_set[i].id + ".arr")).string(), test_set[i].dose);

  RunResult r = ws.run("evaluate --pred " + ws.path("partial_preds") + " --data " + ws.path("data") +
                       " --out " + ws.path("partial.csv"));
  CHECK(r.code == 2);
  CHECK(r.err.find(test_set[0].id) != std::string::npos);
}

TEST_CASE("plot-dvh emits monotone csv curves and well-formed svg") {
  const Workspace& ws = fixture();
  RunResult r = ws.run("plot-dvh --pred " + ws.path("preds") + " --data " + ws.path("data") +
                       " --structures ptv,bld --out " + ws.path("plot"));
  REQUIRE(r.code == 0);

  const auto rows = lines_of(slurp(ws.root / "plot.csv"));
  REQUIRE(rows.size() > 3);
  CHECK(rows[0] == "structure,edge_gy,truth_fraction,pred_fraction");
  std::string current;
  double prev_truth = 2.0, prev_pred = 2.0;
  int curves = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto cells = cells_of(rows[i]);
    REQUIRE(cells.size() == 4);
    if (cells[0] != current) {
      current = cells[0];
      prev_truth = prev_pred = 2.0;
      ++curves;
    }
    const double t = std::stod(cells[2]), p = std::stod(cells[3]);
    CHECK(t <= prev_truth);
    CHECK(p <= prev_pred);
    prev_truth = t;
    prev_pred = p;
  }
  CHECK(curves == 2);  // one curve pair per requested structure

  const std::string svg = slurp(ws.root / "plot.svg");
  CHECK(svg.rfind("<?xml", 0) == 0);
  CHECK(svg.find("</svg>") != std::string::npos);
  CHECK(std::count(svg.begin(), svg.end(), '<') == std::count(svg.begin(), svg.end(), '>'));
  // Two structures: two solid ground-truth lines, two dashed prediction lines.
  std::size_t polylines = 0, dashed = 0, pos = 0;
  while ((pos = svg.find("<polyline", pos)) != std::string::npos) {
    ++polylines;
    pos += 9;
  }
  pos = 0;
  while ((pos = svg.find("stroke-dasharray", pos)) != std::string::npos) {
    ++dashed;
    pos += 16;
  }
  CHECK(polylines == 4);
  CHECK(dashed == 2);

  CHECK(ws.run("plot-dvh --pred " + ws.path("preds") + " --data " + ws.path("data") +
               " --structures femur --out " + ws.path("plot2")).code == 1);
}

TEST_CASE("bench emits the timing schema with consistent derived columns") {
  Workspace ws("bench");
  ws.write_file("net.cfg",
                "levels = 2\nbase_channels = 4\nchannel_multipliers = 1,2\ngroupnorm_groups = 2\n");
  RunResult r = ws.run("bench --config " + ws.path("net.cfg") + " --size 32x32 --trials 2 --out " +
                       ws.path("bench.csv"));
  REQUIRE(r.code == 0);
  const auto rows = lines_of(slurp(ws.root / "bench.csv"));
  REQUIRE(rows.size() == 2);
  CHECK(rows[0] ==
        "height,width,trials,image_median_ms,wavelet_median_ms,image_elems,wavelet_elems,"
        "speedup,projected_steps,image_total_s,wavelet_total_s");
  const auto cells = cells_of(rows[1]);
  REQUIRE(cells.size() == 11);
  CHECK(std::stoi(cells[5]) == 4 * std::stoi(cells[6]));  // wavelet spatial elems = 1/4 image
  CHECK(std::stod(cells[7]) ==
        doctest::Approx(std::stod(cells[3]) / std::stod(cells[4])).epsilon(1e-6));

  CHECK(ws.run("bench --size banana --out " + ws.path("b2.csv")).code == 1);
}

TEST_CASE("train resumes through the cli and refuses mismatched modes") {
  Workspace ws("resume");
  ws.write_file("phantom.cfg", kPhantomCfg);
  ws.write_file("train.cfg", kTrainCfg);
  std::string cfg6 = std::string(kTrainCfg);
  cfg6.replace(cfg6.find("max_steps = 4"), 13, "max_steps = 6");
  ws.write_file("train6.cfg", cfg6);
  REQUIRE(ws.run("gen-data --config " + ws.path("phantom.cfg") + " --out " + ws.path("data")).code == 0);

  const std::string data = " --data " + ws.path("data");
  REQUIRE(ws.run("train --config " + ws.path("train.cfg") + data + " --out " + ws.path("r.ckpt")).code == 0);
  REQUIRE(ws.run("train --config " + ws.path("train6.cfg") + data + " --out " + ws.path("r.ckpt") +
                 " --resume").code == 0);
  // A straight 6-step run must land on the identical checkpoint bytes.
  REQUIRE(ws.run("train --config " + ws.path("train6.cfg") + data + " --out " + ws.path("s.ckpt")).code == 0);
  CHECK(slurp(ws.root / "r.ckpt") == slurp(ws.root / "s.ckpt"));
  // ...and the stitched loss log equals the straight one.
  CHECK(slurp(ws.root / "r.ckpt.loss.csv") == slurp(ws.root / "s.ckpt.loss.csv"));

  CHECK(ws.run("train --config " + ws.path("train6.cfg") + data + " --mode B --out " + ws.path("r.ckpt") +
               " --resume").code == 1);
}
