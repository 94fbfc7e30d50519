// Command-line front end: dataset generation, training, inference, evaluation,
// DVH plotting and the denoiser step-cost benchmark. Batch commands only; all
// numeric output lands in files (CSV/SVG/arrays), stdout carries a short
// human-readable summary, stderr carries `error[<kind>]: ...` diagnostics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fddm/metrics.hpp"
#include "fddm/pipeline.hpp"
#include "json.hpp"

using namespace fddm;
namespace fs = std::filesystem;

namespace {

// ---- shared plumbing --------------------------------------------------------

// Exit codes: 0 success, 1 usage/config, 2 I/O, 3 numeric failure.
int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e) != nullptr) return 3;
  if (dynamic_cast<const GenerationError*>(&e) != nullptr) return 3;
  if (dynamic_cast<const IoError*>(&e) != nullptr) return 2;
  return 1;
}

const char* error_kind(int code) {
  switch (code) {
    case 2: return "io";
    case 3: return "numeric";
    default: return "usage";
  }
}

// Seed precedence: explicit flag > FDDM_SEED environment variable > config.
std::uint64_t resolve_seed(bool flag_given, std::uint64_t flag_value, std::uint64_t config_value) {
  if (flag_given) return flag_value;
  if (const char* env = std::getenv("FDDM_SEED")) {
    const std::string text(env);
    try {
      std::size_t pos = 0;
      if (text.empty() || text.find('-') != std::string::npos) throw std::invalid_argument(text);
      const auto v = std::stoull(text, &pos);
      if (pos != text.size()) throw std::invalid_argument(text);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("FDDM_SEED must be a non-negative integer, got '" + text + "'");
    }
  }
  return config_value;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out.precision(10);
  return out;
}

// ---- gen-data -----------------------------------------------------------------

struct GenDataArgs {
  std::string config, out;
  std::int64_t count = -1;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

int run_gen_data(const GenDataArgs& a) {
  PhantomConfig cfg;
  std::int64_t count = 16;
  if (!a.config.empty()) {
    RunConfig rc = RunConfig::parse_file(a.config);
    cfg.size = static_cast<int>(rc.get_i64("size", cfg.size));
    cfg.beams = static_cast<int>(rc.get_i64("beams", cfg.beams));
    cfg.prescription_min = rc.get_double("prescription_min", cfg.prescription_min);
    cfg.prescription_max = rc.get_double("prescription_max", cfg.prescription_max);
    cfg.penumbra = rc.get_double("penumbra", cfg.penumbra);
    cfg.attenuation = rc.get_double("attenuation", cfg.attenuation);
    cfg.jitter = rc.get_double("jitter", cfg.jitter);
    cfg.seed = rc.get_u64("seed", cfg.seed);
    count = rc.get_i64("count", count);
    rc.require_consumed();
  }
  if (a.count >= 0) count = a.count;
  cfg.seed = resolve_seed(a.seed_given, a.seed, cfg.seed);
  cfg.validate();

  std::vector<PlanningSample> samples;
  samples.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) samples.push_back(generate_sample(cfg, i));
  const auto splits = split_dataset(count, default_split_counts(count), cfg.seed);
  for (std::int64_t i = 0; i < count; ++i) samples[static_cast<std::size_t>(i)].split = splits[static_cast<std::size_t>(i)];
  write_dataset(samples, cfg, a.out);
  std::cout << "wrote " << count << " cases (" << cfg.size << "x" << cfg.size << ") to " << a.out << "\n";
  return 0;
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  std::string config, data, mode, out = "model.ckpt", loss_csv;
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool resume = false;
};

int run_train(const TrainArgs& a) {
  RunConfig rc = RunConfig::parse_file(a.config);
  TrainConfig cfg = TrainConfig::from_config(rc);
  rc.require_consumed();
  if (!a.mode.empty()) cfg.mode = mode_from_string(a.mode);
  cfg.seed = resolve_seed(a.seed_given, a.seed, cfg.seed);
  cfg.validate();

  const auto train_set = read_dataset_split(a.data, "train");
  if (train_set.empty()) throw ConfigError("dataset " + a.data + " has no training split");
  const std::size_t n = train_set.size();
  const std::int64_t steps_per_epoch =
      static_cast<std::int64_t>((n + static_cast<std::size_t>(cfg.batch_size) - 1) / static_cast<std::size_t>(cfg.batch_size));
  const std::int64_t target = cfg.max_steps > 0 ? cfg.max_steps : cfg.epochs * steps_per_epoch;

  const std::string loss_csv = a.loss_csv.empty() ? a.out + ".loss.csv" : a.loss_csv;

  ModelSet models = [&]() {
    if (a.resume) {
      Checkpoint ckpt = load_checkpoint(a.out);
      if (ckpt.mode != mode_to_string(cfg.mode))
        throw ConfigError("checkpoint " + a.out + " was trained in mode " + ckpt.mode +
                          ", config requests mode " + mode_to_string(cfg.mode));
      if (ckpt.schedule_steps != cfg.diffusion_steps)
        throw ConfigError("checkpoint schedule has " + std::to_string(ckpt.schedule_steps) +
                          " steps, config requests " + std::to_string(cfg.diffusion_steps));
      return ModelSet::from_checkpoint(ckpt);
    }
    std::error_code ec;
    fs::remove(loss_csv, ec);  // fresh runs restart the log; resumes append
    return ModelSet::build(cfg);
  }();

  nn::Adam opt(cfg.learning_rate);
  if (a.resume) {
    Checkpoint ckpt = load_checkpoint(a.out);
    models.restore_optimizer(opt, ckpt);
  }

  std::int64_t done = 0;
  train_loop(models, opt, train_set, cfg, target, a.out, loss_csv, [&](const LossReport& r) {
    done = r.step;
    if (r.step % 100 == 0 || r.step == target)
      std::cout << "step " << r.step << "/" << target << "  l_total " << r.l_total << "\n";
  });
  if (done == 0) std::cout << "checkpoint already at step " << models.step << ", nothing to do\n";
  std::cout << "mode " << mode_to_string(cfg.mode) << " trained to step " << models.step << "; checkpoint "
            << a.out << "; loss log " << loss_csv << "\n";
  return 0;
}

// ---- predict ----------------------------------------------------------------

struct PredictArgs {
  std::string ckpt, data, split = "test", out;
  int stride = 20;
  bool stride_given = false;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

int run_predict(const PredictArgs& a) {
  Checkpoint ckpt = load_checkpoint(a.ckpt);
  ModelSet models = ModelSet::from_checkpoint(ckpt);
  const std::uint64_t seed = resolve_seed(a.seed_given, a.seed, 0);

  const bool uses_sampler =
      models.mode == PipelineMode::DiffusionDirect || models.mode == PipelineMode::Full;
  if (!uses_sampler && a.stride_given)
    std::cerr << "warning: --stride is ignored in mode " << mode_to_string(models.mode) << "\n";

  const auto samples = read_dataset_split(a.data, a.split);
  if (samples.empty()) throw ConfigError("dataset " + a.data + " has no '" + a.split + "' split");

  fs::create_directories(a.out);
  nlohmann::json manifest;
  manifest["schema_version"] = 1;
  manifest["mode"] = mode_to_string(models.mode);
  manifest["stride"] = a.stride;
  manifest["seed"] = seed;
  auto& cases = manifest["cases"] = nlohmann::json::array();
  for (const PlanningSample& s : samples) {
    Prediction pred = predict(models, s, a.stride, mix_seed(seed, static_cast<std::uint64_t>(s.seed_index)));
    write_array((fs::path(a.out) / (s.id + ".arr")).string(), pred.dose_gy);
    cases.push_back(s.id);
  }
  std::ofstream mf(fs::path(a.out) / "predictions.json");
  if (!mf) throw IoError("cannot write prediction manifest in " + a.out);
  mf << manifest.dump(2) << "\n";
  std::cout << "predicted " << samples.size() << " cases (mode " << mode_to_string(models.mode)
            << ", stride " << a.stride << ", seed " << seed << ") into " << a.out << "\n";
  return 0;
}

// ---- evaluate ----------------------------------------------------------------

Grid2D load_prediction(const std::string& pred_dir, const PlanningSample& s) {
  const fs::path path = fs::path(pred_dir) / (s.id + ".arr");
  if (!fs::exists(path)) throw IoError("missing prediction for case " + s.id + " (" + path.string() + ")");
  Grid2D pred = read_array(path.string());
  if (!pred.same_shape(s.dose))
    throw CorruptionError("prediction for case " + s.id + " is " + std::to_string(pred.height) + "x" +
                          std::to_string(pred.width) + " but the case is " + std::to_string(s.dose.height) +
                          "x" + std::to_string(s.dose.width));
  return pred;
}

struct EvaluateArgs {
  std::string pred, data, out, split = "test";
};

int run_evaluate(const EvaluateArgs& a) {
  const auto samples = read_dataset_split(a.data, a.split);
  if (samples.empty()) throw ConfigError("dataset " + a.data + " has no '" + a.split + "' split");
  std::vector<Grid2D> preds;
  preds.reserve(samples.size());
  for (const PlanningSample& s : samples) preds.push_back(load_prediction(a.pred, s));

  std::ofstream summary = open_out(a.out);
  summary << "structure,cases,mean_abs_dci,std_abs_dci,mean_abs_dd2,std_abs_dd2,"
             "mean_abs_dd50,std_abs_dd50,mean_abs_ddmean,std_abs_ddmean\n";
  const fs::path out_path(a.out);
  const fs::path cases_path = out_path.parent_path() / (out_path.stem().string() + "_cases" +
                                                        (out_path.has_extension() ? out_path.extension().string() : std::string(".csv")));
  std::ofstream per_case = open_out(cases_path.string());
  per_case << "case,structure,d_ci,d_d2,d_d50,d_dmean\n";

  for (const char* structure : kStructureNames) {
    std::vector<PairedCase> paired;
    for (std::size_t i = 0; i < samples.size(); ++i)
      paired.push_back({samples[i].id, &preds[i], &samples[i].dose, &samples[i].mask(structure),
                        samples[i].prescription});
    const auto rows = delta_rows(structure, paired);
    for (const DeltaRow& r : rows) {
      per_case << r.case_id << ',' << r.structure << ',';
      if (r.has_ci) per_case << r.d_ci;
      per_case << ',' << r.d_d2 << ',' << r.d_d50 << ',' << r.d_dmean << '\n';
    }
    const DeltaSummary ds = summarize_deltas(structure, rows);
    summary << ds.structure << ',' << ds.cases << ',';
    if (ds.has_ci)
      summary << ds.mean_abs_ci << ',' << ds.std_abs_ci;
    else
      summary << ',';
    summary << ',' << ds.mean_abs_d2 << ',' << ds.std_abs_d2 << ',' << ds.mean_abs_d50 << ','
            << ds.std_abs_d50 << ',' << ds.mean_abs_dmean << ',' << ds.std_abs_dmean << '\n';
  }
  std::cout << "evaluated " << samples.size() << " cases; summary " << a.out << "; per-case "
            << cases_path.string() << "\n";
  return 0;
}

// ---- plot-dvh ----------------------------------------------------------------

struct PlotDvhArgs {
  std::string pred, data, out, split = "test", case_id;
  std::vector<std::string> structures;
  double bin_width = 0.5;
};

struct NamedCurvePair {
  std::string structure;
  DvhCurve truth, pred;
};

void write_dvh_csv(const std::string& path, const std::vector<NamedCurvePair>& curves) {
  std::ofstream out = open_out(path);
  out << "structure,edge_gy,truth_fraction,pred_fraction\n";
  for (const auto& c : curves)
    for (std::size_t i = 0; i < c.truth.edges.size(); ++i)
      out << c.structure << ',' << c.truth.edges[i] << ',' << c.truth.fraction[i] << ','
          << c.pred.fraction[i] << '\n';
}

void write_dvh_svg(const std::string& path, const std::vector<NamedCurvePair>& curves,
                   const std::string& case_id, double max_dose) {
  static constexpr const char* kPalette[] = {"#c0392b", "#2471a3", "#1e8449", "#b7950b", "#7d3c98"};
  const double w = 640, h = 420, ml = 60, mr = 160, mt = 40, mb = 50;
  const double pw = w - ml - mr, ph = h - mt - mb;
  auto sx = [&](double gy) { return ml + (max_dose > 0 ? gy / max_dose : 0.0) * pw; };
  auto sy = [&](double f) { return mt + (1.0 - f) * ph; };

  auto polyline = [&](const DvhCurve& c, const char* color, bool dashed) {
    std::ostringstream pts;
    for (std::size_t i = 0; i < c.edges.size(); ++i) pts << sx(c.edges[i]) << ',' << sy(c.fraction[i]) << ' ';
    std::ostringstream line;
    line << "  <polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\"";
    if (dashed) line << " stroke-dasharray=\"6 4\"";
    line << " points=\"" << pts.str() << "\"/>\n";
    return line.str();
  };

  std::ofstream out = open_out(path);
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\" viewBox=\"0 0 " << w << " " << h << "\">\n"
      << "  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "  <text x=\"" << ml << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">DVH, case "
      << case_id << " (solid: ground truth, dashed: prediction)</text>\n"
      << "  <line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\"" << mt + ph
      << "\" stroke=\"black\"/>\n"
      << "  <line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + ph
      << "\" stroke=\"black\"/>\n"
      << "  <text x=\"" << ml + pw / 2 << "\" y=\"" << h - 12
      << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">dose (Gy)</text>\n"
      << "  <text x=\"16\" y=\"" << mt + ph / 2
      << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << mt + ph / 2 << ")\">volume fraction &#8805; dose</text>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double f = tick / 4.0;
    out << "  <text x=\"" << ml - 8 << "\" y=\"" << sy(f) + 4
        << "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">" << f << "</text>\n"
        << "  <text x=\"" << sx(f * max_dose) << "\" y=\"" << mt + ph + 16
        << "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">" << f * max_dose
        << "</text>\n";
  }
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const char* color = kPalette[i % 5];
    out << polyline(curves[i].truth, color, false) << polyline(curves[i].pred, color, true)
        << "  <text x=\"" << ml + pw + 12 << "\" y=\"" << mt + 16 + 18 * static_cast<double>(i)
        << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" << color << "\">"
        << curves[i].structure << "</text>\n";
  }
  out << "</svg>\n";
}

int run_plot_dvh(const PlotDvhArgs& a) {
  const auto samples = read_dataset_split(a.data, a.split);
  if (samples.empty()) throw ConfigError("dataset " + a.data + " has no '" + a.split + "' split");
  const PlanningSample* chosen = &samples.front();
  if (!a.case_id.empty()) {
    chosen = nullptr;
    for (const PlanningSample& s : samples)
      if (s.id == a.case_id) chosen = &s;
    if (chosen == nullptr) throw ConfigError("case " + a.case_id + " is not in the '" + a.split + "' split");
  }
  const Grid2D pred = load_prediction(a.pred, *chosen);

  std::vector<std::string> structures = a.structures;
  if (structures.empty()) structures.assign(kStructureNames.begin(), kStructureNames.end());

  double max_dose = chosen->prescription;
  for (double v : chosen->dose.values) max_dose = std::max(max_dose, v);
  for (double v : pred.values) max_dose = std::max(max_dose, v);
  max_dose = std::ceil(max_dose / a.bin_width) * a.bin_width;

  std::vector<NamedCurvePair> curves;
  for (const std::string& structure : structures) {
    const Grid2D& mask = chosen->mask(structure);  // unknown names throw here
    curves.push_back({structure, dvh(chosen->dose, mask, a.bin_width, max_dose),
                      dvh(pred, mask, a.bin_width, max_dose)});
  }
  write_dvh_csv(a.out + ".csv", curves);
  write_dvh_svg(a.out + ".svg", curves, chosen->id, max_dose);
  std::cout << "dvh for case " << chosen->id << " (" << curves.size() << " structures): " << a.out
            << ".svg, " << a.out << ".csv\n";
  return 0;
}

// ---- bench ----------------------------------------------------------------

struct BenchArgs {
  std::string config, size = "160x160", out = "bench.csv";
  int trials = 20;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

int run_bench(const BenchArgs& a) {
  NetworkConfig base;
  if (!a.config.empty()) {
    RunConfig rc = RunConfig::parse_file(a.config);
    TrainConfig tc = TrainConfig::from_config(rc);
    base = tc.network;
  }
  const auto x = a.size.find('x');
  if (x == std::string::npos) throw ConfigError("--size expects HxW, got '" + a.size + "'");
  int height = 0, width = 0;
  try {
    height = std::stoi(a.size.substr(0, x));
    width = std::stoi(a.size.substr(x + 1));
  } catch (const std::exception&) {
    throw ConfigError("--size expects HxW, got '" + a.size + "'");
  }
  const std::uint64_t seed = resolve_seed(a.seed_given, a.seed, 0);

  const BenchReport r = benchmark_step_cost(base, height, width, a.trials, seed);
  std::ofstream out = open_out(a.out);
  out << "height,width,trials,image_median_ms,wavelet_median_ms,image_elems,wavelet_elems,"
         "speedup,projected_steps,image_total_s,wavelet_total_s\n"
      << r.height << ',' << r.width << ',' << r.trials << ',' << r.image_median_ms << ','
      << r.wavelet_median_ms << ',' << r.image_elems << ',' << r.wavelet_elems << ',' << r.speedup << ','
      << r.projected_steps << ',' << r.image_total_s << ',' << r.wavelet_total_s << '\n';
  std::cout << "per-step median: image " << r.image_median_ms << " ms, wavelet " << r.wavelet_median_ms
            << " ms, speedup " << r.speedup << "x; wrote " << a.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Wavelet-domain diffusion dose prediction toolkit"};
  app.require_subcommand(1);

  GenDataArgs gd;
  CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic planning dataset");
  gen->add_option("--config", gd.config, "key=value phantom config");
  gen->add_option("--out", gd.out, "output dataset directory")->required();
  gen->add_option("--count", gd.count, "number of cases (overrides config)");
  auto* gd_seed = gen->add_option("--seed", gd.seed, "generation seed (overrides FDDM_SEED and config)");

  TrainArgs tr;
  CLI::App* train = app.add_subcommand("train", "Train a model and write a checkpoint plus loss CSV");
  train->add_option("--config", tr.config, "key=value training config")->required();
  train->add_option("--data", tr.data, "dataset directory")->required();
  train->add_option("--mode", tr.mode, "pipeline mode A|B|C|D (overrides config)");
  train->add_option("--out", tr.out, "checkpoint path (default model.ckpt)");
  train->add_option("--loss-csv", tr.loss_csv, "loss log path (default <out>.loss.csv)");
  auto* tr_seed = train->add_option("--seed", tr.seed, "training seed (overrides FDDM_SEED and config)");
  train->add_flag("--resume", tr.resume, "continue from the checkpoint at --out");

  PredictArgs pr;
  CLI::App* pred = app.add_subcommand("predict", "Write predicted dose arrays for a dataset split");
  pred->add_option("--ckpt", pr.ckpt, "checkpoint path")->required();
  pred->add_option("--data", pr.data, "dataset directory")->required();
  pred->add_option("--split", pr.split, "dataset split (default test)");
  auto* pr_stride = pred->add_option("--stride", pr.stride, "sampling stride (default 20)");
  pred->add_option("--out", pr.out, "output directory")->required();
  auto* pr_seed = pred->add_option("--seed", pr.seed, "sampling noise seed (overrides FDDM_SEED)");

  EvaluateArgs ev;
  CLI::App* eval = app.add_subcommand("evaluate", "Compare predictions against ground truth");
  eval->add_option("--pred", ev.pred, "prediction directory")->required();
  eval->add_option("--data", ev.data, "dataset directory")->required();
  eval->add_option("--split", ev.split, "dataset split (default test)");
  eval->add_option("--out", ev.out, "summary CSV path (per-case CSV lands beside it)")->required();

  PlotDvhArgs pd;
  CLI::App* dvh_cmd = app.add_subcommand("plot-dvh", "Plot DVH curves for one case as SVG + CSV");
  dvh_cmd->add_option("--pred", pd.pred, "prediction directory")->required();
  dvh_cmd->add_option("--data", pd.data, "dataset directory")->required();
  dvh_cmd->add_option("--split", pd.split, "dataset split (default test)");
  dvh_cmd->add_option("--case", pd.case_id, "case id (default: first case of the split)");
  dvh_cmd->add_option("--structures", pd.structures, "comma-separated structure names")->delimiter(',');
  dvh_cmd->add_option("--bin-width", pd.bin_width, "DVH bin width in Gy (default 0.5)");
  dvh_cmd->add_option("--out", pd.out, "output path prefix (.svg and .csv appended)")->required();

  BenchArgs be;
  CLI::App* bench = app.add_subcommand("bench", "Time one denoiser step, image domain vs wavelet domain");
  bench->add_option("--config", be.config, "key=value config for network geometry");
  bench->add_option("--size", be.size, "slice size HxW (default 160x160)");
  bench->add_option("--trials", be.trials, "timing repetitions (default 20)");
  bench->add_option("--out", be.out, "timing CSV path (default bench.csv)");
  auto* be_seed = bench->add_option("--seed", be.seed, "weight-init seed (overrides FDDM_SEED)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints the usage message
    return 1;
  }

  try {
    gd.seed_given = gd_seed->count() > 0;
    tr.seed_given = tr_seed->count() > 0;
    pr.seed_given = pr_seed->count() > 0;
    pr.stride_given = pr_stride->count() > 0;
    be.seed_given = be_seed->count() > 0;
    if (gen->parsed()) return run_gen_data(gd);
    if (train->parsed()) return run_train(tr);
    if (pred->parsed()) return run_predict(pr);
    if (eval->parsed()) return run_evaluate(ev);
    if (dvh_cmd->parsed()) return run_plot_dvh(pd);
    if (bench->parsed()) return run_bench(be);
    return 1;
  } catch (const std::exception& e) {
    const int code = exit_code_for(e);
    std::cerr << "error[" << error_kind(code) << "]: " << e.what() << "\n";
    return code;
  }
}
