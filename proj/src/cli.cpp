// Copyright 2026 The ib3dseg Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "ib3dseg/cli.hpp"

#include <omp.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "ib3dseg/dog_kernel.hpp"
#include "ib3dseg/error.hpp"
#include "ib3dseg/evaluation.hpp"
#include "ib3dseg/experiment.hpp"
#include "ib3dseg/log.hpp"
#include "ib3dseg/random.hpp"
#include "ib3dseg/selftest.hpp"
#include "ib3dseg/simd/isa.hpp"
#include "ib3dseg/training.hpp"

namespace ib3dseg::cli {
namespace fs = std::filesystem;

namespace {

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

struct Globals {
  std::uint64_t seed = 0;
  bool seed_given = false;
  int threads = 0;
  std::string out;
  std::string log_level = "info";
  std::string isa;
};

void require_out(const Globals& g, const char* command) {
  if (g.out.empty()) throw ConfigError(std::string(command) + " needs --out");
}

// --- kernel ------------------------------------------------------------------

struct KernelArgs {
  DoGParams params;
  std::string polarity = "on";
  std::string geometry = "spherical";
  std::string format = "json";
};

void cmd_kernel(const KernelArgs& a, const Globals& g, std::ostream& out) {
  DoGParams p = a.params;
  p.polarity = parse_polarity(a.polarity);
  p.geometry = parse_geometry(a.geometry);
  const Kernel3D kern = synthesize(p);
  const int k = p.k;
  out << "sigma   " << fmt("%.6f", p.sigma()) << '\n';
  out << "sum(+)  " << fmt("%+.6f", kern.positive_sum()) << '\n';
  out << "sum(-)  " << fmt("%+.6f", kern.negative_sum()) << '\n';
  out << "total   " << fmt("%+.6f", std::abs(kern.total_sum()) < 5e-7 ? 0.0 : kern.total_sum()) << '\n';
  out << "center slice (z = " << (k - 1) / 2 << "):\n";
  for (int y = 0; y < k; ++y) {
    for (int x = 0; x < k; ++x) out << fmt("%+9.5f", kern.at((k - 1) / 2, y, x));
    out << '\n';
  }
  if (g.out.empty()) return;
  if (fs::path(g.out).has_parent_path()) fs::create_directories(fs::path(g.out).parent_path());
  std::ofstream file(g.out);
  if (!file) throw Error("cannot write '" + g.out + "'");
  if (a.format == "csv") {
    file << "z,y,x,weight\n";
    for (int z = 0; z < k; ++z)
      for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x) file << z << ',' << y << ',' << x << ',' << fmt("%.17g", kern.at(z, y, x)) << '\n';
  } else {
    nlohmann::ordered_json j;
    j["k"] = p.k;
    j["r"] = p.r;
    j["gamma"] = p.gamma;
    j["c"] = p.c;
    j["polarity"] = to_string(p.polarity);
    j["geometry"] = to_string(p.geometry);
    j["sigma"] = p.sigma();
    j["shape"] = {k, k, k};
    j["weights"] = kern.weights();
    file << j.dump(2) << '\n';
  }
}

// --- phantom-gen -------------------------------------------------------------

struct PhantomArgs {
  int n = 24;
  int dims = 64;
  std::vector<double> spacing{1.0, 1.0, 1.0};
  int patch = 32;
  int distractors = 1;
  std::string format = "raw";
};

void cmd_phantom(const PhantomArgs& a, const Globals& g, std::ostream& out) {
  require_out(g, "phantom-gen");
  if (a.n < 1) throw ConfigError("--n must be >= 1");
  if (a.format != "raw" && a.format != "nii") throw ConfigError("--format must be raw or nii");
  fs::create_directories(g.out);
  PhantomConfig pc;
  pc.dims = {a.dims, a.dims, a.dims};
  pc.spacing = {a.spacing[0], a.spacing[1], a.spacing[2]};
  pc.distractors = a.distractors;
  DatasetSpec spec;
  spec.modality = Modality::MR;
  spec.target_spacing = pc.spacing;
  spec.patch_size = {a.patch, a.patch, a.patch};
  for (int i = 0; i < a.n; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "phantom_%03d", i);
    auto [image, label] = phantom(derive_seed(g.seed, {static_cast<std::uint64_t>(i)}), pc);
    const std::string image_name = std::string(id) + "_image." + a.format;
    const std::string label_name = std::string(id) + "_label." + a.format;
    write_volume(image, (fs::path(g.out) / image_name).string());
    write_volume(label, (fs::path(g.out) / label_name).string());
    spec.cases.push_back({id, image_name, label_name});
  }
  save_manifest(spec, (fs::path(g.out) / "manifest.json").string());
  out << "wrote " << a.n << " phantoms and manifest.json to " << g.out << '\n';
}

// --- describe ----------------------------------------------------------------

struct DescribeArgs {
  std::string config;
  int patch = 0;
  int depth = 4;
  int base = 16;
  bool ib = true;
};

void cmd_describe(const DescribeArgs& a, std::ostream& out) {
  NetworkConfig net;
  Dims3 patch{32, 32, 32};
  if (!a.config.empty()) {
    std::ifstream in(a.config);
    if (!in) throw ConfigError("cannot open '" + a.config + "'");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("invalid JSON in '" + a.config + "': " + e.what());
    }
    if (j.is_object() && (j.contains("network") || j.contains("manifest") || j.contains("dataset"))) {
      const ExperimentConfig exp = load_experiment(a.config, config_environment());
      net = exp.network;
      patch = exp.dataset.patch_size;
    } else {
      net = NetworkConfig::from_json(j);
    }
  } else {
    net.depth = a.depth;
    net.base_channels = a.base;
    net.ib_enabled = a.ib;
  }
  if (a.patch > 0) patch = {a.patch, a.patch, a.patch};
  net.validate();
  net.validate_patch(patch);
  out << describe_text(net, patch);
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
  std::string config, manifest, net;
  std::optional<int> folds, epochs, batches, validate_every;
  std::optional<double> lr;
  std::vector<int> only_folds;
  bool no_augment = false;
};

void cmd_train(const TrainArgs& a, const Globals& g, std::ostream& out) {
  require_out(g, "train");
  ExperimentConfig exp;
  if (!a.config.empty()) {
    exp = load_experiment(a.config, config_environment());
  } else {
    if (a.manifest.empty()) throw ConfigError("train needs --config or --manifest");
    exp.dataset = load_manifest(a.manifest);
  }
  if (!a.manifest.empty() && !a.config.empty()) exp.dataset = load_manifest(a.manifest);
  if (!a.net.empty()) {
    std::ifstream in(a.net);
    if (!in) throw ConfigError("cannot open '" + a.net + "'");
    try {
      exp.network = NetworkConfig::from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("invalid JSON in '" + a.net + "': " + e.what());
    }
  }
  if (a.folds) exp.train.folds = *a.folds;
  if (a.epochs) exp.train.epochs = *a.epochs;
  if (a.batches) exp.train.batches_per_epoch = *a.batches;
  if (a.validate_every) exp.train.validate_every = *a.validate_every;
  if (a.lr) exp.train.lr0 = *a.lr;
  if (a.no_augment) exp.train.augment = false;
  if (g.seed_given) exp.train.seed = g.seed;
  exp.train.validate();

  TrainOptions opts;
  opts.only_folds = a.only_folds;
  const TrainResult r = train(exp.dataset, exp.network, exp.train, g.out, opts);
  for (const auto& f : r.folds)
    out << "fold " << f.fold << ": best dsc " << fmt("%.4f", f.best_dsc) << " at epoch " << f.best_epoch << '\n';
  out << "mean best dsc " << fmt("%.4f", r.mean_best_dsc) << '\n';
}

// --- predict -----------------------------------------------------------------

struct PredictArgs {
  std::string ckpt, image;
  bool gaussian = false;
  bool no_cc = false;
  double threshold = 0.5;
};

void cmd_predict(const PredictArgs& a, const Globals& g, std::ostream& out) {
  require_out(g, "predict");
  Checkpoint ck = load_checkpoint(a.ckpt);
  PredictSettings s = ck.predict;
  s.threshold = a.threshold;
  if (a.gaussian) s.weighting = WindowWeighting::Gaussian;
  if (a.no_cc) s.keep_largest_component = false;
  const Volume mask = predict_mask(ck.network, read_volume(a.image, VolumeKind::Image), s);
  if (fs::path(g.out).has_parent_path()) fs::create_directories(fs::path(g.out).parent_path());
  write_volume(mask, g.out);
  std::int64_t fg = 0;
  for (float v : mask.data) fg += v != 0.0f;
  out << "wrote " << g.out << " (" << fg << " foreground voxels)\n";
}

// --- evaluate ----------------------------------------------------------------

struct EvaluateArgs {
  std::vector<std::string> runs;
  std::string conditions = "none";
  std::string manifest;
  bool save_predictions = false;
};

void cmd_evaluate(const EvaluateArgs& a, const Globals& g, std::ostream& out) {
  require_out(g, "evaluate");
  std::vector<CorruptionSpec> conditions;
  std::stringstream ss(a.conditions);
  for (std::string tok; std::getline(ss, tok, ',');)
    if (!tok.empty()) conditions.push_back(CorruptionSpec::parse(tok));
  EvalOptions opts;
  opts.seed = g.seed;
  if (!a.manifest.empty()) opts.dataset = load_manifest(a.manifest);
  if (a.save_predictions) opts.prediction_dir = (fs::path(g.out) / "predictions").string();
  std::vector<RunReport> reports;
  for (const auto& run : a.runs) reports.push_back(evaluate_run(run, conditions, opts));
  const RunReport merged = merge_reports(reports);
  write_report(merged, g.out);
  std::ifstream md(fs::path(g.out) / "summary.md");
  out << md.rdbuf();
}

// --- gradcheck / selftest ----------------------------------------------------

int report_checks(const std::vector<CheckResult>& checks, std::ostream& out) {
  out << format_checks(checks);
  const bool ok = all_passed(checks);
  out << (ok ? "all checks passed\n" : "some checks FAILED\n");
  return ok ? 0 : 2;
}

int classify(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ParameterError*>(&e) ||
      dynamic_cast<const ShapeError*>(&e) || dynamic_cast<const DegenerateInputError*>(&e))
    return 1;
  return 2;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Inductive-bias 3D U-Net segmentation toolkit", "ib3dseg"};
  app.set_version_flag("--version", std::string("ib3dseg ") + IB3DSEG_VERSION + " (config schema " +
                                        std::to_string(IB3DSEG_CONFIG_SCHEMA_VERSION) + ")");
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random stream");
  app.add_option("--threads", g.threads, "Worker threads (default: all cores)")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "Output file or directory");
  app.add_option("--log-level", g.log_level, "quiet, warn, info or debug")
      ->check(CLI::IsMember({"quiet", "warn", "info", "debug"}));
  app.add_option("--isa", g.isa, "GEMM kernel tier: scalar, avx2 or avx512");

  KernelArgs ka;
  auto* kernel = app.add_subcommand("kernel", "Synthesize an On/Off center-surround kernel");
  kernel->add_option("--k", ka.params.k, "Odd edge length")->capture_default_str();
  kernel->add_option("--r", ka.params.r, "Center radius in voxels")->capture_default_str();
  kernel->add_option("--gamma", ka.params.gamma, "Center-to-surround radius ratio")->capture_default_str();
  kernel->add_option("--c", ka.params.c, "Balance constant")->capture_default_str();
  kernel->add_option("--polarity", ka.polarity, "on or off")->capture_default_str();
  kernel->add_option("--geometry", ka.geometry, "spherical or cylindrical")->capture_default_str();
  kernel->add_option("--format", ka.format, "File format for --out: json or csv")
      ->check(CLI::IsMember({"json", "csv"}))
      ->capture_default_str();

  PhantomArgs pa;
  auto* phantom_cmd = app.add_subcommand("phantom-gen", "Write synthetic organ phantoms and a manifest");
  phantom_cmd->add_option("--n", pa.n, "Number of cases")->capture_default_str();
  phantom_cmd->add_option("--dims", pa.dims, "Edge length in voxels")->capture_default_str();
  phantom_cmd->add_option("--spacing", pa.spacing, "Voxel spacing z y x in mm")->expected(3);
  phantom_cmd->add_option("--patch", pa.patch, "Training patch edge written to the manifest")->capture_default_str();
  phantom_cmd->add_option("--distractors", pa.distractors, "Bright blobs outside the organ")->capture_default_str();
  phantom_cmd->add_option("--format", pa.format, "raw or nii")->capture_default_str();

  DescribeArgs da;
  auto* describe_cmd = app.add_subcommand("describe", "Print layers, parameter counts and receptive fields");
  describe_cmd->add_option("--config", da.config, "Experiment or network config JSON");
  describe_cmd->add_option("--patch", da.patch, "Patch edge length");
  describe_cmd->add_option("--depth", da.depth, "Encoder depth without --config")->capture_default_str();
  describe_cmd->add_option("--base", da.base, "Base channels without --config")->capture_default_str();
  describe_cmd->add_option("--ib", da.ib, "IB blocks on or off without --config")->capture_default_str();

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "k-fold training");
  train_cmd->add_option("--config", ta.config, "Experiment config JSON");
  train_cmd->add_option("--manifest", ta.manifest, "Dataset manifest (overrides the config's)");
  train_cmd->add_option("--net", ta.net, "Network config JSON (overrides the config's)");
  train_cmd->add_option("--folds", ta.folds, "Number of folds");
  train_cmd->add_option("--epochs", ta.epochs, "Epochs");
  train_cmd->add_option("--batches-per-epoch", ta.batches, "Batches per epoch");
  train_cmd->add_option("--validate-every", ta.validate_every, "Validation interval in epochs");
  train_cmd->add_option("--lr", ta.lr, "Initial learning rate");
  train_cmd->add_option("--fold", ta.only_folds, "Train only these folds");
  train_cmd->add_flag("--no-augment", ta.no_augment, "Disable augmentation");

  PredictArgs pr;
  auto* predict_cmd = app.add_subcommand("predict", "Segment one image with a checkpoint");
  predict_cmd->add_option("--ckpt", pr.ckpt, "Checkpoint file")->required();
  predict_cmd->add_option("--image", pr.image, "Image volume (.nii or .raw)")->required();
  predict_cmd->add_option("--threshold", pr.threshold, "Probability threshold")->capture_default_str();
  predict_cmd->add_flag("--gaussian", pr.gaussian, "Gaussian-weighted window aggregation");
  predict_cmd->add_flag("--no-largest-component", pr.no_cc, "Keep every connected component");

  EvaluateArgs ea;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Evaluate training runs under corruption conditions");
  evaluate_cmd->add_option("--run", ea.runs, "Run directory (repeatable)")->required();
  evaluate_cmd->add_option("--conditions", ea.conditions, "Comma-separated: none, blur:<mm>, noise:<sigma>")
      ->capture_default_str();
  evaluate_cmd->add_option("--manifest", ea.manifest, "Evaluate these cases instead of the run's");
  evaluate_cmd->add_flag("--save-predictions", ea.save_predictions, "Write predicted masks under <out>/predictions");

  int grad_seeds = 5;
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gradcheck_cmd->add_option("--seeds", grad_seeds, "Seeds per op")->capture_default_str();

  int self_seeds = 2;
  auto* selftest_cmd = app.add_subcommand("selftest", "Kernel, metric and gradient property suites");
  selftest_cmd->add_option("--grad-seeds", self_seeds, "Seeds per gradient check")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 1;
  }

  try {
    g.seed_given = app.get_option("--seed")->count() > 0;
    static const std::map<std::string, LogLevel> levels{
        {"quiet", LogLevel::Quiet}, {"warn", LogLevel::Warn}, {"info", LogLevel::Info}, {"debug", LogLevel::Debug}};
    set_log_level(levels.at(g.log_level));
    if (g.threads > 0) omp_set_num_threads(g.threads);
    if (!g.isa.empty()) simd::set_active_isa(simd::parse_isa(g.isa));

    if (*kernel) cmd_kernel(ka, g, out);
    else if (*phantom_cmd) cmd_phantom(pa, g, out);
    else if (*describe_cmd) cmd_describe(da, out);
    else if (*train_cmd) cmd_train(ta, g, out);
    else if (*predict_cmd) cmd_predict(pr, g, out);
    else if (*evaluate_cmd) cmd_evaluate(ea, g, out);
    else if (*gradcheck_cmd) return report_checks(gradient_suite(g.seed, grad_seeds), out);
    else if (*selftest_cmd) {
      std::vector<CheckResult> checks = kernel_suite();
      for (auto& c : metric_suite(g.seed)) checks.push_back(std::move(c));
      for (auto& c : gradient_suite(g.seed, self_seeds)) checks.push_back(std::move(c));
      return report_checks(checks, out);
    }
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return classify(e);
  }
}

}  // namespace ib3dseg::cli
