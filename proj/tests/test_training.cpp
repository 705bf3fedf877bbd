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

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "ib3dseg/error.hpp"
#include "ib3dseg/training.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace ib3dseg;

namespace {

// Straight-line loss used as the oracle.
template <typename T>
double loss_oracle(const Tensor<T>& z, const Tensor<T>& g) {
  long double bce = 0, inter = 0, pp = 0, gg = 0;
  for (Index i = 0; i < z.numel(); ++i) {
    const long double p = 1.0L / (1.0L + std::exp(-static_cast<long double>(z.data()[i])));
    const long double pc = std::min(std::max(p, 1e-7L), 1.0L - 1e-7L);
    const long double t = g.data()[i];
    bce += -(t * std::log(pc) + (1 - t) * std::log(1 - pc));
    inter += p * t;
    pp += p * p;
    gg += t * t;
  }
  return static_cast<double>(bce / z.numel() + 1 - 2 * inter / (pp + gg));
}

template <typename T>
Tensor<T> random_target(Shape shape, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (T& v : t.mutable_values()) v = rng.bernoulli(0.3) ? T(1) : T(0);
  return t;
}

NetworkConfig tiny_net(bool ib) {
  NetworkConfig c;
  c.depth = 3;
  c.base_channels = 4;
  c.ib_enabled = ib;
  return c;
}

DatasetSpec write_phantoms(const testutil::TempDir& dir, int n, Dims3 dims = {24, 24, 24}) {
  DatasetSpec spec;
  spec.base_dir = dir.path().string();
  spec.patch_size = {16, 16, 16};
  PhantomConfig pc;
  pc.dims = dims;
  for (int i = 0; i < n; ++i) {
    auto [image, label] = phantom(100 + static_cast<std::uint64_t>(i), pc);
    const std::string id = "case" + std::to_string(i);
    write_volume(image, dir.file(id + "_img.nii"));
    write_volume(label, dir.file(id + "_seg.nii"));
    spec.cases.push_back({id, id + "_img.nii", id + "_seg.nii"});
  }
  return spec;
}

TrainConfig smoke_config() {
  TrainConfig c;
  c.epochs = 3;
  c.batches_per_epoch = 2;
  c.batch_size = 2;
  c.lr0 = 1e-3;
  c.folds = 2;
  c.seed = 7;
  return c;
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("bce_dice: hand examples") {
  SUBCASE("zero logits on an all-background target") {
    Tensor<double> z({1, 1, 2, 2, 2}, 0.0);
    Tensor<double> g({1, 1, 2, 2, 2}, 0.0);
    // BCE = ln 2; Dice = 1 - 0 / (8 * 0.25).
    CHECK(bce_dice_loss(z, g).item() == doctest::Approx(std::log(2.0) + 1.0).epsilon(1e-12));
    const LossTerms t = bce_dice_terms(z, g);
    CHECK(t.bce == doctest::Approx(std::log(2.0)));
    CHECK(t.dice == doctest::Approx(1.0));
  }
  SUBCASE("confident correct prediction is near zero") {
    Tensor<double> g({1, 1, 1, 2, 2}, std::vector<double>{1, 0, 1, 0});
    Tensor<double> z({1, 1, 1, 2, 2}, std::vector<double>{30, -30, 30, -30});
    CHECK(bce_dice_loss(z, g).item() < 1e-6);
  }
  SUBCASE("confident wrong prediction saturates the clamp") {
    Tensor<double> g({1, 1, 1, 1, 2}, std::vector<double>{1, 0});
    Tensor<double> z({1, 1, 1, 1, 2}, std::vector<double>{-40, 40});
    CHECK(bce_dice_terms(z, g).bce == doctest::Approx(-std::log(1e-7)).epsilon(1e-9));
    CHECK(bce_dice_terms(z, g).dice == doctest::Approx(1.0));
  }
}

TEST_CASE("bce_dice: matches the oracle on random inputs") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto z = oracle::random_tensor<double>({2, 1, 3, 3, 3}, rng, 2.0);
    auto g = random_target<double>({2, 1, 3, 3, 3}, rng);
    CHECK(bce_dice_loss(z, g).item() == doctest::Approx(loss_oracle(z, g)).epsilon(1e-12));
  }
}

TEST_CASE("bce_dice: gradient matches central differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    auto z = oracle::random_tensor<double>({1, 1, 4, 4, 4}, rng, 1.5);
    auto g = random_target<double>({1, 1, 4, 4, 4}, rng);
    z.set_requires_grad(true);
    Tape<double> tape;
    {
      TapeScope<double> scope(&tape);
      tape.backward(bce_dice_loss(z, g));
    }
    const double h = 1e-6;
    double worst = 0.0;
    for (Index i = 0; i < z.numel(); ++i) {
      Tensor<double> zp = z.clone(), zm = z.clone();
      zp.mutable_data()[i] += h;
      zm.mutable_data()[i] -= h;
      const double numeric = (loss_oracle(zp, g) - loss_oracle(zm, g)) / (2 * h);
      const double analytic = z.grad()[static_cast<std::size_t>(i)];
      worst = std::max(worst, std::abs(analytic - numeric) / std::max(1e-6, std::abs(analytic) + std::abs(numeric)));
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("bce_dice: input validation") {
  Tensor<float> z({1, 1, 2, 2, 2}, 0.0f);
  CHECK_THROWS_AS(bce_dice_loss(z, Tensor<float>({1, 1, 2, 2, 2}, 0.5f)), ParameterError);
  CHECK_THROWS_AS(bce_dice_loss(z, Tensor<float>({1, 1, 2, 2, 1}, 0.0f)), ShapeError);
}

TEST_CASE("poly_lr") {
  TrainConfig c;
  CHECK(poly_lr(0, c) == doctest::Approx(1e-4));
  CHECK(poly_lr(250, c) == doctest::Approx(5.3589e-5).epsilon(1e-4));
  CHECK(poly_lr(500, c) == 0.0);
  for (int e = 1; e <= c.epochs; ++e) CHECK(poly_lr(e, c) < poly_lr(e - 1, c));
  CHECK_THROWS_AS(poly_lr(-1, c), ParameterError);
  CHECK_THROWS_AS(poly_lr(501, c), ParameterError);
}

TEST_CASE("adam: first step moves each weight by lr against its gradient sign") {
  Network net = build(tiny_net(true), 1);
  const Network before = build(tiny_net(true), 1);
  TrainConfig c;
  c.weight_decay = 0.0;
  AdamState state;
  Tensor<float>& w = net.param("head.weight");
  auto grad = w.mutable_grad();
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = (i % 2 ? 1.0f : -1.0f) * (0.01f + static_cast<float>(i));
  adam_step(net, state, 0.1, c);
  CHECK(state.step == 1);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double delta = w.data()[i] - before.param("head.weight").data()[i];
    CHECK(delta == doctest::Approx(i % 2 ? -0.1 : 0.1).epsilon(1e-5));
  }
  // Everything without a gradient stays put, fixed kernels included.
  for (std::size_t k = 0; k < net.params().size(); ++k) {
    const auto& p = net.params()[k];
    if (p.name == "head.weight") continue;
    const auto& q = before.params()[k];
    CHECK(std::equal(p.value.values().begin(), p.value.values().end(), q.value.values().begin()));
  }
}

TEST_CASE("adam: weight decay touches conv weights only") {
  Network net = build(tiny_net(false), 2);
  const Network before = build(tiny_net(false), 2);
  TrainConfig c;
  c.weight_decay = 0.5;
  AdamState state;
  adam_step(net, state, 1e-3, c);
  for (std::size_t k = 0; k < net.params().size(); ++k) {
    const auto& p = net.params()[k];
    const bool moved = !std::equal(p.value.values().begin(), p.value.values().end(),
                                   before.params()[k].value.values().begin());
    CAPTURE(p.name);
    CHECK(moved == (p.kind == ParamKind::ConvWeight));
  }
}

TEST_CASE("kfold_split") {
  for (int n : {1, 5, 7, 24}) {
    for (int k = 1; k <= std::min(n, 6); ++k) {
      const auto folds = kfold_split(n, k, 11);
      REQUIRE(folds.size() == static_cast<std::size_t>(n));
      std::vector<int> sizes(static_cast<std::size_t>(k), 0);
      for (int f : folds) {
        REQUIRE(f >= 0);
        REQUIRE(f < k);
        ++sizes[static_cast<std::size_t>(f)];
      }
      const auto [lo, hi] = std::minmax_element(sizes.begin(), sizes.end());
      CHECK(*hi - *lo <= 1);
      CHECK(*lo >= 1);
    }
  }
  CHECK(kfold_split(24, 4, 5) == kfold_split(24, 4, 5));
  CHECK(kfold_split(24, 4, 5) != kfold_split(24, 4, 6));
  CHECK_THROWS_AS(kfold_split(3, 4, 0), ParameterError);
  CHECK_THROWS_AS(kfold_split(3, 0, 0), ParameterError);
}

TEST_CASE("train config JSON") {
  TrainConfig c = smoke_config();
  c.augment = false;
  CHECK(TrainConfig::from_json(nlohmann::json::parse(c.to_json().dump())) == c);
  CHECK_THROWS_AS(TrainConfig::from_json(nlohmann::json{{"epoch", 3}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json(nlohmann::json{{"epochs", 0}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json(nlohmann::json{{"lr0", "fast"}}), ConfigError);
}

TEST_CASE("checkpoint: round trip is bit exact and training continues identically") {
  testutil::TempDir dir("ckpt");
  Checkpoint ck;
  ck.network = build(tiny_net(true), 9);
  ck.network.enable_grad();
  ck.train = smoke_config();
  ck.predict.ct_stats = CtStats{-100, 300, 40, 70};
  ck.predict.modality = Modality::CT;
  ck.fold = 1;
  ck.epoch = 4;
  ck.best_epoch = 3;
  ck.best_dsc = 0.625;
  ck.dataset_hash = "abc";

  Rng rng(1);
  auto x = oracle::random_tensor<float>({1, 1, 16, 16, 16}, rng);
  auto y = random_target<float>({1, 1, 16, 16, 16}, rng);
  auto step = [&](Network& net, AdamState& adam) {
    Tape<float> tape;
    {
      TapeScope<float> scope(&tape);
      tape.backward(bce_dice_loss(net.forward(x, true), y));
    }
    adam_step(net, adam, 1e-3, ck.train);
    net.zero_grad();
  };
  step(ck.network, ck.adam);

  save_checkpoint(ck, dir.file("a.ckpt"));
  Checkpoint back = load_checkpoint(dir.file("a.ckpt"));
  CHECK(back.network.config() == ck.network.config());
  CHECK(back.train == ck.train);
  CHECK(back.adam == ck.adam);
  CHECK(back.fold == 1);
  CHECK(back.epoch == 4);
  CHECK(back.best_epoch == 3);
  CHECK(back.best_dsc == 0.625);
  CHECK(back.dataset_hash == "abc");
  CHECK(back.predict.modality == Modality::CT);
  REQUIRE(back.predict.ct_stats);
  CHECK(back.predict.ct_stats->std == 70);
  REQUIRE(back.network.params().size() == ck.network.params().size());
  for (std::size_t k = 0; k < ck.network.params().size(); ++k) {
    const auto& a = ck.network.params()[k].value.values();
    const auto& b = back.network.params()[k].value.values();
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }

  back.network.enable_grad();
  step(ck.network, ck.adam);
  step(back.network, back.adam);
  for (std::size_t k = 0; k < ck.network.params().size(); ++k) {
    const auto& a = ck.network.params()[k].value.values();
    const auto& b = back.network.params()[k].value.values();
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }
  save_checkpoint(back, dir.file("b.ckpt"));
  save_checkpoint(ck, dir.file("c.ckpt"));
  CHECK(testutil::read_bytes(dir.file("b.ckpt")) == testutil::read_bytes(dir.file("c.ckpt")));
}

TEST_CASE("checkpoint: malformed files are rejected") {
  testutil::TempDir dir("ckpt_bad");
  Checkpoint ck;
  ck.network = build(tiny_net(false), 1);
  save_checkpoint(ck, dir.file("ok.ckpt"));
  const auto bytes = testutil::read_bytes(dir.file("ok.ckpt"));

  auto bad = bytes;
  bad[0] = 'X';
  testutil::write_bytes(dir.file("magic.ckpt"), bad);
  CHECK_THROWS_AS(load_checkpoint(dir.file("magic.ckpt")), FormatError);
  for (std::size_t cut : {std::size_t{4}, std::size_t{14}, std::size_t{100}, bytes.size() / 2, bytes.size() - 1}) {
    testutil::write_bytes(dir.file("cut.ckpt"), {bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut)});
    CAPTURE(cut);
    CHECK_THROWS_AS(load_checkpoint(dir.file("cut.ckpt")), FormatError);
  }
  CHECK_THROWS_AS(load_checkpoint(dir.file("missing.ckpt")), FormatError);
}

TEST_CASE("train: smoke run writes logs, checkpoints and a summary") {
  testutil::TempDir dir("train");
  const DatasetSpec data = write_phantoms(dir, 4);
  const std::string out = dir.file("run");
  std::vector<std::pair<int, int>> seen;
  TrainOptions opts;
  opts.on_epoch = [&](int fold, const EpochLog& row) { seen.emplace_back(fold, row.epoch); };
  const TrainResult r = train(data, tiny_net(true), smoke_config(), out, opts);

  REQUIRE(r.folds.size() == 2);
  CHECK(seen.size() == 6);
  std::set<std::string> val_ids;
  for (const auto& f : r.folds) {
    CHECK(f.log.size() == 3);
    CHECK(f.validation_ids.size() == 2);
    CHECK(f.best_dsc >= 0.0);
    CHECK(f.best_dsc <= 1.0);
    CHECK(f.best_epoch >= 1);
    for (const auto& row : f.log) {
      CHECK(std::isfinite(row.loss));
      CHECK(row.val_dsc.has_value());
    }
    val_ids.insert(f.validation_ids.begin(), f.validation_ids.end());
    const auto fold_dir = std::filesystem::path(out) / ("fold_" + std::to_string(f.fold));
    CHECK(std::filesystem::exists(fold_dir / "best.ckpt"));
    CHECK(std::filesystem::exists(fold_dir / "last.ckpt"));
    const std::string csv = read_text(fold_dir / "log.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
    CHECK(csv.rfind("epoch,loss,lr,val_dsc\n", 0) == 0);
    const Checkpoint best = load_checkpoint((fold_dir / "best.ckpt").string());
    CHECK(best.epoch == f.best_epoch);
    CHECK(best.best_dsc == f.best_dsc);
    CHECK(load_checkpoint((fold_dir / "last.ckpt").string()).epoch == 3);
  }
  CHECK(val_ids.size() == 4);  // folds partition the cases
  CHECK(r.mean_best_dsc == doctest::Approx((r.folds[0].best_dsc + r.folds[1].best_dsc) / 2));

  const auto summary = nlohmann::json::parse(read_text(std::filesystem::path(out) / "summary.json"));
  CHECK(summary.at("model") == "ib-unet");
  CHECK(summary.at("folds").size() == 2);
  CHECK(summary.at("mean_best_dsc").get<double>() == r.mean_best_dsc);
  const DatasetSpec copy = load_manifest((std::filesystem::path(out) / "manifest.json").string());
  CHECK(copy.cases.size() == 4);
  CHECK(std::filesystem::path(copy.image_path(0)).is_absolute());
}

TEST_CASE("train: identical seeds give byte-identical outputs") {
  testutil::TempDir dir("train_det");
  const DatasetSpec data = write_phantoms(dir, 3);
  TrainConfig c = smoke_config();
  c.epochs = 2;
  c.folds = 1;
  train(data, tiny_net(false), c, dir.file("a"));
  train(data, tiny_net(false), c, dir.file("b"));
  for (const char* f : {"fold_0/log.csv", "fold_0/best.ckpt", "fold_0/last.ckpt", "summary.json"}) {
    CAPTURE(f);
    CHECK(testutil::read_bytes(dir.file(std::string("a/") + f)) == testutil::read_bytes(dir.file(std::string("b/") + f)));
  }
  c.seed = 8;
  train(data, tiny_net(false), c, dir.file("c"));
  CHECK(testutil::read_bytes(dir.file("a/fold_0/last.ckpt")) != testutil::read_bytes(dir.file("c/fold_0/last.ckpt")));
}

TEST_CASE("train: loss trends down on phantoms") {
  testutil::TempDir dir("train_loss");
  const DatasetSpec data = write_phantoms(dir, 3);
  TrainConfig c = smoke_config();
  c.epochs = 12;
  c.batches_per_epoch = 4;
  c.folds = 1;
  c.validate_every = 12;
  c.augment = false;
  const TrainResult r = train(data, tiny_net(true), c, dir.file("run"));
  const auto& log = r.folds.at(0).log;
  const double head = (log[0].loss + log[1].loss + log[2].loss) / 3;
  const double tail = (log[9].loss + log[10].loss + log[11].loss) / 3;
  CHECK(tail < head);
}

TEST_CASE("train: configuration errors") {
  testutil::TempDir dir("train_err");
  DatasetSpec data = write_phantoms(dir, 2);
  TrainConfig c = smoke_config();
  c.folds = 3;
  CHECK_THROWS_AS(train(data, tiny_net(false), c, dir.file("x")), ConfigError);
  c.folds = 1;
  data.patch_size = {12, 12, 12};
  CHECK_THROWS_AS(train(data, tiny_net(false), c, dir.file("y")), ShapeError);
}

TEST_CASE("evaluate_run: cardinality, aggregation and report files") {
  testutil::TempDir dir("eval_run");
  const DatasetSpec data = write_phantoms(dir, 4);
  TrainConfig c = smoke_config();
  c.epochs = 2;
  train(data, tiny_net(false), c, dir.file("base"));
  train(data, tiny_net(true), c, dir.file("ib"));
  const std::vector<CorruptionSpec> conds{CorruptionSpec::parse("none"), CorruptionSpec::parse("blur:2"),
                                          CorruptionSpec::parse("noise:45")};
  EvalOptions opts;
  opts.prediction_dir = dir.file("pred");
  const RunReport a = evaluate_run(dir.file("base"), conds, opts);
  const RunReport b = evaluate_run(dir.file("ib") + "/", conds, opts);
  CHECK(a.cases.size() == conds.size() * data.cases.size());
  CHECK(a.summary.size() == conds.size());
  CHECK(b.cases.front().run == "ib");
  CHECK(std::filesystem::exists(dir.file("pred/base/noise:45/case3.raw")));

  // Corruption noise does not depend on the model.
  const RunReport again = evaluate_run(dir.file("base"), conds);
  for (std::size_t i = 0; i < a.cases.size(); ++i) CHECK(a.cases[i].dsc == again.cases[i].dsc);

  const RunReport merged = merge_reports({a, b});
  REQUIRE(merged.summary.size() == 6);
  write_report(merged, dir.file("report"));
  std::ifstream csv(dir.file("report/cases.csv"));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "run,model,fold,case,condition,dsc,hd95,hd95_infinite");
  std::map<std::pair<std::string, std::string>, std::vector<double>> dsc_by_cell;
  int rows = 0;
  while (std::getline(csv, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string tok; std::getline(ss, tok, ',');) f.push_back(tok);
    REQUIRE(f.size() == 8);
    dsc_by_cell[{f[1], f[4]}].push_back(std::stod(f[5]));
    ++rows;
  }
  CHECK(rows == 24);
  const auto summary = nlohmann::json::parse(read_text(dir.file("report/summary.json"))).at("summary");
  REQUIRE(summary.size() == 6);
  for (const auto& row : summary) {
    const auto& v = dsc_by_cell.at({row.at("model").get<std::string>(), row.at("condition").get<std::string>()});
    double mean = 0, ss = 0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    for (double x : v) ss += (x - mean) * (x - mean);
    CHECK(row.at("n").get<std::size_t>() == v.size());
    CHECK(row.at("dsc_mean").get<double>() == doctest::Approx(mean).epsilon(1e-12));
    CHECK(row.at("dsc_std").get<double>() == doctest::Approx(std::sqrt(ss / (v.size() - 1))).epsilon(1e-9));
  }
  const std::string md = read_text(dir.file("report/summary.md"));
  CHECK(md.find("| unet |") != std::string::npos);
  CHECK(md.find("| ib-unet |") != std::string::npos);
  CHECK(md.find("noise:45") != std::string::npos);
}

TEST_CASE("evaluate_run: missing checkpoint or fold assignment") {
  testutil::TempDir dir("eval_err");
  DatasetSpec data = write_phantoms(dir, 2);
  TrainConfig c = smoke_config();
  c.epochs = 1;
  c.folds = 2;
  train(data, tiny_net(false), c, dir.file("run"));
  const std::vector<CorruptionSpec> none{CorruptionSpec::parse("none")};
  EvalOptions opts;
  opts.dataset = data;
  opts.dataset->cases.push_back({"stranger", "case0_img.nii", "case0_seg.nii"});
  CHECK_THROWS_AS(evaluate_run(dir.file("run"), none, opts), ConfigError);
  std::filesystem::remove(dir.file("run/fold_1/best.ckpt"));
  CHECK_THROWS_AS(evaluate_run(dir.file("run"), none), Error);
}

TEST_CASE("evaluate_run: a memorized single case is segmented well") {
  testutil::TempDir dir("eval_mem");
  const DatasetSpec data = write_phantoms(dir, 1);
  TrainConfig c = smoke_config();
  c.epochs = 40;
  c.batches_per_epoch = 4;
  c.folds = 1;
  c.validate_every = 10;
  c.augment = false;
  c.lr0 = 3e-3;
  train(data, tiny_net(true), c, dir.file("run"));
  const RunReport r = evaluate_run(dir.file("run"), {CorruptionSpec::parse("none")});
  REQUIRE(r.cases.size() == 1);
  MESSAGE("memorized DSC " << r.cases[0].dsc);
  CHECK(r.cases[0].dsc > 0.9);
}
