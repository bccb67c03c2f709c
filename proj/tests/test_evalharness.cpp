// Copyright 2026 The mcasc Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <vector>

#include "doctest.h"
#include "mcasc/evalharness.hpp"

using namespace mcasc;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  static fs::path dir = [] {
    auto d = fs::temp_directory_path() / "mcasc_eval_test";
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

// Brute-force per-class precision/recall/F1, averaged by hand.
std::pair<double, double> oracle_scores(const ConfusionMatrix& cm) {
  std::int64_t correct = 0, total = 0;
  for (int i = 0; i < cm.n; ++i)
    for (int j = 0; j < cm.n; ++j) {
      total += cm.at(i, j);
      if (i == j) correct += cm.at(i, j);
    }
  double macro = 0.0;
  for (int k = 0; k < cm.n; ++k) {
    std::int64_t tp = cm.at(k, k), fp = 0, fn = 0;
    for (int j = 0; j < cm.n; ++j) {
      if (j != k) {
        fp += cm.at(j, k);
        fn += cm.at(k, j);
      }
    }
    const double p = (tp + fp) > 0 ? double(tp) / double(tp + fp) : 0.0;
    const double r = (tp + fn) > 0 ? double(tp) / double(tp + fn) : 0.0;
    macro += (p + r) > 0 ? 2.0 * p * r / (p + r) : 0.0;
  }
  return {double(correct) / double(total), macro / cm.n};
}

// In-memory feature set: n_per_fold clips per (class, fold) cell, each a
// random tensor whose mean level depends on the class so it is learnable.
FeatureSet tiny_feature_set(int classes, int per_cell, int F, int T, int C,
                            std::uint64_t seed) {
  FeatureSet set;
  for (int k = 0; k < classes; ++k)
    set.label_set.push_back("c" + std::to_string(k));
  Rng rng(seed);
  for (int k = 0; k < classes; ++k)
    for (int fold = 0; fold < kNumFolds; ++fold)
      for (int j = 0; j < per_cell; ++j) {
        FeatureTensor t(F, T, C);
        for (auto& v : t.data) v = 2.0 * k + rng.gaussian() * 0.3;
        set.tensors.push_back(std::move(t));
        set.labels.push_back(k);
        set.folds.push_back(fold);
      }
  return set;
}

ExperimentPlan tiny_plan() {
  ExperimentPlan plan;
  plan.arms = {arm_from_name("none")};
  plan.missing_counts = {0};
  plan.trials_per_count = 1;
  plan.matched_trials = 1;
  plan.epochs = 2;
  plan.batch_size = 8;
  plan.conv1_out = 2;
  plan.conv2_out = 2;
  plan.conv3_out = 2;
  plan.dense_hidden = 2;
  plan.jobs = 1;
  return plan;
}

}  // namespace

TEST_CASE("worked metric example: micro 0.7, macro 23/33") {
  ConfusionMatrix cm(2);
  cm.at(0, 0) = 3; cm.at(0, 1) = 1;
  cm.at(1, 0) = 2; cm.at(1, 1) = 4;
  const auto [micro, macro] = micro_macro_f(cm);
  CHECK(micro == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(macro == doctest::Approx(23.0 / 33.0).epsilon(1e-12));
}

TEST_CASE("metrics agree with a brute-force oracle on random matrices") {
  Rng rng(2);
  for (int rep = 0; rep < 50; ++rep) {
    const int n = 2 + static_cast<int>(rng.uniform_u64(5));
    ConfusionMatrix cm(n);
    for (auto& v : cm.counts) v = static_cast<std::int64_t>(rng.uniform_u64(9));
    if (cm.total() == 0) cm.at(0, 0) = 1;
    const auto [micro, macro] = micro_macro_f(cm);
    const auto [omicro, omacro] = oracle_scores(cm);
    CHECK(micro == doctest::Approx(omicro).epsilon(1e-12));
    CHECK(macro == doctest::Approx(omacro).epsilon(1e-12));
    CHECK(micro >= 0.0);
    CHECK(micro <= 1.0);
    CHECK(macro >= 0.0);
    CHECK(macro <= 1.0);
  }
}

TEST_CASE("absent class contributes zero to macro-F") {
  // Class 2 never occurs and is never predicted.
  ConfusionMatrix cm(3);
  cm.at(0, 0) = 5;
  cm.at(1, 1) = 5;
  const auto [micro, macro] = micro_macro_f(cm);
  CHECK(micro == doctest::Approx(1.0));
  CHECK(macro == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("empty confusion matrix rejected") {
  ConfusionMatrix cm(3);
  CHECK_THROWS_AS(micro_macro_f(cm), Error);
}

TEST_CASE("recall percentages: row-normalized, rows sum to 100") {
  ConfusionMatrix cm(3);
  cm.at(0, 0) = 1; cm.at(0, 1) = 1; cm.at(0, 2) = 2;
  cm.at(2, 2) = 7;
  const auto recall = confusion_recall_percent(cm);
  CHECK(recall[0][0] == doctest::Approx(25.0));
  CHECK(recall[0][1] == doctest::Approx(25.0));
  CHECK(recall[0][2] == doctest::Approx(50.0));
  for (double v : recall[1]) CHECK(v == 0.0);  // empty row stays zero
  CHECK(recall[2][2] == doctest::Approx(100.0));
  for (int i = 0; i < 3; ++i) {
    if (i == 1) continue;
    double sum = 0.0;
    for (double v : recall[i]) sum += v;
    CHECK(std::abs(sum - 100.0) < 1e-9);
  }
}

TEST_CASE("missing-set sampling: sizes, range, distinctness") {
  Rng rng(5);
  SUBCASE("k=0 yields empty sets") {
    const auto sets = sample_missing_sets(8, 0, 3, rng);
    for (const auto& s : sets) CHECK(s.empty());
  }
  SUBCASE("C=5, k=2, 10 trials covers all 10 subsets exactly once") {
    const auto sets = sample_missing_sets(5, 2, 10, rng);
    std::set<std::set<int>> distinct(sets.begin(), sets.end());
    CHECK(distinct.size() == 10);
    for (const auto& s : sets) {
      CHECK(s.size() == 2);
      for (int c : s) {
        CHECK(c >= 0);
        CHECK(c < 5);
      }
    }
  }
  SUBCASE("more trials than subsets allows repeats") {
    const auto sets = sample_missing_sets(3, 2, 5, rng);  // only 3 subsets
    CHECK(sets.size() == 5);
  }
  SUBCASE("k >= C rejected") {
    CHECK_THROWS_AS(sample_missing_sets(4, 4, 1, rng), Error);
  }
}

TEST_CASE("subset sampling is uniform over size-2 subsets of 5 (chi^2)") {
  Rng rng(7);
  std::map<std::set<int>, int> counts;
  const int draws = 10000;
  for (int rep = 0; rep < draws; ++rep)
    ++counts[detail::sample_subset(5, 2, rng)];
  REQUIRE(counts.size() == 10);
  const double expected = draws / 10.0;
  double stat = 0.0;
  for (const auto& [s, c] : counts) {
    const double d = c - expected;
    stat += d * d / expected;
  }
  // df = 9, critical value at p = 0.01 is 21.67.
  CHECK(stat < 21.67);
}

TEST_CASE("evaluate_trial: totals, determinism, and infer agreement") {
  NetworkConfig cfg;
  cfg.input_f = 4;
  cfg.input_t = 8;
  cfg.input_c = 3;
  cfg.conv1_out = 2;
  cfg.conv2_out = 2;
  cfg.conv3_out = 2;
  cfg.dense_hidden = 2;
  cfg.n_classes = 2;
  ModelState model = init_model(cfg, 11);

  std::vector<FeatureTensor> tensors;
  Rng rng(12);
  for (int i = 0; i < 6; ++i) {
    FeatureTensor t(4, 8, 3);
    for (auto& v : t.data) v = rng.gaussian();
    tensors.push_back(std::move(t));
  }
  std::vector<LabeledTensor> clips;
  for (int i = 0; i < 6; ++i) clips.push_back({&tensors[i], i % 2});

  SUBCASE("no missing channels matches direct inference") {
    Rng r(0);
    const ConfusionMatrix cm =
        evaluate_trial(model, clips, {}, Imputation::None, r, 2);
    CHECK(cm.total() == 6);
    ConfusionMatrix expected(2);
    for (const auto& c : clips) {
      const auto probs = infer(model, {c.x});
      const int pred = probs[0][1] > probs[0][0] ? 1 : 0;
      ++expected.at(c.label, pred);
    }
    CHECK(cm.counts == expected.counts);
  }
  SUBCASE("identical inputs give identical matrices") {
    Rng r1(3), r2(3);
    const auto a = evaluate_trial(model, clips, {1}, Imputation::RandomCopy, r1, 2);
    const auto b = evaluate_trial(model, clips, {1}, Imputation::RandomCopy, r2, 2);
    CHECK(a.counts == b.counts);
  }
  SUBCASE("all channels missing with random-copy imputation surfaces") {
    Rng r(4);
    CHECK_THROWS_WITH_AS(
        evaluate_trial(model, clips, {0, 1, 2}, Imputation::RandomCopy, r, 2),
        doctest::Contains("no donor"), Error);
  }
}

TEST_CASE("fold split partitions the set") {
  const FeatureSet set = tiny_feature_set(2, 2, 3, 8, 3, 17);
  for (int fold = 0; fold < kNumFolds; ++fold) {
    const auto train = detail::fold_split(set, fold, true);
    const auto eval = detail::fold_split(set, fold, false);
    CHECK(static_cast<int>(train.size() + eval.size()) == set.size());
    CHECK(eval.size() == 4);  // 2 classes x 2 per cell
    std::set<const FeatureTensor*> seen;
    for (const auto& item : train) seen.insert(item.x);
    for (const auto& item : eval) CHECK(seen.count(item.x) == 0);
  }
}

TEST_CASE("plan parsing and validation") {
  SUBCASE("round trip through a JSON file") {
    const auto path = (temp_dir() / "plan.json").string();
    std::ofstream os(path);
    os << R"({"arms": ["none", "swap_copy"], "missing_counts": [0, 2],
             "trials_per_count": 4, "seed": 9, "epochs": 3,
             "batch_size": 16, "lr": 0.002, "conv1_out": 4, "k_max": 2,
             "jobs": 1})";
    os.close();
    const ExperimentPlan plan = load_plan(path);
    CHECK(plan.arms.size() == 2);
    CHECK(plan.arms[1].name == "swap_copy");
    CHECK(plan.arms[1].kind == AugmentKind::Swap);
    CHECK(plan.arms[1].imputation == Imputation::RandomCopy);
    CHECK(plan.missing_counts == std::vector<int>{0, 2});
    CHECK(plan.trials_per_count == 4);
    CHECK(plan.seed == 9);
    CHECK(plan.epochs == 3);
    CHECK(plan.radam.lr == doctest::Approx(0.002));
    CHECK(plan.conv1_out == 4);
    CHECK(plan.k_max == 2);
    plan.validate(4);
  }
  SUBCASE("unknown arm rejected") {
    const auto path = (temp_dir() / "bad_arm.json").string();
    std::ofstream os(path);
    os << R"({"arms": ["zap"]})";
    os.close();
    CHECK_THROWS_WITH_AS(load_plan(path), doctest::Contains("unknown experiment arm"),
                         Error);
  }
  SUBCASE("malformed JSON rejected") {
    const auto path = (temp_dir() / "bad_json.json").string();
    std::ofstream os(path);
    os << "{arms: [";
    os.close();
    CHECK_THROWS_AS(load_plan(path), Error);
  }
  SUBCASE("duplicate arm rejected by validation") {
    ExperimentPlan plan = tiny_plan();
    plan.arms = {arm_from_name("none"), arm_from_name("none")};
    CHECK_THROWS_WITH_AS(plan.validate(4), doctest::Contains("duplicate arm"),
                         Error);
  }
  SUBCASE("missing count must stay below channel count") {
    ExperimentPlan plan = tiny_plan();
    plan.missing_counts = {3};
    CHECK_THROWS_AS(plan.validate(3), Error);
  }
}

TEST_CASE("run_experiment with missing_counts={0} is plain cross-validation") {
  const FeatureSet set = tiny_feature_set(2, 3, 4, 8, 3, 21);
  const ExperimentPlan plan = tiny_plan();

  const ExperimentReport report = run_experiment(plan, set);
  CHECK(report.trials.size() == 4);  // one arm, 4 folds, 1 trial each
  CHECK(report.failed_trials == 0);
  for (const auto& r : report.trials) {
    CHECK(r.arm == "none");
    CHECK(r.missing_count == 0);
    CHECK(r.micro_f >= 0.0);
    CHECK(r.micro_f <= 1.0);
  }
  const auto& pooled = report.confusion.at({"none", 0});
  CHECK(pooled.total() == set.size());  // every clip evaluated exactly once
  const auto [micro, macro] = report.pooled_scores("none", 0);
  CHECK(micro >= 0.0);
  CHECK(macro <= 1.0);

  SUBCASE("repeat run is identical, including with more worker threads") {
    ExperimentPlan parallel = plan;
    parallel.jobs = 4;
    const ExperimentReport again = run_experiment(parallel, set);
    REQUIRE(again.trials.size() == report.trials.size());
    for (std::size_t i = 0; i < report.trials.size(); ++i) {
      CHECK(again.trials[i].micro_f == report.trials[i].micro_f);
      CHECK(again.trials[i].macro_f == report.trials[i].macro_f);
      CHECK(again.trials[i].fold == report.trials[i].fold);
    }
    CHECK(again.confusion.at({"none", 0}).counts == pooled.counts);
  }
}

TEST_CASE("run_experiment samples distinct missing sets per count") {
  const FeatureSet set = tiny_feature_set(2, 2, 4, 8, 4, 23);
  ExperimentPlan plan = tiny_plan();
  plan.arms = {arm_from_name("mask")};
  plan.missing_counts = {0, 1, 2};
  plan.trials_per_count = 2;
  plan.epochs = 1;
  plan.k_max = 2;

  const ExperimentReport report = run_experiment(plan, set);
  // 4 folds x 3 counts x 2 trials.
  CHECK(report.trials.size() == 24);
  for (int count : plan.missing_counts) {
    const auto& cm = report.confusion.at({"mask", count});
    CHECK(cm.total() == set.size() * plan.trials_per_count);
  }
}

TEST_CASE("matched-missing protocol retrains per trial") {
  const FeatureSet set = tiny_feature_set(2, 2, 4, 8, 3, 27);
  ExperimentPlan plan = tiny_plan();
  plan.missing_counts = {0, 1};
  plan.epochs = 1;

  const ExperimentReport report = run_matched_missing(plan, set);
  CHECK(report.trials.size() == 8);  // 4 folds x 2 counts x 1 trial
  for (const auto& r : report.trials) CHECK(r.arm == "matched");
  CHECK(report.confusion.count({"matched", 0}) == 1);
  CHECK(report.confusion.count({"matched", 1}) == 1);

  const ExperimentReport again = run_matched_missing(plan, set);
  for (std::size_t i = 0; i < report.trials.size(); ++i)
    CHECK(again.trials[i].micro_f == report.trials[i].micro_f);
}

TEST_CASE("report files: layout and byte-identical rewrites") {
  const FeatureSet set = tiny_feature_set(2, 2, 4, 8, 3, 31);
  ExperimentPlan plan = tiny_plan();
  plan.epochs = 1;
  const ExperimentReport report = run_experiment(plan, set);

  const auto dir_a = temp_dir() / "report_a";
  const auto dir_b = temp_dir() / "report_b";
  write_report(report, dir_a.string());
  write_report(report, dir_b.string());

  REQUIRE(fs::exists(dir_a / "report.csv"));
  REQUIRE(fs::exists(dir_a / "confusion_none_0.csv"));
  REQUIRE(fs::exists(dir_a / "recall_none_0.csv"));

  std::ifstream is(dir_a / "report.csv");
  std::string header;
  std::getline(is, header);
  CHECK(header == "arm,fold,missing_count,trial,micro_f,macro_f,failed");
  int lines = 0;
  for (std::string line; std::getline(is, line);)
    if (!line.empty()) ++lines;
  CHECK(lines == static_cast<int>(report.trials.size()));

  for (const auto* name : {"report.csv", "confusion_none_0.csv", "recall_none_0.csv"}) {
    std::ifstream fa(dir_a / name, std::ios::binary), fb(dir_b / name, std::ios::binary);
    const std::string bytes_a((std::istreambuf_iterator<char>(fa)), {});
    const std::string bytes_b((std::istreambuf_iterator<char>(fb)), {});
    CHECK(bytes_a == bytes_b);
    CHECK(!bytes_a.empty());
  }
}
