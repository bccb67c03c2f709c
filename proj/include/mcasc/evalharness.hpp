// mcasc/evalharness.hpp
//
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
//
// Evaluation protocol: missing-channel trials with optional random-copy
// imputation, 4-fold cross-validation, micro/macro F-scores, confusion
// matrices, and the matched-missing comparison runs.

#pragma once

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "mcasc/augment.hpp"
#include "mcasc/common.hpp"
#include "mcasc/model.hpp"
#include "mcasc/tensorio.hpp"

namespace mcasc {

inline constexpr int kNumFolds = 4;

// ---------------------------------------------------------------------------
// Metrics.

struct ConfusionMatrix {
  int n = 0;
  std::vector<std::int64_t> counts;  // row = true class, col = predicted

  explicit ConfusionMatrix(int n_classes = 0)
      : n(n_classes), counts(static_cast<std::size_t>(n_classes) * n_classes, 0) {}

  std::int64_t& at(int truth, int pred) {
    return counts[static_cast<std::size_t>(truth) * n + pred];
  }
  std::int64_t at(int truth, int pred) const {
    return counts[static_cast<std::size_t>(truth) * n + pred];
  }
  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    Require(n == o.n, "confusion: size mismatch");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    return *this;
  }
  std::int64_t total() const {
    std::int64_t s = 0;
    for (auto v : counts) s += v;
    return s;
  }
};

// Micro-F equals accuracy for single-label classification; macro-F is the
// unweighted mean of per-class F1 with the zero-denominator -> 0 convention.
inline std::pair<double, double> micro_macro_f(const ConfusionMatrix& cm) {
  Require(cm.n >= 1, "micro_macro_f: empty matrix");
  const std::int64_t total = cm.total();
  Require(total > 0, "micro_macro_f: no observations");
  std::int64_t diag = 0;
  for (int k = 0; k < cm.n; ++k) diag += cm.at(k, k);
  const double micro = static_cast<double>(diag) / static_cast<double>(total);

  double macro = 0.0;
  for (int k = 0; k < cm.n; ++k) {
    std::int64_t tp = cm.at(k, k), row = 0, col = 0;
    for (int j = 0; j < cm.n; ++j) {
      row += cm.at(k, j);
      col += cm.at(j, k);
    }
    const double precision = col > 0 ? static_cast<double>(tp) / col : 0.0;
    const double recall = row > 0 ? static_cast<double>(tp) / row : 0.0;
    const double f1 = (precision + recall) > 0.0
                          ? 2.0 * precision * recall / (precision + recall)
                          : 0.0;
    macro += f1;
  }
  macro /= cm.n;
  return {micro, macro};
}

inline std::vector<std::vector<double>> confusion_recall_percent(
    const ConfusionMatrix& cm) {
  std::vector<std::vector<double>> out(cm.n, std::vector<double>(cm.n, 0.0));
  for (int i = 0; i < cm.n; ++i) {
    std::int64_t row = 0;
    for (int j = 0; j < cm.n; ++j) row += cm.at(i, j);
    if (row == 0) continue;
    for (int j = 0; j < cm.n; ++j)
      out[i][j] = 100.0 * static_cast<double>(cm.at(i, j)) / row;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature set: in-memory tensors with labels and fold assignments.

struct FeatureSet {
  std::vector<FeatureTensor> tensors;
  std::vector<int> labels;
  std::vector<int> folds;
  std::vector<std::string> label_set;

  int size() const { return static_cast<int>(tensors.size()); }
  int channels() const { return tensors.empty() ? 0 : tensors[0].C; }
  int n_classes() const { return static_cast<int>(label_set.size()); }
};

// Loads every tensor named by a features manifest (paths relative to the
// manifest's directory).
inline FeatureSet load_feature_set(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  const DatasetManifest m = load_manifest(manifest_path);
  Require(!m.entries.empty(), "load_feature_set: empty manifest");
  FeatureSet set;
  set.label_set = m.label_set;
  const fs::path base = fs::path(manifest_path).parent_path();
  for (const auto& e : m.entries) {
    set.tensors.push_back(read_tensor((base / e.clip_path).string()));
    set.labels.push_back(m.label_index(e.scene_label));
    set.folds.push_back(e.fold_id);
  }
  return set;
}

// ---------------------------------------------------------------------------
// Experiment plan and report.

enum class Imputation { None, RandomCopy };

struct ExperimentArm {
  std::string name;           // "none", "mask", "overwrite_copy", "swap_copy"
  AugmentKind kind = AugmentKind::None;
  Imputation imputation = Imputation::None;
};

inline ExperimentArm arm_from_name(const std::string& name) {
  if (name == "none") return {"none", AugmentKind::None, Imputation::None};
  if (name == "mask") return {"mask", AugmentKind::Mask, Imputation::None};
  if (name == "overwrite_copy" || name == "overwrite+copy")
    return {"overwrite_copy", AugmentKind::Overwrite, Imputation::RandomCopy};
  if (name == "swap_copy" || name == "swap+copy")
    return {"swap_copy", AugmentKind::Swap, Imputation::RandomCopy};
  throw Error("unknown experiment arm: " + name);
}

struct ExperimentPlan {
  std::vector<ExperimentArm> arms;
  std::vector<int> missing_counts = {0, 1, 2, 4, 8, 12};
  int trials_per_count = 16;
  int matched_trials = 2;  // matched runs retrain per trial
  std::uint64_t seed = 0;
  int epochs = 50;
  int batch_size = 32;
  RAdamConfig radam;
  int conv1_out = 16, conv2_out = 32, conv3_out = 64, dense_hidden = 32;
  int k_min = 0;
  int k_max = -1;  // -1 = floor(C/2)
  int jobs = 0;    // 0 = hardware concurrency

  void validate(int C) const {
    Require(!arms.empty(), "plan: no arms");
    std::set<std::string> names;
    for (const auto& a : arms)
      Require(names.insert(a.name).second, "plan: duplicate arm " + a.name);
    for (int k : missing_counts)
      Require(k >= 0 && k < C, "plan: missing_count must be < channel count");
    Require(trials_per_count >= 1 && matched_trials >= 1, "plan: trials must be >= 1");
    Require(epochs >= 1 && batch_size >= 1, "plan: bad hyperparameters");
  }
};

struct TrialResult {
  std::string arm;
  int fold = 0;
  int missing_count = 0;
  int trial = 0;
  double micro_f = 0.0;
  double macro_f = 0.0;
  bool failed = false;
};

struct ExperimentReport {
  std::vector<TrialResult> trials;
  // Pooled confusion per (arm, missing_count).
  std::map<std::pair<std::string, int>, ConfusionMatrix> confusion;
  std::vector<std::string> label_set;
  int failed_trials = 0;

  std::pair<double, double> pooled_scores(const std::string& arm,
                                          int missing_count) const {
    auto it = confusion.find({arm, missing_count});
    Require(it != confusion.end(), "report: no cell for " + arm);
    return micro_macro_f(it->second);
  }
};

// Plan file: JSON object with keys arms (list of arm names), missing_counts,
// trials_per_count, matched_trials, seed, epochs, batch_size, lr, conv1_out,
// conv2_out, conv3_out, dense_hidden, k_min, k_max, jobs. All optional
// except arms.
inline ExperimentPlan load_plan(const std::string& path) {
  std::ifstream is(path);
  Require(is.good(), "load_plan: cannot open " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("load_plan: " + path + ": " + e.what());
  }
  ExperimentPlan plan;
  Require(j.contains("arms") && j["arms"].is_array(),
          "load_plan: plan must list arms");
  for (const auto& a : j["arms"])
    plan.arms.push_back(arm_from_name(a.get<std::string>()));
  if (j.contains("missing_counts"))
    plan.missing_counts = j["missing_counts"].get<std::vector<int>>();
  plan.trials_per_count = j.value("trials_per_count", plan.trials_per_count);
  plan.matched_trials = j.value("matched_trials", plan.matched_trials);
  plan.seed = j.value("seed", plan.seed);
  plan.epochs = j.value("epochs", plan.epochs);
  plan.batch_size = j.value("batch_size", plan.batch_size);
  plan.radam.lr = j.value("lr", plan.radam.lr);
  plan.conv1_out = j.value("conv1_out", plan.conv1_out);
  plan.conv2_out = j.value("conv2_out", plan.conv2_out);
  plan.conv3_out = j.value("conv3_out", plan.conv3_out);
  plan.dense_hidden = j.value("dense_hidden", plan.dense_hidden);
  plan.k_min = j.value("k_min", plan.k_min);
  plan.k_max = j.value("k_max", plan.k_max);
  plan.jobs = j.value("jobs", plan.jobs);
  return plan;
}

// ---------------------------------------------------------------------------
// Missing-set sampling: uniform over size-k subsets, distinct within a cell
// whenever the number of size-k subsets allows it.

namespace detail {

inline std::set<int> sample_subset(int C, int k, Rng& rng) {
  std::vector<int> channels(C);
  std::iota(channels.begin(), channels.end(), 0);
  for (int i = 0; i < k; ++i) {
    const int j = rng.uniform_int(i, C - 1);
    std::swap(channels[i], channels[j]);
  }
  return std::set<int>(channels.begin(), channels.begin() + k);
}

inline double subset_count_at_least(int C, int k, double cap) {
  double v = 1.0;
  for (int i = 0; i < k; ++i) {
    v *= static_cast<double>(C - i) / (i + 1);
    if (v >= cap) return cap;
  }
  return v;
}

}  // namespace detail

inline std::vector<std::set<int>> sample_missing_sets(int C, int k, int trials,
                                                      Rng& rng) {
  Require(k >= 0 && k < C, "sample_missing_sets: need 0 <= k < C");
  const bool can_be_distinct =
      detail::subset_count_at_least(C, k, static_cast<double>(trials)) >=
      static_cast<double>(trials);
  std::vector<std::set<int>> out;
  std::set<std::set<int>> seen;
  while (static_cast<int>(out.size()) < trials) {
    auto s = detail::sample_subset(C, k, rng);
    if (can_be_distinct && !seen.insert(s).second) continue;
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trial evaluation. Masking the feature planes of the missing channels is
// bit-identical to zeroing those channels in the time domain and
// re-extracting features, so trials reuse the precomputed tensors.

inline ConfusionMatrix evaluate_trial(ModelState& model,
                                      const std::vector<LabeledTensor>& eval_clips,
                                      const std::set<int>& missing,
                                      Imputation imputation, Rng& rng,
                                      int n_classes) {
  ConfusionMatrix cm(n_classes);
  for (const auto& clip : eval_clips) {
    FeatureTensor x = channel_mask(*clip.x, missing);
    if (imputation == Imputation::RandomCopy && !missing.empty())
      x = random_copy(x, missing, rng);
    std::vector<const FeatureTensor*> batch = {&x};
    const auto probs = infer(model, batch);
    const int pred = static_cast<int>(
        std::max_element(probs[0].begin(), probs[0].end()) - probs[0].begin());
    ++cm.at(clip.label, pred);
  }
  return cm;
}

namespace detail {

inline NetworkConfig network_config_for(const ExperimentPlan& plan,
                                        const FeatureSet& features) {
  NetworkConfig cfg;
  cfg.input_f = features.tensors[0].F;
  cfg.input_t = features.tensors[0].T;
  cfg.input_c = features.tensors[0].C;
  cfg.conv1_out = plan.conv1_out;
  cfg.conv2_out = plan.conv2_out;
  cfg.conv3_out = plan.conv3_out;
  cfg.dense_hidden = plan.dense_hidden;
  cfg.n_classes = features.n_classes();
  return cfg;
}

inline std::vector<LabeledTensor> fold_split(const FeatureSet& f, int fold,
                                             bool training) {
  std::vector<LabeledTensor> out;
  for (int i = 0; i < f.size(); ++i)
    if ((f.folds[i] != fold) == training)
      out.push_back({&f.tensors[i], f.labels[i]});
  return out;
}

// Bounded parallel execution of independent jobs; results land by index so
// output does not depend on scheduling.
inline void run_jobs(std::vector<std::function<void()>>& jobs, int n_threads) {
  if (n_threads <= 0)
    n_threads = static_cast<int>(std::thread::hardware_concurrency());
  n_threads = std::max(1, n_threads);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> errors(jobs.size());
  for (int w = 0; w < n_threads; ++w) {
    workers.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= jobs.size()) return;
        try {
          jobs[i]();
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

// Mismatched-missing protocol: train each arm per fold on intact features,
// then evaluate with randomly sampled missing sets per count.
inline ExperimentReport run_experiment(const ExperimentPlan& plan,
                                       const FeatureSet& features) {
  const int C = features.channels();
  plan.validate(C);
  const NetworkConfig cfg = detail::network_config_for(plan, features);
  const int k_max = plan.k_max < 0 ? C / 2 : plan.k_max;
  Require(k_max < C, "plan: k_max must be < channel count");

  ExperimentReport report;
  report.label_set = features.label_set;

  struct FoldJob {
    std::size_t arm_idx;
    int fold;
    std::vector<TrialResult> trials;
    std::map<int, ConfusionMatrix> pooled;  // by missing count
  };
  std::vector<FoldJob> fold_jobs;
  for (std::size_t a = 0; a < plan.arms.size(); ++a)
    for (int fold = 0; fold < kNumFolds; ++fold)
      fold_jobs.push_back({a, fold, {}, {}});

  std::vector<std::function<void()>> jobs;
  for (auto& job : fold_jobs) {
    jobs.emplace_back([&plan, &features, &report, &job, cfg, k_max] {
      const ExperimentArm& arm = plan.arms[job.arm_idx];
      const auto train_set = detail::fold_split(features, job.fold, true);
      const auto eval_set = detail::fold_split(features, job.fold, false);
      Require(!train_set.empty() && !eval_set.empty(),
              "run_experiment: empty fold " + std::to_string(job.fold));

      AugmentationPolicy policy;
      policy.kind = arm.kind;
      policy.k_min = plan.k_min;
      policy.k_max = k_max;
      policy.rng_seed = mix_seed(plan.seed, 0x61756720ULL + job.arm_idx,
                                 static_cast<std::uint64_t>(job.fold));
      TrainHyper hyper;
      hyper.epochs = plan.epochs;
      hyper.batch_size = plan.batch_size;
      hyper.radam = plan.radam;
      hyper.seed = mix_seed(plan.seed, 0x7472616eULL + job.arm_idx,
                            static_cast<std::uint64_t>(job.fold));
      ModelState model = init_model(cfg, hyper.seed);
      train(model, train_set, policy, hyper);

      for (int count : plan.missing_counts) {
        Rng subset_rng(mix_seed(plan.seed, 0x73756273ULL,
                                mix_seed(static_cast<std::uint64_t>(job.fold),
                                         static_cast<std::uint64_t>(count))));
        const auto missing_sets = sample_missing_sets(
            features.channels(), count, plan.trials_per_count, subset_rng);
        ConfusionMatrix pooled(cfg.n_classes);
        for (int trial = 0; trial < plan.trials_per_count; ++trial) {
          TrialResult r;
          r.arm = arm.name;
          r.fold = job.fold;
          r.missing_count = count;
          r.trial = trial;
          Rng copy_rng(mix_seed(plan.seed, 0x636f7079ULL,
                                mix_seed(static_cast<std::uint64_t>(job.fold),
                                         static_cast<std::uint64_t>(count),
                                         static_cast<std::uint64_t>(trial))));
          try {
            const ConfusionMatrix cm =
                evaluate_trial(model, eval_set, missing_sets[trial],
                               arm.imputation, copy_rng, cfg.n_classes);
            const auto [micro, macro] = micro_macro_f(cm);
            r.micro_f = micro;
            r.macro_f = macro;
            pooled += cm;
          } catch (const Error&) {
            r.failed = true;
          }
          job.trials.push_back(r);
        }
        job.pooled.emplace(count, pooled);
      }
    });
  }
  detail::run_jobs(jobs, plan.jobs);

  for (const auto& job : fold_jobs) {
    const std::string& arm = plan.arms[job.arm_idx].name;
    for (const auto& r : job.trials) {
      report.trials.push_back(r);
      if (r.failed) ++report.failed_trials;
    }
    for (const auto& [count, cm] : job.pooled) {
      auto [it, inserted] =
          report.confusion.try_emplace({arm, count}, ConfusionMatrix(cm.n));
      it->second += cm;
    }
  }
  return report;
}

// Matched-missing protocol: for each trial the sampled missing set is
// applied to both the training and evaluation features; no augmentation,
// no imputation.
inline ExperimentReport run_matched_missing(const ExperimentPlan& plan,
                                            const FeatureSet& features) {
  const int C = features.channels();
  plan.validate(C);
  const NetworkConfig cfg = detail::network_config_for(plan, features);
  const std::string arm_name = "matched";

  ExperimentReport report;
  report.label_set = features.label_set;

  struct TrialJob {
    int fold, count, trial;
    std::set<int> missing;
    TrialResult result;
    ConfusionMatrix cm{0};
  };
  std::vector<TrialJob> trial_jobs;
  for (int fold = 0; fold < kNumFolds; ++fold)
    for (int count : plan.missing_counts) {
      Rng subset_rng(mix_seed(plan.seed, 0x6d737562ULL,
                              mix_seed(static_cast<std::uint64_t>(fold),
                                       static_cast<std::uint64_t>(count))));
      const auto missing_sets =
          sample_missing_sets(C, count, plan.matched_trials, subset_rng);
      for (int trial = 0; trial < plan.matched_trials; ++trial)
        trial_jobs.push_back(
            {fold, count, trial, missing_sets[trial], {}, ConfusionMatrix(0)});
    }

  std::vector<std::function<void()>> jobs;
  for (auto& job : trial_jobs) {
    jobs.emplace_back([&plan, &features, &job, cfg, arm_name] {
      const auto eval_set = detail::fold_split(features, job.fold, false);
      auto train_items = detail::fold_split(features, job.fold, true);
      Require(!train_items.empty() && !eval_set.empty(),
              "run_matched_missing: empty fold");

      // Mask the training features with the trial's missing set; this is
      // bit-identical to zeroing the channels before extraction.
      std::vector<FeatureTensor> masked;
      masked.reserve(train_items.size());
      std::vector<LabeledTensor> train_set;
      for (const auto& item : train_items) {
        masked.push_back(channel_mask(*item.x, job.missing));
        train_set.push_back({&masked.back(), item.label});
      }

      TrainHyper hyper;
      hyper.epochs = plan.epochs;
      hyper.batch_size = plan.batch_size;
      hyper.radam = plan.radam;
      hyper.seed = mix_seed(plan.seed, 0x6d747261ULL,
                            mix_seed(static_cast<std::uint64_t>(job.fold),
                                     static_cast<std::uint64_t>(job.count),
                                     static_cast<std::uint64_t>(job.trial)));
      ModelState model = init_model(cfg, hyper.seed);
      train(model, train_set, AugmentationPolicy{}, hyper);

      Rng eval_rng(mix_seed(hyper.seed, 0x6576616cULL));
      job.cm = evaluate_trial(model, eval_set, job.missing, Imputation::None,
                              eval_rng, cfg.n_classes);
      const auto [micro, macro] = micro_macro_f(job.cm);
      job.result = {arm_name, job.fold, job.count, job.trial, micro, macro, false};
    });
  }
  detail::run_jobs(jobs, plan.jobs);

  for (const auto& job : trial_jobs) {
    report.trials.push_back(job.result);
    auto [it, inserted] = report.confusion.try_emplace(
        {arm_name, job.count}, ConfusionMatrix(job.cm.n));
    it->second += job.cm;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Report files: report.csv plus per-(arm, count) confusion and recall CSVs.

inline std::string format_score(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

inline void write_report(const ExperimentReport& report,
                         const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  {
    std::ofstream os(fs::path(out_dir) / "report.csv",
                     std::ios::binary | std::ios::trunc);
    Require(os.good(), "write_report: cannot open report.csv");
    os << "arm,fold,missing_count,trial,micro_f,macro_f,failed\n";
    for (const auto& r : report.trials)
      os << r.arm << ',' << r.fold << ',' << r.missing_count << ',' << r.trial
         << ',' << format_score(r.micro_f) << ',' << format_score(r.macro_f)
         << ',' << (r.failed ? 1 : 0) << '\n';
  }
  for (const auto& [key, cm] : report.confusion) {
    const auto& [arm, count] = key;
    const std::string suffix = arm + "_" + std::to_string(count) + ".csv";
    {
      std::ofstream os(fs::path(out_dir) / ("confusion_" + suffix),
                       std::ios::binary | std::ios::trunc);
      for (int i = 0; i < cm.n; ++i) {
        for (int j = 0; j < cm.n; ++j)
          os << cm.at(i, j) << (j + 1 < cm.n ? "," : "");
        os << '\n';
      }
    }
    {
      const auto recall = confusion_recall_percent(cm);
      std::ofstream os(fs::path(out_dir) / ("recall_" + suffix),
                       std::ios::binary | std::ios::trunc);
      for (int i = 0; i < cm.n; ++i) {
        for (int j = 0; j < cm.n; ++j)
          os << format_score(recall[i][j]) << (j + 1 < cm.n ? "," : "");
        os << '\n';
      }
    }
  }
}

}  // namespace mcasc
