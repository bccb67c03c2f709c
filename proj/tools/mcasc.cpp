// tools/mcasc.cpp
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
// Command-line entry point: dataset synthesis, feature extraction,
// augmentation inspection, training, evaluation, experiments, and report
// summaries. Progress goes to stderr; machine-readable results go to files.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mcasc/audio.hpp"
#include "mcasc/augment.hpp"
#include "mcasc/evalharness.hpp"
#include "mcasc/features.hpp"
#include "mcasc/model.hpp"
#include "mcasc/tensorio.hpp"

namespace fs = std::filesystem;
using namespace mcasc;

namespace {

std::set<int> parse_channel_list(const std::string& s) {
  std::set<int> out;
  if (s.empty()) return out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ','))
    if (!tok.empty()) out.insert(std::stoi(tok));
  return out;
}

std::string tensor_path_for(const std::string& clip_path) {
  fs::path p(clip_path);
  p.replace_extension(".cft");
  return p.string();
}

int cmd_synth(int classes, int per_class, int channels, double duration,
              int rate, std::uint64_t seed, const std::string& out_dir) {
  make_synthetic_dataset(classes, per_class, channels, duration, rate, seed,
                         out_dir);
  std::cerr << "synth: wrote " << classes * per_class << " clips to "
            << out_dir << "\n";
  return 0;
}

int cmd_features(const std::string& manifest_path, const std::string& out_dir,
                 int mels, double frame_ms, double hop_ms) {
  const DatasetManifest manifest = load_manifest(manifest_path);
  const fs::path base = fs::path(manifest_path).parent_path();
  FeatureConfig cfg;
  cfg.n_mels = mels;
  cfg.frame_len_s = frame_ms / 1000.0;
  cfg.hop_len_s = hop_ms / 1000.0;

  DatasetManifest out_manifest;
  out_manifest.label_set = manifest.label_set;
  int last_f = 0, last_t = 0, last_c = 0;
  for (const auto& e : manifest.entries) {
    const MultichannelClip clip = load_wav((base / e.clip_path).string());
    const FeatureTensor tensor = extract_features(clip, cfg);
    const std::string rel = tensor_path_for(e.clip_path);
    const fs::path abs_path = fs::path(out_dir) / rel;
    fs::create_directories(abs_path.parent_path());
    write_tensor(tensor, abs_path.string());

    ManifestEntry fe = e;
    fe.clip_path = rel;
    fe.checksum = fnv1a_hex(abs_path.string());
    out_manifest.entries.push_back(std::move(fe));
    last_f = tensor.F;
    last_t = tensor.T;
    last_c = tensor.C;
  }
  save_manifest(out_manifest, (fs::path(out_dir) / "features.tsv").string());
  std::cerr << "features: " << out_manifest.entries.size() << " tensors of "
            << last_f << "x" << last_t << "x" << last_c << " under " << out_dir
            << "\n";
  return 0;
}

int cmd_augment(const std::string& input, const std::string& output,
                const std::string& kind, int k_min, int k_max,
                std::uint64_t seed) {
  const FeatureTensor x = read_tensor(input);
  AugmentationPolicy policy;
  policy.kind = augment_kind_from_string(kind);
  policy.k_min = k_min;
  policy.k_max = k_max < 0 ? x.C / 2 : k_max;
  policy.rng_seed = seed;
  Rng rng(seed);
  const FeatureTensor y = apply_policy(x, policy, rng);
  write_tensor(y, output);
  std::cerr << "augment: " << to_string(policy.kind) << " applied, wrote "
            << output << "\n";
  return 0;
}

struct NetFlags {
  int conv1 = 16, conv2 = 32, conv3 = 64, hidden = 32;
};

void add_net_flags(CLI::App* app, NetFlags& f) {
  app->add_option("--conv1-out", f.conv1, "Width of conv block 1");
  app->add_option("--conv2-out", f.conv2, "Width of conv block 2");
  app->add_option("--conv3-out", f.conv3, "Width of conv block 3");
  app->add_option("--dense-hidden", f.hidden, "Dense hidden width");
}

int cmd_train(const std::string& features_path, int fold,
              const std::string& arm_name, int epochs, int batch_size,
              double lr, int k_min, int k_max, std::uint64_t seed,
              const NetFlags& net, const std::string& out_path) {
  const FeatureSet features = load_feature_set(features_path);
  const ExperimentArm arm = arm_from_name(arm_name);

  std::vector<LabeledTensor> train_set;
  for (int i = 0; i < features.size(); ++i)
    if (features.folds[i] != fold)
      train_set.push_back({&features.tensors[i], features.labels[i]});
  Require(!train_set.empty(), "train: fold " + std::to_string(fold) +
                                  " leaves no training clips");

  NetworkConfig cfg;
  cfg.input_f = features.tensors[0].F;
  cfg.input_t = features.tensors[0].T;
  cfg.input_c = features.tensors[0].C;
  cfg.conv1_out = net.conv1;
  cfg.conv2_out = net.conv2;
  cfg.conv3_out = net.conv3;
  cfg.dense_hidden = net.hidden;
  cfg.n_classes = features.n_classes();

  AugmentationPolicy policy;
  policy.kind = arm.kind;
  policy.k_min = k_min;
  policy.k_max = k_max < 0 ? cfg.input_c / 2 : k_max;
  policy.rng_seed = mix_seed(seed, 0x617567ULL);

  TrainHyper hyper;
  hyper.epochs = epochs;
  hyper.batch_size = batch_size;
  hyper.seed = seed;
  hyper.radam.lr = lr;

  ModelState model = init_model(cfg, seed);
  const TrainLog log = train(model, train_set, policy, hyper);
  for (std::size_t e = 0; e < log.epoch_loss.size(); ++e)
    std::cerr << "epoch " << e << " loss " << log.epoch_loss[e] << "\n";
  save_model(model, out_path);
  std::cerr << "train: saved " << out_path << "\n";
  return 0;
}

int cmd_eval(const std::string& model_path, const std::string& features_path,
             int fold, const std::string& missing_str,
             const std::string& impute, std::uint64_t seed,
             const std::string& out_dir) {
  ModelState model = load_model(model_path);
  const FeatureSet features = load_feature_set(features_path);
  const std::set<int> missing = parse_channel_list(missing_str);
  const Imputation imputation = impute == "random-copy"
                                    ? Imputation::RandomCopy
                                    : Imputation::None;
  Require(impute == "none" || impute == "random-copy",
          "eval: --impute must be none or random-copy");

  std::vector<LabeledTensor> eval_set;
  for (int i = 0; i < features.size(); ++i)
    if (features.folds[i] == fold)
      eval_set.push_back({&features.tensors[i], features.labels[i]});
  Require(!eval_set.empty(), "eval: fold has no clips");

  Rng rng(mix_seed(seed, 0x6576616cULL));
  const ConfusionMatrix cm = evaluate_trial(model, eval_set, missing,
                                            imputation, rng,
                                            features.n_classes());
  const auto [micro, macro] = micro_macro_f(cm);

  fs::create_directories(out_dir);
  {
    std::ofstream os(fs::path(out_dir) / "eval.csv",
                     std::ios::binary | std::ios::trunc);
    os << "micro_f,macro_f\n"
       << format_score(micro) << ',' << format_score(macro) << '\n';
  }
  {
    std::ofstream os(fs::path(out_dir) / "confusion.csv",
                     std::ios::binary | std::ios::trunc);
    for (int i = 0; i < cm.n; ++i) {
      for (int j = 0; j < cm.n; ++j)
        os << cm.at(i, j) << (j + 1 < cm.n ? "," : "");
      os << '\n';
    }
  }
  std::cerr << "eval: micro " << micro << " macro " << macro << "\n";
  return 0;
}

int cmd_experiment(const std::string& plan_path,
                   const std::string& features_path, bool matched, int jobs,
                   const std::string& out_dir) {
  ExperimentPlan plan = load_plan(plan_path);
  if (jobs > 0) plan.jobs = jobs;
  const FeatureSet features = load_feature_set(features_path);
  const ExperimentReport report = matched
                                      ? run_matched_missing(plan, features)
                                      : run_experiment(plan, features);
  write_report(report, out_dir);
  if (report.failed_trials > 0)
    std::cerr << "experiment: " << report.failed_trials
              << " trials failed (all channels missing)\n";
  std::cerr << "experiment: wrote report to " << out_dir << "\n";
  return report.failed_trials == 0 ? 0 : 1;
}

int cmd_report(const std::string& report_dir) {
  // Summarize pooled confusion CSVs into summary.csv.
  std::vector<std::pair<std::string, fs::path>> cells;
  for (const auto& entry : fs::directory_iterator(report_dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("confusion_", 0) == 0 && entry.path().extension() == ".csv")
      cells.emplace_back(name.substr(10, name.size() - 14), entry.path());
  }
  std::sort(cells.begin(), cells.end());
  Require(!cells.empty(), "report: no confusion CSVs in " + report_dir);

  std::ofstream os(fs::path(report_dir) / "summary.csv",
                   std::ios::binary | std::ios::trunc);
  os << "cell,micro_f,macro_f\n";
  for (const auto& [cell, path] : cells) {
    std::ifstream is(path);
    std::vector<std::vector<std::int64_t>> rows;
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::vector<std::int64_t> row;
      std::stringstream ss(line);
      std::string tok;
      while (std::getline(ss, tok, ',')) row.push_back(std::stoll(tok));
      rows.push_back(std::move(row));
    }
    ConfusionMatrix cm(static_cast<int>(rows.size()));
    for (int i = 0; i < cm.n; ++i)
      for (int j = 0; j < cm.n; ++j) cm.at(i, j) = rows[i][j];
    const auto [micro, macro] = micro_macro_f(cm);
    os << cell << ',' << format_score(micro) << ',' << format_score(macro)
       << '\n';
    std::cerr << cell << ": micro " << micro << " macro " << macro << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multichannel acoustic scene classification toolkit"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  int jobs = 0;
  std::string out_dir = ".";
  app.add_option("--seed", seed, "Global RNG seed")->capture_default_str();
  app.add_option("--jobs", jobs, "Parallel jobs (0 = all cores)");
  app.add_option("--out-dir", out_dir, "Output directory")
      ->capture_default_str();

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  int classes = 9, per_class = 10, channels = 16, rate = 16000;
  double duration = 10.0;
  synth->add_option("--classes", classes, "Number of scene classes")
      ->capture_default_str();
  synth->add_option("--per-class", per_class, "Clips per class")
      ->capture_default_str();
  synth->add_option("--channels", channels, "Channels per clip")
      ->capture_default_str();
  synth->add_option("--duration", duration, "Clip duration in seconds")
      ->capture_default_str();
  synth->add_option("--rate", rate, "Sample rate in Hz")->capture_default_str();

  // features
  auto* feat = app.add_subcommand("features", "Extract log mel-band energy");
  std::string manifest_path;
  int mels = 40;
  double frame_ms = 40.0, hop_ms = 20.0;
  feat->add_option("--manifest", manifest_path, "Dataset manifest")
      ->required();
  feat->add_option("--mels", mels, "Mel bands")->capture_default_str();
  feat->add_option("--frame-ms", frame_ms, "Frame length (ms)")
      ->capture_default_str();
  feat->add_option("--hop-ms", hop_ms, "Hop length (ms)")
      ->capture_default_str();

  // augment
  auto* aug = app.add_subcommand("augment", "Apply an augmentation policy");
  std::string aug_in, aug_out, aug_kind = "mask";
  int k_min = 0, k_max = -1;
  aug->add_option("--input", aug_in, "Input tensor file")->required();
  aug->add_option("--output", aug_out, "Output tensor file")->required();
  aug->add_option("--kind", aug_kind, "none|mask|overwrite|swap")
      ->capture_default_str();
  aug->add_option("--k-min", k_min, "Minimum channels touched")
      ->capture_default_str();
  aug->add_option("--k-max", k_max, "Maximum channels touched (-1 = C/2)")
      ->capture_default_str();

  // train
  auto* tr = app.add_subcommand("train", "Train one fold");
  std::string tr_features, tr_arm = "none", tr_out = "model.chmd";
  int tr_fold = 0, tr_epochs = 50, tr_batch = 32;
  int tr_kmin = 0, tr_kmax = -1;
  double tr_lr = 0.001;
  NetFlags net;
  tr->add_option("--features", tr_features, "Features manifest")->required();
  tr->add_option("--fold", tr_fold, "Held-out fold")->capture_default_str();
  tr->add_option("--arm", tr_arm, "none|mask|overwrite+copy|swap+copy")
      ->capture_default_str();
  tr->add_option("--epochs", tr_epochs, "Training epochs")
      ->capture_default_str();
  tr->add_option("--batch-size", tr_batch, "Batch size")
      ->capture_default_str();
  tr->add_option("--lr", tr_lr, "Learning rate")->capture_default_str();
  tr->add_option("--k-min", tr_kmin, "Minimum channels augmented")
      ->capture_default_str();
  tr->add_option("--k-max", tr_kmax, "Maximum channels augmented (-1 = C/2)")
      ->capture_default_str();
  tr->add_option("--out", tr_out, "Model checkpoint path")
      ->capture_default_str();
  add_net_flags(tr, net);

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on one fold");
  std::string ev_model, ev_features, ev_missing, ev_impute = "none";
  int ev_fold = 0;
  ev->add_option("--model", ev_model, "Model checkpoint")->required();
  ev->add_option("--features", ev_features, "Features manifest")->required();
  ev->add_option("--fold", ev_fold, "Evaluation fold")->capture_default_str();
  ev->add_option("--missing", ev_missing,
                 "Comma-separated missing channel indices");
  ev->add_option("--impute", ev_impute, "none|random-copy")
      ->capture_default_str();

  // experiment
  auto* ex = app.add_subcommand("experiment", "Run a full experiment plan");
  std::string ex_plan, ex_features;
  bool ex_matched = false;
  ex->add_option("--plan", ex_plan, "Plan JSON file")->required();
  ex->add_option("--features", ex_features, "Features manifest")->required();
  ex->add_flag("--matched", ex_matched,
               "Matched-missing protocol (same channels in train and eval)");

  // report
  auto* rp = app.add_subcommand("report", "Summarize an experiment report");
  std::string rp_dir;
  rp->add_option("--report-dir", rp_dir, "Directory with confusion CSVs")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (synth->parsed())
      return cmd_synth(classes, per_class, channels, duration, rate, seed,
                       out_dir);
    if (feat->parsed())
      return cmd_features(manifest_path, out_dir, mels, frame_ms, hop_ms);
    if (aug->parsed())
      return cmd_augment(aug_in, aug_out, aug_kind, k_min, k_max, seed);
    if (tr->parsed())
      return cmd_train(tr_features, tr_fold, tr_arm, tr_epochs, tr_batch,
                       tr_lr, tr_kmin, tr_kmax, seed, net, tr_out);
    if (ev->parsed())
      return cmd_eval(ev_model, ev_features, ev_fold, ev_missing, ev_impute,
                      seed, out_dir);
    if (ex->parsed())
      return cmd_experiment(ex_plan, ex_features, ex_matched, jobs, out_dir);
    if (rp->parsed()) return cmd_report(rp_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
