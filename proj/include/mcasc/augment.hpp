// mcasc/augment.hpp
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
// Channel-level augmentation operators: mask (plane set to the log floor),
// overwrite (plane replaced by a copy of another channel), swap (planes
// permuted), and the evaluation-time random-copy imputation for missing
// channels.

#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mcasc/common.hpp"
#include "mcasc/tensorio.hpp"

namespace mcasc {

enum class AugmentKind { None, Mask, Overwrite, Swap };

inline std::string to_string(AugmentKind k) {
  switch (k) {
    case AugmentKind::None: return "none";
    case AugmentKind::Mask: return "mask";
    case AugmentKind::Overwrite: return "overwrite";
    case AugmentKind::Swap: return "swap";
  }
  return "?";
}

inline AugmentKind augment_kind_from_string(const std::string& s) {
  if (s == "none") return AugmentKind::None;
  if (s == "mask" || s == "channel-mask") return AugmentKind::Mask;
  if (s == "overwrite" || s == "channel-overwrite") return AugmentKind::Overwrite;
  if (s == "swap" || s == "channel-swap") return AugmentKind::Swap;
  throw Error("unknown augmentation kind: " + s);
}

struct AugmentationPolicy {
  AugmentKind kind = AugmentKind::None;
  int k_min = 0;
  int k_max = 8;
  std::uint64_t rng_seed = 0;
};

struct ChannelSelection {
  std::set<int> targets;
  std::map<int, int> sources;      // Overwrite: target -> source
  std::map<int, int> permutation;  // Swap: bijection on targets
};

// k ~ Uniform{k_min..k_max}, then k distinct target channels drawn without
// replacement. Overwrite sources are drawn independently (with replacement
// across targets) from the non-target channels; the swap permutation is a
// uniform random permutation of the targets.
inline ChannelSelection sample_selection(const AugmentationPolicy& policy,
                                         int C, Rng& rng) {
  Require(policy.k_min >= 0 && policy.k_min <= policy.k_max,
          "policy: need 0 <= k_min <= k_max");
  Require(policy.k_max < C, "policy: k_max must be < channel count");
  const int k = rng.uniform_int(policy.k_min, policy.k_max);

  // Partial Fisher-Yates: first k entries of a channel shuffle.
  std::vector<int> channels(C);
  for (int c = 0; c < C; ++c) channels[c] = c;
  for (int i = 0; i < k; ++i) {
    const int j = rng.uniform_int(i, C - 1);
    std::swap(channels[i], channels[j]);
  }
  ChannelSelection sel;
  for (int i = 0; i < k; ++i) sel.targets.insert(channels[i]);

  if (policy.kind == AugmentKind::Overwrite && k > 0) {
    std::vector<int> donors;
    for (int c = 0; c < C; ++c)
      if (!sel.targets.count(c)) donors.push_back(c);
    Require(!donors.empty(), "no source channel: all channels targeted");
    for (int t : sel.targets)
      sel.sources[t] = donors[rng.uniform_u64(donors.size())];
  } else if (policy.kind == AugmentKind::Swap && k > 0) {
    std::vector<int> targets(sel.targets.begin(), sel.targets.end());
    std::vector<int> images = targets;
    for (int i = static_cast<int>(images.size()) - 1; i > 0; --i) {
      const int j = rng.uniform_int(0, i);
      std::swap(images[i], images[j]);
    }
    for (std::size_t i = 0; i < targets.size(); ++i)
      sel.permutation[targets[i]] = images[i];
  }
  return sel;
}

inline void check_targets(const FeatureTensor& x, const std::set<int>& targets) {
  for (int c : targets)
    Require(c >= 0 && c < x.C, "channel target out of range");
}

// Binary channel mask: target planes go to the log floor and are
// flagged invalid.
inline FeatureTensor channel_mask(const FeatureTensor& x,
                                  const std::set<int>& targets) {
  check_targets(x, targets);
  FeatureTensor out = x;
  for (int c : targets) {
    for (int f = 0; f < out.F; ++f)
      for (int t = 0; t < out.T; ++t) out.at(f, t, c) = kLogFloor;
    out.channel_valid[c] = 0;
  }
  return out;
}

// Target planes become copies of their source planes; all reads are from the
// pre-operation tensor, so the result does not depend on target order.
inline FeatureTensor channel_overwrite(const FeatureTensor& x,
                                       const ChannelSelection& sel) {
  check_targets(x, sel.targets);
  for (const auto& [tgt, src] : sel.sources) {
    Require(sel.targets.count(tgt), "overwrite: source map names a non-target");
    Require(src >= 0 && src < x.C, "overwrite: source out of range");
    Require(!sel.targets.count(src), "overwrite: source is itself a target");
  }
  for (int t : sel.targets)
    Require(sel.sources.count(t), "overwrite: target without a source");
  FeatureTensor out = x;
  for (const auto& [tgt, src] : sel.sources) {
    for (int f = 0; f < x.F; ++f)
      for (int t = 0; t < x.T; ++t) out.at(f, t, tgt) = x.at(f, t, src);
    out.channel_valid[tgt] = x.channel_valid[src];
  }
  return out;
}

// Plane c of the result is plane permutation(c) of the input for targets;
// the multiset of channel planes is preserved.
inline FeatureTensor channel_swap(const FeatureTensor& x,
                                  const ChannelSelection& sel) {
  check_targets(x, sel.targets);
  std::set<int> images;
  for (const auto& [from, to] : sel.permutation) {
    Require(sel.targets.count(from) && sel.targets.count(to),
            "swap: permutation leaves the target set");
    images.insert(to);
  }
  Require(sel.permutation.size() == sel.targets.size() &&
              images.size() == sel.targets.size(),
          "swap: permutation is not a bijection on targets");
  FeatureTensor out = x;
  for (const auto& [dst, src] : sel.permutation) {
    for (int f = 0; f < x.F; ++f)
      for (int t = 0; t < x.T; ++t) out.at(f, t, dst) = x.at(f, t, src);
    out.channel_valid[dst] = x.channel_valid[src];
  }
  return out;
}

// Evaluation-time imputation: each missing plane becomes a copy of a
// uniformly drawn non-missing plane (independent draws per missing channel).
inline FeatureTensor random_copy(const FeatureTensor& x,
                                 const std::set<int>& missing, Rng& rng) {
  check_targets(x, missing);
  std::vector<int> donors;
  for (int c = 0; c < x.C; ++c)
    if (!missing.count(c)) donors.push_back(c);
  if (missing.empty()) return x;
  Require(!donors.empty(), "no donor channel: every channel is missing");
  FeatureTensor out = x;
  for (int m : missing) {
    const int src = donors[rng.uniform_u64(donors.size())];
    for (int f = 0; f < x.F; ++f)
      for (int t = 0; t < x.T; ++t) out.at(f, t, m) = x.at(f, t, src);
    out.channel_valid[m] = 1;
  }
  for (auto& v : out.channel_valid) v = 1;
  return out;
}

// Applies a freshly sampled selection of the policy's kind.
inline FeatureTensor apply_policy(const FeatureTensor& x,
                                  const AugmentationPolicy& policy, Rng& rng) {
  if (policy.kind == AugmentKind::None) return x;
  const ChannelSelection sel = sample_selection(policy, x.C, rng);
  switch (policy.kind) {
    case AugmentKind::Mask: return channel_mask(x, sel.targets);
    case AugmentKind::Overwrite: return channel_overwrite(x, sel);
    case AugmentKind::Swap: return channel_swap(x, sel);
    default: return x;
  }
}

}  // namespace mcasc
