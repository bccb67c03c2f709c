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
#include <vector>

#include "doctest.h"
#include "mcasc/augment.hpp"
#include "mcasc/features.hpp"

using namespace mcasc;

namespace {

// Independent re-implementation of the framing contract: reflect padding by
// frame/2, Hann window, zero-pad to nfft; spectrum via naive O(N^2) DFT.
std::vector<double> oracle_frame_power(const std::vector<double>& x, int t,
                                       int frame, int hop, int nfft) {
  const int S = static_cast<int>(x.size());
  auto sample = [&](long long i) {
    while (i < 0 || i >= S) {
      if (i < 0) i = -i;
      if (i >= S) i = 2LL * (S - 1) - i;
    }
    return x[static_cast<std::size_t>(i)];
  };
  std::vector<double> buf(nfft, 0.0);
  const long long start = static_cast<long long>(t) * hop - frame / 2;
  for (int n = 0; n < frame; ++n) {
    const double w = 0.5 - 0.5 * std::cos(2.0 * kPi * n / frame);
    buf[n] = w * sample(start + n);
  }
  std::vector<double> power(nfft / 2 + 1);
  for (int k = 0; k <= nfft / 2; ++k) {
    double re = 0.0, im = 0.0;
    for (int n = 0; n < nfft; ++n) {
      re += buf[n] * std::cos(2.0 * kPi * k * n / nfft);
      im -= buf[n] * std::sin(2.0 * kPi * k * n / nfft);
    }
    power[k] = re * re + im * im;
  }
  return power;
}

MultichannelClip tone_clip(double freq, double duration_s, int rate) {
  MultichannelClip clip;
  clip.sample_rate_hz = rate;
  const int S = static_cast<int>(duration_s * rate);
  clip.samples.assign(1, std::vector<double>(S));
  for (int s = 0; s < S; ++s)
    clip.samples[0][s] = 0.5 * std::sin(2.0 * kPi * freq * s / rate);
  return clip;
}

}  // namespace

TEST_CASE("10 s at 16 kHz with 40/20 ms framing yields T=501") {
  FeatureConfig cfg;
  std::vector<double> x(160000, 0.0);
  x[0] = 1.0;
  const PowerSpectrogram p = stft_power(x, cfg, 16000);
  CHECK(p.T == 501);
  CHECK(p.n_bins == 513);  // fft 1024
}

TEST_CASE("shape law T = floor(S/hop) + 1") {
  FeatureConfig cfg;
  cfg.frame_len_s = 0.02;
  cfg.hop_len_s = 0.01;
  Rng rng(4);
  for (int rep = 0; rep < 8; ++rep) {
    const int S = 200 + static_cast<int>(rng.uniform_u64(5000));
    std::vector<double> x(S, 0.1);
    const PowerSpectrogram p = stft_power(x, cfg, 16000);
    CHECK(p.T == S / 160 + 1);
  }
}

TEST_CASE("all-zero channel gives an all-zero spectrogram") {
  FeatureConfig cfg;
  std::vector<double> x(8000, 0.0);
  const PowerSpectrogram p = stft_power(x, cfg, 16000);
  for (double v : p.data) CHECK(v == 0.0);
}

TEST_CASE("1 kHz sinusoid: peak bin and DFT-oracle agreement") {
  FeatureConfig cfg;
  const int rate = 16000;
  const MultichannelClip clip = tone_clip(1000.0, 0.3, rate);
  const PowerSpectrogram p = stft_power(clip.samples[0], cfg, rate);
  const int frame = cfg.frame_samples(rate), hop = cfg.hop_samples(rate);
  const int nfft = cfg.resolved_fft_size(rate);
  const int expected_peak = static_cast<int>(std::lround(1000.0 * nfft / rate));

  for (int t = 2; t < p.T - 2; t += 3) {
    int peak = 0;
    for (int k = 1; k < p.n_bins; ++k)
      if (p.at(k, t) > p.at(peak, t)) peak = k;
    CHECK(peak == expected_peak);

    const auto oracle = oracle_frame_power(clip.samples[0], t, frame, hop, nfft);
    for (int k = 0; k < p.n_bins; ++k) {
      const double denom = std::max({std::abs(oracle[k]), std::abs(p.at(k, t)), 1e-6});
      CHECK(std::abs(p.at(k, t) - oracle[k]) / denom < 1e-9);
    }
  }
}

TEST_CASE("mel filterbank: shape, non-negativity, unimodality") {
  FeatureConfig cfg;
  cfg.fft_size = 1024;
  const auto fb = mel_filterbank(cfg, 16000);
  CHECK(fb.size() == 40);
  CHECK(fb[0].size() == 513);
  for (const auto& row : fb) {
    bool rising = true;
    bool any = false;
    for (std::size_t k = 0; k < row.size(); ++k) {
      CHECK(row[k] >= 0.0);
      any = any || row[k] > 0.0;
      if (k > 0) {
        if (row[k] > row[k - 1]) CHECK(rising);  // no second rise after a fall
        if (row[k] < row[k - 1]) rising = false;
      }
    }
    CHECK(any);
  }
}

TEST_CASE("filter peaks sit on the independently computed mel grid") {
  FeatureConfig cfg;
  cfg.fft_size = 4096;  // fine grid so peaks are well resolved
  const int rate = 16000;
  const auto fb = mel_filterbank(cfg, rate);
  // Long-double recomputation of the mel gridpoints.
  const long double mel_lo = 0.0L;
  const long double mel_hi = 2595.0L * std::log10(1.0L + 8000.0L / 700.0L);
  const double bin_hz = static_cast<double>(rate) / cfg.fft_size;
  for (int m = 0; m < cfg.n_mels; ++m) {
    const long double mel_c = mel_lo + (mel_hi - mel_lo) * (m + 1) / (cfg.n_mels + 1);
    const long double hz_c =
        700.0L * (std::pow(10.0L, mel_c / 2595.0L) - 1.0L);
    int peak = 0;
    for (std::size_t k = 0; k < fb[m].size(); ++k)
      if (fb[m][k] > fb[m][peak]) peak = static_cast<int>(k);
    // The peak bin must be the closest bin to the true center (or one of the
    // two straddling bins when the center falls between bins).
    CHECK(std::abs(peak * bin_hz - static_cast<double>(hz_c)) <= bin_hz);
  }
}

TEST_CASE("degenerate filterbank rejected") {
  FeatureConfig cfg;
  cfg.n_mels = 200;
  cfg.fft_size = 64;
  cfg.frame_len_s = 0.004;
  cfg.hop_len_s = 0.002;
  CHECK_THROWS_WITH_AS(mel_filterbank(cfg, 16000),
                       doctest::Contains("degenerate"), Error);
}

TEST_CASE("16-channel 10 s clip maps to a 40x501x16 tensor") {
  SceneSpec spec = default_scene_spec("t", {450.0, 1200.0}, 16, 6.0, 8);
  const MultichannelClip clip = synth_clip(spec, 10.0, 16000, 16, 31);
  FeatureConfig cfg;
  const FeatureTensor x = extract_features(clip, cfg);
  CHECK(x.F == 40);
  CHECK(x.T == 501);
  CHECK(x.C == 16);
  for (double v : x.data) {
    CHECK(std::isfinite(v));
    CHECK(v >= kLogFloor);
  }
}

TEST_CASE("zeroed channel plane is exactly the log floor") {
  SceneSpec spec = default_scene_spec("t", {800.0}, 4, 6.0, 2);
  MultichannelClip clip = synth_clip(spec, 0.3, 16000, 4, 17);
  clip = zero_channels(clip, {2});
  FeatureConfig cfg;
  cfg.n_mels = 12;
  const FeatureTensor x = extract_features(clip, cfg);
  CHECK(x.channel_valid[2] == 0);
  for (int f = 0; f < x.F; ++f)
    for (int t = 0; t < x.T; ++t) CHECK(x.at(f, t, 2) == kLogFloor);
}

TEST_CASE("white-noise channel: mel energies match the DFT oracle") {
  MultichannelClip clip;
  clip.sample_rate_hz = 16000;
  clip.samples.assign(1, std::vector<double>(4000));
  Rng rng(55);
  for (auto& v : clip.samples[0]) v = 0.2 * rng.gaussian();

  FeatureConfig cfg;
  cfg.n_mels = 20;
  const FeatureTensor x = extract_features(clip, cfg);
  const auto fb = mel_filterbank(cfg, clip.sample_rate_hz);
  const int frame = cfg.frame_samples(16000), hop = cfg.hop_samples(16000);
  const int nfft = cfg.resolved_fft_size(16000);

  for (int t : {1, 5, 9}) {
    const auto oracle = oracle_frame_power(clip.samples[0], t, frame, hop, nfft);
    for (int m = 0; m < cfg.n_mels; ++m) {
      double e = 0.0;
      for (std::size_t k = 0; k < oracle.size(); ++k) e += fb[m][k] * oracle[k];
      const double expected =
          e < kEnergyFloor ? kLogFloor : std::max(std::log(e), kLogFloor);
      const double denom = std::max({std::abs(expected), std::abs(x.at(m, t, 0)), 1e-6});
      CHECK(std::abs(x.at(m, t, 0) - expected) / denom < 1e-9);
    }
  }
}

TEST_CASE("mask/missing equivalence on random clips") {
  FeatureConfig cfg;
  cfg.n_mels = 10;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    SceneSpec spec = default_scene_spec("e", {600.0, 1800.0}, 6, 6.0, seed);
    const MultichannelClip clip = synth_clip(spec, 0.25, 16000, 6, seed);
    Rng rng(seed + 40);
    std::set<int> missing;
    const int k = static_cast<int>(rng.uniform_u64(6));
    while (static_cast<int>(missing.size()) < k)
      missing.insert(static_cast<int>(rng.uniform_u64(6)));

    const FeatureTensor via_time =
        extract_features(zero_channels(clip, missing), cfg);
    const FeatureTensor via_mask =
        channel_mask(extract_features(clip, cfg), missing);
    CHECK(via_time == via_mask);
  }
}
