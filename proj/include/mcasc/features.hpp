// mcasc/features.hpp
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
// Log mel-band energy front-end: Hann STFT with center reflect-padding,
// HTK-mel triangular filterbank (no area normalization), natural-log
// compression floored at kLogFloor.

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "mcasc/audio.hpp"
#include "mcasc/common.hpp"
#include "mcasc/fft.hpp"
#include "mcasc/tensorio.hpp"

namespace mcasc {

struct FeatureConfig {
  int n_mels = 40;
  double frame_len_s = 0.040;
  double hop_len_s = 0.020;
  int fft_size = 0;  // 0 = next power of two >= frame length in samples
  double mel_fmin_hz = 0.0;
  double mel_fmax_hz = 0.0;  // 0 = Nyquist

  int frame_samples(int sample_rate_hz) const {
    return static_cast<int>(std::llround(frame_len_s * sample_rate_hz));
  }
  int hop_samples(int sample_rate_hz) const {
    return static_cast<int>(std::llround(hop_len_s * sample_rate_hz));
  }
  int resolved_fft_size(int sample_rate_hz) const {
    const int frame = frame_samples(sample_rate_hz);
    if (fft_size == 0) return static_cast<int>(next_pow2(frame));
    return fft_size;
  }
  double resolved_fmax(int sample_rate_hz) const {
    return mel_fmax_hz > 0.0 ? mel_fmax_hz : sample_rate_hz / 2.0;
  }

  void validate(int sample_rate_hz) const {
    Require(n_mels >= 1, "config: n_mels must be >= 1");
    const int frame = frame_samples(sample_rate_hz);
    const int hop = hop_samples(sample_rate_hz);
    Require(frame >= 1 && hop >= 1, "config: frame/hop too short");
    Require(hop <= frame, "config: hop must not exceed frame");
    Require(resolved_fft_size(sample_rate_hz) >= frame,
            "config: fft_size smaller than frame");
    Require(mel_fmin_hz < resolved_fmax(sample_rate_hz) &&
                resolved_fmax(sample_rate_hz) <= sample_rate_hz / 2.0 + 1e-9,
            "config: mel band outside [fmin, Nyquist]");
  }
};

inline double hz_to_mel(double hz) {
  return 2595.0 * std::log10(1.0 + hz / 700.0);
}
inline double mel_to_hz(double mel) {
  return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}

// Power spectrogram [n_bins x T]. Frames are centered: the signal is
// reflect-padded by frame/2 on each end, so T = floor(S / hop) + 1.
// Result is stored row-major [bin][frame] as a flat vector of length
// n_bins * T.
struct PowerSpectrogram {
  std::vector<double> data;  // [bin * T + t]
  int n_bins = 0;
  int T = 0;
  double& at(int bin, int t) { return data[static_cast<std::size_t>(bin) * T + t]; }
  double at(int bin, int t) const { return data[static_cast<std::size_t>(bin) * T + t]; }
};

inline PowerSpectrogram stft_power(const std::vector<double>& channel,
                                   const FeatureConfig& cfg,
                                   int sample_rate_hz) {
  Require(!channel.empty(), "stft_power: empty channel");
  cfg.validate(sample_rate_hz);
  const int S = static_cast<int>(channel.size());
  const int frame = cfg.frame_samples(sample_rate_hz);
  const int hop = cfg.hop_samples(sample_rate_hz);
  const int nfft = cfg.resolved_fft_size(sample_rate_hz);
  const int n_bins = nfft / 2 + 1;
  const int T = S / hop + 1;

  // Periodic Hann window.
  std::vector<double> window(frame);
  for (int n = 0; n < frame; ++n)
    window[n] = 0.5 - 0.5 * std::cos(2.0 * kPi * n / frame);

  // Reflect padding (no edge repetition), folded as needed for short signals.
  auto sample_at = [&](long long i) -> double {
    while (i < 0 || i >= S) {
      if (i < 0) i = -i;
      if (i >= S) i = 2LL * (S - 1) - i;
    }
    return channel[static_cast<std::size_t>(i)];
  };

  PowerSpectrogram out;
  out.n_bins = n_bins;
  out.T = T;
  out.data.assign(static_cast<std::size_t>(n_bins) * T, 0.0);

  std::vector<double> re(nfft), im(nfft);
  const int half = frame / 2;
  for (int t = 0; t < T; ++t) {
    const long long start = static_cast<long long>(t) * hop - half;
    std::fill(re.begin(), re.end(), 0.0);
    std::fill(im.begin(), im.end(), 0.0);
    for (int n = 0; n < frame; ++n)
      re[n] = window[n] * sample_at(start + n);
    fft_inplace(re, im, false);
    for (int k = 0; k < n_bins; ++k)
      out.at(k, t) = re[k] * re[k] + im[k] * im[k];
  }
  return out;
}

// Triangular mel filterbank [n_mels x n_bins], peaks equally spaced on the
// HTK mel scale between fmin and fmax.
inline std::vector<std::vector<double>> mel_filterbank(const FeatureConfig& cfg,
                                                       int sample_rate_hz) {
  cfg.validate(sample_rate_hz);
  const int nfft = cfg.resolved_fft_size(sample_rate_hz);
  const int n_bins = nfft / 2 + 1;
  const double fmax = cfg.resolved_fmax(sample_rate_hz);
  const double mel_lo = hz_to_mel(cfg.mel_fmin_hz);
  const double mel_hi = hz_to_mel(fmax);

  std::vector<double> edges(cfg.n_mels + 2);
  for (int i = 0; i < cfg.n_mels + 2; ++i)
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (cfg.n_mels + 1));

  std::vector<std::vector<double>> fb(
      cfg.n_mels, std::vector<double>(n_bins, 0.0));
  const double bin_hz = static_cast<double>(sample_rate_hz) / nfft;
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
    bool any_positive = false;
    for (int k = 0; k < n_bins; ++k) {
      const double f = bin_hz * k;
      double w = 0.0;
      if (f > left && f < center)
        w = (f - left) / (center - left);
      else if (f == center)
        w = 1.0;
      else if (f > center && f < right)
        w = (right - f) / (right - center);
      fb[m][k] = w;
      any_positive = any_positive || w > 0.0;
    }
    Require(any_positive,
            "filterbank degenerate: mel band " + std::to_string(m) +
                " covers no FFT bin");
  }
  return fb;
}

// Full front-end: per-channel log mel-band energy. Missing channels come out
// as a constant kLogFloor plane with channel_valid false, exactly matching
// what a zeroed channel would produce.
inline FeatureTensor extract_features(const MultichannelClip& clip,
                                      const FeatureConfig& cfg) {
  Require(clip.channels() >= 1 && clip.length() >= 1,
          "extract_features: empty clip");
  cfg.validate(clip.sample_rate_hz);
  const auto fb = mel_filterbank(cfg, clip.sample_rate_hz);
  const int hop = cfg.hop_samples(clip.sample_rate_hz);
  const int T = clip.length() / hop + 1;
  FeatureTensor out(cfg.n_mels, T, clip.channels());

  for (int c = 0; c < clip.channels(); ++c) {
    if (clip.missing.count(c)) {
      out.channel_valid[c] = 0;
      continue;  // plane already at kLogFloor
    }
    const auto power = stft_power(clip.samples[c], cfg, clip.sample_rate_hz);
    Require(power.T == T, "extract_features: frame count mismatch");
    for (int t = 0; t < T; ++t) {
      for (int m = 0; m < cfg.n_mels; ++m) {
        double e = 0.0;
        for (int k = 0; k < power.n_bins; ++k)
          e += fb[m][k] * power.at(k, t);
        out.at(m, t, c) =
            e < kEnergyFloor ? kLogFloor : std::max(std::log(e), kLogFloor);
      }
    }
  }
  return out;
}

}  // namespace mcasc
