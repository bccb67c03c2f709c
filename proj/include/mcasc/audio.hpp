// mcasc/audio.hpp
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
// Multichannel WAV ingestion, deterministic scene-clip synthesis, and
// missing-channel simulation (channels zeroed in the time domain).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "mcasc/common.hpp"
#include "mcasc/fft.hpp"
#include "mcasc/tensorio.hpp"

namespace mcasc {

struct MultichannelClip {
  // samples[c] is channel c; all channels have equal length.
  std::vector<std::vector<double>> samples;
  int sample_rate_hz = 0;
  std::string label;  // empty = unlabeled
  std::set<int> missing;

  int channels() const { return static_cast<int>(samples.size()); }
  int length() const {
    return samples.empty() ? 0 : static_cast<int>(samples[0].size());
  }
};

// Synthetic scene recipe: a tone mixture plus band-limited noise, with a
// fixed per-channel gain/delay pattern standing in for array geometry.
struct SceneSpec {
  std::string label;
  std::vector<double> tone_freqs_hz;
  double noise_low_hz = 50.0;
  double noise_high_hz = 7000.0;
  std::vector<double> per_channel_gain;
  std::vector<int> per_channel_delay_samples;
  double snr_db = 10.0;  // +inf disables noise
};

// ---------------------------------------------------------------------------
// WAV (RIFF) reader/writer: PCM 16-bit and IEEE-float 32-bit, interleaved.

namespace detail {

inline std::uint32_t read_u32(std::istream& is) { return read_le<std::uint32_t>(is); }
inline std::uint16_t read_u16(std::istream& is) { return read_le<std::uint16_t>(is); }

}  // namespace detail

inline MultichannelClip load_wav(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  Require(is.good(), "load_wav: cannot open " + path);
  char tag[4];
  is.read(tag, 4);
  Require(is.good() && std::memcmp(tag, "RIFF", 4) == 0,
          "corrupt wav: missing RIFF in " + path);
  detail::read_u32(is);  // riff size
  is.read(tag, 4);
  Require(is.good() && std::memcmp(tag, "WAVE", 4) == 0,
          "corrupt wav: missing WAVE in " + path);

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  std::vector<char> payload;
  while (is.read(tag, 4)) {
    std::uint32_t size = detail::read_u32(is);
    Require(is.good(), "corrupt wav: truncated chunk header in " + path);
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      Require(size >= 16, "corrupt wav: short fmt chunk in " + path);
      format = detail::read_u16(is);
      channels = detail::read_u16(is);
      rate = detail::read_u32(is);
      detail::read_u32(is);  // byte rate
      detail::read_u16(is);  // block align
      bits = detail::read_u16(is);
      is.ignore(size - 16);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      payload.resize(size);
      is.read(payload.data(), size);
      Require(is.good() || is.eof(), "corrupt wav: truncated data in " + path);
      Require(static_cast<std::uint32_t>(is.gcount()) == size,
              "corrupt wav: truncated data in " + path);
      break;
    } else {
      is.ignore(size + (size & 1));
    }
  }
  Require(have_fmt && !payload.empty() && channels >= 1 && channels <= 64,
          "corrupt wav: missing fmt/data in " + path);
  Require(rate > 0, "corrupt wav: zero sample rate in " + path);

  MultichannelClip clip;
  clip.sample_rate_hz = static_cast<int>(rate);
  clip.samples.resize(channels);
  if (format == 1 && bits == 16) {
    const std::size_t frames = payload.size() / (2 * channels);
    for (auto& ch : clip.samples) ch.resize(frames);
    const unsigned char* p =
        reinterpret_cast<const unsigned char*>(payload.data());
    for (std::size_t i = 0; i < frames; ++i)
      for (int c = 0; c < channels; ++c) {
        std::int16_t v = static_cast<std::int16_t>(
            static_cast<std::uint16_t>(p[0]) |
            (static_cast<std::uint16_t>(p[1]) << 8));
        p += 2;
        clip.samples[c][i] = static_cast<double>(v) / 32768.0;
      }
  } else if (format == 3 && bits == 32) {
    const std::size_t frames = payload.size() / (4 * channels);
    for (auto& ch : clip.samples) ch.resize(frames);
    const unsigned char* p =
        reinterpret_cast<const unsigned char*>(payload.data());
    for (std::size_t i = 0; i < frames; ++i)
      for (int c = 0; c < channels; ++c) {
        std::uint32_t bitsv = static_cast<std::uint32_t>(p[0]) |
                              (static_cast<std::uint32_t>(p[1]) << 8) |
                              (static_cast<std::uint32_t>(p[2]) << 16) |
                              (static_cast<std::uint32_t>(p[3]) << 24);
        p += 4;
        float f;
        std::memcpy(&f, &bitsv, 4);
        clip.samples[c][i] = static_cast<double>(f);
      }
  } else {
    throw Error("unsupported encoding: format " + std::to_string(format) +
                ", " + std::to_string(bits) + " bits in " + path);
  }
  return clip;
}

inline void save_wav_pcm16(const MultichannelClip& clip,
                           const std::string& path) {
  const int C = clip.channels();
  const int S = clip.length();
  Require(C >= 1 && S >= 1, "save_wav: empty clip");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  Require(os.good(), "save_wav: cannot open " + path);
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(S) * C * 2;
  os.write("RIFF", 4);
  detail::write_le<std::uint32_t>(os, 36 + data_bytes);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  detail::write_le<std::uint32_t>(os, 16);
  detail::write_le<std::uint16_t>(os, 1);  // PCM
  detail::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(C));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(clip.sample_rate_hz));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(clip.sample_rate_hz) * C * 2);
  detail::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(C * 2));
  detail::write_le<std::uint16_t>(os, 16);
  os.write("data", 4);
  detail::write_le<std::uint32_t>(os, data_bytes);
  for (int i = 0; i < S; ++i)
    for (int c = 0; c < C; ++c) {
      double v = std::clamp(clip.samples[c][i], -1.0, 1.0);
      long q = std::lround(v * 32767.0);
      detail::write_le<std::int16_t>(os, static_cast<std::int16_t>(q));
    }
  os.flush();
  Require(os.good(), "save_wav: I/O failure writing " + path);
}

// ---------------------------------------------------------------------------
// Scene synthesis.

namespace detail {

// Band-limited Gaussian noise: generated on the DFT grid of the next
// power of two, band-masked, inverse-transformed, truncated to n.
inline std::vector<double> band_noise(int n, int sample_rate_hz, double lo_hz,
                                      double hi_hz, Rng& rng) {
  const std::size_t p = next_pow2(static_cast<std::size_t>(n));
  std::vector<double> re(p), im(p, 0.0);
  for (auto& v : re) v = rng.gaussian();
  fft_inplace(re, im, false);
  const double bin_hz = static_cast<double>(sample_rate_hz) / static_cast<double>(p);
  for (std::size_t k = 0; k <= p / 2; ++k) {
    const double f = bin_hz * static_cast<double>(k);
    if (f < lo_hz || f > hi_hz) {
      re[k] = im[k] = 0.0;
      if (k != 0 && k != p / 2) {
        re[p - k] = im[p - k] = 0.0;
      }
    }
  }
  fft_inplace(re, im, true);
  re.resize(static_cast<std::size_t>(n));
  return re;
}

}  // namespace detail

inline MultichannelClip synth_clip(const SceneSpec& spec, double duration_s,
                                   int sample_rate_hz, int channels,
                                   std::uint64_t seed) {
  Require(duration_s > 0.0, "synth_clip: duration must be positive");
  Require(channels >= 1, "synth_clip: channels must be >= 1");
  Require(static_cast<int>(spec.per_channel_gain.size()) == channels &&
              static_cast<int>(spec.per_channel_delay_samples.size()) == channels,
          "spec arity: per-channel vectors do not match channel count");
  const int S = static_cast<int>(std::llround(duration_s * sample_rate_hz));
  Require(S >= 1, "synth_clip: clip too short");
  const double nyquist = sample_rate_hz / 2.0;
  for (double f : spec.tone_freqs_hz)
    Require(f > 0.0 && f < nyquist, "synth_clip: tone above Nyquist");
  for (double g : spec.per_channel_gain)
    Require(g > 0.0 && g <= 1.0, "synth_clip: gain outside (0,1]");
  for (int d : spec.per_channel_delay_samples)
    Require(d >= 0 && d < S, "synth_clip: delay outside clip");

  MultichannelClip clip;
  clip.sample_rate_hz = sample_rate_hz;
  clip.label = spec.label;
  clip.samples.assign(channels, std::vector<double>(S, 0.0));

  const int n_tones = static_cast<int>(spec.tone_freqs_hz.size());
  const double tone_amp = n_tones > 0 ? 0.45 / n_tones : 0.0;
  const double tone_power = n_tones * tone_amp * tone_amp / 2.0;
  const bool with_noise = std::isfinite(spec.snr_db) && n_tones > 0;

  const double two_pi = 2.0 * 3.141592653589793238462643383279502884;
  for (int c = 0; c < channels; ++c) {
    auto& ch = clip.samples[c];
    const double gain = spec.per_channel_gain[c];
    const int delay = spec.per_channel_delay_samples[c];
    for (int k = 0; k < n_tones; ++k) {
      const double w = two_pi * spec.tone_freqs_hz[k] / sample_rate_hz;
      for (int s = 0; s < S; ++s)
        ch[s] += tone_amp * std::sin(w * (s - delay));
    }
    if (with_noise) {
      Rng noise_rng(mix_seed(seed, 0x6e6f6973ULL, static_cast<std::uint64_t>(c)));
      auto noise = detail::band_noise(S, sample_rate_hz, spec.noise_low_hz,
                                      spec.noise_high_hz, noise_rng);
      double p = 0.0;
      for (double v : noise) p += v * v;
      p /= S;
      if (p > 0.0) {
        const double target = tone_power / std::pow(10.0, spec.snr_db / 10.0);
        const double scale = std::sqrt(target / p);
        for (int s = 0; s < S; ++s) ch[s] += scale * noise[s];
      }
    }
    for (double& v : ch) v = std::clamp(gain * v, -1.0, 1.0);
  }
  return clip;
}

inline MultichannelClip zero_channels(const MultichannelClip& clip,
                                      const std::set<int>& missing) {
  for (int c : missing)
    Require(c >= 0 && c < clip.channels(), "channel out of range");
  MultichannelClip out = clip;
  for (int c : missing) {
    std::fill(out.samples[c].begin(), out.samples[c].end(), 0.0);
    out.missing.insert(c);
  }
  return out;
}

// Default array geometry: channels grouped in fours with a shared delay
// offset per group, one gain pattern per channel.
inline SceneSpec default_scene_spec(const std::string& label,
                                    std::vector<double> tone_freqs_hz,
                                    int channels, double snr_db,
                                    std::uint64_t seed) {
  SceneSpec spec;
  spec.label = label;
  spec.tone_freqs_hz = std::move(tone_freqs_hz);
  spec.snr_db = snr_db;
  Rng rng(mix_seed(seed, 0x67656f6dULL));
  spec.per_channel_gain.resize(channels);
  spec.per_channel_delay_samples.resize(channels);
  for (int c = 0; c < channels; ++c) {
    spec.per_channel_gain[c] = 0.5 + 0.5 * rng.uniform_real();
    const int group = c / 4;
    spec.per_channel_delay_samples[c] = group * 16 + (c % 4) * 3;
  }
  return spec;
}

// Tone sets for synthetic class k: three related partials on a per-class
// base frequency, spread so classes occupy distinct bands.
inline std::vector<double> class_tone_set(int k, int n_classes,
                                          int sample_rate_hz) {
  const double nyquist = sample_rate_hz / 2.0;
  const double lo = 250.0, hi = 0.45 * nyquist;
  const double base = lo * std::pow(hi / lo, static_cast<double>(k) /
                                                 std::max(1, n_classes));
  return {base, base * 1.5, base * 2.25};
}

inline DatasetManifest make_synthetic_dataset(int n_classes, int clips_per_class,
                                              int channels, double duration_s,
                                              int sample_rate_hz,
                                              std::uint64_t seed,
                                              const std::string& out_dir) {
  Require(n_classes >= 2, "make_synthetic_dataset: need at least 2 classes");
  Require(clips_per_class >= 1, "make_synthetic_dataset: need clips");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  DatasetManifest manifest;
  for (int k = 0; k < n_classes; ++k)
    manifest.label_set.push_back("scene" + std::to_string(k));

  for (int k = 0; k < n_classes; ++k) {
    const std::string& label = manifest.label_set[k];
    fs::create_directories(fs::path(out_dir) / label);
    auto base_tones = class_tone_set(k, n_classes, sample_rate_hz);
    for (int j = 0; j < clips_per_class; ++j) {
      const std::uint64_t clip_seed =
          mix_seed(seed, static_cast<std::uint64_t>(k),
                   static_cast<std::uint64_t>(j));
      // Per-clip variation: small frequency jitter plus a fresh noise draw.
      Rng jitter(mix_seed(clip_seed, 0x6a697474ULL));
      auto tones = base_tones;
      for (double& f : tones) f *= 1.0 + 0.02 * (2.0 * jitter.uniform_real() - 1.0);
      SceneSpec spec = default_scene_spec(label, tones, channels, 6.0, clip_seed);
      MultichannelClip clip =
          synth_clip(spec, duration_s, sample_rate_hz, channels, clip_seed);

      char name[32];
      std::snprintf(name, sizeof(name), "clip%04d.wav", j);
      const std::string rel = label + "/" + name;
      const std::string abs_path = (fs::path(out_dir) / rel).string();
      save_wav_pcm16(clip, abs_path);

      ManifestEntry e;
      e.clip_path = rel;
      e.scene_label = label;
      e.fold_id = j % 4;  // round-robin keeps folds class-balanced
      e.duration_s = duration_s;
      e.channel_count = channels;
      e.checksum = fnv1a_hex(abs_path);
      manifest.entries.push_back(std::move(e));
    }
  }
  save_manifest(manifest, (fs::path(out_dir) / "manifest.tsv").string());
  return manifest;
}

}  // namespace mcasc
