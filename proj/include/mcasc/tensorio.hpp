// mcasc/tensorio.hpp
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
// On-disk tensor and dataset-manifest formats.
//
// Tensor file ("CHFT"): magic, u16 version=1, u16 F, u32 T, u16 C,
// C bytes of channel validity (0/1), then F*T*C little-endian f64 in
// row-major (f, t, c) order.
//
// Manifest: UTF-8 TSV, one record per line:
//   path \t label \t fold_id \t duration_s \t channel_count \t checksum
// Lines starting with '#' are comments; an optional "#labels" directive
// pins the ordered label set.

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mcasc/common.hpp"

namespace mcasc {

// F x T x C log mel-band energy tensor with channel-validity metadata.
// Storage is row-major (f, t, c): index = (f*T + t)*C + c.
struct FeatureTensor {
  std::vector<double> data;
  int F = 0, T = 0, C = 0;
  std::vector<std::uint8_t> channel_valid;

  FeatureTensor() = default;
  FeatureTensor(int f, int t, int c, double fill = kLogFloor)
      : data(static_cast<std::size_t>(f) * t * c, fill),
        F(f),
        T(t),
        C(c),
        channel_valid(static_cast<std::size_t>(c), 1) {
    Require(f >= 1 && t >= 1 && c >= 1, "FeatureTensor: dims must be >= 1");
  }

  double& at(int f, int t, int c) {
    return data[(static_cast<std::size_t>(f) * T + t) * C + c];
  }
  double at(int f, int t, int c) const {
    return data[(static_cast<std::size_t>(f) * T + t) * C + c];
  }

  bool operator==(const FeatureTensor& o) const {
    return F == o.F && T == o.T && C == o.C &&
           channel_valid == o.channel_valid && data == o.data;
  }

  // All entries finite and >= kLogFloor; invalid channels exactly kLogFloor.
  void check_invariants() const {
    Require(F >= 1 && T >= 1 && C >= 1, "tensor: dims must be >= 1");
    Require(data.size() == static_cast<std::size_t>(F) * T * C,
            "tensor: data length mismatch");
    Require(channel_valid.size() == static_cast<std::size_t>(C),
            "tensor: channel_valid length mismatch");
    for (double v : data)
      Require(std::isfinite(v) && v >= kLogFloor,
              "tensor: entry not finite or below log floor");
    for (int c = 0; c < C; ++c) {
      if (channel_valid[c]) continue;
      for (int f = 0; f < F; ++f)
        for (int t = 0; t < T; ++t)
          Require(at(f, t, c) == kLogFloor,
                  "tensor: invalid channel plane not at log floor");
    }
  }
};

struct ManifestEntry {
  std::string clip_path;
  std::string scene_label;
  int fold_id = 0;
  double duration_s = 0.0;
  int channel_count = 0;
  std::string checksum;  // hex
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::vector<std::string> label_set;

  int label_index(const std::string& label) const {
    auto it = std::find(label_set.begin(), label_set.end(), label);
    Require(it != label_set.end(), "unknown label: " + label);
    return static_cast<int>(it - label_set.begin());
  }
};

namespace detail {

template <typename T>
void write_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i)
    buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

inline void write_le_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  write_le(os, bits);
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}

inline double read_le_f64(std::istream& is) {
  std::uint64_t bits = read_le<std::uint64_t>(is);
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

}  // namespace detail

inline constexpr char kTensorMagic[4] = {'C', 'H', 'F', 'T'};
inline constexpr std::uint16_t kTensorVersion = 1;

inline void write_tensor(const FeatureTensor& t, const std::string& path) {
  t.check_invariants();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  Require(os.good(), "write_tensor: cannot open " + path);
  os.write(kTensorMagic, 4);
  detail::write_le<std::uint16_t>(os, kTensorVersion);
  detail::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(t.F));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.T));
  detail::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(t.C));
  os.write(reinterpret_cast<const char*>(t.channel_valid.data()), t.C);
  for (double v : t.data) detail::write_le_f64(os, v);
  os.flush();
  Require(os.good(), "write_tensor: I/O failure writing " + path);
}

inline FeatureTensor read_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  Require(is.good(), "read_tensor: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  Require(is.good() && std::memcmp(magic, kTensorMagic, 4) == 0,
          "unsupported format: bad magic in " + path);
  const auto version = detail::read_le<std::uint16_t>(is);
  Require(version == kTensorVersion,
          "unsupported format: version " + std::to_string(version));
  const int F = detail::read_le<std::uint16_t>(is);
  const int T = detail::read_le<std::uint32_t>(is);
  const int C = detail::read_le<std::uint16_t>(is);
  Require(is.good() && F >= 1 && T >= 1 && C >= 1,
          "corrupt file: bad dims in " + path);
  FeatureTensor t(F, T, C);
  is.read(reinterpret_cast<char*>(t.channel_valid.data()), C);
  Require(is.good(), "corrupt file: truncated header in " + path);
  for (auto& v : t.data) v = detail::read_le_f64(is);
  Require(is.good(), "corrupt file: truncated payload in " + path);
  is.peek();
  Require(is.eof(), "corrupt file: trailing bytes in " + path);
  try {
    t.check_invariants();
  } catch (const Error& e) {
    throw Error("corrupt file: " + path + ": " + e.what());
  }
  return t;
}

inline std::string format_duration(double seconds) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", seconds);
  return buf;
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  Require(os.good(), "save_manifest: cannot open " + path);
  os << "#labels";
  for (const auto& l : m.label_set) os << '\t' << l;
  os << '\n';
  for (const auto& e : m.entries) {
    os << e.clip_path << '\t' << e.scene_label << '\t' << e.fold_id << '\t'
       << format_duration(e.duration_s) << '\t' << e.channel_count << '\t'
       << e.checksum << '\n';
  }
  os.flush();
  Require(os.good(), "save_manifest: I/O failure writing " + path);
}

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  Require(is.good(), "load_manifest: cannot open " + path);
  DatasetManifest m;
  bool labels_declared = false;
  std::set<std::string> seen_paths;
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& what) {
    throw Error("load_manifest: " + path + ":" + std::to_string(lineno) +
                ": " + what);
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind("#labels\t", 0) == 0 || line == "#labels") {
        std::stringstream ss(line);
        std::string tok;
        std::getline(ss, tok, '\t');  // "#labels"
        while (std::getline(ss, tok, '\t'))
          if (!tok.empty()) m.label_set.push_back(tok);
        labels_declared = true;
      }
      continue;
    }
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, '\t')) fields.push_back(tok);
    if (fields.size() != 6) fail("expected 6 tab-separated fields");
    ManifestEntry e;
    e.clip_path = fields[0];
    e.scene_label = fields[1];
    try {
      e.fold_id = std::stoi(fields[2]);
      e.duration_s = std::stod(fields[3]);
      e.channel_count = std::stoi(fields[4]);
    } catch (const std::exception&) {
      fail("malformed numeric field");
    }
    e.checksum = fields[5];
    if (e.fold_id < 0 || e.fold_id > 3)
      fail("fold_id " + fields[2] + " outside 0..3");
    if (e.channel_count < 1) fail("channel_count must be >= 1");
    if (!seen_paths.insert(e.clip_path).second)
      fail("duplicate path " + e.clip_path);
    if (labels_declared) {
      if (std::find(m.label_set.begin(), m.label_set.end(), e.scene_label) ==
          m.label_set.end())
        fail("unknown label " + e.scene_label);
    } else if (std::find(m.label_set.begin(), m.label_set.end(),
                         e.scene_label) == m.label_set.end()) {
      m.label_set.push_back(e.scene_label);
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

// FNV-1a 64 over a byte stream, rendered as 16 hex digits.
inline std::string fnv1a_hex(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  Require(is.good(), "fnv1a_hex: cannot open " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[4096];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
    if (is.eof()) break;
  }
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx",
                static_cast<unsigned long long>(h));
  return out;
}

}  // namespace mcasc
