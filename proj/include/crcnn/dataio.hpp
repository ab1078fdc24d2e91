#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "crcnn/context.hpp"
#include "crcnn/error.hpp"
#include "crcnn/eval.hpp"
#include "crcnn/geometry.hpp"
#include "crcnn/rng.hpp"
#include "crcnn/tensor.hpp"

namespace crcnn {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Temporal sampling around a key frame

inline constexpr std::size_t kNeighborhoodFrames = 64;

struct SamplingSpec {
  std::size_t num_frames = 32;  // T
  std::size_t stride = 2;       // tau

  void validate() const {
    CRCNN_ENFORCE(num_frames >= 1 && stride >= 1, "sampling: T and tau must be >= 1");
    CRCNN_ENFORCE(num_frames * stride <= kNeighborhoodFrames, "sampling: T x tau = ",
                  num_frames * stride, " exceeds the ", kNeighborhoodFrames,
                  "-frame neighborhood");
  }

  friend bool operator==(const SamplingSpec&, const SamplingSpec&) = default;
};

inline constexpr std::array<SamplingSpec, 3> kSamplingPresets = {
    SamplingSpec{8, 8}, SamplingSpec{16, 4}, SamplingSpec{32, 2}};

// key - 32 + i * tau for i in [0, T), clamped into the video.
inline std::vector<std::size_t> sample_clip_indices(std::size_t key_frame, const SamplingSpec& spec,
                                                    std::size_t video_len) {
  spec.validate();
  CRCNN_ENFORCE(video_len >= 1, "sample_clip_indices: empty video");
  const auto start = static_cast<std::int64_t>(key_frame) -
                     static_cast<std::int64_t>(kNeighborhoodFrames / 2);
  std::vector<std::size_t> out(spec.num_frames);
  for (std::size_t i = 0; i < spec.num_frames; ++i) {
    const std::int64_t idx = start + static_cast<std::int64_t>(i * spec.stride);
    out[i] = static_cast<std::size_t>(
        std::clamp<std::int64_t>(idx, 0, static_cast<std::int64_t>(video_len) - 1));
  }
  return out;
}

// Key frames sit at the middle of each second.
inline std::size_t key_frame_index(std::int64_t timestamp, std::size_t fps, std::size_t video_len) {
  const auto idx = static_cast<std::size_t>(std::max<std::int64_t>(timestamp, 0)) * fps + fps / 2;
  return std::min(idx, video_len - 1);
}

inline Tensor gather_clip(const Tensor& frames, const std::vector<std::size_t>& indices) {
  CRCNN_ENFORCE(frames.rank() == 4, "gather_clip: frames must be [N,H,W,C]");
  const std::size_t frame = frames.size() / frames.dim(0);
  Tensor clip({indices.size(), frames.dim(1), frames.dim(2), frames.dim(3)});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    CRCNN_ENFORCE(indices[i] < frames.dim(0), "gather_clip: frame index out of range");
    std::copy_n(frames.data() + indices[i] * frame, frame, clip.data() + i * frame);
  }
  return clip;
}

// ---------------------------------------------------------------------------
// CSV records

struct Proposal {
  std::string video_id;
  std::int64_t timestamp = 0;
  Box box;
  double score = 0.0;

  friend bool operator==(const Proposal&, const Proposal&) = default;
};

namespace detail {

inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    const std::size_t comma = line.find(',', pos);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(pos));
      break;
    }
    out.push_back(line.substr(pos, comma - pos));
    pos = comma + 1;
  }
  return out;
}

class RowParser {
 public:
  RowParser(std::string_view path, std::size_t line) : path_(path), line_(line) {}

  [[noreturn]] void fail(const std::string& what) const {
    throw ValidationError(concat(path_, ":", line_, ": ", what));
  }

  double real(std::string_view s, const char* field) const {
    double v = 0.0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) {
      fail(concat("bad ", field, " '", s, "'"));
    }
    return v;
  }

  std::int64_t integer(std::string_view s, const char* field) const {
    std::int64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) fail(concat("bad ", field, " '", s, "'"));
    return v;
  }

  Box box(const std::vector<std::string_view>& f, std::size_t first) const {
    const Box b{real(f[first], "x1"), real(f[first + 1], "y1"), real(f[first + 2], "x2"),
                real(f[first + 3], "y2")};
    for (double v : {b.x1, b.y1, b.x2, b.y2}) {
      if (v < 0.0 || v > 1.0) fail(concat("coordinate ", v, " outside [0,1]"));
    }
    if (!b.valid()) fail("box needs x1 < x2 and y1 < y2");
    return b;
  }

  std::string id(std::string_view s) const {
    if (s.empty()) fail("empty video_id");
    return std::string(s);
  }

 private:
  std::string path_;
  std::size_t line_;
};

template <typename F>
void for_each_csv_row(const fs::path& path, std::size_t fields, F&& f) {
  std::ifstream in(path);
  if (!in) throw IoError(concat("cannot open ", path.string()));
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cols = split_csv(line);
    RowParser row(path.string(), n);
    if (cols.size() != fields) {
      row.fail(concat("expected ", fields, " fields, got ", cols.size()));
    }
    f(row, cols);
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(concat("cannot write ", path.string()));
  out << text;
  if (!out) throw IoError(concat("write failed for ", path.string()));
}

inline std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(concat("cannot open ", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string box_csv(const Box& b) {
  return format_real(b.x1) + "," + format_real(b.y1) + "," + format_real(b.x2) + "," +
         format_real(b.y2);
}

}  // namespace detail

// video_id,timestamp,x1,y1,x2,y2,action_id,person_id. Rows that share
// (video_id, timestamp, person_id) merge into one multi-label box.
inline std::vector<GroundTruth> parse_annotations(const fs::path& path) {
  std::map<std::tuple<std::string, std::int64_t, std::int64_t>, GroundTruth> merged;
  detail::for_each_csv_row(path, 8, [&](const detail::RowParser& row, const auto& f) {
    GroundTruth g;
    g.video_id = row.id(f[0]);
    g.timestamp = row.integer(f[1], "timestamp");
    g.box = row.box(f, 2);
    const std::int64_t action = row.integer(f[6], "action_id");
    if (action < 0) row.fail("negative action_id");
    g.person_id = row.integer(f[7], "person_id");
    auto key = std::make_tuple(g.video_id, g.timestamp, g.person_id);
    auto it = merged.find(key);
    if (it == merged.end()) {
      g.class_ids.insert(static_cast<int>(action));
      merged.emplace(std::move(key), std::move(g));
    } else {
      if (!(it->second.box == g.box)) row.fail("person box differs between label rows");
      it->second.class_ids.insert(static_cast<int>(action));
    }
  });
  std::vector<GroundTruth> out;
  for (auto& [k, g] : merged) out.push_back(std::move(g));
  return out;
}

inline std::string annotations_csv(const std::vector<GroundTruth>& gts) {
  std::string s;
  for (const GroundTruth& g : gts) {
    for (int c : g.class_ids) {
      s += g.video_id + "," + std::to_string(g.timestamp) + "," + detail::box_csv(g.box) + "," +
           std::to_string(c) + "," + std::to_string(g.person_id) + "\n";
    }
  }
  return s;
}

inline void write_annotations(const fs::path& path, const std::vector<GroundTruth>& gts) {
  detail::write_text(path, annotations_csv(gts));
}

// video_id,timestamp,x1,y1,x2,y2,score
inline std::vector<Proposal> parse_proposals(const fs::path& path) {
  std::vector<Proposal> out;
  detail::for_each_csv_row(path, 7, [&](const detail::RowParser& row, const auto& f) {
    Proposal p;
    p.video_id = row.id(f[0]);
    p.timestamp = row.integer(f[1], "timestamp");
    p.box = row.box(f, 2);
    p.score = row.real(f[6], "score");
    if (p.score < 0.0 || p.score > 1.0) row.fail(detail::concat("score ", p.score, " outside [0,1]"));
    out.push_back(std::move(p));
  });
  return out;
}

inline void write_proposals(const fs::path& path, const std::vector<Proposal>& props) {
  std::string s;
  for (const Proposal& p : props) {
    s += p.video_id + "," + std::to_string(p.timestamp) + "," + detail::box_csv(p.box) + "," +
         detail::format_real(p.score) + "\n";
  }
  detail::write_text(path, s);
}

// video_id,timestamp,x1,y1,x2,y2,class_id,score
inline std::vector<Detection> parse_detections(const fs::path& path) {
  std::vector<Detection> out;
  detail::for_each_csv_row(path, 8, [&](const detail::RowParser& row, const auto& f) {
    Detection d;
    d.video_id = row.id(f[0]);
    d.timestamp = row.integer(f[1], "timestamp");
    d.box = row.box(f, 2);
    const std::int64_t c = row.integer(f[6], "class_id");
    if (c < 0) row.fail("negative class_id");
    d.class_id = static_cast<int>(c);
    d.score = row.real(f[7], "score");
    if (d.score < 0.0 || d.score > 1.0) row.fail(detail::concat("score ", d.score, " outside [0,1]"));
    out.push_back(std::move(d));
  });
  return out;
}

inline void write_detections(const fs::path& path, const std::vector<Detection>& dets) {
  std::string s;
  for (const Detection& d : dets) {
    s += d.video_id + "," + std::to_string(d.timestamp) + "," + detail::box_csv(d.box) + "," +
         std::to_string(d.class_id) + "," + detail::format_real(d.score) + "\n";
  }
  detail::write_text(path, s);
}

// ---------------------------------------------------------------------------
// Binary tensor container
//
//   "CRCN" | version u32 | count u32 |
//   per tensor: name_len u32 | name bytes | rank u32 | extents u64[rank] |
//               payload f64[volume]
// All integers and floats little-endian.

inline constexpr std::uint32_t kContainerVersion = 1;

class ContainerError : public ValidationError {
 public:
  enum class Kind { kBadMagic, kBadVersion, kTruncated, kDuplicateName, kTrailingBytes };

  ContainerError(Kind kind, const std::string& what) : ValidationError(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  const U bits = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    need(sizeof(T));
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bits |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return std::bit_cast<T>(bits);
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw ContainerError(ContainerError::Kind::kTruncated,
                           concat("container truncated at byte ", pos_));
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_container(const NamedTensors& tensors) {
  std::set<std::string> names;
  for (const auto& [name, t] : tensors) {
    if (!names.insert(name).second) {
      throw ContainerError(ContainerError::Kind::kDuplicateName,
                           detail::concat("duplicate tensor name '", name, "'"));
    }
  }
  std::string out = "CRCN";
  detail::put_le<std::uint32_t>(out, kContainerVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) detail::put_le<std::uint64_t>(out, e);
    for (double v : t.values()) detail::put_le<double>(out, v);
  }
  return out;
}

inline NamedTensors decode_container(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (bytes.size() < 4 || bytes.substr(0, 4) != "CRCN") {
    throw ContainerError(ContainerError::Kind::kBadMagic, "not a CRCN container (bad magic)");
  }
  r.take(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kContainerVersion) {
    throw ContainerError(ContainerError::Kind::kBadVersion,
                         detail::concat("unsupported container version ", version));
  }
  const auto count = r.get<std::uint32_t>();
  NamedTensors out;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>();
    std::string name(r.take(len));
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    std::size_t volume = 1;
    for (auto& e : shape) {
      e = static_cast<std::size_t>(r.get<std::uint64_t>());
      if (e == 0 || volume > r.remaining()) {
        throw ContainerError(ContainerError::Kind::kTruncated,
                             detail::concat("tensor '", name, "' has an invalid shape"));
      }
      volume *= e;
    }
    if (volume > r.remaining() / 8) {
      throw ContainerError(ContainerError::Kind::kTruncated,
                           detail::concat("container truncated inside tensor '", name, "'"));
    }
    std::vector<double> data(volume);
    for (double& v : data) v = r.get<double>();
    if (!names.insert(name).second) {
      throw ContainerError(ContainerError::Kind::kDuplicateName,
                           detail::concat("duplicate tensor name '", name, "'"));
    }
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (r.remaining() != 0) {
    throw ContainerError(ContainerError::Kind::kTrailingBytes, "trailing bytes after last tensor");
  }
  return out;
}

inline void tensor_container_write(const fs::path& path, const NamedTensors& tensors) {
  detail::write_text(path, encode_container(tensors));
}

inline NamedTensors tensor_container_read(const fs::path& path) {
  return decode_container(detail::read_bytes(path));
}

// ---------------------------------------------------------------------------
// Feature bank persistence: one JSON record per line, ordered by
// (video_id, timestamp, person_id).

inline std::string bank_jsonl(const FeatureBank& bank) {
  std::string out;
  for (const auto& [key, list] : bank.entries()) {
    for (const BankEntry& e : list) {
      nlohmann::json j;
      j["video_id"] = key.first;
      j["timestamp"] = key.second;
      j["person_id"] = e.person_id;
      j["feature"] = std::vector<double>(e.feature.values().begin(), e.feature.values().end());
      out += j.dump();
      out += '\n';
    }
  }
  return out;
}

inline void bank_write(const fs::path& path, const FeatureBank& bank) {
  detail::write_text(path, bank_jsonl(bank));
}

inline FeatureBank bank_read(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(detail::concat("cannot open ", path.string()));
  FeatureBank bank;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      auto feat = j.at("feature").get<std::vector<double>>();
      CRCNN_ENFORCE(!feat.empty(), "empty feature");
      bank.add(j.at("video_id").get<std::string>(), j.at("timestamp").get<std::int64_t>(),
               j.at("person_id").get<std::int64_t>(), Tensor::vector(std::move(feat)));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(detail::concat(path.string(), ":", n, ": ", e.what()));
    } catch (const ValidationError& e) {
      throw ValidationError(detail::concat(path.string(), ":", n, ": ", e.what()));
    }
  }
  return bank;
}

// ---------------------------------------------------------------------------
// Misc helpers shared by the pipeline

inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string file_checksum(const fs::path& path) {
  return hex64(fnv1a(detail::read_bytes(path)));
}

}  // namespace crcnn
