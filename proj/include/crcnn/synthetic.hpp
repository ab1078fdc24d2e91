#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "crcnn/dataio.hpp"
#include "crcnn/error.hpp"
#include "crcnn/eval.hpp"
#include "crcnn/geometry.hpp"
#include "crcnn/rng.hpp"
#include "crcnn/tensor.hpp"

namespace crcnn {

// Synthetic glyph benchmark. Every actor is a textured rectangle carrying a
// small class-specific glyph; the glyph is the only label cue unless
// background themes are enabled, in which case the label is
// (glyph, video background theme).
struct SyntheticSpec {
  std::size_t num_videos = 20;
  std::size_t video_seconds = 6;
  std::size_t fps = 4;
  std::size_t frame_h = 64;
  std::size_t frame_w = 64;
  std::size_t glyph_size = 6;
  std::size_t min_box_px = 10;
  std::size_t num_classes = 8;
  std::size_t actors_min = 1;
  std::size_t actors_max = 3;
  // Relative weights of XS, S, M, L, XL boxes.
  std::array<double, 5> box_size_mix{1, 1, 1, 1, 1};
  std::size_t background_themes = 1;
  std::size_t distractors = 6;
  double noise_sigma = 0.02;
  // Probability that each further actor in a video copies the first actor's
  // glyph, so neighbors in the bank carry label information.
  double neighbor_correlation = 0.0;
  std::uint64_t seed = 0;

  std::size_t num_glyphs() const { return num_classes / background_themes; }
  std::size_t frames_per_video() const { return video_seconds * fps; }

  void validate() const {
    CRCNN_ENFORCE(num_videos >= 1 && video_seconds >= 1 && fps >= 1, "synthetic: empty video set");
    CRCNN_ENFORCE(frame_h >= 16 && frame_w >= 16, "synthetic: frames must be at least 16x16");
    CRCNN_ENFORCE(glyph_size >= 6, "synthetic: glyph_size must be >= 6");
    CRCNN_ENFORCE(glyph_size < min_box_px, "synthetic: glyph_size ", glyph_size,
                  " must be smaller than the minimum actor box size ", min_box_px, " px");
    CRCNN_ENFORCE(min_box_px <= std::min(frame_h, frame_w), "synthetic: min_box_px exceeds frame");
    CRCNN_ENFORCE(background_themes >= 1 && background_themes <= 4,
                  "synthetic: background_themes must be in [1,4]");
    CRCNN_ENFORCE(num_classes >= 2 && num_classes % background_themes == 0,
                  "synthetic: num_classes must be a multiple of background_themes");
    CRCNN_ENFORCE(num_glyphs() >= 1 && num_glyphs() <= 15, "synthetic: 1..15 glyph templates supported");
    CRCNN_ENFORCE(actors_min >= 1 && actors_min <= actors_max, "synthetic: bad actor count range");
    double total = 0.0;
    for (double w : box_size_mix) {
      CRCNN_ENFORCE(w >= 0.0, "synthetic: negative size-bin weight");
      total += w;
    }
    CRCNN_ENFORCE(total > 0.0, "synthetic: box_size_mix is all zero");
    CRCNN_ENFORCE(neighbor_correlation >= 0.0 && neighbor_correlation <= 1.0,
                  "synthetic: neighbor_correlation must be in [0,1]");
    const double min_area = static_cast<double>(min_box_px * min_box_px) /
                            static_cast<double>(frame_h * frame_w);
    CRCNN_ENFORCE(box_size_mix[0] == 0.0 || min_area < kSizeBinUpper[0] * 0.8,
                  "synthetic: frame too small for XS boxes of at least ", min_box_px, " px");
  }
};

inline nlohmann::json to_json(const SyntheticSpec& s) {
  return {{"num_videos", s.num_videos},
          {"video_seconds", s.video_seconds},
          {"fps", s.fps},
          {"frame_h", s.frame_h},
          {"frame_w", s.frame_w},
          {"glyph_size", s.glyph_size},
          {"min_box_px", s.min_box_px},
          {"num_classes", s.num_classes},
          {"actors_min", s.actors_min},
          {"actors_max", s.actors_max},
          {"box_size_mix", s.box_size_mix},
          {"background_themes", s.background_themes},
          {"distractors", s.distractors},
          {"noise_sigma", s.noise_sigma},
          {"neighbor_correlation", s.neighbor_correlation},
          {"seed", s.seed}};
}

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  auto opt = [&j](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  try {
    opt("num_videos", s.num_videos);
    opt("video_seconds", s.video_seconds);
    opt("fps", s.fps);
    opt("frame_h", s.frame_h);
    opt("frame_w", s.frame_w);
    opt("glyph_size", s.glyph_size);
    opt("min_box_px", s.min_box_px);
    opt("num_classes", s.num_classes);
    opt("actors_min", s.actors_min);
    opt("actors_max", s.actors_max);
    opt("box_size_mix", s.box_size_mix);
    opt("background_themes", s.background_themes);
    opt("distractors", s.distractors);
    opt("noise_sigma", s.noise_sigma);
    opt("neighbor_correlation", s.neighbor_correlation);
    opt("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("synthetic spec: ") + e.what());
  }
  s.validate();
  return s;
}

// Binary fine-texture patterns: stripes in four orientations and a checker
// at small half-periods. Every template covers about half of the glyph, so
// the mean color carries little class information.
struct GlyphTemplate {
  enum Kind : std::uint8_t { kHorizontal, kVertical, kDiagonal, kAntiDiagonal, kChecker };
  Kind kind = kHorizontal;
  std::size_t half_period = 1;

  bool on(std::size_t y, std::size_t x) const {
    const std::size_t p = half_period;
    switch (kind) {
      case kHorizontal: return (y / p) % 2 == 0;
      case kVertical: return (x / p) % 2 == 0;
      case kDiagonal: return ((x + y) / p) % 2 == 0;
      case kAntiDiagonal: return ((x + 64 * p - y) / p) % 2 == 0;
      default: return (x / p + y / p) % 2 == 0;
    }
  }
  friend bool operator==(const GlyphTemplate&, const GlyphTemplate&) = default;
};

inline constexpr std::size_t kMaxGlyphs = 15;

namespace detail {

// Candidates in (half-period, kind) order with pixel-identical patterns
// removed: at half-period 1 the two diagonals and the checker coincide.
inline std::vector<GlyphTemplate> distinct_glyph_templates() {
  constexpr std::size_t probe = 12;
  std::vector<GlyphTemplate> out;
  std::vector<std::vector<bool>> seen;
  for (std::size_t p = 1; p <= 4 && out.size() < kMaxGlyphs; ++p) {
    for (int k = 0; k < 5 && out.size() < kMaxGlyphs; ++k) {
      const GlyphTemplate t{static_cast<GlyphTemplate::Kind>(k), p};
      std::vector<bool> bits;
      for (std::size_t y = 0; y < probe; ++y) {
        for (std::size_t x = 0; x < probe; ++x) bits.push_back(t.on(y, x));
      }
      if (std::find(seen.begin(), seen.end(), bits) != seen.end()) continue;
      seen.push_back(std::move(bits));
      out.push_back(t);
    }
  }
  return out;
}

}  // namespace detail

inline std::vector<GlyphTemplate> glyph_templates(std::size_t count, std::uint64_t seed) {
  CRCNN_ENFORCE(count >= 1 && count <= kMaxGlyphs, "glyph template count must be in [1,",
                kMaxGlyphs, "], got ", count);
  std::vector<GlyphTemplate> all = detail::distinct_glyph_templates();
  Rng rng(derive_seed(seed, 0x61f));
  for (std::size_t i = all.size(); i > 1; --i) std::swap(all[i - 1], all[rng.below(i)]);
  all.resize(count);
  return all;
}

inline constexpr std::array<double, 3> kGlyphOn = {0.95, 0.9, 0.15};
inline constexpr std::array<double, 3> kGlyphOff = {0.1, 0.15, 0.65};

// Renders one template as a size x size RGB patch.
inline Tensor render_glyph(const GlyphTemplate& tmpl, std::size_t size) {
  Tensor g({size, size, 3});
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const bool on = tmpl.on(y, x);
      for (std::size_t c = 0; c < 3; ++c) g.at(y, x, c) = on ? kGlyphOn[c] : kGlyphOff[c];
    }
  }
  return g;
}

struct SyntheticActor {
  // Pixel rectangle [px1, px2) x [py1, py2).
  std::size_t px1 = 0, py1 = 0, px2 = 0, py2 = 0;
  std::size_t gx = 0, gy = 0;  // glyph top-left
  int class_id = 0;
  std::size_t glyph_id = 0;
  Box box;
};

struct SyntheticVideo {
  std::string video_id;
  std::size_t theme = 0;
  std::vector<SyntheticActor> actors;
  Tensor frames;  // [N, H, W, 3]
};

inline std::string synthetic_video_id(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "v%04zu", index);
  return buf;
}

namespace detail {

inline bool rects_intersect(std::size_t ax1, std::size_t ay1, std::size_t ax2, std::size_t ay2,
                            std::size_t bx1, std::size_t by1, std::size_t bx2, std::size_t by2) {
  return ax1 < bx2 && bx1 < ax2 && ay1 < by2 && by1 < ay2;
}

inline std::array<double, 2> bin_area_range(std::size_t bin, double min_area) {
  const double lo = bin == 0 ? min_area : kSizeBinUpper[bin - 1];
  const double hi = bin < kSizeBinUpper.size() ? kSizeBinUpper[bin] : 0.9;
  return {lo, hi};
}

// Samples one actor rectangle in the requested size bin that keeps every
// glyph inside its own box only.
inline bool place_actor(const SyntheticSpec& spec, std::size_t bin,
                        const std::vector<SyntheticActor>& existing, Rng& rng, SyntheticActor& a) {
  const double fh = static_cast<double>(spec.frame_h), fw = static_cast<double>(spec.frame_w);
  const double min_area = static_cast<double>(spec.min_box_px * spec.min_box_px) / (fh * fw);
  const auto [lo, hi] = bin_area_range(bin, min_area);
  for (int attempt = 0; attempt < 200; ++attempt) {
    const double area = rng.uniform(lo, hi) * fh * fw;
    const double aspect = rng.uniform(1.0, 2.0);  // height / width
    auto w = static_cast<std::size_t>(std::lround(std::sqrt(area / aspect)));
    auto h = static_cast<std::size_t>(std::lround(std::sqrt(area / aspect) * aspect));
    if (h > spec.frame_h) {
      h = spec.frame_h;
      w = static_cast<std::size_t>(std::lround(area / static_cast<double>(h)));
    }
    if (w > spec.frame_w || w < spec.min_box_px || h < spec.min_box_px) continue;
    const Box probe{0, 0, static_cast<double>(w) / fw, static_cast<double>(h) / fh};
    if (static_cast<std::size_t>(size_bin(probe)) != bin) continue;
    a.px1 = rng.below(spec.frame_w - w + 1);
    a.py1 = rng.below(spec.frame_h - h + 1);
    a.px2 = a.px1 + w;
    a.py2 = a.py1 + h;
    const std::size_t mx = w >= spec.glyph_size + 2 ? 1 : 0;
    const std::size_t my = h >= spec.glyph_size + 2 ? 1 : 0;
    a.gx = a.px1 + mx + rng.below(w - spec.glyph_size - 2 * mx + 1);
    a.gy = a.py1 + my + rng.below(h - spec.glyph_size - 2 * my + 1);
    a.box = {static_cast<double>(a.px1) / fw, static_cast<double>(a.py1) / fh,
             static_cast<double>(a.px2) / fw, static_cast<double>(a.py2) / fh};
    bool ok = true;
    for (const SyntheticActor& o : existing) {
      const std::size_t gs = spec.glyph_size;
      if (rects_intersect(a.gx, a.gy, a.gx + gs, a.gy + gs, o.px1, o.py1, o.px2, o.py2) ||
          rects_intersect(o.gx, o.gy, o.gx + gs, o.gy + gs, a.px1, a.py1, a.px2, a.py2) ||
          iou(a.box, o.box) > 0.4) {
        ok = false;
        break;
      }
    }
    if (ok) return true;
  }
  return false;
}

inline std::size_t draw_bin(const std::array<double, 5>& mix, Rng& rng) {
  double total = 0.0;
  for (double w : mix) total += w;
  double u = rng.uniform() * total;
  for (std::size_t b = 0; b < mix.size(); ++b) {
    if (u < mix[b]) return b;
    u -= mix[b];
  }
  for (std::size_t b = mix.size(); b-- > 0;) {
    if (mix[b] > 0) return b;
  }
  return 0;
}

inline double theme_pattern(std::size_t theme, std::size_t y, std::size_t x) {
  switch (theme) {
    case 0: return (y / 4) % 2 ? 1.0 : -1.0;          // horizontal stripes
    case 1: return (x / 4) % 2 ? 1.0 : -1.0;          // vertical stripes
    case 2: return ((x + y) / 4) % 2 ? 1.0 : -1.0;    // diagonal
    default: return ((x / 4) + (y / 4)) % 2 ? 1.0 : -1.0;  // checker
  }
}

}  // namespace detail

// Builds one video deterministically from (spec.seed, index).
inline SyntheticVideo synthesize_video(const SyntheticSpec& spec, std::size_t index,
                                       const std::vector<GlyphTemplate>& templates) {
  Rng rng(derive_seed(spec.seed, index + 1));
  SyntheticVideo v;
  v.video_id = synthetic_video_id(index);
  const std::size_t pattern_theme = rng.below(4);
  v.theme = spec.background_themes > 1 ? pattern_theme % spec.background_themes : 0;
  const std::size_t bg_pattern = spec.background_themes > 1 ? v.theme : pattern_theme;
  const std::size_t h = spec.frame_h, w = spec.frame_w;

  Tensor base({h, w, 3});
  std::array<double, 3> tint{};
  for (double& t : tint) t = rng.uniform(0.3, 0.6);
  const double amp = rng.uniform(0.08, 0.15);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double p = detail::theme_pattern(bg_pattern, y, x);
      for (std::size_t c = 0; c < 3; ++c) base.at(y, x, c) = tint[c] + amp * p;
    }
  }
  // Distractors: small blocks in random colors, some in glyph colors.
  for (std::size_t d = 0; d < spec.distractors; ++d) {
    const std::size_t dw = 2 + rng.below(spec.glyph_size + 3);
    const std::size_t dh = 2 + rng.below(spec.glyph_size + 3);
    const std::size_t x0 = rng.below(w - std::min(dw, w) + 1);
    const std::size_t y0 = rng.below(h - std::min(dh, h) + 1);
    std::array<double, 3> col{};
    const std::uint64_t kind = rng.below(3);
    for (std::size_t c = 0; c < 3; ++c) {
      col[c] = kind == 0 ? kGlyphOn[c] : kind == 1 ? kGlyphOff[c] : rng.uniform(0.0, 1.0);
    }
    for (std::size_t y = y0; y < std::min(h, y0 + dh); ++y) {
      for (std::size_t x = x0; x < std::min(w, x0 + dw); ++x) {
        for (std::size_t c = 0; c < 3; ++c) base.at(y, x, c) = col[c];
      }
    }
  }

  const std::size_t n_actors =
      spec.actors_min + rng.below(spec.actors_max - spec.actors_min + 1);
  for (std::size_t i = 0; i < n_actors; ++i) {
    SyntheticActor a;
    const std::size_t bin = detail::draw_bin(spec.box_size_mix, rng);
    if (!detail::place_actor(spec, bin, v.actors, rng, a)) continue;
    a.glyph_id = rng.below(spec.num_glyphs());
    if (!v.actors.empty() && rng.bernoulli(spec.neighbor_correlation)) {
      a.glyph_id = v.actors.front().glyph_id;
    }
    a.class_id = static_cast<int>(a.glyph_id * spec.background_themes + v.theme);
    v.actors.push_back(a);
  }
  CRCNN_ENFORCE(!v.actors.empty(), "synthetic: could not place any actor in video ", index);

  for (const SyntheticActor& a : v.actors) {
    std::array<double, 3> body{};
    for (double& b : body) b = rng.uniform(0.25, 0.75);
    for (std::size_t y = a.py1; y < a.py2; ++y) {
      for (std::size_t x = a.px1; x < a.px2; ++x) {
        const double tex = rng.uniform(-0.06, 0.06);
        for (std::size_t c = 0; c < 3; ++c) base.at(y, x, c) = body[c] + tex;
      }
    }
  }
  for (const SyntheticActor& a : v.actors) {
    const Tensor g = render_glyph(templates[a.glyph_id], spec.glyph_size);
    for (std::size_t y = 0; y < spec.glyph_size; ++y) {
      for (std::size_t x = 0; x < spec.glyph_size; ++x) {
        for (std::size_t c = 0; c < 3; ++c) base.at(a.gy + y, a.gx + x, c) = g.at(y, x, c);
      }
    }
  }

  const std::size_t n = spec.frames_per_video();
  v.frames = Tensor({n, h, w, 3});
  const std::size_t frame = h * w * 3;
  for (std::size_t f = 0; f < n; ++f) {
    Rng noise(derive_seed(derive_seed(spec.seed, index + 1), f + 1));
    double* dst = v.frames.data() + f * frame;
    for (std::size_t i = 0; i < frame; ++i) {
      dst[i] = std::clamp(base[i] + spec.noise_sigma * noise.normal(), 0.0, 1.0);
    }
  }
  return v;
}

// Proposal: the ground-truth box with jittered edges, IoU >= 0.7 and the same
// size bin.
inline Box jitter_box(const Box& gt, Rng& rng) {
  for (int attempt = 0; attempt < 100; ++attempt) {
    const double sx = 0.06 * gt.width(), sy = 0.06 * gt.height();
    Box b = clip_box({gt.x1 + sx * rng.normal(), gt.y1 + sy * rng.normal(),
                      gt.x2 + sx * rng.normal(), gt.y2 + sy * rng.normal()});
    if (b.valid() && iou(b, gt) >= 0.7 && size_bin(b) == size_bin(gt)) return b;
  }
  return gt;
}

struct SyntheticDataset {
  std::vector<GroundTruth> annotations;
  std::vector<Proposal> proposals;
  nlohmann::json manifest;
};

// Writes manifest.json, annotations.csv, proposals.csv and one container per
// video under videos/.
inline SyntheticDataset generate_synthetic(const SyntheticSpec& spec, const fs::path& out_dir) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(out_dir / "videos", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "videos").string() + ": " + ec.message());
  const auto templates = glyph_templates(spec.num_glyphs(), spec.seed);
  SyntheticDataset ds;
  nlohmann::json videos = nlohmann::json::array();
  for (std::size_t i = 0; i < spec.num_videos; ++i) {
    const SyntheticVideo v = synthesize_video(spec, i, templates);
    const std::string rel = "videos/" + v.video_id + ".crcn";
    tensor_container_write(out_dir / rel, {{"frames", v.frames}});
    Rng prop_rng(derive_seed(derive_seed(spec.seed, i + 1), 0xb0c5));
    for (std::size_t t = 0; t < spec.video_seconds; ++t) {
      for (std::size_t p = 0; p < v.actors.size(); ++p) {
        const SyntheticActor& a = v.actors[p];
        GroundTruth g;
        g.video_id = v.video_id;
        g.timestamp = static_cast<std::int64_t>(t);
        g.box = a.box;
        g.class_ids = {a.class_id};
        g.person_id = static_cast<std::int64_t>(p);
        ds.annotations.push_back(g);
        ds.proposals.push_back({v.video_id, g.timestamp, jitter_box(a.box, prop_rng),
                                prop_rng.uniform(0.7, 1.0)});
      }
    }
    videos.push_back({{"video_id", v.video_id},
                      {"file", rel},
                      {"frames", spec.frames_per_video()},
                      {"theme", v.theme},
                      {"checksum", file_checksum(out_dir / rel)}});
  }
  write_annotations(out_dir / "annotations.csv", ds.annotations);
  write_proposals(out_dir / "proposals.csv", ds.proposals);
  ds.manifest = {{"spec", to_json(spec)},
                 {"videos", videos},
                 {"annotations", "annotations.csv"},
                 {"proposals", "proposals.csv"},
                 {"annotations_checksum", file_checksum(out_dir / "annotations.csv")},
                 {"proposals_checksum", file_checksum(out_dir / "proposals.csv")}};
  detail::write_text(out_dir / "manifest.json", ds.manifest.dump(2) + "\n");
  return ds;
}

}  // namespace crcnn
