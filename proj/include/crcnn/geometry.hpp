#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string_view>

#include "crcnn/error.hpp"
#include "crcnn/tensor.hpp"

namespace crcnn {

// Normalized box on a key frame: x grows rightward, y downward.
struct Box {
  double x1 = 0.0, y1 = 0.0, x2 = 1.0, y2 = 1.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) &&
           std::isfinite(y2) && x1 < x2 && y1 < y2;
  }

  friend bool operator==(const Box&, const Box&) = default;
  friend auto operator<=>(const Box& a, const Box& b) {
    return std::array{a.x1, a.y1, a.x2, a.y2} <=> std::array{b.x1, b.y1, b.x2, b.y2};
  }
};

inline void check_box(const Box& b) {
  CRCNN_ENFORCE(b.valid(), "invalid box (", b.x1, ",", b.y1, ",", b.x2, ",",
                b.y2, "): need x1 < x2 and y1 < y2");
}

inline Box clip_box(const Box& b) {
  auto c = [](double v) { return std::clamp(v, 0.0, 1.0); };
  return {c(b.x1), c(b.y1), c(b.x2), c(b.y2)};
}

// Scales width and height about the center, then clips to the image.
inline Box expand_box(const Box& box, double scale) {
  check_box(box);
  CRCNN_ENFORCE(scale >= 1.0, "expand_box: scale must be >= 1, got ", scale);
  const double hw = 0.5 * box.width() * scale;
  const double hh = 0.5 * box.height() * scale;
  const double cx = box.cx(), cy = box.cy();
  return clip_box({cx - hw, cy - hh, cx + hw, cy + hh});
}

inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

// ---------------------------------------------------------------------------
// Box-size bins, by fraction of image area covered.

enum class SizeBin { kXS = 0, kS, kM, kL, kXL };

inline constexpr std::array<double, 4> kSizeBinUpper = {0.0811, 0.1711, 0.2924, 0.472};
inline constexpr std::array<SizeBin, 5> kAllSizeBins = {
    SizeBin::kXS, SizeBin::kS, SizeBin::kM, SizeBin::kL, SizeBin::kXL};

inline std::string_view size_bin_name(SizeBin b) {
  constexpr std::array<std::string_view, 5> names = {"XS", "S", "M", "L", "XL"};
  return names[static_cast<int>(b)];
}

// Interval labels as printed in result tables.
inline std::string_view size_bin_range(SizeBin b) {
  constexpr std::array<std::string_view, 5> ranges = {
      "(0, 8.11%]", "(8.11%, 17.11%]", "(17.11%, 29.24%]", "(29.24%, 47.2%]",
      "(47.2%, 100.0%]"};
  return ranges[static_cast<int>(b)];
}

// Left-open, right-closed intervals.
inline SizeBin size_bin_of_area(double area) {
  CRCNN_ENFORCE(area > 0.0, "size_bin: zero-area box");
  for (std::size_t i = 0; i < kSizeBinUpper.size(); ++i) {
    if (area <= kSizeBinUpper[i]) return static_cast<SizeBin>(i);
  }
  return SizeBin::kXL;
}

inline SizeBin size_bin(const Box& box) { return size_bin_of_area(box.area()); }

// ---------------------------------------------------------------------------
// Bilinear sampling on [H, W, C] planes (or one frame of a [T, H, W, C] clip).
//
// Coordinates are continuous pixel units with pixel centers at integer + 0.5.
// A sample within one pixel outside the plane snaps to the edge; samples
// further out read zero. Pre-clipped boxes never reach the zero region.

namespace detail {

struct PlaneView {
  const double* data;
  std::size_t h, w, c;
};

inline void bilinear_accumulate(const PlaneView& p, double x, double y,
                                double weight, double* out) {
  double u = x - 0.5;
  double v = y - 0.5;
  const double wd = static_cast<double>(p.w), hd = static_cast<double>(p.h);
  if (u < -1.0 || u > wd || v < -1.0 || v > hd) return;
  u = std::clamp(u, 0.0, wd - 1.0);
  v = std::clamp(v, 0.0, hd - 1.0);
  const auto x0 = static_cast<std::size_t>(u);
  const auto y0 = static_cast<std::size_t>(v);
  const std::size_t x1 = std::min(x0 + 1, p.w - 1);
  const std::size_t y1 = std::min(y0 + 1, p.h - 1);
  const double fx = u - static_cast<double>(x0);
  const double fy = v - static_cast<double>(y0);
  const double w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx;
  const double w10 = fy * (1 - fx), w11 = fy * fx;
  const double* r00 = p.data + (y0 * p.w + x0) * p.c;
  const double* r01 = p.data + (y0 * p.w + x1) * p.c;
  const double* r10 = p.data + (y1 * p.w + x0) * p.c;
  const double* r11 = p.data + (y1 * p.w + x1) * p.c;
  for (std::size_t ch = 0; ch < p.c; ++ch) {
    out[ch] += weight * (w00 * r00[ch] + w01 * r01[ch] + w10 * r10[ch] + w11 * r11[ch]);
  }
}

// RoIAlign over one plane, writing out_h*out_w*c values.
inline void roi_align_plane(const PlaneView& p, const Box& box, std::size_t out_h,
                            std::size_t out_w, std::size_t sampling_ratio,
                            double* out) {
  const double bx = box.x1 * static_cast<double>(p.w);
  const double by = box.y1 * static_cast<double>(p.h);
  const double bin_w = box.width() * static_cast<double>(p.w) / static_cast<double>(out_w);
  const double bin_h = box.height() * static_cast<double>(p.h) / static_cast<double>(out_h);
  const double sr = static_cast<double>(sampling_ratio);
  const double weight = 1.0 / (sr * sr);
  for (std::size_t i = 0; i < out_h; ++i) {
    for (std::size_t j = 0; j < out_w; ++j) {
      double* cell = out + (i * out_w + j) * p.c;
      for (std::size_t si = 0; si < sampling_ratio; ++si) {
        const double y = by + static_cast<double>(i) * bin_h +
                         (static_cast<double>(si) + 0.5) * bin_h / sr;
        for (std::size_t sj = 0; sj < sampling_ratio; ++sj) {
          const double x = bx + static_cast<double>(j) * bin_w +
                           (static_cast<double>(sj) + 0.5) * bin_w / sr;
          bilinear_accumulate(p, x, y, weight, cell);
        }
      }
    }
  }
}

}  // namespace detail

// Crops the replicated box from every frame and resamples it onto an
// out_h x out_w grid of cell centers.
inline Tensor crop_resize_clip(const Tensor& clip, const Box& box, std::size_t out_h,
                               std::size_t out_w) {
  CRCNN_ENFORCE(clip.rank() == 4, "crop_resize_clip: clip must be [T,H,W,C], got ",
                shape_str(clip.shape()));
  CRCNN_ENFORCE(out_h >= 1 && out_w >= 1, "crop_resize_clip: output extents must be >= 1");
  check_box(box);
  const Box b = clip_box(box);
  const std::size_t t = clip.dim(0), h = clip.dim(1), w = clip.dim(2), c = clip.dim(3);
  const double src_w = b.width() * static_cast<double>(w);
  const double src_h = b.height() * static_cast<double>(h);
  CRCNN_ENFORCE(src_w >= 1.0 && src_h >= 1.0,
                "crop_resize_clip: box covers ", src_w, "x", src_h,
                " source pixels after clipping; need at least 1x1");
  Tensor out({t, out_h, out_w, c});
  const std::size_t in_frame = h * w * c, out_frame = out_h * out_w * c;
  for (std::size_t f = 0; f < t; ++f) {
    detail::roi_align_plane({clip.data() + f * in_frame, h, w, c}, b, out_h, out_w, 1,
                            out.data() + f * out_frame);
  }
  return out;
}

// RoIAlign: each output cell averages sampling_ratio^2 bilinear samples on a
// regular sub-grid of its bin. No coordinate quantization.
inline Tensor roi_align(const Tensor& featmap, const Box& box, std::size_t out_h,
                        std::size_t out_w, std::size_t sampling_ratio) {
  CRCNN_ENFORCE(featmap.rank() == 3, "roi_align: feature map must be [H,W,C], got ",
                shape_str(featmap.shape()));
  CRCNN_ENFORCE(out_h >= 1 && out_w >= 1 && sampling_ratio >= 1,
                "roi_align: output extents and sampling ratio must be >= 1");
  check_box(box);
  Tensor out({out_h, out_w, featmap.dim(2)});
  detail::roi_align_plane({featmap.data(), featmap.dim(0), featmap.dim(1), featmap.dim(2)},
                          box, out_h, out_w, sampling_ratio, out.data());
  return out;
}

// Mean over time, RoIAlign, then per-channel spatial max.
inline Tensor roi_pool_3d(const Tensor& featmap, const Box& box, std::size_t roi_h = 7,
                          std::size_t roi_w = 7, std::size_t sampling_ratio = 2) {
  CRCNN_ENFORCE(featmap.rank() == 4, "roi_pool_3d: feature map must be [T,H,W,C], got ",
                shape_str(featmap.shape()));
  const std::size_t t = featmap.dim(0), h = featmap.dim(1), w = featmap.dim(2),
                    c = featmap.dim(3);
  Tensor mean({h, w, c});
  const std::size_t frame = h * w * c;
  for (std::size_t f = 0; f < t; ++f) {
    const double* src = featmap.data() + f * frame;
    for (std::size_t i = 0; i < frame; ++i) mean[i] += src[i];
  }
  const double inv = 1.0 / static_cast<double>(t);
  for (double& v : mean.values()) v *= inv;

  const Tensor pooled = roi_align(mean, box, roi_h, roi_w, sampling_ratio);
  Tensor out({c}, -INFINITY);
  for (std::size_t p = 0; p < roi_h * roi_w; ++p) {
    for (std::size_t j = 0; j < c; ++j) out[j] = std::max(out[j], pooled[p * c + j]);
  }
  return out;
}

}  // namespace crcnn
