#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "crcnn/error.hpp"
#include "crcnn/geometry.hpp"

namespace crcnn {

struct Detection {
  std::string video_id;
  std::int64_t timestamp = 0;
  Box box;
  int class_id = 0;
  double score = 0.0;

  friend bool operator==(const Detection&, const Detection&) = default;
};

struct GroundTruth {
  std::string video_id;
  std::int64_t timestamp = 0;
  Box box;
  std::set<int> class_ids;
  std::int64_t person_id = 0;

  friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

struct MatchResult {
  Detection det;
  bool true_positive = false;
};

inline constexpr double kIouThreshold = 0.5;

// Descending score; ties by box coordinates.
inline bool detection_order(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.box < b.box;
}

// Greedy single-frame matching for one class. Each detection, in descending
// score order, takes the unmatched ground truth of that class with the best
// IoU and is a true positive when that IoU reaches the threshold.
inline std::vector<MatchResult> match_frame(const std::vector<Detection>& dets,
                                            const std::vector<GroundTruth>& gts, int class_id,
                                            double iou_thr = kIouThreshold) {
  std::vector<Detection> cls;
  for (const Detection& d : dets) {
    if (d.class_id == class_id) cls.push_back(d);
  }
  std::sort(cls.begin(), cls.end(), detection_order);
  std::vector<const GroundTruth*> pool;
  for (const GroundTruth& g : gts) {
    if (g.class_ids.count(class_id)) pool.push_back(&g);
  }
  std::vector<bool> used(pool.size(), false);
  std::vector<MatchResult> out;
  out.reserve(cls.size());
  for (const Detection& d : cls) {
    double best = -1.0;
    std::size_t best_i = pool.size();
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (used[i]) continue;
      const double o = iou(d.box, pool[i]->box);
      if (o > best) {
        best = o;
        best_i = i;
      }
    }
    const bool tp = best_i < pool.size() && best >= iou_thr;
    if (tp) used[best_i] = true;
    out.push_back({d, tp});
  }
  return out;
}

struct ScoredMatch {
  double score = 0.0;
  bool true_positive = false;
};

// All-points interpolated AP: area under the monotone precision envelope.
inline double average_precision(std::vector<ScoredMatch> matches, std::size_t num_gt) {
  CRCNN_ENFORCE(num_gt > 0, "average_precision: class has no ground truth");
  std::stable_sort(matches.begin(), matches.end(),
                   [](const ScoredMatch& a, const ScoredMatch& b) { return a.score > b.score; });
  const std::size_t n = matches.size();
  std::vector<double> precision(n), recall(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (matches[i].true_positive) ++tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(num_gt);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (recall[i] > prev_recall) {
      ap += (recall[i] - prev_recall) * precision[i];
      prev_recall = recall[i];
    }
  }
  return ap;
}

struct MapResult {
  double map = 0.0;
  std::map<int, double> per_class;
  std::map<int, std::size_t> num_gt;
};

namespace detail {

using FrameKey = std::pair<std::string, std::int64_t>;

struct Frame {
  std::vector<Detection> dets;
  std::vector<GroundTruth> gts;
};

inline std::map<FrameKey, Frame> group_frames(const std::vector<Detection>& dets,
                                              const std::vector<GroundTruth>& gts) {
  std::map<FrameKey, Frame> frames;
  for (const Detection& d : dets) frames[{d.video_id, d.timestamp}].dets.push_back(d);
  for (const GroundTruth& g : gts) frames[{g.video_id, g.timestamp}].gts.push_back(g);
  return frames;
}

}  // namespace detail

// Mean AP over the requested classes that have at least one ground truth.
// With no classes requested, every class seen in the ground truth is used.
inline MapResult frame_map(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                           std::vector<int> class_ids = {}, double iou_thr = kIouThreshold) {
  std::map<int, std::size_t> counts;
  for (const GroundTruth& g : gts) {
    for (int c : g.class_ids) ++counts[c];
  }
  if (class_ids.empty()) {
    for (const auto& [c, n] : counts) class_ids.push_back(c);
  }
  std::sort(class_ids.begin(), class_ids.end());
  class_ids.erase(std::unique(class_ids.begin(), class_ids.end()), class_ids.end());

  const auto frames = detail::group_frames(dets, gts);
  MapResult result;
  for (int c : class_ids) {
    const auto it = counts.find(c);
    if (it == counts.end()) continue;
    std::vector<ScoredMatch> matches;
    for (const auto& [key, frame] : frames) {
      for (const MatchResult& m : match_frame(frame.dets, frame.gts, c, iou_thr)) {
        matches.push_back({m.det.score, m.true_positive});
      }
    }
    result.per_class[c] = average_precision(std::move(matches), it->second);
    result.num_gt[c] = it->second;
  }
  CRCNN_ENFORCE(!result.per_class.empty(), "frame_map: no evaluated class has ground truth");
  double sum = 0.0;
  for (const auto& [c, ap] : result.per_class) sum += ap;
  result.map = sum / static_cast<double>(result.per_class.size());
  return result;
}

// ---------------------------------------------------------------------------
// Binned breakdowns

enum class Binning { kSize, kCount };

struct CountBin {
  int lo, hi;
};

// Actor-count bins: ground-truth boxes per key frame.
inline constexpr std::array<CountBin, 6> kCountBins = {
    CountBin{1, 1}, CountBin{2, 3}, CountBin{4, 5}, CountBin{6, 7}, CountBin{8, 9},
    CountBin{10, 37}};

struct BinResult {
  std::string label;
  std::string range;
  std::size_t num_gt = 0;
  std::size_t num_det = 0;
  std::optional<MapResult> result;  // empty when the bin has no ground truth
};

struct BinnedMap {
  std::vector<BinResult> bins;
  std::size_t warnings = 0;
};

// Index of the count bin for a frame with n >= 1 ground-truth boxes; counts
// past the last bin land in it and set *overflow.
inline std::size_t count_bin_index(std::size_t n, bool* overflow = nullptr) {
  if (overflow) *overflow = false;
  for (std::size_t i = 0; i < kCountBins.size(); ++i) {
    if (static_cast<int>(n) >= kCountBins[i].lo && static_cast<int>(n) <= kCountBins[i].hi) {
      return i;
    }
  }
  if (overflow) *overflow = true;
  return kCountBins.size() - 1;
}

// Splits detections and ground truths into bins and evaluates each bin on
// its own. Size bins use each box's own area; count bins use the number of
// ground-truth boxes in the box's key frame. Detections in frames without
// ground truth have no count bin and are dropped.
inline BinnedMap binned_map(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                            Binning binning, const std::vector<int>& class_ids = {},
                            double iou_thr = kIouThreshold) {
  const std::size_t nbins = binning == Binning::kSize ? kAllSizeBins.size() : kCountBins.size();
  std::vector<std::vector<Detection>> bin_dets(nbins);
  std::vector<std::vector<GroundTruth>> bin_gts(nbins);
  BinnedMap out;

  if (binning == Binning::kSize) {
    for (const Detection& d : dets) bin_dets[static_cast<std::size_t>(size_bin(d.box))].push_back(d);
    for (const GroundTruth& g : gts) bin_gts[static_cast<std::size_t>(size_bin(g.box))].push_back(g);
  } else {
    for (const auto& [key, frame] : detail::group_frames(dets, gts)) {
      if (frame.gts.empty()) continue;
      bool overflow = false;
      const std::size_t b = count_bin_index(frame.gts.size(), &overflow);
      if (overflow) ++out.warnings;
      bin_dets[b].insert(bin_dets[b].end(), frame.dets.begin(), frame.dets.end());
      bin_gts[b].insert(bin_gts[b].end(), frame.gts.begin(), frame.gts.end());
    }
  }

  for (std::size_t b = 0; b < nbins; ++b) {
    BinResult r;
    if (binning == Binning::kSize) {
      r.label = std::string(size_bin_name(static_cast<SizeBin>(b)));
      r.range = std::string(size_bin_range(static_cast<SizeBin>(b)));
    } else {
      r.label = "[" + std::to_string(kCountBins[b].lo) + "," + std::to_string(kCountBins[b].hi) + "]";
      r.range = r.label;
    }
    r.num_gt = bin_gts[b].size();
    r.num_det = bin_dets[b].size();
    bool has_class = false;
    for (const GroundTruth& g : bin_gts[b]) {
      for (int c : g.class_ids) {
        if (class_ids.empty() || std::find(class_ids.begin(), class_ids.end(), c) != class_ids.end()) {
          has_class = true;
        }
      }
    }
    if (has_class) r.result = frame_map(bin_dets[b], bin_gts[b], class_ids, iou_thr);
    out.bins.push_back(std::move(r));
  }
  return out;
}

}  // namespace crcnn
