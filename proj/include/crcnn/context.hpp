#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "crcnn/error.hpp"
#include "crcnn/rng.hpp"
#include "crcnn/tensor.hpp"

namespace crcnn {

struct BankEntry {
  std::int64_t person_id = 0;
  Tensor feature;

  friend bool operator==(const BankEntry&, const BankEntry&) = default;
};

// Per-actor features keyed by (video_id, timestamp in seconds). Entries
// within a key stay sorted by person_id.
class FeatureBank {
 public:
  using Key = std::pair<std::string, std::int64_t>;

  void add(const std::string& video_id, std::int64_t timestamp, std::int64_t person_id,
           Tensor feature) {
    CRCNN_ENFORCE(feature.rank() == 1, "bank features must be vectors, got ",
                  shape_str(feature.shape()));
    if (dim_) {
      CRCNN_ENFORCE(feature.dim(0) == *dim_, "bank feature dimension ", feature.dim(0),
                    " differs from stored dimension ", *dim_);
    } else {
      dim_ = feature.dim(0);
    }
    auto& list = entries_[{video_id, timestamp}];
    auto it = std::lower_bound(list.begin(), list.end(), person_id,
                               [](const BankEntry& e, std::int64_t p) { return e.person_id < p; });
    CRCNN_ENFORCE(it == list.end() || it->person_id != person_id, "duplicate bank entry for ",
                  video_id, "@", timestamp, " person ", person_id);
    list.insert(it, BankEntry{person_id, std::move(feature)});
    ++count_;
  }

  const std::map<Key, std::vector<BankEntry>>& entries() const { return entries_; }
  std::size_t size() const { return count_; }
  bool empty() const { return count_ == 0; }
  std::optional<std::size_t> dim() const { return dim_; }

  friend bool operator==(const FeatureBank& a, const FeatureBank& b) {
    return a.entries_ == b.entries_;
  }

 private:
  std::map<Key, std::vector<BankEntry>> entries_;
  std::optional<std::size_t> dim_;
  std::size_t count_ = 0;
};

// All features with timestamp in [t - w/2, t + w/2], ordered by
// (timestamp, person_id). A missing video yields an empty list.
inline std::vector<Tensor> window_features(const FeatureBank& bank, const std::string& video_id,
                                           std::int64_t t, std::int64_t window_seconds = 61) {
  CRCNN_ENFORCE(window_seconds >= 1 && window_seconds % 2 == 1,
                "window_seconds must be a positive odd integer, got ", window_seconds);
  const std::int64_t half = window_seconds / 2;
  std::vector<Tensor> out;
  const auto& e = bank.entries();
  for (auto it = e.lower_bound({video_id, t - half});
       it != e.end() && it->first.first == video_id && it->first.second <= t + half; ++it) {
    for (const BankEntry& entry : it->second) out.push_back(entry.feature);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Long-term feature operator

struct Linear {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]

  Tensor operator()(const Tensor& x) const { return affine(weight, bias, x); }
  std::size_t in_dim() const { return weight.dim(1); }
  std::size_t out_dim() const { return weight.dim(0); }
};

inline Linear init_linear(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = std::sqrt(3.0 / static_cast<double>(in));
  Linear l{Tensor({out, in}), Tensor({out})};
  for (double& v : l.weight.values()) v = rng.uniform(-bound, bound);
  return l;
}

inline constexpr std::size_t kLongTermDim = 512;
inline constexpr std::size_t kLfbBlocks = 3;

struct LfbParams {
  Linear reduce_actor;   // C -> 512
  Linear reduce_bank;    // C -> 512
  std::vector<Linear> block_maps;  // 3 x (512 -> 512)
  double dropout_rate = 0.0;
  std::int64_t window_seconds = 61;

  void validate() const {
    CRCNN_ENFORCE(block_maps.size() == kLfbBlocks, "LFB needs exactly ", kLfbBlocks,
                  " blocks, got ", block_maps.size());
    CRCNN_ENFORCE(window_seconds >= 1 && window_seconds % 2 == 1,
                  "window_seconds must be odd, got ", window_seconds);
    CRCNN_ENFORCE(dropout_rate >= 0.0 && dropout_rate < 1.0, "dropout_rate must be in [0,1)");
    CRCNN_ENFORCE(reduce_actor.in_dim() == reduce_bank.in_dim(),
                  "actor and bank reductions must share an input dimension");
  }
};

inline LfbParams init_lfb(std::size_t feature_dim, std::uint64_t seed, double dropout_rate = 0.0,
                          std::int64_t window_seconds = 61,
                          std::size_t reduced_dim = kLongTermDim) {
  Rng rng(derive_seed(seed, 0x1fb));
  LfbParams p;
  p.reduce_actor = init_linear(feature_dim, reduced_dim, rng);
  p.reduce_bank = init_linear(feature_dim, reduced_dim, rng);
  for (std::size_t b = 0; b < kLfbBlocks; ++b) {
    p.block_maps.push_back(init_linear(reduced_dim, reduced_dim, rng));
  }
  p.dropout_rate = dropout_rate;
  p.window_seconds = window_seconds;
  p.validate();
  return p;
}

// Simplified LFB block: attention replaced by a plain mean over the bank and
// no output projection. out_i = short_i + ReLU(LayerNorm(mean_j g(bank_j))).
// An empty bank leaves the short-term features untouched.
inline std::vector<Tensor> simplified_lfb_block(const std::vector<Tensor>& short_feats,
                                                const std::vector<Tensor>& bank_reduced,
                                                const Linear& g) {
  if (bank_reduced.empty()) return short_feats;
  Tensor m({g.out_dim()});
  for (const Tensor& entry : bank_reduced) {
    const Tensor ge = g(entry);
    for (std::size_t k = 0; k < m.size(); ++k) m[k] += ge[k];
  }
  const double inv = 1.0 / static_cast<double>(bank_reduced.size());
  for (double& v : m.values()) v *= inv;
  const Tensor summary = relu(layer_norm(m));
  std::vector<Tensor> out;
  out.reserve(short_feats.size());
  for (const Tensor& s : short_feats) out.push_back(add(s, summary));
  return out;
}

namespace detail {

inline Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  const double keep = 1.0 / (1.0 - rate);
  Tensor out = x;
  for (double& v : out.values()) v = rng.bernoulli(rate) ? 0.0 : v * keep;
  return out;
}

}  // namespace detail

// One 512-d long-term feature per actor. Pass an Rng to run in training mode
// (dropout after each reduction); without one the call is deterministic.
inline std::vector<Tensor> long_term_feature(const LfbParams& params,
                                             const std::vector<Tensor>& actor_feats,
                                             const FeatureBank& bank, const std::string& video_id,
                                             std::int64_t t, Rng* train_rng = nullptr) {
  params.validate();
  CRCNN_ENFORCE(!actor_feats.empty(), "long_term_feature: no actor features");
  const double rate = train_rng ? params.dropout_rate : 0.0;
  std::vector<Tensor> shortf;
  for (const Tensor& a : actor_feats) {
    Tensor r = params.reduce_actor(a);
    if (train_rng) r = detail::dropout(r, rate, *train_rng);
    shortf.push_back(std::move(r));
  }
  std::vector<Tensor> reduced;
  for (const Tensor& f : window_features(bank, video_id, t, params.window_seconds)) {
    Tensor r = params.reduce_bank(f);
    if (train_rng) r = detail::dropout(r, rate, *train_rng);
    reduced.push_back(std::move(r));
  }
  for (const Linear& g : params.block_maps) shortf = simplified_lfb_block(shortf, reduced, g);
  return shortf;
}

inline NamedTensors lfb_to_tensors(const LfbParams& p) {
  NamedTensors out;
  out.emplace_back("lfb.reduce_actor.weight", p.reduce_actor.weight);
  out.emplace_back("lfb.reduce_actor.bias", p.reduce_actor.bias);
  out.emplace_back("lfb.reduce_bank.weight", p.reduce_bank.weight);
  out.emplace_back("lfb.reduce_bank.bias", p.reduce_bank.bias);
  for (std::size_t b = 0; b < p.block_maps.size(); ++b) {
    const std::string n = "lfb.block" + std::to_string(b);
    out.emplace_back(n + ".weight", p.block_maps[b].weight);
    out.emplace_back(n + ".bias", p.block_maps[b].bias);
  }
  out.emplace_back("lfb.settings", Tensor::vector({p.dropout_rate,
                                                   static_cast<double>(p.window_seconds)}));
  return out;
}

inline LfbParams lfb_from_tensors(const NamedTensors& named) {
  LfbParams p;
  p.reduce_actor = {find_tensor(named, "lfb.reduce_actor.weight"),
                    find_tensor(named, "lfb.reduce_actor.bias")};
  p.reduce_bank = {find_tensor(named, "lfb.reduce_bank.weight"),
                   find_tensor(named, "lfb.reduce_bank.bias")};
  for (std::size_t b = 0; b < kLfbBlocks; ++b) {
    const std::string n = "lfb.block" + std::to_string(b);
    p.block_maps.push_back({find_tensor(named, n + ".weight"), find_tensor(named, n + ".bias")});
  }
  const Tensor& s = find_tensor(named, "lfb.settings");
  CRCNN_ENFORCE(s.size() == 2, "bad lfb.settings");
  p.dropout_rate = s[0];
  p.window_seconds = static_cast<std::int64_t>(s[1]);
  p.validate();
  return p;
}

}  // namespace crcnn
