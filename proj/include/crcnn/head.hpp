#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "crcnn/error.hpp"
#include "crcnn/rng.hpp"
#include "crcnn/tensor.hpp"

namespace crcnn {

enum class LabelMode { kMultiLabel, kSingleLabel };

// Segment widths of the fused vector; zero marks an absent segment.
struct FusionLayout {
  std::size_t actor = 0;
  std::size_t scene = 0;
  std::size_t longterm = 0;

  std::size_t total() const { return actor + scene + longterm; }
  friend bool operator==(const FusionLayout&, const FusionLayout&) = default;
};

// Concatenation in fixed (actor, scene, longterm) order; absent parts skipped.
inline Tensor fuse(const Tensor& actor, const std::optional<Tensor>& scene,
                   const std::optional<Tensor>& longterm, const FusionLayout& layout) {
  auto check = [](const char* what, const std::optional<Tensor>& t, std::size_t want) {
    if (want == 0) {
      CRCNN_ENFORCE(!t, "fuse: ", what, " feature given but not configured");
      return;
    }
    CRCNN_ENFORCE(t.has_value(), "fuse: ", what, " feature configured but missing");
    CRCNN_ENFORCE(t->rank() == 1 && t->dim(0) == want, "fuse: ", what, " feature has shape ",
                  shape_str(t->shape()), ", configured dimension is ", want);
  };
  CRCNN_ENFORCE(layout.actor > 0, "fuse: the actor feature is required");
  check("actor", std::optional<Tensor>(actor), layout.actor);
  check("scene", scene, layout.scene);
  check("long-term", longterm, layout.longterm);
  std::vector<Tensor> parts{actor};
  if (scene) parts.push_back(*scene);
  if (longterm) parts.push_back(*longterm);
  return concat(parts);
}

struct ClassifierParams {
  Tensor weights;  // [num_classes, fused_dim]
  Tensor bias;     // [num_classes]
  LabelMode mode = LabelMode::kMultiLabel;

  std::size_t num_classes() const { return weights.dim(0); }
  std::size_t input_dim() const { return weights.dim(1); }

  static ClassifierParams zeros(std::size_t num_classes, std::size_t dim, LabelMode mode) {
    return {Tensor({num_classes, dim}), Tensor({num_classes}), mode};
  }
};

inline Tensor logits(const ClassifierParams& p, const Tensor& fused) {
  CRCNN_ENFORCE(fused.rank() == 1 && fused.dim(0) == p.input_dim(), "classifier expects a ",
                p.input_dim(), "-d input, got ", shape_str(fused.shape()));
  return affine(p.weights, p.bias, fused);
}

// Per-class sigmoid (multi-label) or softmax (single-label) scores.
inline Tensor classify(const ClassifierParams& p, const Tensor& fused) {
  const Tensor z = logits(p, fused);
  return p.mode == LabelMode::kMultiLabel ? sigmoid(z) : softmax(z);
}

struct LossAndGrad {
  double loss = 0.0;
  ClassifierParams grad;
};

namespace detail {

inline double softplus(double z) {
  return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

inline std::vector<double> label_targets(const std::vector<int>& labels, std::size_t k,
                                         LabelMode mode) {
  std::vector<double> y(k, 0.0);
  for (int l : labels) {
    CRCNN_ENFORCE(l >= 0 && static_cast<std::size_t>(l) < k, "label ", l,
                  " out of range for ", k, " classes");
    y[static_cast<std::size_t>(l)] = 1.0;
  }
  if (mode == LabelMode::kSingleLabel) {
    CRCNN_ENFORCE(labels.size() == 1, "single-label mode needs exactly one label, got ",
                  labels.size());
  }
  return y;
}

}  // namespace detail

// Multi-label: mean over classes of binary cross-entropy. Single-label:
// softmax cross-entropy. Gradients are analytic.
inline LossAndGrad loss_and_grad(const ClassifierParams& p, const Tensor& fused,
                                 const std::vector<int>& labels) {
  const std::size_t k = p.num_classes(), d = p.input_dim();
  const std::vector<double> y = detail::label_targets(labels, k, p.mode);
  const Tensor z = logits(p, fused);
  LossAndGrad out{0.0, ClassifierParams::zeros(k, d, p.mode)};
  std::vector<double> dz(k);
  if (p.mode == LabelMode::kMultiLabel) {
    const double inv_k = 1.0 / static_cast<double>(k);
    for (std::size_t c = 0; c < k; ++c) {
      out.loss += (detail::softplus(z[c]) - y[c] * z[c]) * inv_k;
      dz[c] = (sigmoid(z[c]) - y[c]) * inv_k;
    }
  } else {
    const Tensor prob = softmax(z);
    double mx = -INFINITY;
    for (double v : z.values()) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : z.values()) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t c = 0; c < k; ++c) {
      out.loss += y[c] * (lse - z[c]);
      dz[c] = prob[c] - y[c];
    }
  }
  for (std::size_t c = 0; c < k; ++c) {
    out.grad.bias[c] = dz[c];
    double* row = out.grad.weights.data() + c * d;
    for (std::size_t j = 0; j < d; ++j) row[j] = dz[c] * fused[j];
  }
  return out;
}

struct TrainHyper {
  double lr = 0.1;
  std::size_t iters = 500;
  double weight_decay = 1e-6;
  double dropout = 0.3;
  std::uint64_t seed = 0;
  std::size_t batch_size = 16;
  double momentum = 0.9;
  // Optional schedule: linear warmup, then step decay at the listed iterations.
  std::size_t warmup_iters = 0;
  std::vector<std::size_t> decay_at;
  double decay_factor = 0.1;

  double lr_at(std::size_t it) const {
    double r = lr;
    for (std::size_t s : decay_at) {
      if (it >= s) r *= decay_factor;
    }
    if (warmup_iters > 0 && it < warmup_iters) {
      r *= static_cast<double>(it + 1) / static_cast<double>(warmup_iters);
    }
    return r;
  }
};

struct TrainSample {
  Tensor fused;
  std::vector<int> labels;
};

// Mini-batch SGD with momentum from zero-initialized parameters. Dropout is
// applied to the fused input; weight decay acts on weights, not biases. The
// visit order is a seeded per-epoch shuffle, so results are deterministic.
inline ClassifierParams train_classifier(const std::vector<TrainSample>& data,
                                         std::size_t num_classes, LabelMode mode,
                                         const TrainHyper& hyper) {
  CRCNN_ENFORCE(!data.empty(), "train_classifier: empty dataset");
  CRCNN_ENFORCE(hyper.batch_size >= 1, "train_classifier: batch_size must be >= 1");
  CRCNN_ENFORCE(hyper.dropout >= 0.0 && hyper.dropout < 1.0, "dropout must be in [0,1)");
  const std::size_t d = data.front().fused.size();
  for (const auto& s : data) {
    CRCNN_ENFORCE(s.fused.rank() == 1 && s.fused.dim(0) == d,
                  "train_classifier: inconsistent feature dimension");
  }
  ClassifierParams p = ClassifierParams::zeros(num_classes, d, mode);
  Tensor vel_w({num_classes, d}), vel_b({num_classes});
  Rng rng(derive_seed(hyper.seed, 0x7a1));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const double keep = 1.0 / (1.0 - hyper.dropout);

  for (std::size_t it = 0; it < hyper.iters; ++it) {
    Tensor gw({num_classes, d}), gb({num_classes});
    for (std::size_t b = 0; b < hyper.batch_size; ++b) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) {
          std::swap(order[i - 1], order[rng.below(i)]);
        }
        cursor = 0;
      }
      const TrainSample& s = data[order[cursor++]];
      Tensor x = s.fused;
      if (hyper.dropout > 0.0) {
        for (double& v : x.values()) v = rng.bernoulli(hyper.dropout) ? 0.0 : v * keep;
      }
      const LossAndGrad lg = loss_and_grad(p, x, s.labels);
      for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += lg.grad.weights[i];
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += lg.grad.bias[i];
    }
    const double inv_b = 1.0 / static_cast<double>(hyper.batch_size);
    const double lr = hyper.lr_at(it);
    for (std::size_t i = 0; i < gw.size(); ++i) {
      vel_w[i] = hyper.momentum * vel_w[i] + gw[i] * inv_b + hyper.weight_decay * p.weights[i];
      p.weights[i] -= lr * vel_w[i];
    }
    for (std::size_t i = 0; i < gb.size(); ++i) {
      vel_b[i] = hyper.momentum * vel_b[i] + gb[i] * inv_b;
      p.bias[i] -= lr * vel_b[i];
    }
  }
  return p;
}

// Per-dimension standardization fitted on training features.
struct FeatureNormalizer {
  Tensor mean;
  Tensor inv_std;

  static FeatureNormalizer fit(const std::vector<Tensor>& feats) {
    CRCNN_ENFORCE(!feats.empty(), "FeatureNormalizer::fit: no features");
    const std::size_t d = feats.front().size();
    FeatureNormalizer n{Tensor({d}), Tensor({d}, 1.0)};
    for (const Tensor& f : feats) {
      for (std::size_t j = 0; j < d; ++j) n.mean[j] += f[j];
    }
    const double inv = 1.0 / static_cast<double>(feats.size());
    for (double& v : n.mean.values()) v *= inv;
    Tensor var({d});
    for (const Tensor& f : feats) {
      for (std::size_t j = 0; j < d; ++j) var[j] += (f[j] - n.mean[j]) * (f[j] - n.mean[j]);
    }
    for (std::size_t j = 0; j < d; ++j) n.inv_std[j] = 1.0 / std::sqrt(var[j] * inv + 1e-8);
    return n;
  }

  Tensor apply(const Tensor& x) const {
    CRCNN_ENFORCE(x.size() == mean.size(), "normalizer expects ", mean.size(), "-d input, got ",
                  x.size());
    Tensor out = x;
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = (out[j] - mean[j]) * inv_std[j];
    return out;
  }
};

}  // namespace crcnn
