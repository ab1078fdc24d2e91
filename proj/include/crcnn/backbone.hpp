#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "crcnn/error.hpp"
#include "crcnn/geometry.hpp"
#include "crcnn/rng.hpp"
#include "crcnn/tensor.hpp"

namespace crcnn {

// Toy inflated 3D ConvNet. Each stage is conv -> frozen BN -> ReLU; the
// temporal strides multiply to 2 and the spatial strides to 16, with the last
// stage kept at spatial stride 1 and dilated instead.
struct BackboneConfig {
  std::vector<std::size_t> stage_channels{8, 16, 32, 64};
  std::vector<std::size_t> spatial_strides{4, 2, 2, 1};
  std::vector<std::size_t> temporal_strides{1, 2, 1, 1};
  // [kt, kh, kw] per stage.
  std::vector<Triple> stage_kernels{{3, 5, 5}, {3, 3, 3}, {3, 3, 3}, {1, 3, 3}};
  std::size_t final_dilation = 2;
  std::size_t nonlocal_stage = 2;
  std::uint64_t seed = 0;
  // Subtracted from every input value before the first convolution.
  double input_mean = 0.5;

  std::size_t final_channels() const { return stage_channels.back(); }
  std::size_t num_stages() const { return stage_channels.size(); }

  std::size_t spatial_stride_product() const {
    std::size_t p = 1;
    for (auto s : spatial_strides) p *= s;
    return p;
  }
  std::size_t temporal_stride_product() const {
    std::size_t p = 1;
    for (auto s : temporal_strides) p *= s;
    return p;
  }

  void validate() const {
    const std::size_t n = num_stages();
    CRCNN_ENFORCE(n >= 1, "backbone needs at least one stage");
    CRCNN_ENFORCE(spatial_strides.size() == n && temporal_strides.size() == n &&
                      stage_kernels.size() == n,
                  "backbone: per-stage lists must all have ", n, " entries");
    CRCNN_ENFORCE(spatial_stride_product() == 16,
                  "backbone: spatial strides must multiply to 16, got ",
                  spatial_stride_product());
    CRCNN_ENFORCE(temporal_stride_product() == 2,
                  "backbone: temporal strides must multiply to 2, got ",
                  temporal_stride_product());
    CRCNN_ENFORCE(spatial_strides.back() == 1,
                  "backbone: final stage must use spatial stride 1");
    CRCNN_ENFORCE(nonlocal_stage < n, "backbone: nonlocal_stage ", nonlocal_stage,
                  " out of range");
    CRCNN_ENFORCE(final_dilation >= 1, "backbone: dilation must be >= 1");
    for (std::size_t c : stage_channels) CRCNN_ENFORCE(c >= 2, "stage width must be >= 2");
    for (const Triple& k : stage_kernels) {
      CRCNN_ENFORCE(k[0] >= 1 && k[1] >= 1 && k[2] >= 1, "kernel extents must be >= 1");
    }
  }
};

struct ConvStage {
  Tensor kernel;  // [kt, kh, kw, Cin, Cout]
  Tensor bn_scale;
  Tensor bn_shift;
  Triple stride{1, 1, 1};
  Triple dilation{1, 1, 1};
};

// Embedded-Gaussian non-local block. theta/phi/g project C -> C/2; out
// projects back C/2 -> C and feeds a residual connection.
struct NonLocalWeights {
  Tensor theta;  // [C, d]
  Tensor phi;    // [C, d]
  Tensor g;      // [C, d]
  Tensor out;    // [d, C]
};

struct BackboneWeights {
  BackboneConfig config;
  std::vector<ConvStage> stages;
  NonLocalWeights nonlocal;

  // FNV-1a over every parameter bit pattern.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const Tensor& t) {
      for (double v : t.values()) {
        auto bits = std::bit_cast<std::uint64_t>(v);
        for (int i = 0; i < 8; ++i) {
          h ^= (bits >> (8 * i)) & 0xffu;
          h *= 0x100000001b3ULL;
        }
      }
    };
    for (const auto& s : stages) {
      feed(s.kernel);
      feed(s.bn_scale);
      feed(s.bn_shift);
    }
    feed(nonlocal.theta);
    feed(nonlocal.phi);
    feed(nonlocal.g);
    feed(nonlocal.out);
    return h;
  }
};

namespace detail {

inline Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace detail

// Deterministic scaled-uniform initialization from config.seed.
inline BackboneWeights init_backbone(const BackboneConfig& config) {
  config.validate();
  BackboneWeights w;
  w.config = config;
  std::size_t cin = 3;
  for (std::size_t s = 0; s < config.num_stages(); ++s) {
    Rng rng(derive_seed(config.seed, s));
    const Triple& k = config.stage_kernels[s];
    const std::size_t cout = config.stage_channels[s];
    const double fan_in = static_cast<double>(k[0] * k[1] * k[2] * cin);
    ConvStage st;
    st.kernel = detail::uniform_tensor({k[0], k[1], k[2], cin, cout},
                                       std::sqrt(6.0 / fan_in), rng);
    st.bn_scale = Tensor({cout});
    st.bn_shift = Tensor({cout});
    for (std::size_t c = 0; c < cout; ++c) {
      st.bn_scale[c] = rng.uniform(0.8, 1.2);
      st.bn_shift[c] = rng.uniform(-0.1, 0.1);
    }
    st.stride = {config.temporal_strides[s], config.spatial_strides[s],
                 config.spatial_strides[s]};
    const bool last = s + 1 == config.num_stages();
    st.dilation = {1, last ? config.final_dilation : 1, last ? config.final_dilation : 1};
    w.stages.push_back(std::move(st));
    cin = cout;
  }
  const std::size_t c = config.stage_channels[config.nonlocal_stage];
  const std::size_t d = c / 2;
  Rng rng(derive_seed(config.seed, 1000));
  const double in_bound = std::sqrt(3.0 / static_cast<double>(c));
  w.nonlocal.theta = detail::uniform_tensor({c, d}, in_bound, rng);
  w.nonlocal.phi = detail::uniform_tensor({c, d}, in_bound, rng);
  w.nonlocal.g = detail::uniform_tensor({c, d}, in_bound, rng);
  w.nonlocal.out = detail::uniform_tensor({d, c}, 0.5 * std::sqrt(3.0 / static_cast<double>(d)), rng);
  return w;
}

// out = x + (softmax(theta(x) phi(x)^T / sqrt(d)) g(x)) W_out, attention over
// all T*H*W positions.
inline Tensor nonlocal_block(const NonLocalWeights& nl, const Tensor& featmap) {
  CRCNN_ENFORCE(featmap.rank() == 4, "nonlocal_block: expected [T,H,W,C], got ",
                shape_str(featmap.shape()));
  const std::size_t c = featmap.dim(3);
  CRCNN_ENFORCE(nl.theta.dim(0) == c, "nonlocal_block: weights expect ", nl.theta.dim(0),
                " channels, feature map has ", c);
  const std::size_t n = featmap.size() / c;
  const std::size_t d = nl.theta.dim(1);
  const Tensor x = featmap.reshaped({n, c});
  const Tensor theta = matmul(x, nl.theta);
  const Tensor phi = matmul(x, nl.phi);
  const Tensor g = matmul(x, nl.g);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  Tensor y({n, d});
  std::vector<double> logits(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += theta[i * d + k] * phi[j * d + k];
      logits[j] = dot * inv_sqrt_d;
      mx = std::max(mx, logits[j]);
    }
    double sum = 0.0;
    for (double& l : logits) {
      l = std::exp(l - mx);
      sum += l;
    }
    for (std::size_t j = 0; j < n; ++j) {
      const double a = logits[j] / sum;
      for (std::size_t k = 0; k < d; ++k) y[i * d + k] += a * g[j * d + k];
    }
  }
  return add(x, matmul(y, nl.out)).reshaped(featmap.shape());
}

// [T, H, W, 3] -> [T/2, H/16, W/16, C].
inline Tensor forward(const BackboneWeights& w, const Tensor& clip) {
  CRCNN_ENFORCE(clip.rank() == 4 && clip.dim(3) == 3, "backbone: clip must be [T,H,W,3], got ",
                shape_str(clip.shape()));
  const std::size_t ts = w.config.temporal_stride_product();
  const std::size_t ss = w.config.spatial_stride_product();
  CRCNN_ENFORCE(clip.dim(0) % ts == 0 && clip.dim(1) % ss == 0 && clip.dim(2) % ss == 0,
                "backbone: clip ", shape_str(clip.shape()), " needs T divisible by ", ts,
                " and H, W divisible by ", ss);
  const double mean = w.config.input_mean;
  Tensor x = map(clip, [mean](double v) { return v - mean; });
  for (std::size_t s = 0; s < w.stages.size(); ++s) {
    const ConvStage& st = w.stages[s];
    x = relu(frozen_batchnorm(conv3d(x, st.kernel, st.stride, st.dilation, Padding::kSame),
                              st.bn_scale, st.bn_shift));
    if (s == w.config.nonlocal_stage) x = nonlocal_block(w.nonlocal, x);
  }
  return x;
}

inline Tensor scene_feature(const BackboneWeights& w, const Tensor& clip) {
  return global_avg_pool(forward(w, clip));
}

// Actor tube: the key-frame box replicated over time, cropped and resized.
inline Tensor actor_feature(const BackboneWeights& w, const Tensor& clip, const Box& box,
                            std::size_t crop_h, std::size_t crop_w) {
  return global_avg_pool(forward(w, crop_resize_clip(clip, box, crop_h, crop_w)));
}

// ---------------------------------------------------------------------------
// Serialization to named tensors.

namespace detail {

inline Tensor sizes_tensor(const std::vector<std::size_t>& v) {
  std::vector<double> d(v.begin(), v.end());
  return Tensor::vector(std::move(d));
}

inline std::vector<std::size_t> tensor_sizes(const Tensor& t) {
  std::vector<std::size_t> out;
  for (double v : t.values()) {
    CRCNN_ENFORCE(v >= 0 && v == std::floor(v), "expected a non-negative integer, got ", v);
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

}  // namespace detail

inline NamedTensors backbone_to_tensors(const BackboneWeights& w) {
  NamedTensors out;
  const BackboneConfig& c = w.config;
  out.emplace_back("config.stage_channels", detail::sizes_tensor(c.stage_channels));
  out.emplace_back("config.spatial_strides", detail::sizes_tensor(c.spatial_strides));
  out.emplace_back("config.temporal_strides", detail::sizes_tensor(c.temporal_strides));
  std::vector<std::size_t> kernels;
  for (const Triple& k : c.stage_kernels) kernels.insert(kernels.end(), k.begin(), k.end());
  out.emplace_back("config.stage_kernels", detail::sizes_tensor(kernels));
  out.emplace_back("config.scalars",
                   Tensor::vector({static_cast<double>(c.final_dilation),
                                   static_cast<double>(c.nonlocal_stage),
                                   static_cast<double>(c.seed), c.input_mean}));
  for (std::size_t s = 0; s < w.stages.size(); ++s) {
    const std::string p = "stage" + std::to_string(s) + ".";
    out.emplace_back(p + "kernel", w.stages[s].kernel);
    out.emplace_back(p + "bn_scale", w.stages[s].bn_scale);
    out.emplace_back(p + "bn_shift", w.stages[s].bn_shift);
  }
  out.emplace_back("nonlocal.theta", w.nonlocal.theta);
  out.emplace_back("nonlocal.phi", w.nonlocal.phi);
  out.emplace_back("nonlocal.g", w.nonlocal.g);
  out.emplace_back("nonlocal.out", w.nonlocal.out);
  return out;
}

inline BackboneWeights backbone_from_tensors(const NamedTensors& named) {
  BackboneConfig c;
  c.stage_channels = detail::tensor_sizes(find_tensor(named, "config.stage_channels"));
  c.spatial_strides = detail::tensor_sizes(find_tensor(named, "config.spatial_strides"));
  c.temporal_strides = detail::tensor_sizes(find_tensor(named, "config.temporal_strides"));
  const auto kernels = detail::tensor_sizes(find_tensor(named, "config.stage_kernels"));
  CRCNN_ENFORCE(kernels.size() == 3 * c.stage_channels.size(), "bad config.stage_kernels");
  c.stage_kernels.clear();
  for (std::size_t i = 0; i < kernels.size(); i += 3) {
    c.stage_kernels.push_back({kernels[i], kernels[i + 1], kernels[i + 2]});
  }
  const Tensor& sc = find_tensor(named, "config.scalars");
  CRCNN_ENFORCE(sc.size() == 4, "bad config.scalars");
  c.final_dilation = static_cast<std::size_t>(sc[0]);
  c.nonlocal_stage = static_cast<std::size_t>(sc[1]);
  c.seed = static_cast<std::uint64_t>(sc[2]);
  c.input_mean = sc[3];
  c.validate();

  // Start from a fresh init for strides/dilations, then overwrite parameters.
  BackboneWeights w = init_backbone(c);
  for (std::size_t s = 0; s < w.stages.size(); ++s) {
    const std::string p = "stage" + std::to_string(s) + ".";
    auto take = [&](const std::string& name, Tensor& dst) {
      const Tensor& src = find_tensor(named, p + name);
      CRCNN_ENFORCE(src.shape() == dst.shape(), "tensor '", p + name, "' has shape ",
                    shape_str(src.shape()), ", expected ", shape_str(dst.shape()));
      dst = src;
    };
    take("kernel", w.stages[s].kernel);
    take("bn_scale", w.stages[s].bn_scale);
    take("bn_shift", w.stages[s].bn_shift);
  }
  auto take_nl = [&](const char* name, Tensor& dst) {
    const Tensor& src = find_tensor(named, std::string("nonlocal.") + name);
    CRCNN_ENFORCE(src.shape() == dst.shape(), "tensor 'nonlocal.", name, "' has wrong shape");
    dst = src;
  };
  take_nl("theta", w.nonlocal.theta);
  take_nl("phi", w.nonlocal.phi);
  take_nl("g", w.nonlocal.g);
  take_nl("out", w.nonlocal.out);
  return w;
}

}  // namespace crcnn
