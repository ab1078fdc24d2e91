#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "crcnn/error.hpp"

namespace crcnn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_volume(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major array of doubles. Channel-last for image data: clips are
// [T, H, W, C], kernels are [kt, kh, kw, Cin, Cout].
class Tensor {
 public:
  Tensor() : shape_{1}, data_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)) {
    check_extents();
    data_.assign(shape_volume(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    CRCNN_ENFORCE(shape_volume(shape_) == data_.size(), "tensor shape ",
                  shape_str(shape_), " needs ", shape_volume(shape_),
                  " values, got ", data_.size());
  }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }

  std::span<const double> values() const { return data_; }
  std::span<double> values() { return data_; }
  const double* data() const { return data_.data(); }
  double* data() { return data_.data(); }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  template <typename... Idx>
  double at(Idx... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <typename... Idx>
  double& at(Idx... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    CRCNN_ENFORCE(idx.size() == shape_.size(), "index rank ", idx.size(),
                  " does not match tensor rank ", shape_.size());
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      CRCNN_ENFORCE(i < shape_[axis], "index ", i, " out of range for axis ",
                    axis, " of ", shape_str(shape_));
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (std::size_t e : shape_) {
      CRCNN_ENFORCE(e >= 1, "tensor extents must be >= 1, got ",
                    shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

// Ordered name -> tensor list; the unit of the on-disk container.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline const Tensor& find_tensor(const NamedTensors& named, std::string_view name) {
  for (const auto& [n, t] : named) {
    if (n == name) return t;
  }
  throw ValidationError(detail::concat("missing tensor '", name, "'"));
}

inline std::ostream& operator<<(std::ostream& os, const Tensor& t) {
  return os << "Tensor" << shape_str(t.shape());
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  CRCNN_ENFORCE(a.shape() == b.shape(), "shape mismatch ", shape_str(a.shape()),
                " vs ", shape_str(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a[i] - b[i]));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename F>
Tensor map(const Tensor& x, F&& f) {
  Tensor out = x;
  for (double& v : out.values()) v = f(v);
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  CRCNN_ENFORCE(a.shape() == b.shape(), "add: shape mismatch ",
                shape_str(a.shape()), " vs ", shape_str(b.shape()));
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

inline Tensor scale(const Tensor& a, double s) {
  return map(a, [s](double v) { return v * s; });
}

inline Tensor relu(const Tensor& x) {
  return map(x, [](double v) { return v > 0.0 ? v : 0.0; });
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  return map(x, [](double v) { return sigmoid(v); });
}

// Concatenates rank-1 tensors.
inline Tensor concat(std::span<const Tensor> parts) {
  CRCNN_ENFORCE(!parts.empty(), "concat needs at least one part");
  std::vector<double> out;
  for (const Tensor& p : parts) {
    CRCNN_ENFORCE(p.rank() == 1, "concat expects vectors, got ",
                  shape_str(p.shape()));
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  return Tensor::vector(std::move(out));
}

// ---------------------------------------------------------------------------
// Linear algebra

// Row-major accumulation: out[i][j] = sum over k ascending of a[i][k]*b[k][j].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  CRCNN_ENFORCE(a.rank() == 2 && b.rank() == 2, "matmul expects matrices, got ",
                shape_str(a.shape()), " and ", shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  CRCNN_ENFORCE(b.dim(0) == k, "matmul: inner extents differ, ",
                shape_str(a.shape()), " x ", shape_str(b.shape()));
  Tensor out({m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = po + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = pa[i * k + kk];
      const double* brow = pb + kk * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return out;
}

// y = W x + b with W [out, in].
inline Tensor affine(const Tensor& w, const Tensor& b, const Tensor& x) {
  CRCNN_ENFORCE(w.rank() == 2 && x.rank() == 1 && w.dim(1) == x.dim(0),
                "affine: weight ", shape_str(w.shape()), " vs input ",
                shape_str(x.shape()));
  CRCNN_ENFORCE(b.rank() == 1 && b.dim(0) == w.dim(0), "affine: bias ",
                shape_str(b.shape()), " vs weight ", shape_str(w.shape()));
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  Tensor out = b;
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    const double* wr = w.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) acc += wr[c] * x[c];
    out[r] += acc;
  }
  return out;
}

// Max-subtracted softmax over a vector.
inline Tensor softmax(const Tensor& logits) {
  CRCNN_ENFORCE(logits.rank() == 1, "softmax expects a vector, got ",
                shape_str(logits.shape()));
  double mx = -INFINITY;
  for (double v : logits.values()) {
    CRCNN_ENFORCE(!std::isnan(v), "softmax: NaN logit");
    mx = std::max(mx, v);
  }
  Tensor out = logits;
  double sum = 0.0;
  for (double& v : out.values()) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : out.values()) v /= sum;
  return out;
}

// Parameter-free layer normalization over a vector.
inline Tensor layer_norm(const Tensor& x, double eps = 1e-5) {
  CRCNN_ENFORCE(x.rank() == 1, "layer_norm expects a vector");
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x.values()) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x.values()) var += (v - mean) * (v - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  return map(x, [&](double v) { return (v - mean) * inv; });
}

// ---------------------------------------------------------------------------
// Convolution and pooling over [T, H, W, C] volumes

enum class Padding { kSame, kValid };

using Triple = std::array<std::size_t, 3>;

struct ConvGeometry {
  Triple out{};
  Triple pad_front{};
};

// Standard convolution arithmetic. Same padding pads symmetrically with zeros;
// an odd remainder goes to the trailing side.
inline ConvGeometry conv_geometry(const Triple& in, const Triple& kernel,
                                  const Triple& stride, const Triple& dilation,
                                  Padding padding) {
  ConvGeometry g;
  for (int a = 0; a < 3; ++a) {
    CRCNN_ENFORCE(stride[a] >= 1 && dilation[a] >= 1,
                  "conv3d: strides and dilations must be >= 1");
    const std::size_t eff = dilation[a] * (kernel[a] - 1) + 1;
    if (padding == Padding::kValid) {
      CRCNN_ENFORCE(eff <= in[a], "conv3d: dilated kernel extent ", eff,
                    " exceeds input extent ", in[a], " on axis ", a);
      g.out[a] = (in[a] - eff) / stride[a] + 1;
      g.pad_front[a] = 0;
    } else {
      g.out[a] = (in[a] + stride[a] - 1) / stride[a];
      const std::size_t needed = (g.out[a] - 1) * stride[a] + eff;
      const std::size_t total = needed > in[a] ? needed - in[a] : 0;
      g.pad_front[a] = total / 2;
    }
  }
  return g;
}

inline Tensor conv3d(const Tensor& input, const Tensor& kernel,
                     const Triple& stride = {1, 1, 1},
                     const Triple& dilation = {1, 1, 1},
                     Padding padding = Padding::kSame) {
  CRCNN_ENFORCE(input.rank() == 4, "conv3d: input must be [T,H,W,C], got ",
                shape_str(input.shape()));
  CRCNN_ENFORCE(kernel.rank() == 5,
                "conv3d: kernel must be [kt,kh,kw,Cin,Cout], got ",
                shape_str(kernel.shape()));
  const std::size_t cin = input.dim(3);
  CRCNN_ENFORCE(kernel.dim(3) == cin, "conv3d: input ", shape_str(input.shape()),
                " has ", cin, " channels but kernel ", shape_str(kernel.shape()),
                " expects ", kernel.dim(3));
  const std::size_t cout = kernel.dim(4);
  const Triple in{input.dim(0), input.dim(1), input.dim(2)};
  const Triple k{kernel.dim(0), kernel.dim(1), kernel.dim(2)};
  const ConvGeometry g = conv_geometry(in, k, stride, dilation, padding);

  Tensor out({g.out[0], g.out[1], g.out[2], cout});
  const double* px = input.data();
  const double* pk = kernel.data();
  double* po = out.data();
  const std::size_t kstride_ci = cout;
  const std::size_t kstride_w = cin * cout;
  const std::size_t kstride_h = k[2] * kstride_w;
  const std::size_t kstride_t = k[1] * kstride_h;

  for (std::size_t ot = 0; ot < g.out[0]; ++ot) {
    for (std::size_t oy = 0; oy < g.out[1]; ++oy) {
      for (std::size_t ox = 0; ox < g.out[2]; ++ox) {
        double* acc = po + ((ot * g.out[1] + oy) * g.out[2] + ox) * cout;
        for (std::size_t kt = 0; kt < k[0]; ++kt) {
          const auto it = static_cast<std::ptrdiff_t>(ot * stride[0] + kt * dilation[0]) -
                          static_cast<std::ptrdiff_t>(g.pad_front[0]);
          if (it < 0 || it >= static_cast<std::ptrdiff_t>(in[0])) continue;
          for (std::size_t kh = 0; kh < k[1]; ++kh) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride[1] + kh * dilation[1]) -
                            static_cast<std::ptrdiff_t>(g.pad_front[1]);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in[1])) continue;
            for (std::size_t kw = 0; kw < k[2]; ++kw) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * stride[2] + kw * dilation[2]) -
                              static_cast<std::ptrdiff_t>(g.pad_front[2]);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in[2])) continue;
              const double* xin =
                  px + ((static_cast<std::size_t>(it) * in[1] + static_cast<std::size_t>(iy)) *
                            in[2] + static_cast<std::size_t>(ix)) * cin;
              const double* kk = pk + kt * kstride_t + kh * kstride_h + kw * kstride_w;
              for (std::size_t ci = 0; ci < cin; ++ci) {
                const double v = xin[ci];
                if (v == 0.0) continue;
                const double* krow = kk + ci * kstride_ci;
                for (std::size_t co = 0; co < cout; ++co) acc[co] += v * krow[co];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

// Mean over all leading positions of a [T, H, W, C] volume.
inline Tensor global_avg_pool(const Tensor& input) {
  CRCNN_ENFORCE(input.rank() == 4, "global_avg_pool: expected rank-4 input, got ",
                shape_str(input.shape()));
  const std::size_t c = input.dim(3);
  const std::size_t positions = input.size() / c;
  Tensor out({c});
  for (std::size_t p = 0; p < positions; ++p) {
    const double* row = input.data() + p * c;
    for (std::size_t j = 0; j < c; ++j) out[j] += row[j];
  }
  const double inv = 1.0 / static_cast<double>(positions);
  for (double& v : out.values()) v *= inv;
  return out;
}

// Batch norm with frozen statistics folded into a per-channel affine map.
inline Tensor frozen_batchnorm(const Tensor& input, const Tensor& scale_c,
                               const Tensor& shift_c) {
  const std::size_t c = input.shape().back();
  CRCNN_ENFORCE(scale_c.rank() == 1 && scale_c.dim(0) == c && shift_c.rank() == 1 &&
                    shift_c.dim(0) == c,
                "frozen_batchnorm: parameter length must equal channel count ", c);
  Tensor out = input;
  double* p = out.data();
  const std::size_t n = out.size() / c;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) p[i * c + j] = p[i * c + j] * scale_c[j] + shift_c[j];
  }
  return out;
}

}  // namespace crcnn
