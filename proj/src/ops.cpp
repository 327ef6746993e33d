#include "ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "error.hpp"
#include "gemm.hpp"

namespace vidistill::ops {

namespace {

template <typename T>
using NodeT = Node<T>;

template <typename T>
bool wants_grad(const NodeT<T>& self, std::size_t input) {
  return self.inputs[input]->requires_grad;
}

template <typename T>
std::vector<T>& input_grad(NodeT<T>& self, std::size_t input) {
  return self.inputs[input]->pass_grad_buffer();
}

template <typename T>
const std::vector<T>& input_value(const NodeT<T>& self, std::size_t input) {
  return self.inputs[input]->value;
}

// Double-precision reduction over eight interleaved partial sums. The lane
// assignment depends only on positions, so results stay reproducible.
class LaneSum {
 public:
  template <typename T>
  void add(const T* p, std::size_t n) {
    std::size_t j = 0;
    for (; j + kLanes <= n; j += kLanes)
      for (std::size_t l = 0; l < kLanes; ++l) lanes_[l] += static_cast<double>(p[j + l]);
    for (std::size_t l = 0; j < n; ++j, ++l) lanes_[l] += static_cast<double>(p[j]);
  }
  template <typename T>
  void add_product(const T* a, const T* b, std::size_t n) {
    std::size_t j = 0;
    for (; j + kLanes <= n; j += kLanes)
      for (std::size_t l = 0; l < kLanes; ++l)
        lanes_[l] += static_cast<double>(a[j + l]) * static_cast<double>(b[j + l]);
    for (std::size_t l = 0; j < n; ++j, ++l) lanes_[l] += static_cast<double>(a[j]) * static_cast<double>(b[j]);
  }
  template <typename T>
  void add_squared_deviation(const T* p, std::size_t n, double center) {
    std::size_t j = 0;
    for (; j + kLanes <= n; j += kLanes)
      for (std::size_t l = 0; l < kLanes; ++l) {
        const double d = static_cast<double>(p[j + l]) - center;
        lanes_[l] += d * d;
      }
    for (std::size_t l = 0; j < n; ++j, ++l) {
      const double d = static_cast<double>(p[j]) - center;
      lanes_[l] += d * d;
    }
  }
  double total() const {
    return ((lanes_[0] + lanes_[1]) + (lanes_[2] + lanes_[3])) +
           ((lanes_[4] + lanes_[5]) + (lanes_[6] + lanes_[7]));
  }

 private:
  static constexpr std::size_t kLanes = 8;
  double lanes_[kLanes] = {};
};

void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) {
    usage_error(what, " expects a rank-", rank, " tensor, got ", shape_str(s));
  }
}

void check_row_weights(std::span<const double> w, std::size_t rows, const char* what) {
  if (w.empty()) return;
  if (w.size() != rows) usage_error(what, ": ", w.size(), " row weights for ", rows, " rows");
  for (double v : w) {
    if (!(v >= 0.0) || !std::isfinite(v)) usage_error(what, ": row weights must be finite and >= 0");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
BasicTensor<T> elementwise(Elementwise kind, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const auto& as = a.shape();
  const auto av = a.data();

  if (kind == Elementwise::kRelu) {
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
    return make_result<T>(as, std::move(out), {a}, [](NodeT<T>& self) {
      const auto& x = input_value(self, 0);
      auto& gx = input_grad(self, 0);
      for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i] > T(0)) gx[i] += self.pass_grad[i];
    });
  }

  if (!b.defined()) usage_error("binary elementwise operation needs two operands");
  const auto& bs = b.shape();
  const auto bv = b.data();
  // Channel broadcast: b is [C] and a is [B×C×...].
  const bool broadcast = as != bs;
  std::size_t channels = 1, inner = 1;
  if (broadcast) {
    if (bs.size() != 1 || as.size() < 2 || as[1] != bs[0]) {
      usage_error("shape mismatch: ", shape_str(as), " vs ", shape_str(bs));
    }
    channels = as[1];
    for (std::size_t i = 2; i < as.size(); ++i) inner *= as[i];
  }
  auto b_index = [=](std::size_t i) { return broadcast ? (i / inner) % channels : i; };

  std::vector<T> out(av.size());
  switch (kind) {
    case Elementwise::kAdd:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[b_index(i)];
      break;
    case Elementwise::kSub:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[b_index(i)];
      break;
    case Elementwise::kMul:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[b_index(i)];
      break;
    case Elementwise::kRelu:
      break;
  }

  return make_result<T>(as, std::move(out), {a, b}, [kind, b_index](NodeT<T>& self) {
    const auto& g = self.pass_grad;
    const std::size_t n = g.size();
    if (wants_grad(self, 0)) {
      auto& ga = input_grad(self, 0);
      if (kind == Elementwise::kMul) {
        const auto& bval = input_value(self, 1);
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bval[b_index(i)];
      } else {
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
    }
    if (wants_grad(self, 1)) {
      auto& gb = input_grad(self, 1);
      const bool chan = gb.size() != n;
      if (!chan) {
        if (kind == Elementwise::kAdd) {
          for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
        } else if (kind == Elementwise::kSub) {
          for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
        } else {
          const auto& aval = input_value(self, 0);
          for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * aval[i];
        }
      } else {
        std::vector<double> acc(gb.size(), 0.0);
        const auto& aval = input_value(self, 0);
        for (std::size_t i = 0; i < n; ++i) {
          const double term = kind == Elementwise::kMul ? double(g[i]) * aval[i]
                              : kind == Elementwise::kSub ? -double(g[i])
                                                          : double(g[i]);
          acc[b_index(i)] += term;
        }
        for (std::size_t c = 0; c < gb.size(); ++c) gb[c] += static_cast<T>(acc[c]);
      }
    }
  });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  const auto av = a.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * factor;
  return make_result<T>(a.shape(), std::move(out), {a}, [factor](NodeT<T>& self) {
    auto& ga = input_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.pass_grad[i] * factor;
  });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  const auto av = a.data();
  double acc = 0.0;
  for (auto v : av) acc += v;
  return make_result<T>(Shape{1}, {static_cast<T>(acc)}, {a}, [](NodeT<T>& self) {
    auto& ga = input_grad(self, 0);
    const T g = self.pass_grad[0];
    for (auto& v : ga) v += g;
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  const auto av = a.data();
  double acc = 0.0;
  for (auto v : av) acc += v;
  const double n = static_cast<double>(av.size());
  return make_result<T>(Shape{1}, {static_cast<T>(acc / n)}, {a}, [n](NodeT<T>& self) {
    auto& ga = input_grad(self, 0);
    const T g = static_cast<T>(self.pass_grad[0] / n);
    for (auto& v : ga) v += g;
  });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    usage_error("cannot reshape ", shape_str(a.shape()), " to ", shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return make_result<T>(std::move(shape), std::move(out), {a}, [](NodeT<T>& self) {
    auto& ga = input_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.pass_grad[i];
  });
}

// ---------------------------------------------------------------------------
// Dense products

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank(a.shape(), 2, "matmul");
  require_rank(b.shape(), 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    usage_error("matmul inner dimensions differ: ", shape_str(a.shape()), " vs ",
                shape_str(b.shape()));
  }
  std::vector<T> out(m * n);
  gemm<T>(false, false, m, n, k, a.data().data(), b.data().data(), out.data(), false);
  return make_result<T>(Shape{m, n}, std::move(out), {a, b}, [m, n, k](NodeT<T>& self) {
    const T* g = self.pass_grad.data();
    if (wants_grad(self, 0)) {
      gemm<T>(false, true, m, k, n, g, input_value(self, 1).data(), input_grad(self, 0).data(),
              true);
    }
    if (wants_grad(self, 1)) {
      gemm<T>(true, false, k, n, m, input_value(self, 0).data(), g, input_grad(self, 1).data(),
              true);
    }
  });
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias) {
  require_rank(x.shape(), 2, "linear");
  require_rank(w.shape(), 2, "linear");
  const std::size_t batch = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (w.dim(1) != in) {
    usage_error("linear: input ", shape_str(x.shape()), " does not match weight ",
                shape_str(w.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{out}) {
    usage_error("linear: bias ", shape_str(bias.shape()), " does not match ", out, " outputs");
  }
  std::vector<T> y(batch * out);
  gemm<T>(false, true, batch, out, in, x.data().data(), w.data().data(), y.data(), false);
  if (has_bias) {
    const auto bv = bias.data();
    for (std::size_t r = 0; r < batch; ++r)
      for (std::size_t o = 0; o < out; ++o) y[r * out + o] += bv[o];
  }
  std::vector<BasicTensor<T>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>(Shape{batch, out}, std::move(y), std::move(inputs),
                        [batch, in, out, has_bias](NodeT<T>& self) {
                          const T* g = self.pass_grad.data();
                          if (wants_grad(self, 0)) {
                            gemm<T>(false, false, batch, in, out, g, input_value(self, 1).data(),
                                    input_grad(self, 0).data(), true);
                          }
                          if (wants_grad(self, 1)) {
                            gemm<T>(true, false, out, in, batch, g, input_value(self, 0).data(),
                                    input_grad(self, 1).data(), true);
                          }
                          if (has_bias && wants_grad(self, 2)) {
                            auto& gb = input_grad(self, 2);
                            for (std::size_t o = 0; o < out; ++o) {
                              double acc = 0.0;
                              for (std::size_t r = 0; r < batch; ++r) acc += g[r * out + o];
                              gb[o] += static_cast<T>(acc);
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Convolution

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                             std::size_t pad) {
  if (stride == 0) usage_error("convolution stride must be positive");
  const long long span = static_cast<long long>(in + 2 * pad) - static_cast<long long>(kernel);
  if (span < 0) {
    usage_error("convolution kernel ", kernel, " exceeds padded input ", in, " + 2*", pad);
  }
  return static_cast<std::size_t>(span) / stride + 1;
}

namespace {

struct ConvPlan {
  std::size_t batch, channels, t, h, w;        // input
  std::size_t out_channels, kt, kh, kw;        // kernel
  std::size_t ot, oh, ow;                      // output
  std::array<std::size_t, 3> stride, padding;

  std::size_t col_rows() const { return channels * kt * kh * kw; }
  std::size_t col_cols() const { return ot * oh * ow; }
  std::size_t in_sample() const { return channels * t * h * w; }
  std::size_t out_sample() const { return out_channels * ot * oh * ow; }
  bool pointwise() const {
    return kt == 1 && kh == 1 && kw == 1 && stride == std::array<std::size_t, 3>{1, 1, 1} &&
           padding == std::array<std::size_t, 3>{0, 0, 0};
  }
};

ConvPlan make_plan(const Shape& x5, const Shape& w5, const Conv3dGeometry& g) {
  ConvPlan p{};
  p.batch = x5[0];
  p.channels = x5[1];
  p.t = x5[2];
  p.h = x5[3];
  p.w = x5[4];
  p.out_channels = w5[0];
  p.kt = w5[2];
  p.kh = w5[3];
  p.kw = w5[4];
  if (w5[1] != p.channels) {
    usage_error("convolution channel mismatch: input has ", p.channels, " channels, weight expects ",
                w5[1]);
  }
  p.stride = g.stride;
  p.padding = g.padding;
  p.ot = conv_output_size(p.t, p.kt, g.stride[0], g.padding[0]);
  p.oh = conv_output_size(p.h, p.kh, g.stride[1], g.padding[1]);
  p.ow = conv_output_size(p.w, p.kw, g.stride[2], g.padding[2]);
  return p;
}

// Output positions [lo, hi) whose input index o·stride + offset − pad lands in [0, n).
struct ValidRange {
  std::size_t lo, hi;
};

ValidRange valid_range(std::size_t n, std::size_t out, std::size_t stride, std::size_t offset,
                       std::size_t pad) {
  std::size_t lo = pad > offset ? (pad - offset + stride - 1) / stride : 0;
  std::size_t hi = n + pad > offset ? std::min(out, (n + pad - offset - 1) / stride + 1) : 0;
  lo = std::min(lo, out);
  if (hi < lo) hi = lo;
  return {lo, hi};
}

// Stride-1 "same" spatial geometry: every output plane is the input plane
// shifted by (dh − ph, dw − pw) with zeros shifted in.
bool planar_shift(const ConvPlan& p) {
  return p.stride[1] == 1 && p.stride[2] == 1 && p.oh == p.h && p.ow == p.w;
}

// Fills output rows [h0, h1) of one plane; `src` is the input plane or null
// when the temporal tap falls in padding.
template <typename T>
void shift_plane(const ConvPlan& p, const T* src, std::size_t dh, std::size_t dw, std::size_t h0,
                 std::size_t h1, T* dst) {
  const std::size_t w = p.w;
  if (src == nullptr) {
    std::fill(dst, dst + (h1 - h0) * w, T(0));
    return;
  }
  const auto hr = valid_range(p.h, p.oh, 1, dh, p.padding[1]);
  const std::size_t a = std::clamp(hr.lo, h0, h1), b = std::clamp(hr.hi, h0, h1);
  std::fill(dst, dst + (a - h0) * w, T(0));
  std::fill(dst + (b - h0) * w, dst + (h1 - h0) * w, T(0));
  if (a == b) return;
  const std::size_t left = dw < p.padding[2] ? p.padding[2] - dw : 0;
  const std::size_t right = dw > p.padding[2] ? dw - p.padding[2] : 0;
  if (left >= w || right >= w) {
    std::fill(dst + (a - h0) * w, dst + (b - h0) * w, T(0));
    return;
  }
  // Flattened copy of rows [a, b), then zero the columns that wrapped across rows.
  const std::size_t first = a * w + left, last = b * w - right;
  const auto offset = (static_cast<std::ptrdiff_t>(dh) - static_cast<std::ptrdiff_t>(p.padding[1])) *
                          static_cast<std::ptrdiff_t>(w) +
                      static_cast<std::ptrdiff_t>(dw) - static_cast<std::ptrdiff_t>(p.padding[2]);
  std::copy(src + (static_cast<std::ptrdiff_t>(first) + offset),
            src + (static_cast<std::ptrdiff_t>(last) + offset), dst + (first - h0 * w));
  for (std::size_t r = a; r < b; ++r) {
    T* row = dst + (r - h0) * w;
    std::fill(row, row + left, T(0));
    std::fill(row + w - right, row + w, T(0));
  }
}

template <typename T>
void unshift_plane_add(const ConvPlan& p, const T* src, std::size_t dh, std::size_t dw,
                       std::size_t h0, std::size_t h1, T* dst) {
  const std::size_t w = p.w;
  const auto hr = valid_range(p.h, p.oh, 1, dh, p.padding[1]);
  const std::size_t a = std::clamp(hr.lo, h0, h1), b = std::clamp(hr.hi, h0, h1);
  const std::size_t left = dw < p.padding[2] ? p.padding[2] - dw : 0;
  const std::size_t right = dw > p.padding[2] ? dw - p.padding[2] : 0;
  if (a == b || left >= w || right >= w) return;
  const std::size_t n = w - left - right;
  for (std::size_t r = a; r < b; ++r) {
    const T* s = src + (r - h0) * w + left;
    T* d = dst + (r + dh - p.padding[1]) * w + left + dw - p.padding[2];
    for (std::size_t j = 0; j < n; ++j) d[j] += s[j];
  }
}

// Output rows are flattened (to, ho) pairs of length ow. The column buffer
// of rows [r0, r1) is col_rows() × (r1 − r0)·ow.
template <typename T>
void im2col_rows(const ConvPlan& p, const T* x, std::size_t r0, std::size_t r1, T* col) {
  const std::size_t width = (r1 - r0) * p.ow;
  const bool planar = planar_shift(p);
  std::size_t row = 0;
  for (std::size_t c = 0; c < p.channels; ++c) {
    const T* xc = x + c * p.t * p.h * p.w;
    for (std::size_t dt = 0; dt < p.kt; ++dt)
      for (std::size_t dh = 0; dh < p.kh; ++dh)
        for (std::size_t dw = 0; dw < p.kw; ++dw, ++row) {
          const auto wr = valid_range(p.w, p.ow, p.stride[2], dw, p.padding[2]);
          T* dst = col + row * width;
          if (planar) {
            for (std::size_t r = r0; r < r1;) {
              const std::size_t to = r / p.oh, h0 = r % p.oh;
              const std::size_t h1 = std::min(p.oh, h0 + (r1 - r));
              const std::size_t ti = to * p.stride[0] + dt;
              const bool inside = ti >= p.padding[0] && ti - p.padding[0] < p.t;
              shift_plane(p, inside ? xc + (ti - p.padding[0]) * p.h * p.w : nullptr, dh, dw, h0,
                          h1, dst + (r - r0) * p.ow);
              r += h1 - h0;
            }
            continue;
          }
          for (std::size_t r = r0; r < r1; ++r) {
            T* d = dst + (r - r0) * p.ow;
            const std::size_t to = r / p.oh, ho = r % p.oh;
            const std::size_t ti = to * p.stride[0] + dt, hi = ho * p.stride[1] + dh;
            if (ti < p.padding[0] || ti - p.padding[0] >= p.t || hi < p.padding[1] ||
                hi - p.padding[1] >= p.h || wr.lo == wr.hi) {
              std::fill(d, d + p.ow, T(0));
              continue;
            }
            const T* src = xc + ((ti - p.padding[0]) * p.h + (hi - p.padding[1])) * p.w;
            std::fill(d, d + wr.lo, T(0));
            std::fill(d + wr.hi, d + p.ow, T(0));
            const std::size_t first = wr.lo * p.stride[2] + dw - p.padding[2];
            if (p.stride[2] == 1) {
              std::copy(src + first, src + first + (wr.hi - wr.lo), d + wr.lo);
            } else {
              for (std::size_t wo = wr.lo, wi = first; wo < wr.hi; ++wo, wi += p.stride[2])
                d[wo] = src[wi];
            }
          }
        }
  }
}

template <typename T>
void col2im_rows_add(const ConvPlan& p, const T* col, std::size_t r0, std::size_t r1, T* dx) {
  const std::size_t width = (r1 - r0) * p.ow;
  const bool planar = planar_shift(p);
  std::size_t row = 0;
  for (std::size_t c = 0; c < p.channels; ++c) {
    T* xc = dx + c * p.t * p.h * p.w;
    for (std::size_t dt = 0; dt < p.kt; ++dt)
      for (std::size_t dh = 0; dh < p.kh; ++dh)
        for (std::size_t dw = 0; dw < p.kw; ++dw, ++row) {
          const auto wr = valid_range(p.w, p.ow, p.stride[2], dw, p.padding[2]);
          if (wr.lo == wr.hi) continue;
          const T* src = col + row * width;
          if (planar) {
            for (std::size_t r = r0; r < r1;) {
              const std::size_t to = r / p.oh, h0 = r % p.oh;
              const std::size_t h1 = std::min(p.oh, h0 + (r1 - r));
              const std::size_t ti = to * p.stride[0] + dt;
              if (ti >= p.padding[0] && ti - p.padding[0] < p.t)
                unshift_plane_add(p, src + (r - r0) * p.ow, dh, dw, h0, h1,
                                  xc + (ti - p.padding[0]) * p.h * p.w);
              r += h1 - h0;
            }
            continue;
          }
          for (std::size_t r = r0; r < r1; ++r) {
            const std::size_t to = r / p.oh, ho = r % p.oh;
            const std::size_t ti = to * p.stride[0] + dt, hi = ho * p.stride[1] + dh;
            if (ti < p.padding[0] || ti - p.padding[0] >= p.t || hi < p.padding[1] ||
                hi - p.padding[1] >= p.h)
              continue;
            const T* s = src + (r - r0) * p.ow + wr.lo;
            T* d = xc + ((ti - p.padding[0]) * p.h + (hi - p.padding[1])) * p.w +
                   (wr.lo * p.stride[2] + dw - p.padding[2]);
            const std::size_t n = wr.hi - wr.lo;
            if (p.stride[2] == 1) {
              for (std::size_t j = 0; j < n; ++j) d[j] += s[j];
            } else {
              for (std::size_t j = 0; j < n; ++j) d[j * p.stride[2]] += s[j];
            }
          }
        }
  }
}

// Output rows per column tile; keeps the tile buffer cache-resident.
std::size_t tile_rows(const ConvPlan& p) {
  constexpr std::size_t kTileColumns = 256;
  return std::max<std::size_t>(1, kTileColumns / p.ow);
}

template <typename T>
BasicTensor<T> conv_impl(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias,
                         const ConvPlan& p, Shape out_shape) {
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{p.out_channels}) {
    usage_error("convolution bias ", shape_str(bias.shape()), " does not match ", p.out_channels,
                " output channels");
  }
  const std::size_t rows = p.col_rows(), cols = p.col_cols();
  const std::size_t out_rows = p.ot * p.oh, step = tile_rows(p);
  std::vector<T> out(p.batch * p.out_sample());
  std::vector<T> col(p.pointwise() ? 0 : rows * step * p.ow);
  const T* xv = x.data().data();
  const T* wv = w.data().data();
  for (std::size_t b = 0; b < p.batch; ++b) {
    const T* xb = xv + b * p.in_sample();
    T* ob = out.data() + b * p.out_sample();
    if (p.pointwise()) {
      gemm<T>(false, false, p.out_channels, cols, rows, wv, xb, ob, false);
    } else {
      for (std::size_t r0 = 0; r0 < out_rows; r0 += step) {
        const std::size_t r1 = std::min(out_rows, r0 + step), width = (r1 - r0) * p.ow;
        im2col_rows(p, xb, r0, r1, col.data());
        gemm_strided<T>(false, false, p.out_channels, width, rows, wv, rows, col.data(), width,
                        ob + r0 * p.ow, cols, false);
      }
    }
    if (has_bias) {
      const auto bv = bias.data();
      for (std::size_t o = 0; o < p.out_channels; ++o)
        for (std::size_t j = 0; j < cols; ++j) ob[o * cols + j] += bv[o];
    }
  }

  std::vector<BasicTensor<T>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>(std::move(out_shape), std::move(out), std::move(inputs),
                        [p, has_bias](NodeT<T>& self) {
                          const std::size_t rows = p.col_rows(), cols = p.col_cols();
                          const std::size_t out_rows = p.ot * p.oh, step = tile_rows(p);
                          const bool gx = wants_grad(self, 0);
                          const bool gw = wants_grad(self, 1);
                          const T* xv = input_value(self, 0).data();
                          const T* wv = input_value(self, 1).data();
                          T* dx = gx ? input_grad(self, 0).data() : nullptr;
                          T* dw = gw ? input_grad(self, 1).data() : nullptr;
                          // wᵀ stored [rows × out_channels]
                          std::vector<T> wt(gx ? rows * p.out_channels : 0);
                          for (std::size_t o = 0; o < p.out_channels && gx; ++o)
                            for (std::size_t k = 0; k < rows; ++k) wt[k * p.out_channels + o] = wv[o * rows + k];
                          const bool pw = p.pointwise();
                          std::vector<T> col(gw && !pw ? rows * cols : 0);
                          std::vector<T> dcol(gx && !pw ? rows * step * p.ow : 0);
                          for (std::size_t b = 0; b < p.batch; ++b) {
                            const T* g = self.pass_grad.data() + b * p.out_sample();
                            const T* xb = xv + b * p.in_sample();
                            T* dxb = gx ? dx + b * p.in_sample() : nullptr;
                            if (p.pointwise()) {
                              if (gw) gemm<T>(false, true, p.out_channels, rows, cols, g, xb, dw, true);
                              if (gx)
                                gemm<T>(false, false, rows, cols, p.out_channels, wt.data(), g, dxb, true);
                              continue;
                            }
                            if (gw) {
                              im2col_rows(p, xb, 0, out_rows, col.data());
                              gemm<T>(false, true, p.out_channels, rows, cols, g, col.data(), dw, true);
                            }
                            for (std::size_t r0 = 0; r0 < out_rows && gx; r0 += step) {
                              const std::size_t r1 = std::min(out_rows, r0 + step);
                              const std::size_t width = (r1 - r0) * p.ow;
                              const T* gt = g + r0 * p.ow;
                              {
                                gemm_strided<T>(false, false, rows, width, p.out_channels, wt.data(),
                                                p.out_channels, gt, cols, dcol.data(), width, false);
                                col2im_rows_add(p, dcol.data(), r0, r1, dxb);
                              }
                            }
                          }
                          if (has_bias && wants_grad(self, 2)) {
                            auto& gb = input_grad(self, 2);
                            for (std::size_t o = 0; o < p.out_channels; ++o) {
                              LaneSum acc;
                              for (std::size_t b = 0; b < p.batch; ++b)
                                acc.add(self.pass_grad.data() + b * p.out_sample() + o * cols, cols);
                              gb[o] += static_cast<T>(acc.total());
                            }
                          }
                        });
}

}  // namespace

template <typename T>
BasicTensor<T> conv3d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias,
                      const Conv3dGeometry& geometry) {
  require_rank(x.shape(), 5, "conv3d input");
  require_rank(w.shape(), 5, "conv3d weight");
  const auto p = make_plan(x.shape(), w.shape(), geometry);
  return conv_impl(x, w, bias, p, Shape{p.batch, p.out_channels, p.ot, p.oh, p.ow});
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias,
                      const Conv2dGeometry& geometry) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(w.shape(), 4, "conv2d weight");
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  Conv3dGeometry g3;
  g3.stride = {1, geometry.stride[0], geometry.stride[1]};
  g3.padding = {0, geometry.padding[0], geometry.padding[1]};
  const auto p = make_plan(Shape{xs[0], xs[1], 1, xs[2], xs[3]},
                           Shape{ws[0], ws[1], 1, ws[2], ws[3]}, g3);
  return conv_impl(x, w, bias, p, Shape{p.batch, p.out_channels, p.oh, p.ow});
}

// ---------------------------------------------------------------------------
// Normalization and pooling

template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, BasicTensor<T>& running_mean,
                          BasicTensor<T>& running_var, const BatchNormOptions& options) {
  const auto& xs = x.shape();
  if (xs.size() < 2) usage_error("batch_norm expects at least rank 2, got ", shape_str(xs));
  const std::size_t batch = xs[0], channels = xs[1];
  std::size_t inner = 1;
  for (std::size_t i = 2; i < xs.size(); ++i) inner *= xs[i];
  const Shape cshape{channels};
  if (gamma.shape() != cshape || beta.shape() != cshape || running_mean.shape() != cshape ||
      running_var.shape() != cshape) {
    usage_error("batch_norm parameters must have shape ", shape_str(cshape));
  }
  const std::size_t population = batch * inner;
  if (options.training && population < 2) {
    usage_error("batch_norm in training mode needs at least 2 values per channel, got ",
                population);
  }

  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  std::vector<T> y(xv.size());
  std::vector<T> xhat(xv.size());
  std::vector<double> inv_std(channels);

  for (std::size_t c = 0; c < channels; ++c) {
    double mu, var;
    if (options.training) {
      LaneSum s;
      for (std::size_t b = 0; b < batch; ++b) s.add(xv.data() + (b * channels + c) * inner, inner);
      mu = s.total() / static_cast<double>(population);
      LaneSum ss;
      for (std::size_t b = 0; b < batch; ++b)
        ss.add_squared_deviation(xv.data() + (b * channels + c) * inner, inner, mu);
      var = ss.total() / static_cast<double>(population);
      auto rm = running_mean.mutable_data();
      auto rv = running_var.mutable_data();
      const double unbiased = var * static_cast<double>(population) / static_cast<double>(population - 1);
      rm[c] = static_cast<T>((1.0 - options.momentum) * rm[c] + options.momentum * mu);
      rv[c] = static_cast<T>((1.0 - options.momentum) * rv[c] + options.momentum * unbiased);
    } else {
      mu = running_mean.data()[c];
      var = running_var.data()[c];
    }
    const double is = 1.0 / std::sqrt(var + options.epsilon);
    inv_std[c] = is;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t off = (b * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const double h = (xv[off + i] - mu) * is;
        xhat[off + i] = static_cast<T>(h);
        y[off + i] = static_cast<T>(gv[c] * h + bv[c]);
      }
    }
  }

  const bool training = options.training;
  return make_result<T>(
      xs, std::move(y), {x, gamma, beta},
      [batch, channels, inner, population, training, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](NodeT<T>& self) {
        const auto& g = self.pass_grad;
        const auto& gv = input_value(self, 1);
        for (std::size_t c = 0; c < channels; ++c) {
          LaneSum lane_g, lane_gx;
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t off = (b * channels + c) * inner;
            lane_g.add(g.data() + off, inner);
            lane_gx.add_product(g.data() + off, xhat.data() + off, inner);
          }
          const double sum_g = lane_g.total(), sum_gx = lane_gx.total();
          if (wants_grad(self, 1)) input_grad(self, 1)[c] += static_cast<T>(sum_gx);
          if (wants_grad(self, 2)) input_grad(self, 2)[c] += static_cast<T>(sum_g);
          if (wants_grad(self, 0)) {
            auto& gx = input_grad(self, 0);
            const double m = static_cast<double>(population);
            for (std::size_t b = 0; b < batch; ++b) {
              const std::size_t off = (b * channels + c) * inner;
              for (std::size_t i = 0; i < inner; ++i) {
                double d;
                if (training) {
                  d = gv[c] * inv_std[c] / m * (m * g[off + i] - sum_g - xhat[off + i] * sum_gx);
                } else {
                  d = g[off + i] * gv[c] * inv_std[c];
                }
                gx[off + i] += static_cast<T>(d);
              }
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  const auto& xs = x.shape();
  if (xs.size() < 3) usage_error("global_avg_pool expects rank >= 3, got ", shape_str(xs));
  const std::size_t rows = xs[0] * xs[1];
  const std::size_t inner = x.numel() / rows;
  const auto xv = x.data();
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    LaneSum lanes;
    lanes.add(xv.data() + r * inner, inner);
    const double s = lanes.total();
    out[r] = static_cast<T>(s / static_cast<double>(inner));
  }
  return make_result<T>(Shape{xs[0], xs[1]}, std::move(out), {x}, [rows, inner](NodeT<T>& self) {
    auto& gx = input_grad(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const T g = static_cast<T>(self.pass_grad[r] / static_cast<double>(inner));
      for (std::size_t i = 0; i < inner; ++i) gx[r * inner + i] += g;
    }
  });
}

template <typename T>
BasicTensor<T> crop_time(const BasicTensor<T>& x, std::size_t begin, std::size_t length) {
  require_rank(x.shape(), 5, "crop_time");
  const auto& xs = x.shape();
  if (length == 0 || begin + length > xs[2]) {
    usage_error("crop_time [", begin, ", ", begin + length, ") outside temporal extent ", xs[2]);
  }
  const std::size_t outer = xs[0] * xs[1];
  const std::size_t frame = xs[3] * xs[4];
  const std::size_t t = xs[2];
  const auto xv = x.data();
  std::vector<T> out(outer * length * frame);
  for (std::size_t o = 0; o < outer; ++o) {
    const T* src = xv.data() + (o * t + begin) * frame;
    std::copy(src, src + length * frame, out.data() + o * length * frame);
  }
  return make_result<T>(Shape{xs[0], xs[1], length, xs[3], xs[4]}, std::move(out), {x},
                        [outer, frame, t, begin, length](NodeT<T>& self) {
                          auto& gx = input_grad(self, 0);
                          for (std::size_t o = 0; o < outer; ++o) {
                            const T* src = self.pass_grad.data() + o * length * frame;
                            T* dst = gx.data() + (o * t + begin) * frame;
                            for (std::size_t i = 0; i < length * frame; ++i) dst[i] += src[i];
                          }
                        });
}

// ---------------------------------------------------------------------------
// Softmax and losses

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& z, double tau) {
  if (!(tau > 0.0)) usage_error("softmax temperature must be positive, got ", tau);
  const auto& zs = z.shape();
  const std::size_t k = zs.back();
  const std::size_t rows = z.numel() / k;
  const auto zv = z.data();
  std::vector<T> out(zv.size());
  std::vector<double> e(k);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* zr = zv.data() + r * k;
    const double mx = *std::max_element(zr, zr + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      e[j] = std::exp((zr[j] - mx) / tau);
      s += e[j];
    }
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = static_cast<T>(e[j] / s);
  }
  std::vector<T> probs = out;
  return make_result<T>(zs, std::move(out), {z},
                        [k, rows, tau, probs = std::move(probs)](NodeT<T>& self) {
                          auto& gz = input_grad(self, 0);
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* y = probs.data() + r * k;
                            const T* g = self.pass_grad.data() + r * k;
                            double dot = 0.0;
                            for (std::size_t j = 0; j < k; ++j) dot += static_cast<double>(g[j]) * y[j];
                            for (std::size_t j = 0; j < k; ++j)
                              gz[r * k + j] += static_cast<T>(y[j] * (g[j] - dot) / tau);
                          }
                        });
}

template <typename T>
BasicTensor<T> soft_cross_entropy(const BasicTensor<T>& logits, const BasicTensor<T>& targets,
                                  std::span<const double> row_weights) {
  require_rank(logits.shape(), 2, "soft_cross_entropy");
  if (targets.shape() != logits.shape()) {
    usage_error("soft_cross_entropy: targets ", shape_str(targets.shape()), " vs logits ",
                shape_str(logits.shape()));
  }
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  check_row_weights(row_weights, rows, "soft_cross_entropy");
  const auto zv = logits.data();
  const auto yv = targets.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double y = yv[r * k + j];
      if (!(y >= 0.0) || !std::isfinite(y)) usage_error("soft target row ", r, " has an invalid entry");
      s += y;
    }
    if (std::abs(s - 1.0) > 1e-5) usage_error("soft target row ", r, " sums to ", s, ", expected 1");
  }

  std::vector<double> weights(rows, 1.0);
  if (!row_weights.empty()) weights.assign(row_weights.begin(), row_weights.end());
  const double total_weight = std::accumulate(weights.begin(), weights.end(), 0.0);

  // d/dz of the row loss is softmax(z)·Σy − y; stored pre-scaled.
  std::vector<T> dlogits(zv.size(), T(0));
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* z = zv.data() + r * k;
    const T* y = yv.data() + r * k;
    const double mx = *std::max_element(z, z + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(z[j] - mx);
    const double log_s = std::log(s);
    double row_loss = 0.0, ysum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double log_f = z[j] - mx - log_s;
      row_loss -= y[j] * log_f;
      ysum += y[j];
    }
    if (total_weight > 0.0) {
      const double w = weights[r] / total_weight;
      loss += w * row_loss;
      for (std::size_t j = 0; j < k; ++j) {
        const double f = std::exp(z[j] - mx - log_s);
        dlogits[r * k + j] = static_cast<T>(w * (f * ysum - y[j]));
      }
    }
  }
  return make_result<T>(Shape{1}, {static_cast<T>(loss)}, {logits},
                        [dlogits = std::move(dlogits)](NodeT<T>& self) {
                          auto& gz = input_grad(self, 0);
                          const T g = self.pass_grad[0];
                          for (std::size_t i = 0; i < gz.size(); ++i) gz[i] += g * dlogits[i];
                        });
}

template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels) {
  require_rank(logits.shape(), 2, "cross_entropy");
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  if (labels.size() != rows) usage_error("cross_entropy: ", labels.size(), " labels for ", rows, " rows");
  std::vector<T> onehot(rows * k, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= k) {
      usage_error("cross_entropy: label ", labels[r], " outside [0, ", k, ")");
    }
    onehot[r * k + static_cast<std::size_t>(labels[r])] = T(1);
  }
  return soft_cross_entropy(logits, BasicTensor<T>(logits.shape(), std::move(onehot)));
}

template <typename T>
BasicTensor<T> mse(const BasicTensor<T>& a, const BasicTensor<T>& b,
                   std::span<const double> row_weights) {
  if (a.shape() != b.shape()) {
    usage_error("mse shape mismatch: ", shape_str(a.shape()), " vs ", shape_str(b.shape()));
  }
  const std::size_t rows = a.dim(0);
  const std::size_t inner = a.numel() / rows;
  check_row_weights(row_weights, rows, "mse");
  std::vector<double> weights(rows, 1.0);
  if (!row_weights.empty()) weights.assign(row_weights.begin(), row_weights.end());
  const double total_weight = std::accumulate(weights.begin(), weights.end(), 0.0);

  const auto av = a.data();
  const auto bv = b.data();
  double loss = 0.0;
  std::vector<T> diff_scaled(av.size(), T(0));
  if (total_weight > 0.0) {
    for (std::size_t r = 0; r < rows; ++r) {
      const double w = weights[r] / (total_weight * static_cast<double>(inner));
      for (std::size_t i = 0; i < inner; ++i) {
        const double d = static_cast<double>(av[r * inner + i]) - bv[r * inner + i];
        loss += w * d * d;
        diff_scaled[r * inner + i] = static_cast<T>(2.0 * w * d);
      }
    }
  }
  return make_result<T>(Shape{1}, {static_cast<T>(loss)}, {a, b},
                        [diff_scaled = std::move(diff_scaled)](NodeT<T>& self) {
                          const T g = self.pass_grad[0];
                          if (wants_grad(self, 0)) {
                            auto& ga = input_grad(self, 0);
                            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * diff_scaled[i];
                          }
                          if (wants_grad(self, 1)) {
                            auto& gb = input_grad(self, 1);
                            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g * diff_scaled[i];
                          }
                        });
}

// ---------------------------------------------------------------------------

#define VIDISTILL_INSTANTIATE_OPS(T)                                                          \
  template BasicTensor<T> elementwise(Elementwise, const BasicTensor<T>&,                     \
                                      const BasicTensor<T>&);                                 \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                    \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                         \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                        \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                              \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);               \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&,                \
                                 const BasicTensor<T>&);                                      \
  template BasicTensor<T> conv3d(const BasicTensor<T>&, const BasicTensor<T>&,                \
                                 const BasicTensor<T>&, const Conv3dGeometry&);               \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&,                \
                                 const BasicTensor<T>&, const Conv2dGeometry&);               \
  template BasicTensor<T> batch_norm(const BasicTensor<T>&, const BasicTensor<T>&,            \
                                     const BasicTensor<T>&, BasicTensor<T>&, BasicTensor<T>&, \
                                     const BatchNormOptions&);                                \
  template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                             \
  template BasicTensor<T> crop_time(const BasicTensor<T>&, std::size_t, std::size_t);        \
  template BasicTensor<T> softmax(const BasicTensor<T>&, double);                             \
  template BasicTensor<T> soft_cross_entropy(const BasicTensor<T>&, const BasicTensor<T>&,    \
                                             std::span<const double>);                        \
  template BasicTensor<T> cross_entropy(const BasicTensor<T>&, std::span<const int>);         \
  template BasicTensor<T> mse(const BasicTensor<T>&, const BasicTensor<T>&,                   \
                              std::span<const double>);

VIDISTILL_INSTANTIATE_OPS(float)
VIDISTILL_INSTANTIATE_OPS(double)

#undef VIDISTILL_INSTANTIATE_OPS

}  // namespace vidistill::ops
