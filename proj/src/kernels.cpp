// SPDX-License-Identifier: Apache-2.0
#include "renofeat/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cstddef>
#include <limits>

namespace renofeat::kernels {

namespace {

using Index = std::ptrdiff_t;

Index as_index(std::size_t v) { return static_cast<Index>(v); }

// Output columns [lo, hi) whose input column ox*stride + kx - pad is in range.
struct ColumnRange {
  std::size_t lo, hi;
};

ColumnRange valid_columns(const ConvGeometry& g, std::size_t kx) {
  const Index s = as_index(g.stride);
  const Index offset = as_index(kx) - as_index(g.padding);
  Index lo = 0;
  if (offset < 0) lo = (-offset + s - 1) / s;
  const Index last = as_index(g.width) - 1 - offset;
  Index hi = last < 0 ? 0 : std::min(as_index(g.out_w), last / s + 1);
  if (hi < lo) hi = lo;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

bool valid_row(const ConvGeometry& g, std::size_t oy, std::size_t ky, std::size_t& iy) {
  const Index y = as_index(oy * g.stride + ky) - as_index(g.padding);
  if (y < 0 || y >= as_index(g.height)) return false;
  iy = static_cast<std::size_t>(y);
  return true;
}

}  // namespace

void set_num_threads(int threads) {
  if (threads > 0) omp_set_num_threads(threads);
}

int num_threads() { return omp_get_max_threads(); }

ConvGeometry conv_geometry(const Shape& input, const Shape& kernel, const Shape& bias, int stride,
                           int padding) {
  if (input.size() != 4) throw ShapeError("conv2d: input must be [N,C,H,W], got " + to_string(input));
  if (kernel.size() != 4) {
    throw ShapeError("conv2d: kernel must be [F,C,kh,kw], got " + to_string(kernel));
  }
  if (input[1] != kernel[1]) {
    throw ShapeError("conv2d: input channels " + std::to_string(input[1]) +
                     " do not match kernel channels " + std::to_string(kernel[1]) + " (input " +
                     to_string(input) + ", kernel " + to_string(kernel) + ")");
  }
  if (bias.size() != 1 || bias[0] != kernel[0]) {
    throw ShapeError("conv2d: bias must be [" + std::to_string(kernel[0]) + "], got " +
                     to_string(bias));
  }
  if (stride < 1) throw ShapeError("conv2d: stride must be positive");
  if (padding < 0) throw ShapeError("conv2d: padding must be non-negative");
  ConvGeometry g{input[0], input[1], input[2], input[3], kernel[0], kernel[2], kernel[3],
                 static_cast<std::size_t>(stride), static_cast<std::size_t>(padding), 0, 0};
  const auto out_extent = [&](std::size_t extent, std::size_t k, const char* axis) {
    const std::size_t padded = extent + 2 * g.padding;
    if (padded < k || (padded - k) % g.stride != 0) {
      throw ShapeError(std::string("conv2d: non-integer output ") + axis + " for input " +
                       to_string(input) + ", kernel " + to_string(kernel) + ", stride " +
                       std::to_string(stride) + ", padding " + std::to_string(padding));
    }
    return (padded - k) / g.stride + 1;
  };
  g.out_h = out_extent(g.height, g.kernel_h, "height");
  g.out_w = out_extent(g.width, g.kernel_w, "width");
  return g;
}

namespace {

// C[r][m] += sum_k A[r][k] * B[k][m] for an R x W tile held in registers.
template <std::size_t R, std::size_t W>
inline void gemm_tile(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c,
                      std::size_t ldc, std::size_t depth) {
  float acc[R][W];
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t w = 0; w < W; ++w) acc[r][w] = c[r * ldc + w];
  for (std::size_t k = 0; k < depth; ++k) {
    const float* brow = b + k * ldb;
    for (std::size_t r = 0; r < R; ++r) {
      const float av = a[r * lda + k];
      for (std::size_t w = 0; w < W; ++w) acc[r][w] += av * brow[w];
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t w = 0; w < W; ++w) c[r * ldc + w] = acc[r][w];
}

inline void gemm_edge(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c,
                      std::size_t ldc, std::size_t depth, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < depth; ++k) {
      const float av = a[r * lda + k];
      const float* brow = b + k * ldb;
      for (std::size_t w = 0; w < cols; ++w) c[r * ldc + w] += av * brow[w];
    }
  }
}

constexpr std::size_t kTileRows = 4;
constexpr std::size_t kTileCols = 32;

// C[rows][cols] += A[rows][depth] * B[depth][cols]. Row blocks are spread over
// threads; every element of C is owned by one thread and accumulated in k order.
void gemm_accumulate(const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c,
                     std::size_t ldc, std::size_t rows, std::size_t depth, std::size_t cols) {
  const Index blocks = as_index((rows + kTileRows - 1) / kTileRows);
#pragma omp parallel for schedule(static)
  for (Index blk = 0; blk < blocks; ++blk) {
    const std::size_t r0 = static_cast<std::size_t>(blk) * kTileRows;
    const std::size_t nr = std::min(kTileRows, rows - r0);
    const float* ab = a + r0 * lda;
    float* cb = c + r0 * ldc;
    std::size_t m = 0;
    if (nr == kTileRows) {
      for (; m + kTileCols <= cols; m += kTileCols) {
        gemm_tile<kTileRows, kTileCols>(ab, lda, b + m, ldb, cb + m, ldc, depth);
      }
    }
    if (m < cols) gemm_edge(ab, lda, b + m, ldb, cb + m, ldc, depth, nr, cols - m);
  }
}

constexpr std::size_t kDotRows = 4;
constexpr std::size_t kLanes = 16;

// out[i][j] = sum_{m < len} x[i][m] * y[j][m] for up to 4 x 4 row pairs, with
// a fixed lane-then-tail summation order.
void dot_tile(const float* x, std::size_t nx, const float* y, std::size_t ny, std::size_t ld,
              std::size_t len, float out[kDotRows][kDotRows]) {
  float lanes[kDotRows][kDotRows][kLanes] = {};
  const float* xr[kDotRows];
  const float* yr[kDotRows];
  for (std::size_t i = 0; i < kDotRows; ++i) {
    xr[i] = x + std::min(i, nx - 1) * ld;
    yr[i] = y + std::min(i, ny - 1) * ld;
  }
  std::size_t m = 0;
  for (; m + kLanes <= len; m += kLanes) {
    for (std::size_t i = 0; i < kDotRows; ++i)
      for (std::size_t j = 0; j < kDotRows; ++j)
        for (std::size_t l = 0; l < kLanes; ++l) lanes[i][j][l] += xr[i][m + l] * yr[j][m + l];
  }
  for (std::size_t i = 0; i < kDotRows; ++i) {
    for (std::size_t j = 0; j < kDotRows; ++j) {
      float s = 0.0f;
      for (std::size_t l = 0; l < kLanes; ++l) s += lanes[i][j][l];
      for (std::size_t t = m; t < len; ++t) s += xr[i][t] * yr[j][t];
      out[i][j] = s;
    }
  }
}

// Columns of the unfolded input: col[k][n * P + p] with k = (c * kh + ky) * kw + kx.
std::vector<float> im2col(const float* in, const ConvGeometry& g) {
  const std::size_t taps = g.in_channels * g.kernel_h * g.kernel_w;
  const std::size_t plane_out = g.out_h * g.out_w;
  const std::size_t cols = g.batch * plane_out;
  std::vector<float> col(taps * cols, 0.0f);
#pragma omp parallel for schedule(static)
  for (Index kk = 0; kk < as_index(taps); ++kk) {
    const std::size_t k = static_cast<std::size_t>(kk);
    const std::size_t c = k / (g.kernel_h * g.kernel_w);
    const std::size_t ky = (k / g.kernel_w) % g.kernel_h;
    const std::size_t kx = k % g.kernel_w;
    const ColumnRange range = valid_columns(g, kx);
    for (std::size_t n = 0; n < g.batch; ++n) {
      const float* ip = in + (n * g.in_channels + c) * g.height * g.width;
      float* dst = col.data() + k * cols + n * plane_out;
      for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        std::size_t iy;
        if (!valid_row(g, oy, ky, iy)) continue;
        const float* irow = ip + iy * g.width;
        float* drow = dst + oy * g.out_w;
        for (std::size_t ox = range.lo; ox < range.hi; ++ox) {
          drow[ox] = irow[ox * g.stride + kx - g.padding];
        }
      }
    }
  }
  return col;
}

}  // namespace

Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
                      int padding) {
  const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), bias.shape(), stride, padding);
  const std::size_t taps = g.in_channels * g.kernel_h * g.kernel_w;
  const std::size_t plane_out = g.out_h * g.out_w;
  const std::size_t cols = g.batch * plane_out;
  const std::vector<float> col = im2col(input.data(), g);

  // [F][N*P] product, then scattered into [N][F][P].
  std::vector<float> prod(g.filters * cols);
  for (std::size_t f = 0; f < g.filters; ++f) {
    std::fill(prod.begin() + f * cols, prod.begin() + (f + 1) * cols, bias[f]);
  }
  gemm_accumulate(kernel.data(), taps, col.data(), cols, prod.data(), cols, g.filters, taps, cols);

  Tensor out({g.batch, g.filters, g.out_h, g.out_w});
  float* o = out.data();
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t f = 0; f < g.filters; ++f) {
      const float* src = prod.data() + f * cols + n * plane_out;
      std::copy(src, src + plane_out, o + (n * g.filters + f) * plane_out);
    }
  }
  return out;
}

void conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out, int stride,
                     int padding, Tensor* grad_input, Tensor* grad_kernel, Tensor* grad_bias) {
  const Shape bias_shape{kernel.shape().at(0)};
  const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), bias_shape, stride, padding);
  if (grad_out.shape() != Shape{g.batch, g.filters, g.out_h, g.out_w}) {
    throw ShapeError("conv2d backward: gradient shape " + to_string(grad_out.shape()) +
                     " does not match output");
  }
  const std::size_t taps = g.in_channels * g.kernel_h * g.kernel_w;
  const std::size_t plane_out = g.out_h * g.out_w;
  const std::size_t cols = g.batch * plane_out;

  // Output gradient regrouped as [F][N*P].
  std::vector<float> go(g.filters * cols);
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t f = 0; f < g.filters; ++f) {
      const float* src = grad_out.data() + (n * g.filters + f) * plane_out;
      std::copy(src, src + plane_out, go.data() + f * cols + n * plane_out);
    }
  }

  if (grad_input) {
    // dcol[K][N*P] = W^T[K][F] * go[F][N*P], folded back onto the input.
    std::vector<float> wt(taps * g.filters);
    for (std::size_t f = 0; f < g.filters; ++f)
      for (std::size_t k = 0; k < taps; ++k) wt[k * g.filters + f] = kernel[f * taps + k];
    std::vector<float> dcol(taps * cols, 0.0f);
    gemm_accumulate(wt.data(), g.filters, go.data(), cols, dcol.data(), cols, taps, g.filters, cols);

    *grad_input = Tensor(input.shape());
    float* di = grad_input->data();
    const std::size_t per_channel = g.kernel_h * g.kernel_w;
#pragma omp parallel for schedule(static)
    for (Index job = 0; job < as_index(g.batch * g.in_channels); ++job) {
      const std::size_t n = static_cast<std::size_t>(job) / g.in_channels;
      const std::size_t c = static_cast<std::size_t>(job) % g.in_channels;
      float* dp = di + static_cast<std::size_t>(job) * g.height * g.width;
      for (std::size_t t = 0; t < per_channel; ++t) {
        const std::size_t ky = t / g.kernel_w, kx = t % g.kernel_w;
        const ColumnRange range = valid_columns(g, kx);
        const float* src = dcol.data() + (c * per_channel + t) * cols + n * plane_out;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          std::size_t iy;
          if (!valid_row(g, oy, ky, iy)) continue;
          float* drow = dp + iy * g.width;
          const float* srow = src + oy * g.out_w;
          for (std::size_t ox = range.lo; ox < range.hi; ++ox) {
            drow[ox * g.stride + kx - g.padding] += srow[ox];
          }
        }
      }
    }
  }

  if (grad_kernel || grad_bias) {
    // Reductions over N*P: float partial sums inside blocks of kChunk columns,
    // block totals accumulated in double.
    constexpr std::size_t kChunk = 256;
    if (grad_kernel) {
      const std::vector<float> col = im2col(input.data(), g);
      *grad_kernel = Tensor(kernel.shape());
      float* dw = grad_kernel->data();
      const std::size_t fb = (g.filters + kDotRows - 1) / kDotRows;
      const std::size_t kb = (taps + kDotRows - 1) / kDotRows;
#pragma omp parallel for schedule(static)
      for (Index job = 0; job < as_index(fb * kb); ++job) {
        const std::size_t f0 = static_cast<std::size_t>(job) / kb * kDotRows;
        const std::size_t k0 = static_cast<std::size_t>(job) % kb * kDotRows;
        const std::size_t nf = std::min(kDotRows, g.filters - f0);
        const std::size_t nk = std::min(kDotRows, taps - k0);
        double acc[kDotRows][kDotRows] = {};
        for (std::size_t m0 = 0; m0 < cols; m0 += kChunk) {
          const std::size_t len = std::min(kChunk, cols - m0);
          float part[kDotRows][kDotRows];
          dot_tile(go.data() + f0 * cols + m0, nf, col.data() + k0 * cols + m0, nk, cols, len, part);
          for (std::size_t i = 0; i < nf; ++i)
            for (std::size_t j = 0; j < nk; ++j) acc[i][j] += part[i][j];
        }
        for (std::size_t i = 0; i < nf; ++i)
          for (std::size_t j = 0; j < nk; ++j) dw[(f0 + i) * taps + k0 + j] = static_cast<float>(acc[i][j]);
      }
    }
    if (grad_bias) {
      *grad_bias = Tensor({g.filters});
      for (std::size_t f = 0; f < g.filters; ++f) {
        double total = 0.0;
        for (std::size_t m0 = 0; m0 < cols; m0 += kChunk) {
          const std::size_t len = std::min(kChunk, cols - m0);
          float s = 0.0f;
          const float* row = go.data() + f * cols + m0;
          for (std::size_t i = 0; i < len; ++i) s += row[i];
          total += s;
        }
        (*grad_bias)[f] = static_cast<float>(total);
      }
    }
  }
}

namespace {
void check_dense(const Shape& input, const Shape& weight, const Shape& bias) {
  if (input.size() != 2 || weight.size() != 2 || bias.size() != 1) {
    throw ShapeError("dense: expected input [N,D], weight [D,M], bias [M]; got " +
                     to_string(input) + ", " + to_string(weight) + ", " + to_string(bias));
  }
  if (input[1] != weight[0] || weight[1] != bias[0]) {
    throw ShapeError("dense: inner dimensions disagree: input " + to_string(input) + ", weight " +
                     to_string(weight) + ", bias " + to_string(bias));
  }
}
}  // namespace

Tensor dense_forward(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  check_dense(input.shape(), weight.shape(), bias.shape());
  const std::size_t rows = input.dim(0), inner = input.dim(1), cols = weight.dim(1);
  Tensor out({rows, cols});
  const float* x = input.data();
  const float* w = weight.data();
  float* o = out.data();
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < as_index(rows); ++r) {
    float* orow = o + static_cast<std::size_t>(r) * cols;
    std::copy(bias.data(), bias.data() + cols, orow);
    const float* xrow = x + static_cast<std::size_t>(r) * inner;
    for (std::size_t d = 0; d < inner; ++d) {
      const float xv = xrow[d];
      const float* wrow = w + d * cols;
      for (std::size_t m = 0; m < cols; ++m) orow[m] += xv * wrow[m];
    }
  }
  return out;
}

void dense_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out,
                    Tensor* grad_input, Tensor* grad_weight, Tensor* grad_bias) {
  check_dense(input.shape(), weight.shape(), Shape{weight.dim(1)});
  const std::size_t rows = input.dim(0), inner = input.dim(1), cols = weight.dim(1);
  if (grad_out.shape() != Shape{rows, cols}) {
    throw ShapeError("dense backward: gradient shape " + to_string(grad_out.shape()));
  }
  const float* x = input.data();
  const float* w = weight.data();
  const float* go = grad_out.data();
  if (grad_input) {
    *grad_input = Tensor(input.shape());
    float* dx = grad_input->data();
#pragma omp parallel for schedule(static)
    for (Index r = 0; r < as_index(rows); ++r) {
      const float* grow = go + static_cast<std::size_t>(r) * cols;
      for (std::size_t d = 0; d < inner; ++d) {
        const float* wrow = w + d * cols;
        double acc = 0.0;
        for (std::size_t m = 0; m < cols; ++m) acc += static_cast<double>(grow[m]) * wrow[m];
        dx[static_cast<std::size_t>(r) * inner + d] = static_cast<float>(acc);
      }
    }
  }
  if (grad_weight) {
    *grad_weight = Tensor(weight.shape());
    float* dw = grad_weight->data();
#pragma omp parallel for schedule(static)
    for (Index d = 0; d < as_index(inner); ++d) {
      float* drow = dw + static_cast<std::size_t>(d) * cols;
      for (std::size_t r = 0; r < rows; ++r) {
        const float xv = x[r * inner + static_cast<std::size_t>(d)];
        const float* grow = go + r * cols;
        for (std::size_t m = 0; m < cols; ++m) drow[m] += xv * grow[m];
      }
    }
  }
  if (grad_bias) {
    *grad_bias = Tensor({cols});
    float* db = grad_bias->data();
    for (std::size_t m = 0; m < cols; ++m) {
      double acc = 0.0;
      for (std::size_t r = 0; r < rows; ++r) acc += go[r * cols + m];
      db[m] = static_cast<float>(acc);
    }
  }
}

Tensor max_pool2x2_forward(const Tensor& input, std::vector<std::uint32_t>& argmax) {
  if (input.rank() != 4) throw ShapeError("max_pool2x2: input must be [N,C,H,W]");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("max_pool2x2: spatial dimensions must be even, got " +
                     to_string(input.shape()));
  }
  if (input.size() > std::numeric_limits<std::uint32_t>::max()) {
    throw ShapeError("max_pool2x2: input too large");
  }
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor out({n, c, oh, ow});
  argmax.assign(out.size(), 0);
  const float* in = input.data();
  float* o = out.data();
#pragma omp parallel for schedule(static)
  for (Index plane = 0; plane < as_index(n * c); ++plane) {
    const std::size_t base_in = static_cast<std::size_t>(plane) * h * w;
    const std::size_t base_out = static_cast<std::size_t>(plane) * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        std::size_t best = base_in + 2 * y * w + 2 * x;
        const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
        for (std::size_t k : cand) {
          if (in[k] > in[best]) best = k;
        }
        o[base_out + y * ow + x] = in[best];
        argmax[base_out + y * ow + x] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return out;
}

Tensor max_pool2x2_backward(const Shape& input_shape, const std::vector<std::uint32_t>& argmax,
                            const Tensor& grad_out) {
  if (argmax.size() != grad_out.size()) throw ShapeError("max_pool2x2 backward: size mismatch");
  Tensor grad(input_shape);
  float* g = grad.data();
  const float* go = grad_out.data();
  // Windows do not overlap, so every input receives at most one contribution.
  for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += go[i];
  return grad;
}

Tensor global_avg_pool_forward(const Tensor& input) {
  if (input.rank() != 4) throw ShapeError("global_avg_pool: input must be [N,C,H,W]");
  const std::size_t planes = input.dim(0) * input.dim(1);
  const std::size_t area = input.dim(2) * input.dim(3);
  Tensor out({input.dim(0), input.dim(1)});
  const float* in = input.data();
  float* o = out.data();
#pragma omp parallel for schedule(static)
  for (Index p = 0; p < as_index(planes); ++p) {
    const float* ip = in + static_cast<std::size_t>(p) * area;
    double acc = 0.0;
    for (std::size_t i = 0; i < area; ++i) acc += ip[i];
    o[p] = static_cast<float>(acc / static_cast<double>(area));
  }
  return out;
}

Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& grad_out) {
  if (input_shape.size() != 4 || grad_out.shape() != Shape{input_shape[0], input_shape[1]}) {
    throw ShapeError("global_avg_pool backward: shape mismatch");
  }
  Tensor grad(input_shape);
  const std::size_t area = input_shape[2] * input_shape[3];
  const float scale = 1.0f / static_cast<float>(area);
  float* g = grad.data();
  for (std::size_t p = 0; p < grad_out.size(); ++p) {
    std::fill(g + p * area, g + (p + 1) * area, grad_out[p] * scale);
  }
  return grad;
}

}  // namespace renofeat::kernels
