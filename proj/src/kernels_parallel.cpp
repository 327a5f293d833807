#include "ctcaps/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

// OpenMP build of the kernels. Work is split so that every output element
// is written by exactly one thread, and each element's reduction keeps the
// ascending order of the serial reference, so results match the reference
// bit for bit at any thread count. Convolution additionally switches to an
// im2col + GEMM layout, forward and backward; padded taps contribute exact
// zeros, which leaves float sums unchanged, and the backward passes round
// the same per-tap and per-image partials the serial reference does.

namespace ctcaps::kernels::parallel {

namespace {

// col row r = (c * k + kh) * k + kw, column q = oy * ow + ox; out-of-image
// taps become 0.0f.
void fill_col(const float* img, float* col, const Conv2dDims& d) {
  const int oh = d.out_h(), ow = d.out_w();
  const int rows = d.cin * d.ksize * d.ksize;
  const int cols = oh * ow;
#pragma omp parallel for
  for (int r = 0; r < rows; ++r) {
    int c = r / (d.ksize * d.ksize);
    int kh = (r / d.ksize) % d.ksize;
    int kw = r % d.ksize;
    float* crow = col + static_cast<size_t>(r) * cols;
    for (int oy = 0; oy < oh; ++oy) {
      int y = oy * d.stride - d.pad + kh;
      for (int ox = 0; ox < ow; ++ox) {
        int x = ox * d.stride - d.pad + kw;
        bool inside = y >= 0 && y < d.h && x >= 0 && x < d.w;
        crow[oy * ow + ox] = inside ? img[(c * d.h + y) * d.w + x] : 0.0f;
      }
    }
  }
}

// Transposed layout, colt[q][r], so the filter gradient GEMM can run in
// row-accumulation form, which vectorizes without reassociating sums.
void fill_colt(const float* img, float* colt, const Conv2dDims& d) {
  const int oh = d.out_h(), ow = d.out_w();
  const int rows = d.cin * d.ksize * d.ksize;
  const int cols = oh * ow;
#pragma omp parallel for
  for (int q = 0; q < cols; ++q) {
    const int oy = q / ow, ox = q % ow;
    float* row = colt + static_cast<size_t>(q) * rows;
    for (int c = 0; c < d.cin; ++c)
      for (int kh = 0; kh < d.ksize; ++kh) {
        int y = oy * d.stride - d.pad + kh;
        for (int kw = 0; kw < d.ksize; ++kw) {
          int x = ox * d.stride - d.pad + kw;
          bool inside = y >= 0 && y < d.h && x >= 0 && x < d.w;
          row[(c * d.ksize + kh) * d.ksize + kw] =
              inside ? img[(c * d.h + y) * d.w + x] : 0.0f;
        }
      }
  }
}

}  // namespace

void matmul(const float* a, const float* b, float* c, int m, int k, int n,
            bool trans_a, bool trans_b) {
  if (!trans_a && !trans_b) {
#pragma omp parallel for
    for (int i = 0; i < m; ++i) {
      float* crow = c + i * n;
      std::fill(crow, crow + n, 0.0f);
      for (int p = 0; p < k; ++p) {
        float av = a[i * k + p];
        const float* brow = b + p * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!trans_a && trans_b) {
#pragma omp parallel for
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        const float* arow = a + i * k;
        const float* brow = b + j * k;
        float acc = 0.0f;
        for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
        c[i * n + j] = acc;
      }
  } else if (trans_a && !trans_b) {
#pragma omp parallel for
    for (int i = 0; i < m; ++i) {
      float* crow = c + i * n;
      std::fill(crow, crow + n, 0.0f);
      for (int p = 0; p < k; ++p) {
        float av = a[p * m + i];
        const float* brow = b + p * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
#pragma omp parallel for
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        float acc = 0.0f;
        for (int p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
        c[i * n + j] = acc;
      }
  }
}

void conv2d_forward(const float* in, const float* w, const float* bias,
                    float* out, const Conv2dDims& d) {
  const int rows = d.cin * d.ksize * d.ksize;  // reduction axis, (c, kh, kw)
  const int cols = d.out_h() * d.out_w();
  std::vector<float> col(static_cast<size_t>(rows) * cols);
  for (int b = 0; b < d.batch; ++b) {
    fill_col(in + static_cast<size_t>(b) * d.cin * d.h * d.w, col.data(), d);
#pragma omp parallel for
    for (int o = 0; o < d.cout; ++o) {
      float* orow = out + (static_cast<size_t>(b) * d.cout + o) * cols;
      std::fill(orow, orow + cols, 0.0f);
      for (int r = 0; r < rows; ++r) {
        float wv = w[o * rows + r];
        const float* crow = col.data() + static_cast<size_t>(r) * cols;
        for (int q = 0; q < cols; ++q) orow[q] += wv * crow[q];
      }
      if (bias)
        for (int q = 0; q < cols; ++q) orow[q] += bias[o];
    }
  }
}

void conv2d_backward_input(const float* w, const float* dout, float* din,
                           const Conv2dDims& d) {
  const int oh = d.out_h(), ow = d.out_w();
  const int rows = d.cin * d.ksize * d.ksize;
  const int cols = oh * ow;
  // dcol[r][q] = sum_o w[o][r] * dout[o][q]: the per-tap channel partials,
  // as one GEMM reading w transposed. col2im then gathers each input
  // cell's valid taps in (kh, kw) order, matching the reference rounding.
  std::vector<float> dcol(static_cast<size_t>(rows) * cols);
  for (int b = 0; b < d.batch; ++b) {
    matmul(w, dout + static_cast<size_t>(b) * d.cout * cols, dcol.data(), rows, d.cout, cols,
           true, false);
    float* dimg = din + static_cast<size_t>(b) * d.cin * d.h * d.w;
#pragma omp parallel for
    for (int c = 0; c < d.cin; ++c)
      for (int y = 0; y < d.h; ++y)
        for (int x = 0; x < d.w; ++x) {
          float acc = 0.0f;
          for (int kh = 0; kh < d.ksize; ++kh) {
            int yo = y + d.pad - kh;
            if (yo < 0 || yo % d.stride != 0) continue;
            int oy = yo / d.stride;
            if (oy >= oh) continue;
            for (int kw = 0; kw < d.ksize; ++kw) {
              int xo = x + d.pad - kw;
              if (xo < 0 || xo % d.stride != 0) continue;
              int ox = xo / d.stride;
              if (ox >= ow) continue;
              acc += dcol[static_cast<size_t>((c * d.ksize + kh) * d.ksize + kw) * cols +
                          oy * ow + ox];
            }
          }
          dimg[(c * d.h + y) * d.w + x] = acc;
        }
  }
}

void conv2d_backward_filter(const float* in, const float* dout, float* dw,
                            float* db, const Conv2dDims& d) {
  const int oh = d.out_h(), ow = d.out_w();
  const int rows = d.cin * d.ksize * d.ksize;
  const int cols = oh * ow;
  // One GEMM per image against its transposed col matrix, accumulated in
  // batch order; padded col entries are exact zeros and change no sums.
  std::vector<float> colt(static_cast<size_t>(cols) * rows);
  std::vector<float> partial(static_cast<size_t>(d.cout) * rows);
  const size_t wn = static_cast<size_t>(d.cout) * rows;
  std::fill(dw, dw + wn, 0.0f);
  for (int b = 0; b < d.batch; ++b) {
    fill_colt(in + static_cast<size_t>(b) * d.cin * d.h * d.w, colt.data(), d);
    matmul(dout + static_cast<size_t>(b) * d.cout * cols, colt.data(), partial.data(), d.cout,
           cols, rows, false, false);
#pragma omp parallel for
    for (int64_t i = 0; i < static_cast<int64_t>(wn); ++i) dw[i] += partial[i];
  }
  if (db) {
#pragma omp parallel for
    for (int o = 0; o < d.cout; ++o) {
      float acc = 0.0f;
      for (int b = 0; b < d.batch; ++b)
        for (int q = 0; q < oh * ow; ++q)
          acc += dout[(b * d.cout + o) * oh * ow + q];
      db[o] = acc;
    }
  }
}

void maxpool_forward(const float* in, float* out, int32_t* argmax, int batch,
                     int c, int h, int w, int window, int stride) {
  const int oh = (h - window) / stride + 1;
  const int ow = (w - window) / stride + 1;
#pragma omp parallel for collapse(2)
  for (int b = 0; b < batch; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const float* plane = in + (b * c + ch) * h * w;
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          int best = oy * stride * w + ox * stride;
          float bv = plane[best];
          for (int ky = 0; ky < window; ++ky)
            for (int kx = 0; kx < window; ++kx) {
              int idx = (oy * stride + ky) * w + ox * stride + kx;
              if (plane[idx] > bv) {
                bv = plane[idx];
                best = idx;
              }
            }
          out[((b * c + ch) * oh + oy) * ow + ox] = bv;
          argmax[((b * c + ch) * oh + oy) * ow + ox] = best;
        }
    }
}

void maxpool_backward(const float* dout, const int32_t* argmax, float* din,
                      int batch, int c, int h, int w, int window, int stride) {
  const int oh = (h - window) / stride + 1;
  const int ow = (w - window) / stride + 1;
#pragma omp parallel for collapse(2)
  for (int b = 0; b < batch; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          float acc = 0.0f;
          int oy_lo = (y >= window) ? (y - window) / stride + 1 : 0;
          int oy_hi = std::min(oh - 1, y / stride);
          int ox_lo = (x >= window) ? (x - window) / stride + 1 : 0;
          int ox_hi = std::min(ow - 1, x / stride);
          for (int oy = oy_lo; oy <= oy_hi; ++oy)
            for (int ox = ox_lo; ox <= ox_hi; ++ox) {
              int q = ((b * c + ch) * oh + oy) * ow + ox;
              if (argmax[q] == y * w + x) acc += dout[q];
            }
          din[((b * c + ch) * h + y) * w + x] = acc;
        }
}

void caps_transform_forward(const float* u, const float* w, float* uhat,
                            const CapsDims& d) {
  const int group = d.in_caps / d.types;
#pragma omp parallel for collapse(2)
  for (int b = 0; b < d.batch; ++b)
    for (int i = 0; i < d.in_caps; ++i) {
      const int t = i / group;
      const float* uv = u + (b * d.in_caps + i) * d.in_dim;
      for (int j = 0; j < d.out_caps; ++j) {
        const float* wm = w + ((t * d.out_caps + j) * d.in_dim) * d.out_dim;
        float* uh = uhat + ((b * d.in_caps + i) * d.out_caps + j) * d.out_dim;
        for (int od = 0; od < d.out_dim; ++od) {
          float acc = 0.0f;
          for (int id = 0; id < d.in_dim; ++id)
            acc += uv[id] * wm[id * d.out_dim + od];
          uh[od] = acc;
        }
      }
    }
}

void caps_transform_backward_input(const float* w, const float* duhat, float* du,
                                   const CapsDims& d) {
  const int group = d.in_caps / d.types;
#pragma omp parallel for collapse(2)
  for (int b = 0; b < d.batch; ++b)
    for (int i = 0; i < d.in_caps; ++i) {
      const int t = i / group;
      float* dv = du + (b * d.in_caps + i) * d.in_dim;
      for (int id = 0; id < d.in_dim; ++id) {
        float acc = 0.0f;
        for (int j = 0; j < d.out_caps; ++j) {
          const float* wm = w + ((t * d.out_caps + j) * d.in_dim + id) * d.out_dim;
          const float* dh = duhat + ((b * d.in_caps + i) * d.out_caps + j) * d.out_dim;
          for (int od = 0; od < d.out_dim; ++od) acc += dh[od] * wm[od];
        }
        dv[id] = acc;
      }
    }
}

void caps_transform_backward_weights(const float* u, const float* duhat,
                                     float* dw, const CapsDims& d) {
  const int group = d.in_caps / d.types;
#pragma omp parallel for collapse(2)
  for (int t = 0; t < d.types; ++t)
    for (int j = 0; j < d.out_caps; ++j)
      for (int id = 0; id < d.in_dim; ++id)
        for (int od = 0; od < d.out_dim; ++od) {
          float acc = 0.0f;
          for (int b = 0; b < d.batch; ++b)
            for (int g = 0; g < group; ++g) {
              int i = t * group + g;
              acc += u[(b * d.in_caps + i) * d.in_dim + id] *
                     duhat[((b * d.in_caps + i) * d.out_caps + j) * d.out_dim + od];
            }
          dw[((t * d.out_caps + j) * d.in_dim + id) * d.out_dim + od] = acc;
        }
}

void routing_weighted_sum(const float* uhat, const float* c, float* s, int batch,
                          int in_caps, int out_caps, int dim) {
#pragma omp parallel for collapse(2)
  for (int b = 0; b < batch; ++b)
    for (int j = 0; j < out_caps; ++j)
      for (int d = 0; d < dim; ++d) {
        float acc = 0.0f;
        for (int i = 0; i < in_caps; ++i)
          acc += c[(b * in_caps + i) * out_caps + j] *
                 uhat[((b * in_caps + i) * out_caps + j) * dim + d];
        s[(b * out_caps + j) * dim + d] = acc;
      }
}

void routing_weighted_sum_backward(const float* c, const float* ds, float* duhat,
                                   int batch, int in_caps, int out_caps, int dim) {
#pragma omp parallel for collapse(2)
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < in_caps; ++i)
      for (int j = 0; j < out_caps; ++j) {
        float cv = c[(b * in_caps + i) * out_caps + j];
        for (int d = 0; d < dim; ++d)
          duhat[((b * in_caps + i) * out_caps + j) * dim + d] =
              cv * ds[(b * out_caps + j) * dim + d];
      }
}

void bilinear_resize(const float* in, float* out, int h, int w, int oh, int ow) {
  const double sy = double(h) / oh;
  const double sx = double(w) / ow;
#pragma omp parallel for
  for (int y = 0; y < oh; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, double(h - 1));
    int y0 = int(fy);
    int y1 = std::min(y0 + 1, h - 1);
    float ty = float(fy - y0);
    for (int x = 0; x < ow; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, double(w - 1));
      int x0 = int(fx);
      int x1 = std::min(x0 + 1, w - 1);
      float tx = float(fx - x0);
      float top = (1.0f - tx) * in[y0 * w + x0] + tx * in[y0 * w + x1];
      float bot = (1.0f - tx) * in[y1 * w + x0] + tx * in[y1 * w + x1];
      out[y * ow + x] = (1.0f - ty) * top + ty * bot;
    }
  }
}

}  // namespace ctcaps::kernels::parallel
