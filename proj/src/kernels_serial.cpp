#include "ctcaps/kernels.hpp"

#include <algorithm>
#include <cmath>

// Reference kernels: straight loops, no threading, no blocking. Output
// buffers are overwritten, never accumulated into. Reductions run in a
// fixed ascending order; the parallel build repeats the same per-element
// order, which is what makes the two backends bit-comparable.

namespace ctcaps::kernels::serial {

void matmul(const float* a, const float* b, float* c, int m, int k, int n,
            bool trans_a, bool trans_b) {
  std::fill(c, c + m * n, 0.0f);
  if (!trans_a && !trans_b) {
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < k; ++p) {
        float av = a[i * k + p];
        const float* brow = b + p * n;
        float* crow = c + i * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
  } else if (!trans_a && trans_b) {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        const float* arow = a + i * k;
        const float* brow = b + j * k;
        float acc = 0.0f;
        for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
        c[i * n + j] = acc;
      }
  } else if (trans_a && !trans_b) {
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < k; ++p) {
        float av = a[p * m + i];
        const float* brow = b + p * n;
        float* crow = c + i * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
  } else {
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
  const int oh = d.out_h(), ow = d.out_w();
  for (int b = 0; b < d.batch; ++b)
    for (int o = 0; o < d.cout; ++o)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          float acc = 0.0f;
          for (int c = 0; c < d.cin; ++c)
            for (int kh = 0; kh < d.ksize; ++kh) {
              int y = oy * d.stride - d.pad + kh;
              if (y < 0 || y >= d.h) continue;
              for (int kw = 0; kw < d.ksize; ++kw) {
                int x = ox * d.stride - d.pad + kw;
                if (x < 0 || x >= d.w) continue;
                acc += in[((b * d.cin + c) * d.h + y) * d.w + x] *
                       w[((o * d.cin + c) * d.ksize + kh) * d.ksize + kw];
              }
            }
          if (bias) acc += bias[o];
          out[((b * d.cout + o) * oh + oy) * ow + ox] = acc;
        }
}

void conv2d_backward_input(const float* w, const float* dout, float* din,
                           const Conv2dDims& d) {
  const int oh = d.out_h(), ow = d.out_w();
  // Gather form: each input cell sums the output cells its value fed into,
  // so no two iterations write the same element. The channel sum of each
  // tap is rounded before taps combine; the parallel build produces the
  // same per-tap partials with a GEMM, so both builds round identically.
  for (int b = 0; b < d.batch; ++b)
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
              float partial = 0.0f;
              for (int o = 0; o < d.cout; ++o)
                partial += w[((o * d.cin + c) * d.ksize + kh) * d.ksize + kw] *
                           dout[((b * d.cout + o) * oh + oy) * ow + ox];
              acc += partial;
            }
          }
          din[((b * d.cin + c) * d.h + y) * d.w + x] = acc;
        }
}

void conv2d_backward_filter(const float* in, const float* dout, float* dw,
                            float* db, const Conv2dDims& d) {
  const int oh = d.out_h(), ow = d.out_w();
  // One rounded partial per image, summed in batch order; the parallel
  // build accumulates one GEMM result per image the same way.
  for (int o = 0; o < d.cout; ++o)
    for (int c = 0; c < d.cin; ++c)
      for (int kh = 0; kh < d.ksize; ++kh)
        for (int kw = 0; kw < d.ksize; ++kw) {
          float acc = 0.0f;
          for (int b = 0; b < d.batch; ++b) {
            float partial = 0.0f;
            for (int oy = 0; oy < oh; ++oy) {
              int y = oy * d.stride - d.pad + kh;
              if (y < 0 || y >= d.h) continue;
              for (int ox = 0; ox < ow; ++ox) {
                int x = ox * d.stride - d.pad + kw;
                if (x < 0 || x >= d.w) continue;
                partial += dout[((b * d.cout + o) * oh + oy) * ow + ox] *
                           in[((b * d.cin + c) * d.h + y) * d.w + x];
              }
            }
            acc += partial;
          }
          dw[((o * d.cin + c) * d.ksize + kh) * d.ksize + kw] = acc;
        }
  if (db)
    for (int o = 0; o < d.cout; ++o) {
      float acc = 0.0f;
      for (int b = 0; b < d.batch; ++b)
        for (int q = 0; q < oh * ow; ++q)
          acc += dout[(b * d.cout + o) * oh * ow + q];
      db[o] = acc;
    }
}

void maxpool_forward(const float* in, float* out, int32_t* argmax, int batch,
                     int c, int h, int w, int window, int stride) {
  const int oh = (h - window) / stride + 1;
  const int ow = (w - window) / stride + 1;
  for (int b = 0; b < batch; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const float* plane = in + (b * c + ch) * h * w;
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          // Strict > keeps the first-scanned cell: ties pick the lowest
          // flat index inside the plane.
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
  // Half-pixel sampling: src = (dst + 0.5) * scale - 0.5, clamped to the
  // plane, so corners are not pinned and upscaling stays smooth.
  const double sy = double(h) / oh;
  const double sx = double(w) / ow;
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

}  // namespace ctcaps::kernels::serial
