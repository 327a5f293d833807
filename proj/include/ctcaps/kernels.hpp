#pragma once

#include <cstdint>

// Dense compute kernels in two builds. kernels::serial is the plain-loop
// reference implementation; kernels::parallel adds OpenMP worksharing and
// an im2col+GEMM path for convolution. Every output element is owned by
// exactly one thread and its reduction runs in the same order in both
// builds, so the two namespaces produce bit-identical results for any
// thread count. Dispatch functions pick the active backend.

namespace ctcaps::kernels {

enum class Backend { serial, parallel };
Backend backend();
void set_backend(Backend b);

struct Conv2dDims {
  int batch, cin, h, w;  // input NCHW
  int cout, ksize;       // square kernels, OIKK layout
  int stride, pad;
  int out_h() const { return (h + 2 * pad - ksize) / stride + 1; }
  int out_w() const { return (w + 2 * pad - ksize) / stride + 1; }
};

struct CapsDims {
  int batch, in_caps, out_caps, in_dim, out_dim;
  int types;  // transform groups; in_caps % types == 0, consecutive blocks
};

#define CTCAPS_KERNEL_DECLS                                                          \
  void matmul(const float* a, const float* b, float* c, int m, int k, int n,         \
              bool trans_a, bool trans_b);                                           \
  void conv2d_forward(const float* in, const float* w, const float* bias,            \
                      float* out, const Conv2dDims& d);                              \
  void conv2d_backward_input(const float* w, const float* dout, float* din,          \
                             const Conv2dDims& d);                                   \
  void conv2d_backward_filter(const float* in, const float* dout, float* dw,         \
                              float* db, const Conv2dDims& d);                       \
  void maxpool_forward(const float* in, float* out, int32_t* argmax, int batch,      \
                       int c, int h, int w, int window, int stride);                 \
  void maxpool_backward(const float* dout, const int32_t* argmax, float* din,        \
                        int batch, int c, int h, int w, int window, int stride);     \
  void caps_transform_forward(const float* u, const float* w, float* uhat,           \
                              const CapsDims& d);                                    \
  void caps_transform_backward_input(const float* w, const float* duhat, float* du,  \
                                     const CapsDims& d);                             \
  void caps_transform_backward_weights(const float* u, const float* duhat,           \
                                       float* dw, const CapsDims& d);                \
  void routing_weighted_sum(const float* uhat, const float* c, float* s, int batch,  \
                            int in_caps, int out_caps, int dim);                     \
  void routing_weighted_sum_backward(const float* c, const float* ds, float* duhat,  \
                                     int batch, int in_caps, int out_caps, int dim); \
  void bilinear_resize(const float* in, float* out, int h, int w, int oh, int ow);

namespace serial {
CTCAPS_KERNEL_DECLS
}
namespace parallel {
CTCAPS_KERNEL_DECLS
}

CTCAPS_KERNEL_DECLS

#undef CTCAPS_KERNEL_DECLS

}  // namespace ctcaps::kernels
