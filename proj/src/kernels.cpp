#include "ctcaps/kernels.hpp"

namespace ctcaps::kernels {

namespace {
Backend g_backend = Backend::parallel;
}

Backend backend() { return g_backend; }
void set_backend(Backend b) { g_backend = b; }

void matmul(const float* a, const float* b, float* c, int m, int k, int n,
            bool trans_a, bool trans_b) {
  if (g_backend == Backend::serial)
    serial::matmul(a, b, c, m, k, n, trans_a, trans_b);
  else
    parallel::matmul(a, b, c, m, k, n, trans_a, trans_b);
}

void conv2d_forward(const float* in, const float* w, const float* bias,
                    float* out, const Conv2dDims& d) {
  if (g_backend == Backend::serial)
    serial::conv2d_forward(in, w, bias, out, d);
  else
    parallel::conv2d_forward(in, w, bias, out, d);
}

void conv2d_backward_input(const float* w, const float* dout, float* din,
                           const Conv2dDims& d) {
  if (g_backend == Backend::serial)
    serial::conv2d_backward_input(w, dout, din, d);
  else
    parallel::conv2d_backward_input(w, dout, din, d);
}

void conv2d_backward_filter(const float* in, const float* dout, float* dw,
                            float* db, const Conv2dDims& d) {
  if (g_backend == Backend::serial)
    serial::conv2d_backward_filter(in, dout, dw, db, d);
  else
    parallel::conv2d_backward_filter(in, dout, dw, db, d);
}

void maxpool_forward(const float* in, float* out, int32_t* argmax, int batch,
                     int c, int h, int w, int window, int stride) {
  if (g_backend == Backend::serial)
    serial::maxpool_forward(in, out, argmax, batch, c, h, w, window, stride);
  else
    parallel::maxpool_forward(in, out, argmax, batch, c, h, w, window, stride);
}

void maxpool_backward(const float* dout, const int32_t* argmax, float* din,
                      int batch, int c, int h, int w, int window, int stride) {
  if (g_backend == Backend::serial)
    serial::maxpool_backward(dout, argmax, din, batch, c, h, w, window, stride);
  else
    parallel::maxpool_backward(dout, argmax, din, batch, c, h, w, window, stride);
}

void caps_transform_forward(const float* u, const float* w, float* uhat,
                            const CapsDims& d) {
  if (g_backend == Backend::serial)
    serial::caps_transform_forward(u, w, uhat, d);
  else
    parallel::caps_transform_forward(u, w, uhat, d);
}

void caps_transform_backward_input(const float* w, const float* duhat, float* du,
                                   const CapsDims& d) {
  if (g_backend == Backend::serial)
    serial::caps_transform_backward_input(w, duhat, du, d);
  else
    parallel::caps_transform_backward_input(w, duhat, du, d);
}

void caps_transform_backward_weights(const float* u, const float* duhat,
                                     float* dw, const CapsDims& d) {
  if (g_backend == Backend::serial)
    serial::caps_transform_backward_weights(u, duhat, dw, d);
  else
    parallel::caps_transform_backward_weights(u, duhat, dw, d);
}

void routing_weighted_sum(const float* uhat, const float* c, float* s, int batch,
                          int in_caps, int out_caps, int dim) {
  if (g_backend == Backend::serial)
    serial::routing_weighted_sum(uhat, c, s, batch, in_caps, out_caps, dim);
  else
    parallel::routing_weighted_sum(uhat, c, s, batch, in_caps, out_caps, dim);
}

void routing_weighted_sum_backward(const float* c, const float* ds, float* duhat,
                                   int batch, int in_caps, int out_caps, int dim) {
  if (g_backend == Backend::serial)
    serial::routing_weighted_sum_backward(c, ds, duhat, batch, in_caps, out_caps, dim);
  else
    parallel::routing_weighted_sum_backward(c, ds, duhat, batch, in_caps, out_caps, dim);
}

void bilinear_resize(const float* in, float* out, int h, int w, int oh, int ow) {
  if (g_backend == Backend::serial)
    serial::bilinear_resize(in, out, h, w, oh, ow);
  else
    parallel::bilinear_resize(in, out, h, w, oh, ow);
}

}  // namespace ctcaps::kernels
