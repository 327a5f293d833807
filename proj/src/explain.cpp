#include "ctcaps/explain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ctcaps/capsnet.hpp"
#include "ctcaps/errors.hpp"
#include "ctcaps/ops.hpp"
#include "ctcaps/util.hpp"

namespace ctcaps {

HeatMap gradcam(SliceModel& m, const Tensor& slice, int target_class,
                const std::string& slice_id) {
  const int s = m.cfg.input_size;
  if (slice.rank() != 2 || slice.dim(0) != s || slice.dim(1) != s)
    throw ShapeError("gradcam expects a " + std::to_string(s) + "x" + std::to_string(s) +
                     " slice, got " + shape_str(slice.shape()));
  if (target_class < 0 || target_class >= m.cfg.class_caps)
    throw UsageError("class index " + std::to_string(target_class) + " out of range [0, " +
                     std::to_string(m.cfg.class_caps) + ")");
  if (!ops::grad_enabled())
    throw StateError("gradcam needs the gradient tape; drop the NoGradGuard");

  Tensor batch = ops::reshape(slice, {1, 1, s, s});
  SliceForward fwd = slice_forward(m, batch, false);
  Tensor norms = capsule_norms(fwd.class_caps);
  ops::backward(ops::pick(norms, {0, target_class}));

  const int ch = fwd.conv4.dim(1), grid = fwd.conv4.dim(2);
  const int plane = grid * grid;
  const float* act = fwd.conv4.data();
  // Missing gradient buffer means nothing flowed back; same as all zeros.
  const bool have_grad = fwd.conv4.node()->requires_grad && !fwd.conv4.node()->grad.empty();
  std::vector<float> cam(static_cast<size_t>(plane), 0.0f);
  if (have_grad) {
    const float* grad = fwd.conv4.node()->grad.data();
    for (int c = 0; c < ch; ++c) {
      double wsum = 0.0;
      for (int g = 0; g < plane; ++g) wsum += grad[c * plane + g];
      const float w = static_cast<float>(wsum / plane);
      for (int g = 0; g < plane; ++g) cam[static_cast<size_t>(g)] += w * act[c * plane + g];
    }
  }
  for (float& v : cam) v = std::max(v, 0.0f);

  // The tape above accumulated into the model parameters; scrub it so a
  // following training step does not inherit explanation gradients.
  for (Tensor& p : m.parameters()) p.zero_grad();

  Tensor coarse = Tensor::from_data({grid, grid}, std::move(cam));
  Tensor up = ops::bilinear_resize(coarse, s, s);
  float lo = up.data()[0], hi = up.data()[0];
  for (int64_t i = 0; i < up.numel(); ++i) {
    lo = std::min(lo, up.data()[i]);
    hi = std::max(hi, up.data()[i]);
  }
  if (hi > lo) {
    const float range = hi - lo;
    for (int64_t i = 0; i < up.numel(); ++i) up.data()[i] = (up.data()[i] - lo) / range;
  } else {
    // Flat map carries no localization signal; report it as all zero.
    for (int64_t i = 0; i < up.numel(); ++i) up.data()[i] = 0.0f;
  }
  HeatMap map;
  map.values = up;
  map.source_slice_id = slice_id;
  map.target_class = target_class;
  return map;
}

void write_pgm(const Tensor& img, const std::filesystem::path& path) {
  if (img.rank() != 2) throw ShapeError("pgm export expects (H, W), got " + shape_str(img.shape()));
  const int h = img.dim(0), w = img.dim(1);
  const std::string header = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<unsigned char> bytes(header.begin(), header.end());
  bytes.reserve(bytes.size() + static_cast<size_t>(img.numel()));
  for (int64_t i = 0; i < img.numel(); ++i) {
    const float v = std::clamp(img.data()[i], 0.0f, 1.0f);
    bytes.push_back(static_cast<unsigned char>(std::lround(v * 255.0f)));
  }
  util::write_file_atomic(path, bytes);
}

void write_side_by_side(const Tensor& left, const Tensor& right,
                        const std::filesystem::path& path) {
  if (left.rank() != 2 || right.rank() != 2 || left.shape() != right.shape())
    throw ShapeError("side-by-side export needs two equal (H, W) images, got " +
                     shape_str(left.shape()) + " and " + shape_str(right.shape()));
  const int h = left.dim(0), w = left.dim(1);
  Tensor joined = Tensor::zeros({h, 2 * w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      joined.set({y, x}, left.at({y, x}));
      joined.set({y, w + x}, right.at({y, x}));
    }
  }
  write_pgm(joined, path);
}

}  // namespace ctcaps
