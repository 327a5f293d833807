#pragma once

#include <filesystem>
#include <string>

#include "ctcaps/model.hpp"
#include "ctcaps/tensor.hpp"

// Grad-CAM over the last conv layer: which part of a slice pushed the
// target class capsule's norm up.

namespace ctcaps {

struct HeatMap {
  Tensor values;  // (S, S), in [0, 1]
  std::string source_slice_id;
  int target_class = 0;
};

// slice (S, S) at the model input size, class index in [0, class_caps).
// Backpropagates the class capsule norm to the conv4 activations, weights
// each channel by its mean gradient, applies ReLU to the weighted sum,
// upsamples to slice size, and min-max normalizes (a flat map stays zero).
// Needs the tape, so it must not run under a NoGradGuard.
HeatMap gradcam(SliceModel& m, const Tensor& slice, int target_class,
                const std::string& slice_id = "");

// 8-bit binary portable graymap; values clamped to [0, 1] then quantized.
void write_pgm(const Tensor& img, const std::filesystem::path& path);

// Slice and map side by side in one P5 image for eyeballing localization.
void write_side_by_side(const Tensor& left, const Tensor& right,
                        const std::filesystem::path& path);

}  // namespace ctcaps
