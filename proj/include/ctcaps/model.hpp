#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ctcaps/capsnet.hpp"
#include "ctcaps/data.hpp"
#include "ctcaps/ops.hpp"
#include "ctcaps/tensor.hpp"

// The two-stage pipeline: a convolutional capsule network scoring single
// slices and producing a 32x16 feature capsule map, element-wise max
// aggregation over a patient's slices, and a small dense head turning the
// aggregate into a covid probability.

namespace ctcaps {

struct SliceModelConfig {
  int input_size = 256;
  // Conv widths sized so the default lands in the a few-hundred-thousand
  // parameter range; all four stride 2, 3x3, pad 1.
  int conv1 = 64;
  int conv2 = 64;
  int conv3 = 128;
  int conv4 = 64;
  int caps_dim = 8;      // primary capsule width; conv4 % caps_dim == 0
  int feature_caps = 32; // capsule layer A
  int feature_dim = 16;
  int class_caps = 2;    // capsule layer B
  int class_dim = 16;
  int routing_iters = 3;
};

struct SliceModel {
  SliceModelConfig cfg;
  CapsuleLayerSpec spec_a;  // primary -> feature capsules, type-shared
  CapsuleLayerSpec spec_b;  // feature -> class capsules, per-capsule weights
  int grid = 0;             // conv4 spatial size

  Tensor conv1_w, conv1_b, conv2_w, conv2_b, conv3_w, conv3_b, conv4_w, conv4_b;
  Tensor bn_gamma, bn_beta;
  ops::BatchNormState bn;
  Tensor caps_a_w;  // (types, feature_caps, caps_dim, feature_dim)
  Tensor caps_b_w;  // (feature_caps, class_caps, feature_dim, class_dim)

  std::vector<Tensor> parameters() const;
  int64_t parameter_count() const;
};

// Xavier-uniform weights from the seed; biases zero, batchnorm identity.
SliceModel build_slice_model(const SliceModelConfig& cfg, uint64_t seed);
SliceModel build_slice_model(int input_size, uint64_t seed);

struct SliceForward {
  Tensor class_caps;    // (B, class_caps, class_dim); norms are the scores
  Tensor feature_caps;  // (B, feature_caps, feature_dim)
  Tensor conv4;         // (B, conv4, grid, grid) post-relu, feeds grad-cam
};

// batch (B, 1, S, S), values in [0, 1]. Training mode drives batchnorm.
SliceForward slice_forward(SliceModel& m, const Tensor& batch, bool training);

// Element-wise maximum of per-slice feature maps; order-independent.
Tensor aggregate_patient(const std::vector<Tensor>& feature_maps);

struct PatientClassifier {
  Tensor w1, b1;  // 512 -> 256
  Tensor w2, b2;  // 256 -> 128
  Tensor w3, b3;  // 128 -> 32
  Tensor w4, b4;  // 32 -> 2
  std::vector<Tensor> parameters() const;
  int64_t parameter_count() const;
};

PatientClassifier build_patient_classifier(uint64_t seed);

// features (B, 512) -> logits (B, 2); relu between the hidden layers.
Tensor patient_logits(const PatientClassifier& pc, const Tensor& features);
// Softmax probabilities (B, 2): column 0 non-covid, column 1 covid.
Tensor patient_forward(const PatientClassifier& pc, const Tensor& features);

// Matches a slice to the model input: min-max normalized per slice, then
// bilinear-resized when the size differs. Train and inference paths both
// go through here, so they always agree.
Tensor prepare_slice_input(const Tensor& pixels, int input_size);

// Eval-mode pass over every slice followed by max aggregation -> (32, 16).
Tensor extract_patient_features(SliceModel& m, const SliceVolume& volume);

struct PatientResult {
  int label = 0;  // 1 = covid
  float p_covid = 0.0f;
  Tensor feature_map;
};

// Full pipeline for one volume. label = covid iff p_covid >= cutoff.
PatientResult classify_patient(SliceModel& sm, const PatientClassifier& pc,
                               const SliceVolume& volume, float cutoff);

struct TrainConfig {
  float lr = 1e-4f;
  int batch_size = 16;
  int epochs = 100;
  uint64_t seed = 0;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct SliceExample {
  Tensor pixels;  // (S, S) at the model input size
  int label = 0;  // 1 = infection evident
};

// Flattens volumes into labeled slice examples at the model input size;
// unlabeled slices are dropped.
std::vector<SliceExample> make_slice_examples(const std::vector<SliceVolume>& volumes,
                                              int input_size);

struct PatientExample {
  Tensor features;  // (feature_caps, feature_dim)
  int label = 0;
};

// Stage 1: Adam on the class-weighted margin loss. Returns one row per
// epoch; the model keeps the epoch with the lowest validation loss.
std::vector<EpochStats> train_slice_model(SliceModel& m,
                                          const std::vector<SliceExample>& train,
                                          const std::vector<SliceExample>& val,
                                          const TrainConfig& cfg, const ClassWeights& cw);

// Stage 2: Adam on plain cross entropy (classes weighted equally), same
// best-validation selection.
std::vector<EpochStats> train_patient_classifier(PatientClassifier& pc,
                                                 const std::vector<PatientExample>& train,
                                                 const std::vector<PatientExample>& val,
                                                 const TrainConfig& cfg);

// Bundle directories: manifest.txt (format version, architecture, per-file
// checksums) plus one CTT file per tensor. Round-trips bit-exactly.
void save_slice_model(const SliceModel& m, const std::filesystem::path& dir);
SliceModel load_slice_model(const std::filesystem::path& dir);
void save_patient_classifier(const PatientClassifier& pc, const std::filesystem::path& dir);
PatientClassifier load_patient_classifier(const std::filesystem::path& dir);

// CSV: epoch,train_loss,val_loss.
void save_history(const std::vector<EpochStats>& history, const std::filesystem::path& path);

}  // namespace ctcaps
