#include "ctcaps/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <numeric>
#include <string>
#include <utility>

#include "ctcaps/adam.hpp"
#include "ctcaps/errors.hpp"
#include "ctcaps/rng.hpp"
#include "ctcaps/util.hpp"

namespace ctcaps {
namespace {

namespace fs = std::filesystem;

int conv_out(int s, int k, int stride, int pad) { return (s + 2 * pad - k) / stride + 1; }

int grid_for(int input_size) {
  int s = input_size;
  s = conv_out(s, 3, 2, 1);  // conv1
  s = conv_out(s, 3, 2, 1);  // conv2
  s = conv_out(s, 2, 2, 0);  // maxpool
  s = conv_out(s, 3, 2, 1);  // conv3
  s = conv_out(s, 3, 2, 1);  // conv4
  return s;
}

void validate_config(const SliceModelConfig& cfg) {
  if (cfg.input_size != 32 && cfg.input_size != 64 && cfg.input_size != 128 &&
      cfg.input_size != 256)
    throw UsageError("input size must be one of 32, 64, 128, 256, got " +
                     std::to_string(cfg.input_size));
  if (cfg.conv1 < 1 || cfg.conv2 < 1 || cfg.conv3 < 1 || cfg.conv4 < 1)
    throw UsageError("conv widths must be positive");
  if (cfg.caps_dim < 1 || cfg.conv4 % cfg.caps_dim != 0)
    throw UsageError("conv4 width " + std::to_string(cfg.conv4) +
                     " must be a positive multiple of capsule dim " +
                     std::to_string(cfg.caps_dim));
  if (cfg.feature_caps < 1 || cfg.feature_dim < 1 || cfg.class_caps < 2 || cfg.class_dim < 1)
    throw UsageError("capsule layer sizes must be positive (and at least two class capsules)");
  if (cfg.routing_iters < 1) throw UsageError("routing iterations must be positive");
}

void xavier_fill(Tensor& t, int fan_in, int fan_out, Rng& rng) {
  const float limit = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
  float* p = t.data();
  const int64_t n = t.numel();
  for (int64_t i = 0; i < n; ++i) p[i] = rng.uniform(-limit, limit);
}

// Fixed bundle layout shared by save and load.
std::vector<std::pair<std::string, Tensor>> slice_model_entries(const SliceModel& m) {
  return {{"conv1_w", m.conv1_w},
          {"conv1_b", m.conv1_b},
          {"conv2_w", m.conv2_w},
          {"conv2_b", m.conv2_b},
          {"conv3_w", m.conv3_w},
          {"conv3_b", m.conv3_b},
          {"conv4_w", m.conv4_w},
          {"conv4_b", m.conv4_b},
          {"bn_gamma", m.bn_gamma},
          {"bn_beta", m.bn_beta},
          {"bn_running_mean", m.bn.running_mean},
          {"bn_running_var", m.bn.running_var},
          {"caps_a_w", m.caps_a_w},
          {"caps_b_w", m.caps_b_w}};
}

std::vector<std::pair<std::string, Tensor>> patient_entries(const PatientClassifier& pc) {
  return {{"w1", pc.w1}, {"b1", pc.b1}, {"w2", pc.w2}, {"b2", pc.b2},
          {"w3", pc.w3}, {"b3", pc.b3}, {"w4", pc.w4}, {"b4", pc.b4}};
}

int kv_int(const util::KvPairs& kv, const std::string& key, const std::string& origin) {
  const std::string v = util::kv_get(kv, key, origin);
  try {
    size_t pos = 0;
    int n = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return n;
  } catch (const std::exception&) {
    throw DataError(origin + ": key " + key + " is not an integer: " + v);
  }
}

void write_bundle(const fs::path& dir, util::KvPairs head,
                  const std::vector<std::pair<std::string, Tensor>>& entries) {
  fs::create_directories(dir);
  util::KvPairs kv = std::move(head);
  for (const auto& [name, t] : entries) {
    const std::vector<unsigned char> bytes = encode_ctt(t);
    util::write_file_atomic(dir / (name + ".ctt"), bytes);
    kv.emplace_back("file_" + name, name + ".ctt");
    kv.emplace_back("checksum_" + name, util::hex64(util::fnv1a64(bytes.data(), bytes.size())));
  }
  util::write_file_atomic(dir / "manifest.txt", util::serialize_kv(kv));
}

// Checksum-verified tensor load that overwrites target's value buffer in
// place, so tape flags and node identity survive.
void load_entry(const fs::path& dir, const util::KvPairs& kv, const std::string& origin,
                const std::string& name, Tensor& target) {
  const fs::path file = dir / util::kv_get(kv, "file_" + name, origin);
  const std::string want = util::kv_get(kv, "checksum_" + name, origin);
  const std::string got = util::hex64(util::fnv1a64_file(file));
  if (got != want)
    throw DataError(file.string() + ": checksum mismatch (manifest says " + want + ", file is " +
                    got + "); bundle is corrupt");
  Tensor t = read_ctt(file);
  if (t.shape() != target.shape())
    throw DataError(file.string() + ": expected shape " + shape_str(target.shape()) + ", got " +
                    shape_str(t.shape()));
  target.node()->data = t.values();
}

Tensor slice_batch_tensor(const std::vector<SliceExample>& examples,
                          const std::vector<int>& order, size_t offset, size_t count,
                          std::vector<int>* labels) {
  const Tensor& first = examples[static_cast<size_t>(order[offset])].pixels;
  const int s = first.dim(0);
  Tensor batch = Tensor::zeros({static_cast<int>(count), 1, s, s});
  float* dst = batch.data();
  const size_t plane = static_cast<size_t>(s) * static_cast<size_t>(s);
  labels->clear();
  for (size_t k = 0; k < count; ++k) {
    const SliceExample& ex = examples[static_cast<size_t>(order[offset + k])];
    if (ex.pixels.rank() != 2 || ex.pixels.dim(0) != s || ex.pixels.dim(1) != s)
      throw ShapeError("slice examples disagree on size: expected " + std::to_string(s) + "x" +
                       std::to_string(s) + ", got " + shape_str(ex.pixels.shape()));
    std::memcpy(dst + k * plane, ex.pixels.data(), plane * sizeof(float));
    labels->push_back(ex.label);
  }
  return batch;
}

Tensor slice_batch_loss(SliceModel& m, const Tensor& batch, const std::vector<int>& labels,
                        const ClassWeights& cw, bool training) {
  SliceForward fwd = slice_forward(m, batch, training);
  Tensor norms = capsule_norms(fwd.class_caps);
  Tensor per = margin_loss(norms, labels);
  return weighted_loss(per, labels, cw);
}

double eval_slice_loss(SliceModel& m, const std::vector<SliceExample>& val,
                       const ClassWeights& cw, int batch_size) {
  ops::NoGradGuard guard;
  std::vector<int> order(val.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> labels;
  double sum = 0.0;
  int64_t n = 0;
  for (size_t off = 0; off < order.size(); off += static_cast<size_t>(batch_size)) {
    const size_t count = std::min(static_cast<size_t>(batch_size), order.size() - off);
    Tensor batch = slice_batch_tensor(val, order, off, count, &labels);
    Tensor loss = slice_batch_loss(m, batch, labels, cw, false);
    sum += static_cast<double>(loss.item()) * static_cast<double>(count);
    n += static_cast<int64_t>(count);
  }
  return sum / static_cast<double>(n);
}

void require_both_classes(const std::vector<int>& labels, const std::string& what) {
  int64_t pos = 0;
  for (int y : labels) pos += (y == 1) ? 1 : 0;
  if (pos == 0 || pos == static_cast<int64_t>(labels.size()))
    throw UsageError(what + " holds a single class; training needs both");
}

void validate_train_config(const TrainConfig& cfg) {
  if (cfg.batch_size < 1) throw UsageError("batch size must be positive");
  if (!(cfg.lr > 0.0f)) throw UsageError("learning rate must be positive");
  if (cfg.epochs < 0) throw UsageError("epoch count must be non-negative");
}

using Snapshot = std::vector<std::vector<float>>;

Snapshot take_snapshot(const std::vector<Tensor>& tensors) {
  Snapshot snap;
  snap.reserve(tensors.size());
  for (const Tensor& t : tensors) snap.push_back(t.values());
  return snap;
}

void restore_snapshot(std::vector<Tensor>& tensors, const Snapshot& snap) {
  for (size_t i = 0; i < tensors.size(); ++i) tensors[i].node()->data = snap[i];
}

}  // namespace

std::vector<Tensor> SliceModel::parameters() const {
  return {conv1_w, conv1_b, conv2_w, conv2_b, bn_gamma, bn_beta, conv3_w, conv3_b,
          conv4_w, conv4_b, caps_a_w, caps_b_w};
}

int64_t SliceModel::parameter_count() const {
  int64_t n = 0;
  for (const Tensor& t : parameters()) n += t.numel();
  return n;
}

SliceModel build_slice_model(const SliceModelConfig& cfg, uint64_t seed) {
  validate_config(cfg);
  SliceModel m;
  m.cfg = cfg;
  m.grid = grid_for(cfg.input_size);
  const int types = cfg.conv4 / cfg.caps_dim;
  m.spec_a = {types * m.grid * m.grid, cfg.caps_dim,    cfg.feature_caps,
              cfg.feature_dim,         types,           cfg.routing_iters};
  m.spec_b = {cfg.feature_caps, cfg.feature_dim, cfg.class_caps,
              cfg.class_dim,    cfg.feature_caps, cfg.routing_iters};

  m.conv1_w = Tensor::zeros({cfg.conv1, 1, 3, 3}, true);
  m.conv1_b = Tensor::zeros({cfg.conv1}, true);
  m.conv2_w = Tensor::zeros({cfg.conv2, cfg.conv1, 3, 3}, true);
  m.conv2_b = Tensor::zeros({cfg.conv2}, true);
  m.conv3_w = Tensor::zeros({cfg.conv3, cfg.conv2, 3, 3}, true);
  m.conv3_b = Tensor::zeros({cfg.conv3}, true);
  m.conv4_w = Tensor::zeros({cfg.conv4, cfg.conv3, 3, 3}, true);
  m.conv4_b = Tensor::zeros({cfg.conv4}, true);
  m.bn_gamma = Tensor::full({cfg.conv2}, 1.0f, true);
  m.bn_beta = Tensor::zeros({cfg.conv2}, true);
  m.bn = ops::BatchNormState::create(cfg.conv2);
  m.caps_a_w = Tensor::zeros({types, cfg.feature_caps, cfg.caps_dim, cfg.feature_dim}, true);
  m.caps_b_w =
      Tensor::zeros({cfg.feature_caps, cfg.class_caps, cfg.feature_dim, cfg.class_dim}, true);

  // One generator, fixed fill order, so a seed pins every weight bit.
  Rng rng(seed);
  xavier_fill(m.conv1_w, 1 * 9, cfg.conv1 * 9, rng);
  xavier_fill(m.conv2_w, cfg.conv1 * 9, cfg.conv2 * 9, rng);
  xavier_fill(m.conv3_w, cfg.conv2 * 9, cfg.conv3 * 9, rng);
  xavier_fill(m.conv4_w, cfg.conv3 * 9, cfg.conv4 * 9, rng);
  xavier_fill(m.caps_a_w, cfg.caps_dim, cfg.feature_dim, rng);
  xavier_fill(m.caps_b_w, cfg.feature_dim, cfg.class_dim, rng);
  return m;
}

SliceModel build_slice_model(int input_size, uint64_t seed) {
  SliceModelConfig cfg;
  cfg.input_size = input_size;
  return build_slice_model(cfg, seed);
}

SliceForward slice_forward(SliceModel& m, const Tensor& batch, bool training) {
  if (batch.rank() != 4 || batch.dim(1) != 1)
    throw ShapeError("slice_forward expects (B, 1, S, S), got " + shape_str(batch.shape()));
  if (batch.dim(2) != m.cfg.input_size || batch.dim(3) != m.cfg.input_size)
    throw ShapeError("slice_forward expects " + std::to_string(m.cfg.input_size) + "x" +
                     std::to_string(m.cfg.input_size) + " input, got " +
                     shape_str(batch.shape()));
  Tensor h = ops::relu(ops::conv2d(batch, m.conv1_w, m.conv1_b, 2, 1));
  h = ops::conv2d(h, m.conv2_w, m.conv2_b, 2, 1);
  h = ops::batchnorm(h, m.bn_gamma, m.bn_beta, m.bn, training);
  h = ops::relu(h);
  h = ops::maxpool2d(h, 2, 2).out;
  h = ops::relu(ops::conv2d(h, m.conv3_w, m.conv3_b, 2, 1));
  Tensor conv4 = ops::relu(ops::conv2d(h, m.conv4_w, m.conv4_b, 2, 1));
  Tensor u = squash(caps_from_conv(conv4, m.cfg.caps_dim));
  Tensor feat = capsule_layer(u, m.caps_a_w, m.spec_a);
  Tensor cls = capsule_layer(feat, m.caps_b_w, m.spec_b);
  return {cls, feat, conv4};
}

Tensor aggregate_patient(const std::vector<Tensor>& feature_maps) {
  if (feature_maps.empty()) throw UsageError("aggregate_patient needs at least one feature map");
  Tensor out = feature_maps[0].clone();
  out.set_requires_grad(false);
  float* dst = out.data();
  const int64_t n = out.numel();
  for (size_t i = 1; i < feature_maps.size(); ++i) {
    if (feature_maps[i].shape() != out.shape())
      throw ShapeError("feature map shapes differ: " + shape_str(out.shape()) + " vs " +
                       shape_str(feature_maps[i].shape()));
    const float* src = feature_maps[i].data();
    for (int64_t j = 0; j < n; ++j) dst[j] = std::max(dst[j], src[j]);
  }
  return out;
}

std::vector<Tensor> PatientClassifier::parameters() const {
  return {w1, b1, w2, b2, w3, b3, w4, b4};
}

int64_t PatientClassifier::parameter_count() const {
  int64_t n = 0;
  for (const Tensor& t : parameters()) n += t.numel();
  return n;
}

PatientClassifier build_patient_classifier(uint64_t seed) {
  PatientClassifier pc;
  const int dims[] = {512, 256, 128, 32, 2};
  pc.w1 = Tensor::zeros({dims[0], dims[1]}, true);
  pc.b1 = Tensor::zeros({dims[1]}, true);
  pc.w2 = Tensor::zeros({dims[1], dims[2]}, true);
  pc.b2 = Tensor::zeros({dims[2]}, true);
  pc.w3 = Tensor::zeros({dims[2], dims[3]}, true);
  pc.b3 = Tensor::zeros({dims[3]}, true);
  pc.w4 = Tensor::zeros({dims[3], dims[4]}, true);
  pc.b4 = Tensor::zeros({dims[4]}, true);
  Rng rng(seed);
  xavier_fill(pc.w1, dims[0], dims[1], rng);
  xavier_fill(pc.w2, dims[1], dims[2], rng);
  xavier_fill(pc.w3, dims[2], dims[3], rng);
  xavier_fill(pc.w4, dims[3], dims[4], rng);
  return pc;
}

Tensor patient_logits(const PatientClassifier& pc, const Tensor& features) {
  if (features.rank() != 2 || features.dim(1) != pc.w1.dim(0))
    throw ShapeError("patient_logits expects (B, " + std::to_string(pc.w1.dim(0)) + "), got " +
                     shape_str(features.shape()));
  Tensor h = ops::relu(ops::dense(features, pc.w1, pc.b1));
  h = ops::relu(ops::dense(h, pc.w2, pc.b2));
  h = ops::relu(ops::dense(h, pc.w3, pc.b3));
  return ops::dense(h, pc.w4, pc.b4);
}

Tensor patient_forward(const PatientClassifier& pc, const Tensor& features) {
  return ops::softmax(patient_logits(pc, features), 1);
}

Tensor prepare_slice_input(const Tensor& pixels, int input_size) {
  if (pixels.rank() != 2 || pixels.dim(0) != pixels.dim(1))
    throw ShapeError("slices must be square, got " + shape_str(pixels.shape()));
  if (input_size < 1) throw UsageError("input size must be positive");
  // Always min-max normalize per slice, even at the target size: the model
  // must see range-stretched inputs so absolute brightness is not a feature.
  return normalize_and_resize(pixels, input_size);
}

Tensor extract_patient_features(SliceModel& m, const SliceVolume& volume) {
  if (volume.slices.empty())
    throw UsageError("volume " + volume.patient_id + " has no slices to aggregate");
  ops::NoGradGuard guard;
  const int s = m.cfg.input_size;
  const size_t per_map =
      static_cast<size_t>(m.cfg.feature_caps) * static_cast<size_t>(m.cfg.feature_dim);
  std::vector<Tensor> maps;
  maps.reserve(volume.slices.size());
  for (size_t off = 0; off < volume.slices.size(); off += 16) {
    const size_t count = std::min<size_t>(16, volume.slices.size() - off);
    Tensor batch = Tensor::zeros({static_cast<int>(count), 1, s, s});
    float* dst = batch.data();
    const size_t plane = static_cast<size_t>(s) * static_cast<size_t>(s);
    for (size_t k = 0; k < count; ++k) {
      Tensor px = prepare_slice_input(volume.slices[off + k].pixels, s);
      std::memcpy(dst + k * plane, px.data(), plane * sizeof(float));
    }
    SliceForward fwd = slice_forward(m, batch, false);
    for (size_t k = 0; k < count; ++k) {
      std::vector<float> row(fwd.feature_caps.data() + k * per_map,
                             fwd.feature_caps.data() + (k + 1) * per_map);
      maps.push_back(
          Tensor::from_data({m.cfg.feature_caps, m.cfg.feature_dim}, std::move(row)));
    }
  }
  return aggregate_patient(maps);
}

PatientResult classify_patient(SliceModel& sm, const PatientClassifier& pc,
                               const SliceVolume& volume, float cutoff) {
  if (!(cutoff > 0.0f && cutoff < 1.0f))
    throw UsageError("cutoff must lie strictly between 0 and 1, got " + std::to_string(cutoff));
  Tensor fm = extract_patient_features(sm, volume);
  ops::NoGradGuard guard;
  Tensor flat = ops::reshape(fm, {1, static_cast<int>(fm.numel())});
  Tensor probs = patient_forward(pc, flat);
  PatientResult r;
  r.p_covid = probs.at({0, 1});
  r.label = r.p_covid >= cutoff ? 1 : 0;
  r.feature_map = fm;
  return r;
}

std::vector<SliceExample> make_slice_examples(const std::vector<SliceVolume>& volumes,
                                              int input_size) {
  std::vector<SliceExample> out;
  for (const SliceVolume& vol : volumes) {
    for (const SliceRecord& rec : vol.slices) {
      if (rec.label == SliceLabel::unlabeled) continue;
      out.push_back({prepare_slice_input(rec.pixels, input_size),
                     rec.label == SliceLabel::infection_evident ? 1 : 0});
    }
  }
  return out;
}

std::vector<EpochStats> train_slice_model(SliceModel& m, const std::vector<SliceExample>& train,
                                          const std::vector<SliceExample>& val,
                                          const TrainConfig& cfg, const ClassWeights& cw) {
  validate_train_config(cfg);
  if (train.empty()) throw UsageError("training partition is empty");
  if (val.empty()) throw UsageError("validation partition is empty");
  if (cw.n_pos <= 0 || cw.n_neg <= 0)
    throw UsageError("class weights need positive counts for both classes");
  {
    std::vector<int> labels;
    labels.reserve(train.size());
    for (const SliceExample& ex : train) labels.push_back(ex.label);
    require_both_classes(labels, "slice training partition");
  }

  std::vector<EpochStats> history;
  if (cfg.epochs == 0) return history;

  std::vector<Tensor> params = m.parameters();
  Adam opt(params, cfg.lr);
  Rng shuffler(Rng::derive(cfg.seed, 1));
  std::vector<int> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  // Snapshots cover the running batchnorm stats too, so the restored model
  // is exactly the one the winning validation loss was measured on.
  std::vector<Tensor> state = params;
  state.push_back(m.bn.running_mean);
  state.push_back(m.bn.running_var);
  Snapshot best;
  bool best_bn_init = false;
  double best_val = std::numeric_limits<double>::infinity();
  bool have_best = false;

  std::vector<int> labels;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffler.shuffle(order);
    double sum = 0.0;
    int64_t seen = 0;
    for (size_t off = 0; off < order.size(); off += static_cast<size_t>(cfg.batch_size)) {
      const size_t count = std::min(static_cast<size_t>(cfg.batch_size), order.size() - off);
      Tensor batch = slice_batch_tensor(train, order, off, count, &labels);
      opt.zero_grad();
      Tensor loss = slice_batch_loss(m, batch, labels, cw, true);
      const float lv = loss.item();
      if (!std::isfinite(lv))
        throw OptimizerError("training loss diverged at epoch " + std::to_string(epoch));
      ops::backward(loss);
      opt.step();
      sum += static_cast<double>(lv) * static_cast<double>(count);
      seen += static_cast<int64_t>(count);
    }
    const double train_loss = sum / static_cast<double>(seen);
    const double val_loss = eval_slice_loss(m, val, cw, cfg.batch_size);
    history.push_back({epoch, train_loss, val_loss});
    if (!have_best || val_loss < best_val) {
      best_val = val_loss;
      best = take_snapshot(state);
      best_bn_init = m.bn.initialized;
      have_best = true;
    }
  }
  restore_snapshot(state, best);
  m.bn.initialized = best_bn_init;
  return history;
}

std::vector<EpochStats> train_patient_classifier(PatientClassifier& pc,
                                                 const std::vector<PatientExample>& train,
                                                 const std::vector<PatientExample>& val,
                                                 const TrainConfig& cfg) {
  validate_train_config(cfg);
  if (train.empty()) throw UsageError("training partition is empty");
  if (val.empty()) throw UsageError("validation partition is empty");
  {
    std::vector<int> labels;
    labels.reserve(train.size());
    for (const PatientExample& ex : train) labels.push_back(ex.label);
    require_both_classes(labels, "patient training partition");
  }
  const int width = pc.w1.dim(0);
  auto batch_of = [&](const std::vector<PatientExample>& pool, const std::vector<int>& order,
                      size_t off, size_t count, std::vector<int>* labels) {
    Tensor batch = Tensor::zeros({static_cast<int>(count), width});
    float* dst = batch.data();
    labels->clear();
    for (size_t k = 0; k < count; ++k) {
      const PatientExample& ex = pool[static_cast<size_t>(order[off + k])];
      if (ex.features.numel() != width)
        throw ShapeError("patient features must hold " + std::to_string(width) +
                         " values, got " + shape_str(ex.features.shape()));
      std::memcpy(dst + k * static_cast<size_t>(width), ex.features.data(),
                  static_cast<size_t>(width) * sizeof(float));
      labels->push_back(ex.label);
    }
    return batch;
  };
  auto eval_loss = [&](const std::vector<PatientExample>& pool) {
    ops::NoGradGuard guard;
    std::vector<int> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<int> labels;
    double sum = 0.0;
    int64_t n = 0;
    for (size_t off = 0; off < order.size(); off += static_cast<size_t>(cfg.batch_size)) {
      const size_t count = std::min(static_cast<size_t>(cfg.batch_size), order.size() - off);
      Tensor batch = batch_of(pool, order, off, count, &labels);
      Tensor loss = ops::mean(ops::softmax_cross_entropy(patient_logits(pc, batch), labels));
      sum += static_cast<double>(loss.item()) * static_cast<double>(count);
      n += static_cast<int64_t>(count);
    }
    return sum / static_cast<double>(n);
  };

  std::vector<EpochStats> history;
  if (cfg.epochs == 0) return history;

  std::vector<Tensor> params = pc.parameters();
  Adam opt(params, cfg.lr);
  Rng shuffler(Rng::derive(cfg.seed, 2));
  std::vector<int> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  Snapshot best;
  double best_val = std::numeric_limits<double>::infinity();
  bool have_best = false;
  std::vector<int> labels;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffler.shuffle(order);
    double sum = 0.0;
    int64_t seen = 0;
    for (size_t off = 0; off < order.size(); off += static_cast<size_t>(cfg.batch_size)) {
      const size_t count = std::min(static_cast<size_t>(cfg.batch_size), order.size() - off);
      Tensor batch = batch_of(train, order, off, count, &labels);
      opt.zero_grad();
      Tensor loss = ops::mean(ops::softmax_cross_entropy(patient_logits(pc, batch), labels));
      const float lv = loss.item();
      if (!std::isfinite(lv))
        throw OptimizerError("training loss diverged at epoch " + std::to_string(epoch));
      ops::backward(loss);
      opt.step();
      sum += static_cast<double>(lv) * static_cast<double>(count);
      seen += static_cast<int64_t>(count);
    }
    const double train_loss = sum / static_cast<double>(seen);
    const double val_loss = eval_loss(val);
    history.push_back({epoch, train_loss, val_loss});
    if (!have_best || val_loss < best_val) {
      best_val = val_loss;
      best = take_snapshot(params);
      have_best = true;
    }
  }
  restore_snapshot(params, best);
  return history;
}

void save_slice_model(const SliceModel& m, const std::filesystem::path& dir) {
  util::KvPairs kv;
  kv.emplace_back("format", "ctcaps-slice-model/1");
  kv.emplace_back("input_size", std::to_string(m.cfg.input_size));
  kv.emplace_back("conv1", std::to_string(m.cfg.conv1));
  kv.emplace_back("conv2", std::to_string(m.cfg.conv2));
  kv.emplace_back("conv3", std::to_string(m.cfg.conv3));
  kv.emplace_back("conv4", std::to_string(m.cfg.conv4));
  kv.emplace_back("caps_dim", std::to_string(m.cfg.caps_dim));
  kv.emplace_back("feature_caps", std::to_string(m.cfg.feature_caps));
  kv.emplace_back("feature_dim", std::to_string(m.cfg.feature_dim));
  kv.emplace_back("class_caps", std::to_string(m.cfg.class_caps));
  kv.emplace_back("class_dim", std::to_string(m.cfg.class_dim));
  kv.emplace_back("routing_iters", std::to_string(m.cfg.routing_iters));
  kv.emplace_back("bn_initialized", m.bn.initialized ? "1" : "0");
  write_bundle(dir, std::move(kv), slice_model_entries(m));
}

SliceModel load_slice_model(const std::filesystem::path& dir) {
  const fs::path mpath = dir / "manifest.txt";
  const std::string origin = mpath.string();
  const util::KvPairs kv = util::parse_kv(util::read_text_file(mpath), origin);
  const std::string format = util::kv_get(kv, "format", origin);
  if (format != "ctcaps-slice-model/1")
    throw DataError(origin + ": unsupported bundle format " + format);
  SliceModelConfig cfg;
  cfg.input_size = kv_int(kv, "input_size", origin);
  cfg.conv1 = kv_int(kv, "conv1", origin);
  cfg.conv2 = kv_int(kv, "conv2", origin);
  cfg.conv3 = kv_int(kv, "conv3", origin);
  cfg.conv4 = kv_int(kv, "conv4", origin);
  cfg.caps_dim = kv_int(kv, "caps_dim", origin);
  cfg.feature_caps = kv_int(kv, "feature_caps", origin);
  cfg.feature_dim = kv_int(kv, "feature_dim", origin);
  cfg.class_caps = kv_int(kv, "class_caps", origin);
  cfg.class_dim = kv_int(kv, "class_dim", origin);
  cfg.routing_iters = kv_int(kv, "routing_iters", origin);
  SliceModel m = build_slice_model(cfg, 0);
  for (auto& [name, t] : slice_model_entries(m)) {
    Tensor target = t;
    load_entry(dir, kv, origin, name, target);
  }
  const std::string bn_init = util::kv_get(kv, "bn_initialized", origin);
  if (bn_init != "0" && bn_init != "1")
    throw DataError(origin + ": bn_initialized must be 0 or 1, got " + bn_init);
  m.bn.initialized = bn_init == "1";
  return m;
}

void save_patient_classifier(const PatientClassifier& pc, const std::filesystem::path& dir) {
  util::KvPairs kv;
  kv.emplace_back("format", "ctcaps-patient-model/1");
  kv.emplace_back("dims", "512,256,128,32,2");
  write_bundle(dir, std::move(kv), patient_entries(pc));
}

PatientClassifier load_patient_classifier(const std::filesystem::path& dir) {
  const fs::path mpath = dir / "manifest.txt";
  const std::string origin = mpath.string();
  const util::KvPairs kv = util::parse_kv(util::read_text_file(mpath), origin);
  const std::string format = util::kv_get(kv, "format", origin);
  if (format != "ctcaps-patient-model/1")
    throw DataError(origin + ": unsupported bundle format " + format);
  const std::string dims = util::kv_get(kv, "dims", origin);
  if (dims != "512,256,128,32,2")
    throw DataError(origin + ": unsupported head layout " + dims);
  PatientClassifier pc = build_patient_classifier(0);
  for (auto& [name, t] : patient_entries(pc)) {
    Tensor target = t;
    load_entry(dir, kv, origin, name, target);
  }
  return pc;
}

void save_history(const std::vector<EpochStats>& history, const std::filesystem::path& path) {
  std::string out = "epoch,train_loss,val_loss\n";
  char line[96];
  for (const EpochStats& row : history) {
    std::snprintf(line, sizeof(line), "%d,%.9g,%.9g\n", row.epoch, row.train_loss, row.val_loss);
    out += line;
  }
  util::write_file_atomic(path, out);
}

}  // namespace ctcaps
