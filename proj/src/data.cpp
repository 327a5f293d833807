#include "ctcaps/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "ctcaps/errors.hpp"
#include "ctcaps/ops.hpp"
#include "ctcaps/rng.hpp"
#include "ctcaps/util.hpp"

namespace ctcaps {

std::string slice_label_name(SliceLabel label) {
  switch (label) {
    case SliceLabel::no_evidence:
      return "no-evidence";
    case SliceLabel::infection_evident:
      return "infection-evident";
    case SliceLabel::unlabeled:
      return "unlabeled";
  }
  throw UsageError("bad slice label value");
}

SliceLabel slice_label_from_name(const std::string& name, const std::string& origin) {
  if (name == "no-evidence") return SliceLabel::no_evidence;
  if (name == "infection-evident") return SliceLabel::infection_evident;
  if (name == "unlabeled") return SliceLabel::unlabeled;
  throw DataError(origin + ": unknown slice label '" + name + "'");
}

Tensor normalize_and_resize(const Tensor& raw, int out_size) {
  if (raw.rank() != 2)
    throw ShapeError("slice must be rank-2, got " + shape_str(raw.shape()));
  if (raw.dim(0) != raw.dim(1))
    throw ShapeError("slice must be square, got " + shape_str(raw.shape()));
  float lo = raw.data()[0], hi = raw.data()[0];
  for (float v : raw.values()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::vector<float> scaled(raw.values());
  if (hi > lo) {
    const float inv = 1.0f / (hi - lo);
    for (float& v : scaled) v = (v - lo) * inv;
  } else {
    std::fill(scaled.begin(), scaled.end(), 0.0f);
  }
  Tensor flat = Tensor::from_data(raw.shape(), std::move(scaled));
  if (raw.dim(0) == out_size) return flat;
  return ops::bilinear_resize(flat, out_size, out_size);
}

SliceRecord preprocess_slice(const Tensor& raw) {
  SliceRecord rec;
  rec.pixels = normalize_and_resize(raw, 256);
  rec.label = SliceLabel::unlabeled;
  return rec;
}

SliceVolume filter_empty_slices(const SliceVolume& volume, float min_lung_fraction) {
  SliceVolume out;
  out.patient_id = volume.patient_id;
  out.label = volume.label;
  for (const SliceRecord& s : volume.slices) {
    const Tensor& basis = s.lung_mask.defined() ? s.lung_mask : s.pixels;
    int64_t nonzero = 0;
    for (float v : basis.values())
      if (v != 0.0f) ++nonzero;
    const float fraction = static_cast<float>(nonzero) / static_cast<float>(basis.numel());
    if (fraction >= min_lung_fraction) out.slices.push_back(s);
  }
  if (out.slices.empty())
    throw DataError("volume " + volume.patient_id + ": every slice filtered as lung-free");
  return out;
}

namespace {

// 60/10/30 patient counts by largest remainder; ties favor train, then
// validation.
void split_counts(int n, int& n_train, int& n_val, int& n_test) {
  const double want[3] = {0.6 * n, 0.1 * n, 0.3 * n};
  int got[3];
  double rem[3];
  int used = 0;
  for (int i = 0; i < 3; ++i) {
    got[i] = static_cast<int>(want[i]);
    rem[i] = want[i] - got[i];
    used += got[i];
  }
  while (used < n) {
    int best = 0;
    for (int i = 1; i < 3; ++i)
      if (rem[i] > rem[best]) best = i;
    ++got[best];
    rem[best] = -1.0;
    ++used;
  }
  n_train = got[0];
  n_val = got[1];
  n_test = got[2];
}

}  // namespace

DatasetSplit split_dataset(const std::vector<CohortEntry>& cohort, uint64_t seed) {
  if (cohort.size() < 10)
    throw DataError("split needs at least 10 patients, got " +
                    std::to_string(cohort.size()));
  std::vector<std::string> by_class[2];
  for (const CohortEntry& e : cohort) {
    if (e.label != 0 && e.label != 1)
      throw DataError("patient " + e.id + " has label " + std::to_string(e.label) +
                      ", expected 0 or 1");
    by_class[e.label].push_back(e.id);
  }
  for (int c = 0; c < 2; ++c)
    if (by_class[c].size() < 3)
      throw DataError("stratification needs >= 3 patients per class, class " +
                      std::to_string(c) + " has " + std::to_string(by_class[c].size()));

  DatasetSplit split;
  split.seed = seed;
  for (int c = 0; c < 2; ++c) {
    Rng rng(Rng::derive(seed, static_cast<uint64_t>(c)));
    rng.shuffle(by_class[c]);
    int n_train, n_val, n_test;
    split_counts(static_cast<int>(by_class[c].size()), n_train, n_val, n_test);
    for (int i = 0; i < static_cast<int>(by_class[c].size()); ++i) {
      const std::string& id = by_class[c][static_cast<size_t>(i)];
      if (i < n_train)
        split.train.push_back(id);
      else if (i < n_train + n_val)
        split.validation.push_back(id);
      else
        split.test.push_back(id);
    }
  }
  return split;
}

namespace {

struct LungGeometry {
  float cx[2], cy[2];  // ellipse centers, pixel units
  float ax, by;        // semi-axes
};

bool inside_lungs(const LungGeometry& g, float x, float y) {
  for (int l = 0; l < 2; ++l) {
    const float dx = (x - g.cx[l]) / g.ax;
    const float dy = (y - g.cy[l]) / g.by;
    if (dx * dx + dy * dy <= 1.0f) return true;
  }
  return false;
}

// Bright chest-wall ring present on every slice. It anchors the per-slice
// min-max normalization: with the brightest structure shared by both classes,
// normalized lungs look identical whether or not a blob is present, so the
// blob itself is the only class signal.
bool inside_body_wall(float x, float y, float s) {
  const float dx = (x - 0.5f * s) / (0.46f * s);
  const float dy = (y - 0.5f * s) / (0.44f * s);
  const float rho2 = dx * dx + dy * dy;
  return rho2 <= 1.0f && rho2 >= 0.90f * 0.90f;
}

SliceVolume make_synthetic_volume(const std::string& id, int label, int n_slices,
                                  int size, Rng rng) {
  const float s = static_cast<float>(size);
  LungGeometry g;
  g.cx[0] = (0.33f + rng.uniform(-0.02f, 0.02f)) * s;
  g.cx[1] = (0.67f + rng.uniform(-0.02f, 0.02f)) * s;
  g.cy[0] = (0.50f + rng.uniform(-0.02f, 0.02f)) * s;
  g.cy[1] = (0.50f + rng.uniform(-0.02f, 0.02f)) * s;
  g.ax = (0.155f + rng.uniform(-0.015f, 0.015f)) * s;
  g.by = (0.30f + rng.uniform(-0.03f, 0.03f)) * s;
  const float lung_intensity = 0.32f + rng.uniform(-0.04f, 0.04f);

  // Pick which slices carry blobs: a 20-60% fraction, at least one.
  std::vector<int> blob_slices;
  if (label == 1) {
    const float frac = rng.uniform(0.2f, 0.6f);
    int count = static_cast<int>(std::lround(frac * n_slices));
    const int lo = std::max(1, static_cast<int>(std::ceil(0.2 * n_slices)));
    const int hi = std::max(1, static_cast<int>(0.6 * n_slices));
    count = std::clamp(count, lo, hi);
    std::vector<int> order(static_cast<size_t>(n_slices));
    for (int i = 0; i < n_slices; ++i) order[static_cast<size_t>(i)] = i;
    rng.shuffle(order);
    blob_slices.assign(order.begin(), order.begin() + count);
  }

  SliceVolume vol;
  vol.patient_id = id;
  vol.label = label;
  for (int k = 0; k < n_slices; ++k) {
    std::vector<float> img(static_cast<size_t>(size) * size);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        float v = 0.02f + 0.008f * rng.normal();
        if (inside_body_wall(static_cast<float>(x), static_cast<float>(y), s))
          v = 0.93f + 0.015f * rng.normal();
        if (inside_lungs(g, static_cast<float>(x), static_cast<float>(y)))
          v = lung_intensity + 0.02f * rng.normal();
        img[static_cast<size_t>(y * size + x)] = std::clamp(v, 0.0f, 1.0f);
      }

    SliceRecord rec;
    const bool has_blob =
        std::find(blob_slices.begin(), blob_slices.end(), k) != blob_slices.end();
    if (has_blob) {
      std::vector<float> mask(img.size(), 0.0f);
      const int n_blobs = 2 + rng.uniform_int(2);
      for (int bi = 0; bi < n_blobs; ++bi) {
        // Peripheral placement: on a ring well inside the ellipse border.
        const int lung = rng.uniform_int(2);
        const float theta = rng.uniform(0.0f, 6.2831853f);
        const float rad = rng.uniform(0.55f, 0.8f);
        const float bx = g.cx[lung] + g.ax * rad * std::cos(theta);
        const float by = g.cy[lung] + g.by * rad * std::sin(theta);
        const float r = rng.uniform(0.07f, 0.12f) * s;
        // Bright, but kept below the chest-wall anchor so blob presence does
        // not move the slice's normalization range.
        const float peak = rng.uniform(0.45f, 0.55f);
        const float sigma = 0.6f * r;
        for (int y = 0; y < size; ++y)
          for (int x = 0; x < size; ++x) {
            const float dx = static_cast<float>(x) - bx;
            const float dy = static_cast<float>(y) - by;
            const float d2 = dx * dx + dy * dy;
            if (d2 > 9.0f * sigma * sigma) continue;
            const size_t at = static_cast<size_t>(y * size + x);
            img[at] = std::clamp(
                img[at] + peak * std::exp(-d2 / (2.0f * sigma * sigma)), 0.0f, 1.0f);
            if (d2 <= r * r) mask[at] = 1.0f;
          }
      }
      rec.blob_mask = Tensor::from_data({size, size}, std::move(mask));
      rec.label = SliceLabel::infection_evident;
    } else {
      rec.label = SliceLabel::no_evidence;
    }
    rec.pixels = Tensor::from_data({size, size}, std::move(img));
    vol.slices.push_back(std::move(rec));
  }
  return vol;
}

}  // namespace

std::vector<SliceVolume> generate_synthetic_cohort(int n_covid, int n_noncovid,
                                                   int slices_per_volume, int size,
                                                   uint64_t seed) {
  if (n_covid < 0 || n_noncovid < 0 || n_covid + n_noncovid == 0)
    throw UsageError("cohort needs a non-negative patient count per class, at least one total");
  if (slices_per_volume < 2) throw UsageError("volumes need at least 2 slices");
  if (size < 8) throw UsageError("slice size too small: " + std::to_string(size));
  std::vector<SliceVolume> cohort;
  char name[64];
  for (int i = 0; i < n_covid; ++i) {
    std::snprintf(name, sizeof name, "covid-%03d", i);
    cohort.push_back(make_synthetic_volume(name, 1, slices_per_volume, size,
                                           Rng(Rng::derive(seed, static_cast<uint64_t>(i)))));
  }
  for (int i = 0; i < n_noncovid; ++i) {
    std::snprintf(name, sizeof name, "noncovid-%03d", i);
    cohort.push_back(make_synthetic_volume(
        name, 0, slices_per_volume, size,
        Rng(Rng::derive(seed, static_cast<uint64_t>(n_covid + i)))));
  }
  return cohort;
}

void save_volume(const SliceVolume& volume, const std::filesystem::path& dir) {
  if (volume.slices.empty())
    throw UsageError("volume " + volume.patient_id + " has no slices to save");
  std::filesystem::create_directories(dir);
  util::KvPairs meta;
  meta.emplace_back("format", "ctcaps-volume/1");
  meta.emplace_back("patient", volume.patient_id);
  meta.emplace_back("label", volume.label == 1 ? "covid" : "non-covid");
  meta.emplace_back("slices", std::to_string(volume.slices.size()));
  char name[64];
  for (size_t k = 0; k < volume.slices.size(); ++k) {
    const SliceRecord& rec = volume.slices[k];
    const std::string key = "slice_" + std::to_string(k);
    std::snprintf(name, sizeof name, "slice_%03zu.ctt", k);
    write_ctt(rec.pixels, dir / name);
    meta.emplace_back(key, name);
    meta.emplace_back(key + "_label", slice_label_name(rec.label));
    if (rec.lung_mask.defined()) {
      std::snprintf(name, sizeof name, "mask_%03zu.ctt", k);
      write_ctt(rec.lung_mask, dir / name);
      meta.emplace_back(key + "_mask", name);
    }
    if (rec.blob_mask.defined()) {
      std::snprintf(name, sizeof name, "blob_%03zu.ctt", k);
      write_ctt(rec.blob_mask, dir / name);
      meta.emplace_back(key + "_blob", name);
    }
  }
  util::write_file_atomic(dir / "meta.txt", util::serialize_kv(meta));
}

SliceVolume load_volume(const std::filesystem::path& dir) {
  const auto meta_path = dir / "meta.txt";
  const std::string origin = meta_path.string();
  const util::KvPairs meta = util::parse_kv(util::read_text_file(meta_path), origin);
  if (util::kv_get(meta, "format", origin) != "ctcaps-volume/1")
    throw DataError(origin + ": unsupported volume format");
  SliceVolume vol;
  vol.patient_id = util::kv_get(meta, "patient", origin);
  const std::string label = util::kv_get(meta, "label", origin);
  if (label == "covid")
    vol.label = 1;
  else if (label == "non-covid")
    vol.label = 0;
  else
    throw DataError(origin + ": label '" + label + "' is not covid or non-covid");
  const int n = std::stoi(util::kv_get(meta, "slices", origin));
  if (n < 1) throw DataError(origin + ": slice count must be >= 1");
  for (int k = 0; k < n; ++k) {
    const std::string key = "slice_" + std::to_string(k);
    SliceRecord rec;
    rec.pixels = read_ctt(dir / util::kv_get(meta, key, origin));
    rec.label = slice_label_from_name(util::kv_get(meta, key + "_label", origin), origin);
    if (util::kv_has(meta, key + "_mask"))
      rec.lung_mask = read_ctt(dir / util::kv_get(meta, key + "_mask", origin));
    if (util::kv_has(meta, key + "_blob"))
      rec.blob_mask = read_ctt(dir / util::kv_get(meta, key + "_blob", origin));
    vol.slices.push_back(std::move(rec));
  }
  return vol;
}

void save_cohort_manifest(const std::vector<CohortEntry>& cohort,
                          const std::filesystem::path& path) {
  util::KvPairs kv;
  kv.emplace_back("format", "ctcaps-cohort/1");
  kv.emplace_back("count", std::to_string(cohort.size()));
  for (size_t i = 0; i < cohort.size(); ++i) {
    kv.emplace_back("id_" + std::to_string(i), cohort[i].id);
    kv.emplace_back("label_" + std::to_string(i),
                    cohort[i].label == 1 ? "covid" : "non-covid");
    kv.emplace_back("dir_" + std::to_string(i), cohort[i].dir.generic_string());
  }
  util::write_file_atomic(path, util::serialize_kv(kv));
}

std::vector<CohortEntry> load_cohort_manifest(const std::filesystem::path& path) {
  const std::string origin = path.string();
  const util::KvPairs kv = util::parse_kv(util::read_text_file(path), origin);
  if (util::kv_get(kv, "format", origin) != "ctcaps-cohort/1")
    throw DataError(origin + ": unsupported cohort format");
  const int n = std::stoi(util::kv_get(kv, "count", origin));
  std::vector<CohortEntry> cohort;
  const auto base = path.parent_path();
  for (int i = 0; i < n; ++i) {
    CohortEntry e;
    e.id = util::kv_get(kv, "id_" + std::to_string(i), origin);
    const std::string label = util::kv_get(kv, "label_" + std::to_string(i), origin);
    if (label == "covid")
      e.label = 1;
    else if (label == "non-covid")
      e.label = 0;
    else
      throw DataError(origin + ": label '" + label + "' is not covid or non-covid");
    e.dir = base / util::kv_get(kv, "dir_" + std::to_string(i), origin);
    cohort.push_back(std::move(e));
  }
  return cohort;
}

void save_id_list(const std::vector<std::string>& ids, const std::filesystem::path& path) {
  std::string out;
  for (const std::string& id : ids) {
    out += id;
    out += '\n';
  }
  util::write_file_atomic(path, out);
}

std::vector<std::string> load_id_list(const std::filesystem::path& path) {
  const std::string text = util::read_text_file(path);
  std::vector<std::string> ids;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) ids.push_back(line);
  }
  return ids;
}

}  // namespace ctcaps
