#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ctcaps/tensor.hpp"

// Volume ingestion, preprocessing, stratified splitting, and the seeded
// synthetic cohort generator the test suite trains against.

namespace ctcaps {

enum class SliceLabel { no_evidence, infection_evident, unlabeled };

std::string slice_label_name(SliceLabel label);
SliceLabel slice_label_from_name(const std::string& name, const std::string& origin);

struct SliceRecord {
  Tensor pixels;     // (S, S), values in [0, 1]
  Tensor lung_mask;  // optional binary (S, S); undefined when absent
  Tensor blob_mask;  // optional binary (S, S) ground-truth lesion mask
  SliceLabel label = SliceLabel::no_evidence;
};

struct SliceVolume {
  std::string patient_id;
  int label = 0;  // 1 = covid
  std::vector<SliceRecord> slices;
};

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;
  uint64_t seed = 0;
};

struct CohortEntry {
  std::string id;
  int label = 0;
  std::filesystem::path dir;  // volume directory; empty for in-memory cohorts
};

// Min-max to [0, 1] (constant input collapses to zeros), then bilinear
// resize to out_size x out_size.
Tensor normalize_and_resize(const Tensor& raw, int out_size);

// The standard ingest step: square slice in, 256x256 [0, 1] slice out.
SliceRecord preprocess_slice(const Tensor& raw);

// Keeps slices whose lung-mask fraction (nonzero-pixel fraction when no
// mask is attached) reaches min_lung_fraction; order preserved.
SliceVolume filter_empty_slices(const SliceVolume& volume, float min_lung_fraction = 0.005f);

// Stratified 60/10/30 split at patient granularity, deterministic per seed.
DatasetSplit split_dataset(const std::vector<CohortEntry>& cohort, uint64_t seed);

// Synthetic volumes: noisy dark background, two bright-ish elliptical
// lungs, and, for covid cases, bright peripheral blobs on 20-60% of the
// slices (at least one), with ground-truth blob masks and slice labels.
std::vector<SliceVolume> generate_synthetic_cohort(int n_covid, int n_noncovid,
                                                   int slices_per_volume, int size,
                                                   uint64_t seed);

// Volume directory: meta.txt plus one CTT file per slice (and per optional
// mask). Round-trips losslessly.
void save_volume(const SliceVolume& volume, const std::filesystem::path& dir);
SliceVolume load_volume(const std::filesystem::path& dir);

void save_cohort_manifest(const std::vector<CohortEntry>& cohort,
                          const std::filesystem::path& path);
// Entries come back with dir resolved relative to the manifest location.
std::vector<CohortEntry> load_cohort_manifest(const std::filesystem::path& path);

void save_id_list(const std::vector<std::string>& ids, const std::filesystem::path& path);
std::vector<std::string> load_id_list(const std::filesystem::path& path);

}  // namespace ctcaps
