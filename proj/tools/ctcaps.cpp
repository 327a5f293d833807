#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "CLI11.hpp"
#include "ctcaps/data.hpp"
#include "ctcaps/errors.hpp"
#include "ctcaps/explain.hpp"
#include "ctcaps/metrics.hpp"
#include "ctcaps/model.hpp"
#include "ctcaps/util.hpp"

namespace fs = std::filesystem;
using namespace ctcaps;

namespace {

// Sentinel meaning "use the stage default" for flags shared by both stages.
constexpr int kUnsetInt = -1;
constexpr double kUnsetReal = -1.0;

struct Options {
  std::string data;
  std::string model;
  std::string out;
  uint64_t seed = 0;
  double cutoff = 0.5;
  std::string cutoffs;
  std::string stage;
  bool full = false;
  int epochs = kUnsetInt;
  double lr = kUnsetReal;
  int batch = 16;
  int input_size = 256;
  int covid = 20;
  int noncovid = 20;
  int slices = 16;
  int size = 64;
};

void apply_thread_cap() {
  const char* raw = std::getenv("CTCAPS_THREADS");
  if (raw == nullptr) return;
  int n = 0;
  try {
    size_t pos = 0;
    n = std::stoi(raw, &pos);
    if (pos != std::string(raw).size()) throw std::invalid_argument(raw);
  } catch (const std::exception&) {
    throw UsageError(std::string("CTCAPS_THREADS must be a positive integer, got ") + raw);
  }
  if (n < 1) throw UsageError("CTCAPS_THREADS must be positive");
#ifdef _OPENMP
  omp_set_num_threads(n);
#endif
}

void write_run_config(const fs::path& out_dir, util::KvPairs kv) {
  fs::create_directories(out_dir);
  util::write_file_atomic(out_dir / "run.txt", util::serialize_kv(kv));
}

std::vector<double> parse_cutoffs(const std::string& raw) {
  if (raw.empty()) return default_cutoffs();
  std::vector<double> out;
  size_t pos = 0;
  while (pos <= raw.size()) {
    const size_t comma = raw.find(',', pos);
    const std::string part = raw.substr(pos, comma == std::string::npos ? comma : comma - pos);
    try {
      size_t used = 0;
      out.push_back(std::stod(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw UsageError("--cutoffs holds a non-numeric entry: '" + part + "'");
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (out.empty()) throw UsageError("--cutoffs is empty");
  return out;
}

std::unordered_map<std::string, CohortEntry> cohort_by_id(const std::vector<CohortEntry>& cohort) {
  std::unordered_map<std::string, CohortEntry> map;
  for (const CohortEntry& e : cohort) map[e.id] = e;
  return map;
}

std::vector<SliceVolume> load_split_volumes(const fs::path& data_dir,
                                            const std::vector<CohortEntry>& cohort,
                                            const std::string& list_name) {
  const auto by_id = cohort_by_id(cohort);
  std::vector<SliceVolume> out;
  for (const std::string& id : load_id_list(data_dir / list_name)) {
    const auto it = by_id.find(id);
    if (it == by_id.end())
      throw DataError((data_dir / list_name).string() + ": id " + id + " is not in cohort.txt");
    out.push_back(load_volume(it->second.dir));
  }
  return out;
}

void cmd_synth(const Options& opt) {
  const fs::path out_dir = opt.out;
  std::vector<SliceVolume> volumes =
      generate_synthetic_cohort(opt.covid, opt.noncovid, opt.slices, opt.size, opt.seed);
  std::vector<CohortEntry> cohort;
  for (const SliceVolume& vol : volumes) {
    const fs::path dir = out_dir / "volumes" / vol.patient_id;
    save_volume(vol, dir);
    cohort.push_back({vol.patient_id, vol.label, fs::path("volumes") / vol.patient_id});
  }
  save_cohort_manifest(cohort, out_dir / "cohort.txt");
  const DatasetSplit split = split_dataset(load_cohort_manifest(out_dir / "cohort.txt"), opt.seed);
  save_id_list(split.train, out_dir / "split_train.txt");
  save_id_list(split.validation, out_dir / "split_val.txt");
  save_id_list(split.test, out_dir / "split_test.txt");
  write_run_config(out_dir, {{"command", "synth"},
                             {"covid", std::to_string(opt.covid)},
                             {"noncovid", std::to_string(opt.noncovid)},
                             {"slices", std::to_string(opt.slices)},
                             {"size", std::to_string(opt.size)},
                             {"seed", std::to_string(opt.seed)}});
  std::printf("wrote %zu volumes under %s\n", volumes.size(), out_dir.string().c_str());
}

void train_slice_stage(const Options& opt, const fs::path& data_dir, const fs::path& out_dir,
                       util::KvPairs* run) {
  const int epochs = opt.epochs == kUnsetInt ? 100 : opt.epochs;
  const float lr = opt.lr == kUnsetReal ? 1e-4f : static_cast<float>(opt.lr);
  const auto cohort = load_cohort_manifest(data_dir / "cohort.txt");
  const auto train_vols = load_split_volumes(data_dir, cohort, "split_train.txt");
  const auto val_vols = load_split_volumes(data_dir, cohort, "split_val.txt");
  SliceModel model = build_slice_model(opt.input_size, opt.seed);
  const auto train_ex = make_slice_examples(train_vols, opt.input_size);
  const auto val_ex = make_slice_examples(val_vols, opt.input_size);
  std::vector<int> labels;
  labels.reserve(train_ex.size());
  for (const SliceExample& ex : train_ex) labels.push_back(ex.label);
  const ClassWeights cw = count_classes(labels);
  const TrainConfig tc{lr, opt.batch, epochs, opt.seed};
  const auto history = train_slice_model(model, train_ex, val_ex, tc, cw);
  save_slice_model(model, out_dir / "slice_model");
  save_history(history, out_dir / "history_slice.csv");
  run->emplace_back("slice_epochs", std::to_string(epochs));
  run->emplace_back("slice_lr", std::to_string(lr));
  std::printf("slice stage: %zu train / %zu val slices, %d epochs\n", train_ex.size(),
              val_ex.size(), epochs);
}

void train_patient_stage(const Options& opt, const fs::path& data_dir, const fs::path& model_dir,
                         const fs::path& out_dir, util::KvPairs* run) {
  const int epochs = opt.epochs == kUnsetInt ? 500 : opt.epochs;
  const float lr = opt.lr == kUnsetReal ? 1e-3f : static_cast<float>(opt.lr);
  SliceModel slice_model = load_slice_model(model_dir / "slice_model");
  const auto cohort = load_cohort_manifest(data_dir / "cohort.txt");
  auto to_examples = [&](const std::vector<SliceVolume>& vols) {
    std::vector<PatientExample> out;
    out.reserve(vols.size());
    for (const SliceVolume& vol : vols)
      out.push_back({extract_patient_features(slice_model, vol), vol.label});
    return out;
  };
  const auto train_px = to_examples(load_split_volumes(data_dir, cohort, "split_train.txt"));
  const auto val_px = to_examples(load_split_volumes(data_dir, cohort, "split_val.txt"));
  PatientClassifier pc = build_patient_classifier(opt.seed);
  const TrainConfig tc{lr, opt.batch, epochs, opt.seed};
  const auto history = train_patient_classifier(pc, train_px, val_px, tc);
  save_patient_classifier(pc, out_dir / "patient_model");
  save_history(history, out_dir / "history_patient.csv");
  run->emplace_back("patient_epochs", std::to_string(epochs));
  run->emplace_back("patient_lr", std::to_string(lr));
  std::printf("patient stage: %zu train / %zu val patients, %d epochs\n", train_px.size(),
              val_px.size(), epochs);
}

void cmd_train(const Options& opt) {
  const fs::path data_dir = opt.data;
  const fs::path out_dir = opt.out;
  const fs::path model_dir = opt.model.empty() ? out_dir : fs::path(opt.model);
  if (!opt.full && opt.stage != "slice" && opt.stage != "patient")
    throw UsageError("--stage must be slice or patient (or pass --full)");
  util::KvPairs run{{"command", "train"},
                    {"data", data_dir.string()},
                    {"stage", opt.full ? "full" : opt.stage},
                    {"seed", std::to_string(opt.seed)},
                    {"batch", std::to_string(opt.batch)},
                    {"input_size", std::to_string(opt.input_size)}};
  if (opt.full) {
    train_slice_stage(opt, data_dir, out_dir, &run);
    train_patient_stage(opt, data_dir, out_dir, out_dir, &run);
  } else if (opt.stage == "slice") {
    train_slice_stage(opt, data_dir, out_dir, &run);
  } else {
    train_patient_stage(opt, data_dir, model_dir, out_dir, &run);
  }
  write_run_config(out_dir, run);
}

void cmd_extract(const Options& opt) {
  const fs::path data_dir = opt.data;
  const fs::path out_dir = opt.out;
  SliceModel slice_model = load_slice_model(fs::path(opt.model) / "slice_model");
  const auto cohort = load_cohort_manifest(data_dir / "cohort.txt");
  fs::create_directories(out_dir);
  util::KvPairs manifest{{"format", "ctcaps-features/1"},
                         {"count", std::to_string(cohort.size())}};
  size_t i = 0;
  for (const CohortEntry& entry : cohort) {
    const Tensor fm = extract_patient_features(slice_model, load_volume(entry.dir));
    const std::string file = entry.id + ".ctt";
    write_ctt(fm, out_dir / file);
    manifest.emplace_back("id_" + std::to_string(i), entry.id);
    manifest.emplace_back("label_" + std::to_string(i), entry.label == 1 ? "covid" : "non-covid");
    manifest.emplace_back("file_" + std::to_string(i), file);
    ++i;
  }
  util::write_file_atomic(out_dir / "features.txt", util::serialize_kv(manifest));
  write_run_config(out_dir, {{"command", "extract"},
                             {"data", data_dir.string()},
                             {"model", opt.model}});
  std::printf("wrote %zu feature maps under %s\n", cohort.size(), out_dir.string().c_str());
}

void cmd_classify(const Options& opt) {
  SliceModel slice_model = load_slice_model(fs::path(opt.model) / "slice_model");
  PatientClassifier pc = load_patient_classifier(fs::path(opt.model) / "patient_model");
  const SliceVolume volume = load_volume(opt.data);
  const PatientResult r =
      classify_patient(slice_model, pc, volume, static_cast<float>(opt.cutoff));
  std::printf("patient=%s label=%s p_covid=%.6f cutoff=%.6f\n", volume.patient_id.c_str(),
              r.label == 1 ? "covid" : "non-covid", r.p_covid, opt.cutoff);
}

void cmd_evaluate(const Options& opt) {
  const fs::path data_dir = opt.data;
  const fs::path out_dir = opt.out;
  const std::vector<double> cutoffs = parse_cutoffs(opt.cutoffs);
  SliceModel slice_model = load_slice_model(fs::path(opt.model) / "slice_model");
  PatientClassifier pc = load_patient_classifier(fs::path(opt.model) / "patient_model");
  const auto cohort = load_cohort_manifest(data_dir / "cohort.txt");
  const auto by_id = cohort_by_id(cohort);
  std::vector<double> scores;
  std::vector<int> truths;
  std::string score_rows = "patient,truth,p_covid\n";
  char buf[160];
  for (const std::string& id : load_id_list(data_dir / "split_test.txt")) {
    const auto it = by_id.find(id);
    if (it == by_id.end())
      throw DataError((data_dir / "split_test.txt").string() + ": id " + id +
                      " is not in cohort.txt");
    const SliceVolume volume = load_volume(it->second.dir);
    const PatientResult r = classify_patient(slice_model, pc, volume, 0.5f);
    scores.push_back(static_cast<double>(r.p_covid));
    truths.push_back(it->second.label);
    std::snprintf(buf, sizeof(buf), "%s,%d,%.9g\n", id.c_str(), it->second.label,
                  static_cast<double>(r.p_covid));
    score_rows += buf;
  }
  const EvaluationReport report = cutoff_sweep(scores, truths, cutoffs);
  fs::create_directories(out_dir);
  write_report_csv(report, out_dir / "report.csv");
  write_auc_txt(report, out_dir / "auc.txt");
  write_roc_csv(report.roc, out_dir / "roc.csv");
  util::write_file_atomic(out_dir / "scores.csv", score_rows);
  write_run_config(out_dir, {{"command", "evaluate"},
                             {"data", data_dir.string()},
                             {"model", opt.model},
                             {"cutoffs", opt.cutoffs.empty() ? "0.3,0.4,0.5,0.6,0.7"
                                                             : opt.cutoffs}});
  std::printf("evaluated %zu test patients: auc=%.4f (%.4f, %.4f)\n", scores.size(),
              report.auc.value, report.auc.lo, report.auc.hi);
}

void cmd_gradcam(const Options& opt) {
  const fs::path out_dir = opt.out;
  SliceModel slice_model = load_slice_model(fs::path(opt.model) / "slice_model");
  const SliceVolume volume = load_volume(opt.data);
  fs::create_directories(out_dir);
  char name[96];
  for (size_t k = 0; k < volume.slices.size(); ++k) {
    const Tensor px = prepare_slice_input(volume.slices[k].pixels, slice_model.cfg.input_size);
    const HeatMap map = gradcam(slice_model, px, 1, volume.patient_id);
    std::snprintf(name, sizeof(name), "slice_%03zu_heat.ctt", k);
    write_ctt(map.values, out_dir / name);
    std::snprintf(name, sizeof(name), "slice_%03zu_heat.pgm", k);
    write_pgm(map.values, out_dir / name);
    std::snprintf(name, sizeof(name), "slice_%03zu_overlay.pgm", k);
    write_side_by_side(px, map.values, out_dir / name);
  }
  write_run_config(out_dir, {{"command", "gradcam"},
                             {"data", opt.data},
                             {"model", opt.model},
                             {"slices", std::to_string(volume.slices.size())}});
  std::printf("wrote %zu heat maps under %s\n", volume.slices.size(), out_dir.string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  Options opt;
  CLI::App app{"ctcaps: capsule-network CT slice pipeline (synthetic data, training, "
               "evaluation, grad-cam)"};
  app.require_subcommand(1);

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic cohort with splits");
  synth->add_option("--out", opt.out, "output directory")->required();
  synth->add_option("--covid", opt.covid, "covid patient count");
  synth->add_option("--noncovid", opt.noncovid, "non-covid patient count");
  synth->add_option("--slices", opt.slices, "slices per volume");
  synth->add_option("--size", opt.size, "slice edge length in pixels");
  synth->add_option("--seed", opt.seed, "generator seed");

  CLI::App* train = app.add_subcommand("train", "train the slice or patient stage");
  train->add_option("--data", opt.data, "cohort directory from synth")->required();
  train->add_option("--out", opt.out, "model output directory")->required();
  train->add_option("--model", opt.model, "slice-model directory for the patient stage "
                                          "(defaults to --out)");
  train->add_option("--stage", opt.stage, "slice | patient");
  train->add_flag("--full", opt.full, "run both stages in sequence");
  train->add_option("--seed", opt.seed, "training seed");
  train->add_option("--epochs", opt.epochs, "epoch count (default: 100 slice, 500 patient)");
  train->add_option("--lr", opt.lr, "learning rate (default: 1e-4 slice, 1e-3 patient)");
  train->add_option("--batch", opt.batch, "batch size");
  train->add_option("--input-size", opt.input_size, "slice model input size (32/64/128/256)");

  CLI::App* extract = app.add_subcommand("extract", "export per-patient feature maps");
  extract->add_option("--data", opt.data, "cohort directory")->required();
  extract->add_option("--model", opt.model, "model directory")->required();
  extract->add_option("--out", opt.out, "feature output directory")->required();

  CLI::App* classify = app.add_subcommand("classify", "score one patient volume");
  classify->add_option("--data", opt.data, "volume directory")->required();
  classify->add_option("--model", opt.model, "model directory")->required();
  classify->add_option("--cutoff", opt.cutoff, "decision cutoff in (0,1)");

  CLI::App* evaluate = app.add_subcommand("evaluate", "report over the test split");
  evaluate->add_option("--data", opt.data, "cohort directory")->required();
  evaluate->add_option("--model", opt.model, "model directory")->required();
  evaluate->add_option("--out", opt.out, "report output directory")->required();
  evaluate->add_option("--cutoffs", opt.cutoffs, "comma-separated cutoffs "
                                                 "(default 0.3,0.4,0.5,0.6,0.7)");

  CLI::App* gradcam_cmd = app.add_subcommand("gradcam", "write covid-class heat maps for a volume");
  gradcam_cmd->add_option("--data", opt.data, "volume directory")->required();
  gradcam_cmd->add_option("--model", opt.model, "model directory")->required();
  gradcam_cmd->add_option("--out", opt.out, "heat map output directory")->required();

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
      if (e.get_exit_code() == 0) return app.exit(e);  // --help
      app.exit(e);
      return 2;
    }
    apply_thread_cap();
    if (synth->parsed()) cmd_synth(opt);
    else if (train->parsed()) cmd_train(opt);
    else if (extract->parsed()) cmd_extract(opt);
    else if (classify->parsed()) cmd_classify(opt);
    else if (evaluate->parsed()) cmd_evaluate(opt);
    else if (gradcam_cmd->parsed()) cmd_gradcam(opt);
    return 0;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "ctcaps: %s\n", e.what());
    return 2;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "ctcaps: %s\n", e.what());
    return 2;
  } catch (const StateError& e) {
    std::fprintf(stderr, "ctcaps: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    // Data problems and anything unexpected: bad files, checksum failures,
    // diverged training.
    std::fprintf(stderr, "ctcaps: %s\n", e.what());
    return 3;
  }
}
