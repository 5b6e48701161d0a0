#pragma once

// Experiment runner: variant registry, resolved configs, run/sweep drivers,
// snapshot files and figure-data emission.

#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowvi/evaluator.hpp"
#include "flowvi/flow.hpp"
#include "flowvi/targets.hpp"
#include "flowvi/trainer.hpp"
#include "json.hpp"

namespace flowvi {

/// Bad flag or name; message lists the accepted values.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct VariantInfo {
  std::string name;
  BaseKind base = BaseKind::Gaussian;
  ClampMode clamp;
  Ordering ordering = Ordering::Classic;
  bool loft = false;
  bool meanfield = false;
};

const std::vector<std::string>& variant_names();
const std::vector<std::string>& model_names();
/// Throws UsageError for unknown names. Clamp bounds come from the arguments for
/// the proposed variants.
VariantInfo lookup_variant(const std::string& name, double alpha_neg = 2.0, double alpha_pos = 0.1);

struct ModelSpec {
  std::string name = "funnel";
  std::size_t dim = 10;      // funnel, mvt, mixture, stdnormal
  std::size_t dprime = 10;   // conjlr, horseshoe
  std::size_t n = 100;
  std::optional<std::filesystem::path> data;  // CSV, overrides the generator
  std::uint64_t data_seed = 0;
};

std::unique_ptr<TargetModel> make_target(const ModelSpec& spec);
/// The dataset a data-backed model would use (generated or loaded).
std::optional<SyntheticDataset> model_dataset(const ModelSpec& spec);

struct ExperimentConfig {
  ModelSpec model;
  std::string variant = "proposed-student-loft";
  std::size_t layers = 8;
  std::size_t hidden = 100;
  double tau = LoftLayer::kDefaultTau;
  double alpha_neg = 2.0;
  double alpha_pos = 0.1;
  double symclip_alpha = 2.0;
  TrainConfig train = TrainConfig::desk();
  EvalConfig eval;
  std::filesystem::path out = "out";

  static ExperimentConfig desk();
  /// Paper-scale preset: r = 64, 60 000 iterations, b = 256.
  static ExperimentConfig paper();

  std::string run_id() const;
  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
};

FlowModel make_model(const ExperimentConfig& config, std::size_t dim, std::uint64_t init_seed);

inline constexpr const char* kCsvHeader =
    "run-id,variant,model,d,r,elbo_mean,elbo_std,logml_mean,logml_std,swd_mean,swd_std";
std::string csv_row(const ExperimentConfig& config, std::size_t dim, const EvalReport& report);

struct RunResult {
  std::string run_id;
  std::size_t dim = 0;
  RunRecord record;
  EvalReport report;
  std::string csv;
};

/// Train, evaluate and (when `write_files`) write config.json, run.jsonl,
/// snapshot.bin, report.json and row.csv under config.out.
RunResult run_experiment(const ExperimentConfig& config, bool write_files = true);

// ---- snapshot files ----------------------------------------------------------------------------
// Layout (little-endian): "FVSNAP01", u32 version, u64 metadata length, metadata JSON,
// u64 entry count, then per entry: u32 name length, name, u32 rank, u64 dims[rank],
// float64 payload (row-major).

void save_snapshot(const std::filesystem::path& path, FlowModel& model, const nlohmann::json& meta);
struct SnapshotFile {
  nlohmann::json meta;
  std::vector<std::pair<std::string, Tensor>> entries;
};
SnapshotFile load_snapshot(const std::filesystem::path& path);
/// Copy entries into the model by name; every model parameter must be present.
void apply_snapshot(const SnapshotFile& file, FlowModel& model);

// ---- sweeps and figure data ----------------------------------------------------------------------

struct SweepRow {
  std::string run_id;
  bool ok = false;
  std::string error;
  std::optional<RunResult> result;
};

/// Manifest: {"out": dir, "defaults": {...config...}, "runs": [{...overrides...}, ...]}.
/// Runs execute on min(FLOWVI_THREADS, hardware) workers; rows keep manifest order.
std::vector<SweepRow> sweep(const nlohmann::json& manifest, std::size_t threads);
std::size_t worker_count_from_env();

/// Tabulations on an even grid: columns s and one column per curve.
void write_clamp_table(const std::filesystem::path& path, double lo, double hi, std::size_t points);
void write_loft_table(const std::filesystem::path& path, double tau, double lo, double hi,
                      std::size_t points);

}  // namespace flowvi
