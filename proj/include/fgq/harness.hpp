#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fgq/calib.hpp"
#include "fgq/fisher.hpp"
#include "fgq/toymodel.hpp"

namespace fgq {

/// Everything a run depends on. A run is a pure function of this struct:
/// all sub-seeds (model init, teacher, datasets, batch order) are derived
/// from the master seed.
struct RunConfig {
  uint64_t seed = 42;
  Method method = Method::FGQ;
  std::string out_dir = "runs/out";
  ToyModelConfig model;
  int train_samples = 256;
  int calib_samples = 64;
  int eval_samples = 512;
  double noise_sigma = 0.01;
  TrainConfig train;
  int w_bits = 4;
  int a_bits = 4;
  CalibConfig calib;
  FisherMode fisher_mode = FisherMode::OutputSum;
  int fisher_samples = 256;
  bool run_correlation = false;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig defaults(Method method, uint64_t seed);
};

/// FNV-1a over the canonical config dump, as a 16-hex-digit string.
std::string config_hash(const RunConfig& cfg);

// Derived datasets. The calibration and evaluation sets are disjoint index
// ranges of one generated pool.
SyntheticDataset make_train_data(const RunConfig& cfg);
SyntheticDataset make_calib_data(const RunConfig& cfg);
SyntheticDataset make_eval_data(const RunConfig& cfg);
SyntheticDataset make_fisher_data(const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

constexpr std::array<double, 3> kPoseThresholds = {0.05, 0.1, 0.2};
constexpr double kDepthDeltaRatio = 1.25;

struct MetricSet {
  double camera_rmse = 0.0;
  std::array<double, 3> camera_acc = {0.0, 0.0, 0.0};  // at kPoseThresholds
  double depth_absrel = 0.0;
  double depth_delta = 0.0;  // fraction with ratio < 1.25
  double point_err_mean = 0.0;
  double point_err_median = 0.0;

  nlohmann::json to_json() const;
};

MetricSet compute_metrics(const TaskOutputs& pred, const SyntheticDataset& targets);

struct EvalReport {
  MetricSet metrics;
  /// NPD (percent, rounded to 2 decimals) per metric vs the FP run; empty
  /// for the FP run itself.
  std::vector<std::pair<std::string, double>> npd;
  /// One representative NPD per task: camera_rmse, depth_absrel,
  /// point_err_mean.
  double npd_camera = 0.0, npd_depth = 0.0, npd_point = 0.0;
  /// Mean squared FP-vs-quantized block output gap, per block.
  std::vector<double> per_block_qloss;
};

/// Evaluates the model (optionally quantized) on a held-out set; when
/// fp_metrics is given, fills the NPD fields against it.
EvalReport evaluate(const ToyModel& m, ModelQuantCfg* qc, const SyntheticDataset& testset,
                    const MetricSet* fp_metrics);

// ---------------------------------------------------------------------------
// Fisher-vs-measured correlation (per-block sensitivity check)
// ---------------------------------------------------------------------------

struct CorrelationRow {
  int task = 0;
  int block = 0;
  double predicted = 0.0;
  double measured = 0.0;
};

struct CorrelationResult {
  std::vector<CorrelationRow> rows;
  std::array<double, kNumTasks> per_task_r = {0.0, 0.0, 0.0};
  /// Pearson over the union of per-task standardized (predicted, measured)
  /// pairs. Task losses live on very different scales here, so the raw
  /// union conflates cross-task offsets with the per-block structure; the
  /// within-task standardization removes that artifact.
  double pooled_r = 0.0;
  /// Pearson over the raw union, reported alongside.
  double pooled_r_raw = 0.0;
  int excluded_rows = 0;

  nlohmann::json to_json() const;
};

/// Quantizes one block at a time (RTN, given bit widths), measures the
/// end-to-end task loss change, and compares with the Fisher-predicted
/// loss increase. fisher should be estimated in task_loss mode.
CorrelationResult correlation_experiment(const ToyModel& m, const FisherTensor& fisher, int w_bits,
                                         int a_bits, const SyntheticDataset& evalset);

double pearson(const std::vector<double>& x, const std::vector<double>& y);

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// The full machine-readable run report; `j` is the canonical form that is
/// emitted, parsed and compared.
struct Report {
  nlohmann::json j;
  bool operator==(const Report& o) const { return j == o.j; }
};

/// Writes <dir>/report.json and an aligned-text <dir>/report.txt.
void emit_report(const Report& r, const std::string& dir);
Report parse_report(const std::string& json_path);

/// train -> (fisher) -> (calibrate) -> evaluate -> report. Every stage
/// persists its artifact under cfg.out_dir; rerunning with the same config
/// reproduces the report bit-identically.
Report run_pipeline(const RunConfig& cfg);

// Individual stages (also reachable through the CLI verbs). Artifacts:
// checkpoint.fgqc, fisher.fgqf, calibrated.fgqc, report.json/.txt.
ToyModel stage_train(const RunConfig& cfg, TrainResult* train_out);
FisherTensor stage_fisher(const RunConfig& cfg, const ToyModel& m);
ModelQuantCfg stage_calibrate(const RunConfig& cfg, const ToyModel& m, const FisherTensor* fisher,
                              CalibRunResult* calib_out);

/// Serialized quantization state (transforms, clips, bit widths).
void save_quant_state(const std::string& path, const ModelQuantCfg& qc);
ModelQuantCfg load_quant_state(const std::string& path, const ToyModel& m);

}  // namespace fgq
