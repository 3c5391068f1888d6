#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fgq/toymodel.hpp"

namespace fgq {

enum class FisherMode { TaskLoss, OutputSum };
std::string fisher_mode_name(FisherMode m);
FisherMode fisher_mode_from_name(const std::string& s);

constexpr int kNumTasks = 3;
extern const std::array<const char*, kNumTasks> kTaskNames;  // camera, depth, point

/// Per-task, per-block, per-channel nonnegative sensitivity scores:
/// raw[k][l][c] = (1/N) sum_n sum_t (d obj_k / d h[l,t,c])^2, with the token
/// sum inside the square-then-accumulate. Estimated once, then frozen.
struct FisherTensor {
  int tasks = kNumTasks;
  int blocks = 0;
  int channels = 0;
  std::vector<double> raw;  // tasks * blocks * channels, row-major
  std::string objective_mode;
  uint64_t seed = 0;
  int n_samples = 0;

  double& at(int k, int l, int c) { return raw[(static_cast<size_t>(k) * blocks + l) * channels + c]; }
  double at(int k, int l, int c) const {
    return raw[(static_cast<size_t>(k) * blocks + l) * channels + c];
  }
};

/// Objective per task: TaskLoss uses the per-sample task MSE, OutputSum the
/// plain sum of the task output. Samples are processed one at a time in
/// dataset order (fixed-order accumulation; deterministic).
FisherTensor estimate_diagonal_fisher(const ToyModel& model, const SyntheticDataset& data,
                                      FisherMode mode);

/// Full C x C empirical Fisher for one (block, task): averaged per-token
/// gradient outer products. Oracle for the diagonal estimate; guarded to
/// C <= 8.
std::vector<double> estimate_full_fisher(const ToyModel& model, const SyntheticDataset& data, int block,
                                         int task, FisherMode mode);

/// s[l,c] = sum_k F_k[l,c] / mean(F_k)  (per-task mean over all blocks and
/// channels). Invariant under per-task positive rescaling. Throws, naming
/// the task, when a task's Fisher is identically zero.
std::vector<double> combine_tasks(const FisherTensor& f);

struct CalibrationWeights {
  int blocks = 0;
  int channels = 0;
  std::vector<double> w;  // blocks * channels
  double floor = 0.01;

  double at(int l, int c) const { return w[static_cast<size_t>(l) * channels + c]; }
  /// Channel weights of one block as a (C,) tensor.
  Tensor block_row(int l) const;
};

/// w_l[c] = s[l,c] / mean_c s[l,:], then max(w, floor). Pre-floor rows have
/// mean exactly 1 (up to f64 summation).
CalibrationWeights block_weights(const std::vector<double>& s, int blocks, int channels,
                                 double floor = 0.01);

/// (1/2) * mean over samples of sum_t sum_c F[l,c] * dh[n,t,c]^2 — the
/// Fisher-predicted task-loss increase for a block perturbation dh
/// (shape (samples, T, C)).
double predicted_loss_increase(const std::vector<double>& fisher_row, const Tensor& dh);

/// Normalized performance degradation |q - fp| / fp * 100.
double npd(double metric_q, double metric_fp);

// ---------------------------------------------------------------------------
// Hessian-Fisher identity (Monte-Carlo, closed-form Gaussian regression)
// ---------------------------------------------------------------------------

/// y = w*.x + eps with known sigma, x ~ N(0, diag). At z = w* the expected
/// NLL Hessian equals the Fisher (both E[xx^T]/sigma^2); away from w* the
/// match is broken. The report carries the Monte-Carlo evidence for both.
struct IdentityReport {
  int dim = 0;
  int n_samples = 0;
  double sigma = 0.0;
  double mean_score_norm = 0.0;      // || (1/n) sum score_i ||
  double score_std = 0.0;            // sqrt(tr cov(score))
  double frob_gap_rel = 0.0;         // ||H - F||_F / ||H||_F at z = w*
  double frob_gap_rel_misspec = 0.0; // same at z = w* + delta, |delta| = sigma
  double analytic_gap_rel = 0.0;     // MC Hessian vs analytic E[xx^T]/sigma^2
};

IdentityReport verify_hessian_fisher_identity(int n_samples, uint64_t seed);

// ---------------------------------------------------------------------------
// Fisher file
// ---------------------------------------------------------------------------

/// JSON header line {tasks, blocks, channels, objective_mode, seed,
/// n_samples} + '\n' + raw little-endian f64 payload (unnormalized).
void save_fisher(const std::string& path, const FisherTensor& f);
FisherTensor load_fisher(const std::string& path);
/// Shape check against a model config.
void validate_fisher(const FisherTensor& f, const ToyModelConfig& cfg);

}  // namespace fgq
