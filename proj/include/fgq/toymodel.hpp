#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "fgq/qmodel.hpp"
#include "fgq/tensor.hpp"

namespace fgq {

/// Desk-scale stand-in for a multi-view alternating-attention backbone with
/// three task heads. aa_pairs pairs of (frame, global) attention sublayers
/// give L = 2*aa_pairs calibrated blocks.
struct ToyModelConfig {
  int num_views = 2;        // N
  int tokens_per_view = 16; // K patch tokens; one special token is prepended per view
  int hidden_dim = 32;      // C, power of two
  int aa_pairs = 3;         // L = 2 * aa_pairs
  int pose_dim = 4;
  int in_dim = 8;
  int mlp_hidden = 64;      // power of two
  uint64_t seed = 42;

  int num_blocks() const { return 2 * aa_pairs; }
  int tokens_total() const { return num_views * (tokens_per_view + 1); }
  void validate() const;

  bool operator==(const ToyModelConfig&) const = default;
};

struct Linear {
  Tensor w;  // (in, out)
  Tensor b;  // (out,)
};

struct Block {
  bool global = false;  // frame attention when false
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Linear q, k, v, o;
  Linear mlp_in, mlp_out;
};

struct ToyModel {
  ToyModelConfig cfg;
  Linear embed;    // (in_dim, C)
  Tensor special;  // (N, C) learned per-view token, prepended, never quantized
  std::vector<Block> blocks;
  Linear pose_head;   // (C, pose_dim), reads mean-pooled special tokens
  Linear depth_head;  // (C, 1), per patch token
  Linear point_head;  // (C, 3), per patch token

  /// All leaf parameters in a fixed order, paired with stable names.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
};

ToyModel init_model(const ToyModelConfig& cfg);

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Teacher-generated dataset. The teacher is a fixed random 2-layer network
/// derived from the model config seed (shared across all datasets for that
/// config): the pose target is a global mean over tokens of half the hidden
/// units, the depth/point targets are per-token functions of the other half,
/// so the tasks share structure but load on different features.
struct SyntheticDataset {
  Tensor inputs;  // (n, N, K, in_dim)
  Tensor pose;    // (n, pose_dim)
  Tensor depth;   // (n, N, K), positive
  Tensor point;   // (n, N, K, 3)
  uint64_t seed = 0;

  int64_t size() const { return inputs.dim(0); }
  SyntheticDataset take(int64_t start, int64_t count) const;
  SyntheticDataset gather(const std::vector<int64_t>& idx) const;
};

/// Deterministic per (seed, noise_seed). noise_seed = 0 derives one from
/// seed; sigma = 0 never consults the noise stream.
SyntheticDataset generate_dataset(const ToyModelConfig& cfg, int64_t n_samples, uint64_t seed,
                                  double noise_sigma = 0.01, uint64_t noise_seed = 0);

// ---------------------------------------------------------------------------
// Forward / losses / training
// ---------------------------------------------------------------------------

struct TaskOutputs {
  Tensor pose;   // (B, pose_dim)
  Tensor depth;  // (B, N, K)
  Tensor point;  // (B, N, K, 3)
};

struct ForwardResult {
  TaskOutputs out;
  std::vector<Tensor> hooks;  // L post-block token states (B, N*(K+1), C)
};

/// Runs the backbone and heads. With `qc`, quantizes the linears of the
/// blocks selected by qc->only_block; `qc` may be null for the plain path.
ForwardResult forward(const ToyModel& m, const Tensor& inputs, ModelQuantCfg* qc = nullptr,
                      bool capture_hooks = false);

/// Token states entering block 0 (embedded patches + special tokens).
Tensor embed_tokens(const ToyModel& m, const Tensor& inputs);

/// One block applied to token states (B, N*(K+1), C); the unit the
/// calibration loop drives in isolation.
Tensor block_forward(const ToyModel& m, int l, const Tensor& x_in, ModelQuantCfg* qc = nullptr);

struct TaskLosses {
  Tensor camera, depth, point;  // scalars
  Tensor total() const;
};

/// Per-task mean squared error, differentiable.
TaskLosses task_losses(const TaskOutputs& out, const SyntheticDataset& targets);

/// Plain (no-graph) summed task loss of the model on a dataset.
double dataset_loss(const ToyModel& m, const SyntheticDataset& data, ModelQuantCfg* qc = nullptr);

struct TrainConfig {
  int steps = 300;
  double lr = 4e-3;
  int batch_size = 16;
  uint64_t seed = 42;
};

struct TrainResult {
  std::vector<double> trace;  // per-step batch loss
  double initial_loss = 0.0;  // full-set summed task loss before training
  double final_loss = 0.0;    // and after
  double final_grad_rms = 0.0;  // sqrt(mean g^2) over all parameters, full set
};

/// Adam on all model parameters; aborts with a diagnostic if the loss goes
/// non-finite. steps = 0 leaves the model untouched and the trace empty.
TrainResult train_toy(ToyModel& m, const SyntheticDataset& data, const TrainConfig& tc);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_model(const std::string& path, const ToyModel& m);
ToyModel load_model(const std::string& path);

nlohmann::json toymodel_config_json(const ToyModelConfig& c);
ToyModelConfig toymodel_config_from_json(const nlohmann::json& j);

}  // namespace fgq
