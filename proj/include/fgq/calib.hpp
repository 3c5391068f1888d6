#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fgq/fisher.hpp"
#include "fgq/toymodel.hpp"

namespace fgq {

/// Block calibration protocol parameters. Defaults: 15 epochs, batch 2,
/// transform lr 1e-2 with clip lr 10x larger, cosine decay to 1e-5 stepped
/// once per optimizer step, AdamW(0.9, 0.999, 1e-8) with weight decay 0.01
/// on transforms (not clips), seed 42.
struct CalibConfig {
  std::string objective = "uniform";  // "uniform" or "fgq"
  int epochs = 15;
  int batch_size = 2;
  double lr_transform = 1e-2;
  double lr_clip = 1e-1;
  double eta_min = 1e-5;
  double weight_decay = 0.01;
  bool decay_on_clip = false;
  double weight_floor = 0.01;
  uint64_t seed = 42;

  int steps_per_block(int64_t nsamples) const {
    return epochs * static_cast<int>(nsamples / batch_size);
  }
};

/// Captured full-precision inputs/outputs of one block over the calibration
/// set; captured once, reused across every epoch.
struct BlockIO {
  Tensor inputs;   // (S, T, C)
  Tensor outputs;  // (S, T, C)
};

BlockIO capture_block_io(const ToyModel& m, const SyntheticDataset& data, int block);
std::vector<BlockIO> capture_all_block_io(const ToyModel& m, const SyntheticDataset& data);

/// Mean over batch, tokens and channels of the (optionally channel-weighted)
/// squared output error. weights, when given, is a (C,) tensor.
Tensor calibration_loss(const Tensor& fp_out, const Tensor& q_out, const Tensor* weights);

struct BlockCalibResult {
  std::vector<double> step_losses;   // raw (pre-normalization) batch loss per optimizer step
  std::vector<double> epoch_losses;  // full-calibration-set loss after each epoch
  double initial_loss = 0.0;         // full-set loss before any step
  double final_loss = 0.0;
  bool restored_best = false;        // best-seen snapshot was restored at the end
  int rejected_steps = 0;            // steps undone by the P condition guard
};

/// Optimizes this block's transform and clipping parameters against the
/// captured FP outputs; every other parameter is untouched. The quantized
/// block consumes the captured FP inputs. Before each backward the scalar
/// loss is divided by its detached value.
BlockCalibResult calibrate_block(const ToyModel& m, ModelQuantCfg& qc, int block, const BlockIO& io,
                                 const Tensor* weights, const CalibConfig& cc);

struct CalibRunResult {
  std::vector<BlockCalibResult> blocks;
};

/// Blocks are calibrated in interleaved frame/global order (block index
/// order). fisher must be non-null iff objective = "fgq". Rebuilds the
/// inference weight caches before returning.
CalibRunResult calibrate_model(const ToyModel& m, ModelQuantCfg& qc, const FisherTensor* fisher,
                               const SyntheticDataset& calib_data, const CalibConfig& cc);

}  // namespace fgq
