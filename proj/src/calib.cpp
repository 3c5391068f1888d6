#include "fgq/calib.hpp"

#include <cmath>
#include <stdexcept>

#include "fgq/optim.hpp"

namespace fgq {

namespace {
constexpr double kClipMin = 1e-4;
constexpr double kDiagMin = 1e-4;
}  // namespace

std::vector<BlockIO> capture_all_block_io(const ToyModel& m, const SyntheticDataset& data) {
  Tensor x = embed_tokens(m, data.inputs);
  std::vector<BlockIO> io;
  for (int l = 0; l < m.cfg.num_blocks(); ++l) {
    Tensor y = block_forward(m, l, x, nullptr);
    io.push_back({x.detach(), y.detach()});
    x = y;
  }
  return io;
}

BlockIO capture_block_io(const ToyModel& m, const SyntheticDataset& data, int block) {
  Tensor x = embed_tokens(m, data.inputs);
  for (int l = 0; l < block; ++l) x = block_forward(m, l, x, nullptr);
  Tensor y = block_forward(m, block, x, nullptr);
  return {x.detach(), y.detach()};
}

Tensor calibration_loss(const Tensor& fp_out, const Tensor& q_out, const Tensor* weights) {
  Tensor sq = square(sub(q_out, fp_out));
  if (weights) sq = mul(sq, *weights);
  return mean(sq);
}

namespace {

double full_set_loss(const ToyModel& m, ModelQuantCfg& qc, int block, const BlockIO& io,
                     const Tensor* weights) {
  Tensor out = block_forward(m, block, io.inputs, &qc);
  return calibration_loss(io.outputs, out, weights).item();
}

std::vector<double> snapshot_params(const std::vector<Tensor>& ps) {
  std::vector<double> flat;
  for (const auto& p : ps) flat.insert(flat.end(), p.data().begin(), p.data().end());
  return flat;
}

void restore_params(std::vector<Tensor>& ps, const std::vector<double>& flat) {
  size_t off = 0;
  for (auto& p : ps) {
    std::copy(flat.begin() + off, flat.begin() + off + p.size(), p.data().begin());
    off += p.size();
  }
}

void project_params(BlockQuant& bq) {
  for (Tensor t : bq.clip_params()) {
    double& v = t.data()[0];
    v = std::min(1.0, std::max(kClipMin, v));
  }
  for (auto* tf : {&bq.tf_attn, &bq.tf_o, &bq.tf_mlp_in, &bq.tf_mlp_out}) {
    if (*tf && (*tf)->learnable()) {
      for (double& v : (*tf)->diag_scale.data()) v = std::max(kDiagMin, v);
    }
  }
}

void bump_versions(BlockQuant& bq) {
  for (auto* tf : {&bq.tf_attn, &bq.tf_o, &bq.tf_mlp_in, &bq.tf_mlp_out}) {
    if (*tf) (*tf)->bump();
  }
}

bool conds_ok(BlockQuant& bq) {
  for (auto* tf : {&bq.tf_attn, &bq.tf_o, &bq.tf_mlp_in, &bq.tf_mlp_out}) {
    if (*tf && (*tf)->learnable() && !(transform_cond(**tf) <= kMaxTransformCond)) return false;
  }
  return true;
}

}  // namespace

BlockCalibResult calibrate_block(const ToyModel& m, ModelQuantCfg& qc, int block, const BlockIO& io,
                                 const Tensor* weights, const CalibConfig& cc) {
  if (block < 0 || block >= static_cast<int>(qc.blocks.size())) {
    throw std::invalid_argument("calibrate_block: bad block index");
  }
  BlockQuant& bq = qc.blocks[block];
  int64_t nsamples = io.inputs.dim(0);
  int nbatch = static_cast<int>(nsamples / cc.batch_size);
  if (nbatch < 1) throw std::invalid_argument("calibrate_block: batch size exceeds sample count");
  int64_t t_max = static_cast<int64_t>(cc.epochs) * nbatch;

  bool was_graph = qc.graph_mode;
  qc.graph_mode = true;

  std::vector<Tensor> tparams = bq.transform_params();
  std::vector<Tensor> cparams = bq.clip_params();
  std::vector<AdamW::Group> groups;
  if (!tparams.empty()) groups.push_back({tparams, cc.lr_transform, cc.weight_decay});
  if (!cparams.empty()) groups.push_back({cparams, cc.lr_clip, cc.decay_on_clip ? cc.weight_decay : 0.0});
  AdamW opt(std::move(groups));
  size_t n_tgroups = tparams.empty() ? 0 : 1;

  std::vector<Tensor> all_params = tparams;
  all_params.insert(all_params.end(), cparams.begin(), cparams.end());

  BlockCalibResult res;
  res.initial_loss = full_set_loss(m, qc, block, io, weights);
  double best_loss = res.initial_loss;
  std::vector<double> best_snapshot = snapshot_params(all_params);

  int64_t step_idx = 0;
  for (int epoch = 0; epoch < cc.epochs; ++epoch) {
    for (int b = 0; b < nbatch; ++b) {
      Tensor bx = slice(io.inputs, 0, static_cast<int64_t>(b) * cc.batch_size, cc.batch_size).detach();
      Tensor by = slice(io.outputs, 0, static_cast<int64_t>(b) * cc.batch_size, cc.batch_size).detach();

      Tape tape;
      double raw_loss;
      {
        TapeScope scope(tape);
        Tensor out = block_forward(m, block, bx, &qc);
        Tensor loss = calibration_loss(by, out, weights);
        raw_loss = loss.item();
        if (!std::isfinite(raw_loss)) {
          throw std::runtime_error("calibrate_block: non-finite loss in block " + std::to_string(block) +
                                   " at step " + std::to_string(step_idx));
        }
        // divide by the detached value; a zero loss has zero gradients anyway
        Tensor normalized = raw_loss > 0.0 ? affine(loss, 1.0 / raw_loss, 0.0) : loss;
        opt.zero_grad();
        tape.backward(normalized);
      }
      res.step_losses.push_back(raw_loss);

      // cosine schedule, stepped once per optimizer step
      for (size_t gi = 0; gi < opt.groups().size(); ++gi) {
        double base = gi < n_tgroups ? cc.lr_transform : cc.lr_clip;
        opt.groups()[gi].lr = cosine_lr(step_idx, t_max, base, cc.eta_min);
      }

      AdamW::Snapshot snap = opt.snapshot();
      opt.step();
      project_params(bq);
      if (!conds_ok(bq)) {
        // reject the step and retry once at half the learning rate
        opt.restore(snap);
        for (auto& g : opt.groups()) g.lr *= 0.5;
        opt.step();
        project_params(bq);
        if (!conds_ok(bq)) {
          opt.restore(snap);
          ++res.rejected_steps;
        }
      }
      bump_versions(bq);
      ++step_idx;
    }
    double el = full_set_loss(m, qc, block, io, weights);
    res.epoch_losses.push_back(el);
    if (el < best_loss) {
      best_loss = el;
      best_snapshot = snapshot_params(all_params);
    }
  }

  res.final_loss = res.epoch_losses.empty() ? res.initial_loss : res.epoch_losses.back();
  if (res.final_loss > res.initial_loss) {
    restore_params(all_params, best_snapshot);
    bump_versions(bq);
    res.restored_best = true;
    res.final_loss = best_loss;
  }

  qc.graph_mode = was_graph;
  bq.invalidate_caches();
  return res;
}

CalibRunResult calibrate_model(const ToyModel& m, ModelQuantCfg& qc, const FisherTensor* fisher,
                               const SyntheticDataset& calib_data, const CalibConfig& cc) {
  bool fgq = cc.objective == "fgq";
  if (cc.objective != "uniform" && cc.objective != "fgq") {
    throw std::invalid_argument("calibrate_model: unknown objective '" + cc.objective + "'");
  }
  if (fgq && !fisher) throw std::invalid_argument("calibrate_model: fgq objective needs a Fisher tensor");

  CalibrationWeights weights;
  if (fgq) {
    validate_fisher(*fisher, m.cfg);
    weights = block_weights(combine_tasks(*fisher), fisher->blocks, fisher->channels, cc.weight_floor);
  }

  std::vector<BlockIO> io = capture_all_block_io(m, calib_data);
  CalibRunResult run;
  for (int l = 0; l < m.cfg.num_blocks(); ++l) {
    Tensor wrow;
    if (fgq) wrow = weights.block_row(l);
    run.blocks.push_back(calibrate_block(m, qc, l, io[l], fgq ? &wrow : nullptr, cc));
  }
  refold_caches(m, qc);
  return run;
}

}  // namespace fgq
