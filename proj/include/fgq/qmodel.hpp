#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fgq/quant.hpp"
#include "fgq/transform.hpp"

namespace fgq {

struct ToyModel;

enum class Method { FP, RTN, Hadamard, UniformAffine, FGQ };

std::string method_name(Method m);
Method method_from_name(const std::string& s);

/// Static (post-calibration) quantized weight snapshot for one linear.
struct WeightCache {
  Tensor w;                    // dequantized folded weight
  std::vector<double> scales;  // realized per-output-channel scales
  bool valid = false;
  uint64_t tf_version = 0;
  double clip = 1.0;
};

/// Quantization state of one calibrated block: one input transform per
/// stream (Q/K/V share the pre-attention stream), one learnable weight clip
/// per linear, one learnable activation clip per stream.
struct BlockQuant {
  std::optional<AffineTransform> tf_attn, tf_o, tf_mlp_in, tf_mlp_out;
  Tensor cw_q, cw_k, cw_v, cw_o, cw_mlp_in, cw_mlp_out;  // weight clips (scalars)
  Tensor ca_attn, ca_o, ca_mlp_in, ca_mlp_out;           // activation clips (scalars)
  WeightCache wc_q, wc_k, wc_v, wc_o, wc_mlp_in, wc_mlp_out;

  /// Learnable transform parameters (P and diag_scale of dense transforms).
  std::vector<Tensor> transform_params();
  /// Learnable clipping factors.
  std::vector<Tensor> clip_params();
  void invalidate_caches();
};

struct ModelQuantCfg {
  Method method = Method::RTN;
  QuantSpec wspec, aspec;
  std::vector<BlockQuant> blocks;
  /// Calibration mode: weights are folded and fake-quantized in-graph every
  /// forward so gradients reach P/diag_scale/clips. Off = cached inference.
  bool graph_mode = false;
  /// Restrict quantization to a single block (-1 = all); used by the
  /// per-block sensitivity measurements.
  int only_block = -1;
  /// Number of cache rebuilds triggered by stale transforms/clips.
  int refolds = 0;

  bool quantizes_block(int l) const { return only_block < 0 || only_block == l; }
};

/// Builds the quantization state for a model under the given method.
///   RTN:            no transforms, clips fixed at 1
///   Hadamard:       fixed seeded Hadamard rotations, clips fixed at 1
///   UniformAffine / FGQ: identity-initialized dense transforms, learnable clips
/// (the two differ only in the calibration objective).
ModelQuantCfg make_quant_cfg(const ToyModel& model, Method method, int w_bits, int a_bits,
                             uint64_t seed);

/// Rebuilds every weight cache from the current transforms and clips.
void refold_caches(const ToyModel& model, ModelQuantCfg& qc);

}  // namespace fgq
