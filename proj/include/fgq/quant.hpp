#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fgq/tensor.hpp"

namespace fgq {

enum class Granularity { PerTensor, PerToken, PerOutputChannel };

std::string granularity_name(Granularity g);
Granularity granularity_from_name(const std::string& s);

/// Symmetric uniform quantizer description. bits=16 means pass-through.
/// The integer range is restricted to [-(2^(b-1)-1), 2^(b-1)-1] so negation
/// antisymmetry is exact.
struct QuantSpec {
  int bits = 4;
  Granularity granularity = Granularity::PerTensor;
  bool symmetric = true;

  bool passthrough() const { return bits >= 16; }
  int qmax() const { return (1 << (bits - 1)) - 1; }
  int qmin() const { return -qmax(); }
};

/// Integer codes plus the per-group scales that were realized when
/// quantizing. dequant(q, scale) = q * scale broadcast per group.
struct QuantizedValue {
  Shape shape;
  std::vector<int8_t> q;       // empty in pass-through mode
  std::vector<double> scale;   // one per group (one per tensor/token/channel)
  std::vector<double> raw;     // pass-through payload when bits=16
  QuantSpec spec;
};

/// Number of scale groups for x's shape under the spec's granularity, and
/// validation that the granularity axis exists.
int64_t group_count(const Shape& shape, const QuantSpec& spec);

/// scale_g = clip * max|x_g| / qmax;  q = clamp(round(x/scale_g), qmin, qmax).
/// Rounding is half away from zero. Groups with max|x_g| = 0 get scale 1 and
/// q = 0. Throws on non-finite input.
QuantizedValue quantize(const Tensor& x, const QuantSpec& spec, double clip = 1.0);

/// Quantize onto a fixed, previously realized grid (static weight-style
/// quantization). This projection is exactly idempotent.
QuantizedValue quantize_with_scales(const Tensor& x, const QuantSpec& spec,
                                    const std::vector<double>& scales);

Tensor dequantize(const QuantizedValue& qv);

/// dequant(quantize(x)) as a differentiable op.
///
/// Gradient contract:
///   d out / d x    = 1 where the pre-clamp integer lies inside
///                    [qmin, qmax] (straight-through, boundary inclusive),
///                    0 where the value saturated;
///   d out / d clip = sum_g (max|x_g|/qmax) * sum_{i in g} gout_i * q_i,
///                    the exact a.e. derivative of the forward map in clip
///                    (the grid assignment is locally constant in clip), so
///                    central differences at non-boundary points match it.
/// The group max statistics are not differentiated through x.
Tensor fake_quant(const Tensor& x, const QuantSpec& spec, const Tensor& clip);
Tensor fake_quant(const Tensor& x, const QuantSpec& spec, double clip = 1.0);

/// dequant(quantize_with_scales(x, scales)): the fixed-grid projection,
/// used for cached post-calibration weights. Not differentiable.
Tensor fake_quant_fixed(const Tensor& x, const QuantSpec& spec, const std::vector<double>& scales);

}  // namespace fgq
