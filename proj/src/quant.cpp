#include "fgq/quant.hpp"

#include <cmath>
#include <stdexcept>

namespace fgq {

std::string granularity_name(Granularity g) {
  switch (g) {
    case Granularity::PerTensor: return "per_tensor";
    case Granularity::PerToken: return "per_token";
    case Granularity::PerOutputChannel: return "per_output_channel";
  }
  return "?";
}

Granularity granularity_from_name(const std::string& s) {
  if (s == "per_tensor") return Granularity::PerTensor;
  if (s == "per_token") return Granularity::PerToken;
  if (s == "per_output_channel") return Granularity::PerOutputChannel;
  throw std::invalid_argument("unknown granularity '" + s + "'");
}

int64_t group_count(const Shape& shape, const QuantSpec& spec) {
  switch (spec.granularity) {
    case Granularity::PerTensor:
      return 1;
    case Granularity::PerToken:
      if (shape.empty()) throw std::invalid_argument("per_token quantization needs a channel axis");
      return shape_numel(shape) / shape.back();
    case Granularity::PerOutputChannel:
      if (shape.size() != 2) {
        throw std::invalid_argument("per_output_channel quantization needs a 2D weight, got " +
                                    shape_str(shape));
      }
      return shape.back();
  }
  return 1;
}

namespace {

struct GroupIndex {
  // Per-token/tensor groups are contiguous runs; per-output-channel groups
  // stride over rows. Everything below walks elements group by group.
  int64_t groups = 0;
  int64_t group_size = 0;
  bool strided = false;  // true for per-output-channel
  int64_t rows = 0, cols = 0;

  int64_t element(int64_t g, int64_t k) const {
    return strided ? k * cols + g : g * group_size + k;
  }
};

GroupIndex make_index(const Shape& shape, const QuantSpec& spec) {
  GroupIndex gi;
  gi.groups = group_count(shape, spec);
  int64_t n = shape_numel(shape);
  if (spec.granularity == Granularity::PerOutputChannel) {
    gi.strided = true;
    gi.rows = shape[0];
    gi.cols = shape[1];
    gi.group_size = gi.rows;
  } else {
    gi.group_size = n / gi.groups;
  }
  return gi;
}

void check_finite_input(const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) throw std::runtime_error("quantize: non-finite input");
  }
}

std::vector<double> group_absmax(const std::vector<double>& x, const GroupIndex& gi) {
  std::vector<double> amax(gi.groups, 0.0);
  for (int64_t g = 0; g < gi.groups; ++g) {
    double m = 0.0;
    for (int64_t k = 0; k < gi.group_size; ++k) {
      double v = std::fabs(x[gi.element(g, k)]);
      if (v > m) m = v;
    }
    amax[g] = m;
  }
  return amax;
}

}  // namespace

QuantizedValue quantize(const Tensor& x, const QuantSpec& spec, double clip) {
  check_finite_input(x.data());
  QuantizedValue qv;
  qv.shape = x.shape();
  qv.spec = spec;
  if (spec.passthrough()) {
    qv.raw = x.data();
    return qv;
  }
  if (!(clip > 0.0 && clip <= 1.0)) throw std::invalid_argument("quantize: clip must be in (0,1]");
  GroupIndex gi = make_index(qv.shape, spec);
  std::vector<double> amax = group_absmax(x.data(), gi);
  std::vector<double> scales(gi.groups);
  double qmax = spec.qmax();
  for (int64_t g = 0; g < gi.groups; ++g) {
    scales[g] = amax[g] == 0.0 ? 1.0 : clip * amax[g] / qmax;
  }
  return quantize_with_scales(x, spec, scales);
}

QuantizedValue quantize_with_scales(const Tensor& x, const QuantSpec& spec,
                                    const std::vector<double>& scales) {
  check_finite_input(x.data());
  QuantizedValue qv;
  qv.shape = x.shape();
  qv.spec = spec;
  if (spec.passthrough()) {
    qv.raw = x.data();
    return qv;
  }
  GroupIndex gi = make_index(qv.shape, spec);
  if (static_cast<int64_t>(scales.size()) != gi.groups) {
    throw std::invalid_argument("quantize_with_scales: expected " + std::to_string(gi.groups) +
                                " scales, got " + std::to_string(scales.size()));
  }
  qv.scale = scales;
  qv.q.assign(x.size(), 0);
  const auto& d = x.data();
  double qmax = spec.qmax();
  for (int64_t g = 0; g < gi.groups; ++g) {
    double inv = 1.0 / scales[g];
    for (int64_t k = 0; k < gi.group_size; ++k) {
      int64_t e = gi.element(g, k);
      double u = std::round(d[e] * inv);  // half away from zero
      if (u > qmax) u = qmax;
      if (u < -qmax) u = -qmax;
      qv.q[e] = static_cast<int8_t>(u);
    }
  }
  return qv;
}

Tensor dequantize(const QuantizedValue& qv) {
  if (qv.spec.passthrough()) return Tensor::from_data(qv.shape, qv.raw);
  GroupIndex gi = make_index(qv.shape, qv.spec);
  std::vector<double> out(qv.q.size());
  for (int64_t g = 0; g < gi.groups; ++g) {
    double s = qv.scale[g];
    for (int64_t k = 0; k < gi.group_size; ++k) {
      int64_t e = gi.element(g, k);
      out[e] = static_cast<double>(qv.q[e]) * s;
    }
  }
  return Tensor::from_data(qv.shape, std::move(out));
}

Tensor fake_quant_fixed(const Tensor& x, const QuantSpec& spec, const std::vector<double>& scales) {
  return dequantize(quantize_with_scales(x, spec, scales));
}

Tensor fake_quant(const Tensor& x, const QuantSpec& spec, const Tensor& clip) {
  if (clip.size() != 1) throw std::invalid_argument("fake_quant: clip must be a scalar tensor");
  if (spec.passthrough()) {
    // Identity gradient for both x and clip.
    Tensor out = x.detach();
    return custom_op("fake_quant", {x, clip}, std::move(out),
                     [](const std::vector<Tensor>&, const Tensor&, const std::vector<double>& gout,
                        const std::vector<std::vector<double>*>& gin) {
                       if (gin[0]) {
                         for (size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i];
                       }
                     });
  }
  double clipv = clip.item();
  if (!(clipv > 0.0 && clipv <= 1.0)) throw std::invalid_argument("fake_quant: clip must be in (0,1]");
  check_finite_input(x.data());
  GroupIndex gi = make_index(x.shape(), spec);
  std::vector<double> amax = group_absmax(x.data(), gi);
  double qmax = spec.qmax();
  std::vector<double> scales(gi.groups);
  // d scale_g / d clip; zero for degenerate groups
  std::vector<double> dscale(gi.groups);
  for (int64_t g = 0; g < gi.groups; ++g) {
    if (amax[g] == 0.0) {
      scales[g] = 1.0;
      dscale[g] = 0.0;
    } else {
      scales[g] = clipv * amax[g] / qmax;
      dscale[g] = amax[g] / qmax;
    }
  }
  const auto& d = x.data();
  std::vector<int8_t> q(d.size());
  std::vector<uint8_t> inside(d.size());
  std::vector<double> out(d.size());
  for (int64_t g = 0; g < gi.groups; ++g) {
    double s = scales[g];
    double inv = 1.0 / s;
    for (int64_t k = 0; k < gi.group_size; ++k) {
      int64_t e = gi.element(g, k);
      double u = std::round(d[e] * inv);
      bool in = u >= -qmax && u <= qmax;
      if (!in) u = u > qmax ? qmax : -qmax;
      q[e] = static_cast<int8_t>(u);
      inside[e] = in ? 1 : 0;
      out[e] = u * s;
    }
  }
  GroupIndex gidx = gi;
  auto bw = [q = std::move(q), inside = std::move(inside), dscale = std::move(dscale), gidx](
                const std::vector<Tensor>&, const Tensor&, const std::vector<double>& gout,
                const std::vector<std::vector<double>*>& gin) {
    if (gin[0]) {
      for (size_t i = 0; i < gout.size(); ++i) {
        if (inside[i]) (*gin[0])[i] += gout[i];
      }
    }
    if (gin[1]) {
      double acc = 0.0;
      for (int64_t g = 0; g < gidx.groups; ++g) {
        if (dscale[g] == 0.0) continue;
        double s = 0.0;
        for (int64_t k = 0; k < gidx.group_size; ++k) {
          int64_t e = gidx.element(g, k);
          s += gout[e] * static_cast<double>(q[e]);
        }
        acc += s * dscale[g];
      }
      (*gin[1])[0] += acc;
    }
  };
  return custom_op("fake_quant", {x, clip}, Tensor::from_data(x.shape(), std::move(out)), std::move(bw));
}

Tensor fake_quant(const Tensor& x, const QuantSpec& spec, double clip) {
  return fake_quant(x, spec, Tensor::scalar(clip));
}

}  // namespace fgq
