#include "fgq/qmodel.hpp"

#include <stdexcept>

#include "fgq/rng.hpp"
#include "fgq/toymodel.hpp"

namespace fgq {

std::string method_name(Method m) {
  switch (m) {
    case Method::FP: return "fp";
    case Method::RTN: return "rtn";
    case Method::Hadamard: return "hadamard";
    case Method::UniformAffine: return "uniform_affine";
    case Method::FGQ: return "fgq";
  }
  return "?";
}

Method method_from_name(const std::string& s) {
  if (s == "fp") return Method::FP;
  if (s == "rtn") return Method::RTN;
  if (s == "hadamard") return Method::Hadamard;
  if (s == "uniform_affine") return Method::UniformAffine;
  if (s == "fgq") return Method::FGQ;
  throw std::invalid_argument("unknown method '" + s + "'");
}

std::vector<Tensor> BlockQuant::transform_params() {
  std::vector<Tensor> out;
  for (auto* tf : {&tf_attn, &tf_o, &tf_mlp_in, &tf_mlp_out}) {
    if (*tf && (*tf)->learnable()) {
      out.push_back((*tf)->P);
      out.push_back((*tf)->diag_scale);
    }
  }
  return out;
}

std::vector<Tensor> BlockQuant::clip_params() {
  std::vector<Tensor> out;
  for (auto* t : {&cw_q, &cw_k, &cw_v, &cw_o, &cw_mlp_in, &cw_mlp_out, &ca_attn, &ca_o, &ca_mlp_in,
                  &ca_mlp_out}) {
    if (t->defined() && t->requires_grad()) out.push_back(*t);
  }
  return out;
}

void BlockQuant::invalidate_caches() {
  for (auto* wc : {&wc_q, &wc_k, &wc_v, &wc_o, &wc_mlp_in, &wc_mlp_out}) wc->valid = false;
}

ModelQuantCfg make_quant_cfg(const ToyModel& model, Method method, int w_bits, int a_bits,
                             uint64_t seed) {
  if (method == Method::FP) throw std::invalid_argument("make_quant_cfg: fp method has no quant state");
  ModelQuantCfg qc;
  qc.method = method;
  qc.wspec = QuantSpec{w_bits, Granularity::PerOutputChannel, true};
  qc.aspec = QuantSpec{a_bits, Granularity::PerToken, true};

  bool learnable = method == Method::UniformAffine || method == Method::FGQ;
  int c = model.cfg.hidden_dim;
  int h = model.cfg.mlp_hidden;

  auto make_clip = [&](double v) {
    return learnable ? Tensor::param({}, {v}) : Tensor::scalar(v);
  };

  for (int l = 0; l < model.cfg.num_blocks(); ++l) {
    BlockQuant bq;
    if (method == Method::Hadamard) {
      uint64_t bs = derive_seed(seed, "hadamard_block" + std::to_string(l));
      bq.tf_attn = init_transform(c, AffineTransform::Kind::FixedHadamard, derive_seed(bs, "attn"));
      bq.tf_o = init_transform(c, AffineTransform::Kind::FixedHadamard, derive_seed(bs, "o"));
      bq.tf_mlp_in = init_transform(c, AffineTransform::Kind::FixedHadamard, derive_seed(bs, "mlp_in"));
      bq.tf_mlp_out = init_transform(h, AffineTransform::Kind::FixedHadamard, derive_seed(bs, "mlp_out"));
    } else if (learnable) {
      bq.tf_attn = init_transform(c, AffineTransform::Kind::IdentityInitDense, 0);
      bq.tf_o = init_transform(c, AffineTransform::Kind::IdentityInitDense, 0);
      bq.tf_mlp_in = init_transform(c, AffineTransform::Kind::IdentityInitDense, 0);
      bq.tf_mlp_out = init_transform(h, AffineTransform::Kind::IdentityInitDense, 0);
    }
    for (auto* t : {&bq.cw_q, &bq.cw_k, &bq.cw_v, &bq.cw_o, &bq.cw_mlp_in, &bq.cw_mlp_out, &bq.ca_attn,
                    &bq.ca_o, &bq.ca_mlp_in, &bq.ca_mlp_out}) {
      *t = make_clip(1.0);
    }
    qc.blocks.push_back(std::move(bq));
  }
  return qc;
}

void refold_caches(const ToyModel& model, ModelQuantCfg& qc) {
  // run a forward in inference mode; qweight() rebuilds any stale cache
  for (auto& bq : qc.blocks) bq.invalidate_caches();
  ToyModelConfig c = model.cfg;
  SyntheticDataset probe = generate_dataset(c, 1, derive_seed(c.seed, "refold_probe"), 0.0);
  (void)forward(model, probe.inputs, &qc, false);
}

}  // namespace fgq
