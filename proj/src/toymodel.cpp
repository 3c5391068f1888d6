#include "fgq/toymodel.hpp"

#include <cmath>
#include <stdexcept>

#include "fgq/optim.hpp"
#include "fgq/rng.hpp"
#include "fgq/serialize.hpp"

namespace fgq {

namespace {
constexpr double kLnEps = 1e-5;

bool power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }
}  // namespace

void ToyModelConfig::validate() const {
  if (!power_of_two(hidden_dim)) throw std::invalid_argument("hidden_dim must be a power of two");
  if (!power_of_two(mlp_hidden)) throw std::invalid_argument("mlp_hidden must be a power of two");
  if (num_views < 1 || tokens_per_view < 1 || aa_pairs < 1 || pose_dim < 1 || in_dim < 1) {
    throw std::invalid_argument("invalid toy model config");
  }
}

// ---------------------------------------------------------------------------
// Init
// ---------------------------------------------------------------------------

namespace {

Tensor randn_param(Rng& rng, Shape shape, double stddev) {
  std::vector<double> d(shape_numel(shape));
  for (double& v : d) v = rng.normal(0.0, stddev);
  return Tensor::param(std::move(shape), std::move(d));
}

Linear init_linear(Rng& rng, int in, int out) {
  Linear l;
  l.w = randn_param(rng, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
  l.b = Tensor::param({out}, std::vector<double>(out, 0.0));
  return l;
}

}  // namespace

ToyModel init_model(const ToyModelConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, "model"));
  ToyModel m;
  m.cfg = cfg;
  int c = cfg.hidden_dim;
  m.embed = init_linear(rng, cfg.in_dim, c);
  m.special = randn_param(rng, {cfg.num_views, c}, 0.5);
  for (int l = 0; l < cfg.num_blocks(); ++l) {
    Block b;
    b.global = (l % 2) == 1;
    b.ln1_g = Tensor::param({c}, std::vector<double>(c, 1.0));
    b.ln1_b = Tensor::param({c}, std::vector<double>(c, 0.0));
    b.ln2_g = Tensor::param({c}, std::vector<double>(c, 1.0));
    b.ln2_b = Tensor::param({c}, std::vector<double>(c, 0.0));
    b.q = init_linear(rng, c, c);
    b.k = init_linear(rng, c, c);
    b.v = init_linear(rng, c, c);
    b.o = init_linear(rng, c, c);
    b.mlp_in = init_linear(rng, c, cfg.mlp_hidden);
    b.mlp_out = init_linear(rng, cfg.mlp_hidden, c);
    m.blocks.push_back(std::move(b));
  }
  m.pose_head = init_linear(rng, c, cfg.pose_dim);
  m.depth_head = init_linear(rng, c, 1);
  m.point_head = init_linear(rng, c, 3);
  return m;
}

std::vector<std::pair<std::string, Tensor>> ToyModel::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embed.w", embed.w);
  out.emplace_back("embed.b", embed.b);
  out.emplace_back("special", special);
  for (size_t l = 0; l < blocks.size(); ++l) {
    const Block& b = blocks[l];
    std::string p = "block" + std::to_string(l) + ".";
    out.emplace_back(p + "ln1_g", b.ln1_g);
    out.emplace_back(p + "ln1_b", b.ln1_b);
    out.emplace_back(p + "q.w", b.q.w);
    out.emplace_back(p + "q.b", b.q.b);
    out.emplace_back(p + "k.w", b.k.w);
    out.emplace_back(p + "k.b", b.k.b);
    out.emplace_back(p + "v.w", b.v.w);
    out.emplace_back(p + "v.b", b.v.b);
    out.emplace_back(p + "o.w", b.o.w);
    out.emplace_back(p + "o.b", b.o.b);
    out.emplace_back(p + "ln2_g", b.ln2_g);
    out.emplace_back(p + "ln2_b", b.ln2_b);
    out.emplace_back(p + "mlp_in.w", b.mlp_in.w);
    out.emplace_back(p + "mlp_in.b", b.mlp_in.b);
    out.emplace_back(p + "mlp_out.w", b.mlp_out.w);
    out.emplace_back(p + "mlp_out.b", b.mlp_out.b);
  }
  out.emplace_back("pose_head.w", pose_head.w);
  out.emplace_back("pose_head.b", pose_head.b);
  out.emplace_back("depth_head.w", depth_head.w);
  out.emplace_back("depth_head.b", depth_head.b);
  out.emplace_back("point_head.w", point_head.w);
  out.emplace_back("point_head.b", point_head.b);
  return out;
}

std::vector<Tensor> ToyModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& [n, t] : named_parameters()) out.push_back(t);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

namespace {

// Fixed teacher: z = tanh(x W1 + b1) with the hidden units split three ways
// (pose / depth / point); each third reads its own slice of the input dims.
// The pose target is a global mean over tokens of its third, the dense
// targets are per-token functions of theirs, so the tasks share the backbone
// but provably load on different features, and the trained model develops
// task-specific channels. Pose labels carry extra observation noise
// (kPoseNoiseScale): the global task sits at a visible noise floor while the
// dense tasks are fitted tightly, which is what makes the quantization
// sensitivities heterogeneous across tasks.
struct Teacher {
  int in_dim, hidden, pose_dim;
  int third;
  std::vector<double> w1, b1, w_pose, w_depth, w_point;

  explicit Teacher(const ToyModelConfig& cfg) : in_dim(cfg.in_dim), hidden(24), pose_dim(cfg.pose_dim) {
    Rng rng(derive_seed(cfg.seed, "teacher"));
    third = hidden / 3;
    auto fill = [&](std::vector<double>& v, size_t n, double sd) {
      v.resize(n);
      for (double& x : v) x = rng.normal(0.0, sd);
    };
    // hidden unit h belongs to task h / third; it reads input slice
    // [task * in_dim / 3, (task + 1) * in_dim / 3)
    w1.assign(static_cast<size_t>(in_dim) * hidden, 0.0);
    for (int h = 0; h < hidden; ++h) {
      int task = std::min(2, h / third);
      int lo = task * in_dim / 3;
      int hi = (task + 1) * in_dim / 3;
      double ws = 1.0 / std::sqrt(static_cast<double>(std::max(1, hi - lo)));
      for (int i = lo; i < hi; ++i) w1[static_cast<size_t>(i) * hidden + h] = rng.normal(0.0, ws);
    }
    fill(b1, hidden, 0.2);
    // Task output scales deliberately differ (pose large, depth mid via its
    // 1.5 offset, point small): a uniform reconstruction objective neglects
    // the low-magnitude channels the point task depends on, which is the
    // sensitivity asymmetry the sensitivity-weighted calibration exploits.
    double hs = 1.0 / std::sqrt(static_cast<double>(third));
    fill(w_pose, static_cast<size_t>(third) * pose_dim, 4.0 * hs);
    fill(w_depth, third, hs);
    fill(w_point, static_cast<size_t>(third) * 3, 0.2 * hs);
  }
};

// pose labels carry kPoseNoiseScale x the dense observation noise
constexpr double kPoseNoiseScale = 5.0;

}  // namespace

SyntheticDataset generate_dataset(const ToyModelConfig& cfg, int64_t n_samples, uint64_t seed,
                                  double noise_sigma, uint64_t noise_seed) {
  cfg.validate();
  if (n_samples < 1) throw std::invalid_argument("generate_dataset: n_samples must be >= 1");
  Teacher t(cfg);
  int64_t nv = cfg.num_views, k = cfg.tokens_per_view, d = cfg.in_dim;
  int half = t.hidden / 2;

  Rng in_rng(derive_seed(seed, "inputs"));
  std::vector<double> x(n_samples * nv * k * d);
  for (double& v : x) v = in_rng.normal();

  std::vector<double> pose(n_samples * cfg.pose_dim, 0.0);
  std::vector<double> depth(n_samples * nv * k, 0.0);
  std::vector<double> point(n_samples * nv * k * 3, 0.0);

  std::vector<double> z(t.hidden);
  std::vector<double> pool(t.third);
  for (int64_t n = 0; n < n_samples; ++n) {
    std::fill(pool.begin(), pool.end(), 0.0);
    for (int64_t tok = 0; tok < nv * k; ++tok) {
      const double* xi = x.data() + (n * nv * k + tok) * d;
      for (int h = 0; h < t.hidden; ++h) {
        double s = t.b1[h];
        for (int64_t i = 0; i < d; ++i) s += xi[i] * t.w1[i * t.hidden + h];
        z[h] = std::tanh(s);
      }
      for (int h = 0; h < t.third; ++h) pool[h] += z[h];
      double dacc = 0.0;
      for (int h = 0; h < t.third; ++h) dacc += z[t.third + h] * t.w_depth[h];
      depth[n * nv * k + tok] = 1.5 + std::tanh(dacc);  // bounded positive
      for (int j = 0; j < 3; ++j) {
        double s = 0.0;
        for (int h = 0; h < t.third; ++h) s += z[2 * t.third + h] * t.w_point[h * 3 + j];
        point[(n * nv * k + tok) * 3 + j] = s;
      }
    }
    double inv = 1.0 / static_cast<double>(nv * k);
    for (int p = 0; p < cfg.pose_dim; ++p) {
      double s = 0.0;
      for (int h = 0; h < t.third; ++h) s += pool[h] * inv * t.w_pose[h * cfg.pose_dim + p];
      pose[n * cfg.pose_dim + p] = s;
    }
  }

  if (noise_sigma > 0.0) {
    Rng nz(noise_seed ? noise_seed : derive_seed(seed, "noise"));
    for (double& v : pose) v += nz.normal(0.0, kPoseNoiseScale * noise_sigma);
    for (double& v : depth) v += nz.normal(0.0, noise_sigma);
    for (double& v : point) v += nz.normal(0.0, noise_sigma);
  }

  SyntheticDataset ds;
  ds.seed = seed;
  ds.inputs = Tensor::from_data({n_samples, nv, k, d}, std::move(x));
  ds.pose = Tensor::from_data({n_samples, cfg.pose_dim}, std::move(pose));
  ds.depth = Tensor::from_data({n_samples, nv, k}, std::move(depth));
  ds.point = Tensor::from_data({n_samples, nv, k, 3}, std::move(point));
  return ds;
}

namespace {
Tensor gather_rows(const Tensor& t, const std::vector<int64_t>& idx) {
  const Shape& s = t.shape();
  int64_t row = shape_numel(s) / s[0];
  Shape so = s;
  so[0] = static_cast<int64_t>(idx.size());
  std::vector<double> out(row * idx.size());
  for (size_t i = 0; i < idx.size(); ++i) {
    const double* src = t.data().data() + idx[i] * row;
    std::copy(src, src + row, out.data() + i * row);
  }
  return Tensor::from_data(std::move(so), std::move(out));
}
}  // namespace

SyntheticDataset SyntheticDataset::take(int64_t start, int64_t count) const {
  std::vector<int64_t> idx(count);
  for (int64_t i = 0; i < count; ++i) idx[i] = start + i;
  return gather(idx);
}

SyntheticDataset SyntheticDataset::gather(const std::vector<int64_t>& idx) const {
  SyntheticDataset out;
  out.seed = seed;
  out.inputs = gather_rows(inputs, idx);
  out.pose = gather_rows(pose, idx);
  out.depth = gather_rows(depth, idx);
  out.point = gather_rows(point, idx);
  return out;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace {

// Transform + activation-quantize one input stream (shared by the linears
// that consume it).
Tensor prep_stream(const Tensor& x, const std::optional<AffineTransform>& tf, const Tensor& clip_a,
                   const ModelQuantCfg& qc) {
  Tensor xa = tf ? apply_transform(*tf, x) : x;
  return fake_quant(xa, qc.aspec, clip_a);
}

void refresh_cache(const Linear& lin, const std::optional<AffineTransform>& tf, const Tensor& clip_w,
                   WeightCache& wc, ModelQuantCfg& qc) {
  uint64_t tv = tf ? tf->version : 0;
  double cv = clip_w.item();
  if (wc.valid && wc.tf_version == tv && wc.clip == cv) return;
  Tensor folded = tf ? fold_weight(*tf, lin.w) : lin.w.detach();
  QuantizedValue qv = quantize(folded, qc.wspec, cv);
  wc.w = dequantize(qv);
  wc.scales = qv.scale;
  wc.valid = true;
  wc.tf_version = tv;
  wc.clip = cv;
  ++qc.refolds;
}

// Weight side of a quantized linear: folded + fake-quantized weight, either
// in-graph (calibration) or from the static cache (inference).
Tensor qweight(const Linear& lin, const std::optional<AffineTransform>& tf, const Tensor& clip_w,
               WeightCache& wc, ModelQuantCfg& qc) {
  if (qc.graph_mode) {
    Tensor folded = tf ? fold_weight_graph(*tf, lin.w.detach()) : lin.w.detach();
    return fake_quant(folded, qc.wspec, clip_w);
  }
  refresh_cache(lin, tf, clip_w, wc, qc);
  return wc.w;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale) {
  Tensor scores = affine(matmul(q, transpose2(k)), scale, 0.0);
  return matmul(softmax(scores), v);
}

}  // namespace

Tensor block_forward(const ToyModel& m, int l, const Tensor& x_in, ModelQuantCfg* qc) {
  const Block& blk = m.blocks[l];
  const ToyModelConfig& cfg = m.cfg;
  bool quant = qc && qc->quantizes_block(l);
  BlockQuant* bq = quant ? &qc->blocks[l] : nullptr;
  double att_scale = 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim));
  int64_t vt = cfg.tokens_per_view + 1;

  auto lin_fp = [](const Tensor& x, const Linear& l2) { return add(matmul(x, l2.w), l2.b); };

  // attention sublayer
  Tensor xn = layernorm(x_in, blk.ln1_g, blk.ln1_b, kLnEps);
  Tensor qs, ks, vs;
  if (quant) {
    Tensor stream = prep_stream(xn, bq->tf_attn, bq->ca_attn, *qc);
    qs = add(matmul(stream, qweight(blk.q, bq->tf_attn, bq->cw_q, bq->wc_q, *qc)), blk.q.b);
    ks = add(matmul(stream, qweight(blk.k, bq->tf_attn, bq->cw_k, bq->wc_k, *qc)), blk.k.b);
    vs = add(matmul(stream, qweight(blk.v, bq->tf_attn, bq->cw_v, bq->wc_v, *qc)), blk.v.b);
  } else {
    qs = lin_fp(xn, blk.q);
    ks = lin_fp(xn, blk.k);
    vs = lin_fp(xn, blk.v);
  }

  Tensor att;
  if (blk.global) {
    att = attention(qs, ks, vs, att_scale);
  } else {
    std::vector<Tensor> per_view;
    for (int v = 0; v < cfg.num_views; ++v) {
      Tensor qv = slice(qs, 1, v * vt, vt);
      Tensor kv = slice(ks, 1, v * vt, vt);
      Tensor vv = slice(vs, 1, v * vt, vt);
      per_view.push_back(attention(qv, kv, vv, att_scale));
    }
    att = concat(per_view, 1);
  }

  Tensor o;
  if (quant) {
    Tensor stream = prep_stream(att, bq->tf_o, bq->ca_o, *qc);
    o = add(matmul(stream, qweight(blk.o, bq->tf_o, bq->cw_o, bq->wc_o, *qc)), blk.o.b);
  } else {
    o = lin_fp(att, blk.o);
  }
  Tensor x1 = add(x_in, o);

  // MLP sublayer
  Tensor xn2 = layernorm(x1, blk.ln2_g, blk.ln2_b, kLnEps);
  Tensor h, y;
  if (quant) {
    Tensor s1 = prep_stream(xn2, bq->tf_mlp_in, bq->ca_mlp_in, *qc);
    h = gelu(add(matmul(s1, qweight(blk.mlp_in, bq->tf_mlp_in, bq->cw_mlp_in, bq->wc_mlp_in, *qc)),
                 blk.mlp_in.b));
    Tensor s2 = prep_stream(h, bq->tf_mlp_out, bq->ca_mlp_out, *qc);
    y = add(matmul(s2, qweight(blk.mlp_out, bq->tf_mlp_out, bq->cw_mlp_out, bq->wc_mlp_out, *qc)),
            blk.mlp_out.b);
  } else {
    h = gelu(lin_fp(xn2, blk.mlp_in));
    y = lin_fp(h, blk.mlp_out);
  }
  return add(x1, y);
}

/// Token states entering block 0: embedded patches with the per-view special
/// token prepended.
Tensor embed_tokens(const ToyModel& m, const Tensor& inputs) {
  const ToyModelConfig& cfg = m.cfg;
  if (inputs.ndim() != 4 || inputs.dim(1) != cfg.num_views || inputs.dim(2) != cfg.tokens_per_view ||
      inputs.dim(3) != cfg.in_dim) {
    throw std::invalid_argument("forward: input shape " + shape_str(inputs.shape()) +
                                " does not match config");
  }
  int64_t bsz = inputs.dim(0);
  int64_t nk = static_cast<int64_t>(cfg.num_views) * cfg.tokens_per_view;
  Tensor flat = reshape(inputs, {bsz, nk, cfg.in_dim});
  Tensor emb = add(matmul(flat, m.embed.w), m.embed.b);  // (B, N*K, C)
  Tensor ones = Tensor::full({bsz, 1}, 1.0);
  std::vector<Tensor> parts;
  for (int v = 0; v < cfg.num_views; ++v) {
    Tensor srow = slice(m.special, 0, v, 1);                       // (1, C)
    Tensor tile = reshape(matmul(ones, srow), {bsz, 1, cfg.hidden_dim});
    parts.push_back(tile);
    parts.push_back(slice(emb, 1, static_cast<int64_t>(v) * cfg.tokens_per_view, cfg.tokens_per_view));
  }
  return concat(parts, 1);  // (B, N*(K+1), C)
}

ForwardResult forward(const ToyModel& m, const Tensor& inputs, ModelQuantCfg* qc, bool capture_hooks) {
  const ToyModelConfig& cfg = m.cfg;
  int64_t bsz = inputs.dim(0);
  int64_t vt = cfg.tokens_per_view + 1;

  Tensor x = embed_tokens(m, inputs);
  ForwardResult res;
  for (int l = 0; l < cfg.num_blocks(); ++l) {
    x = block_forward(m, l, x, qc);
    if (capture_hooks) res.hooks.push_back(x.retain_grad());
  }

  // heads read the final token states directly
  std::vector<Tensor> specials, patches;
  for (int v = 0; v < cfg.num_views; ++v) {
    specials.push_back(slice(x, 1, static_cast<int64_t>(v) * vt, 1));
    patches.push_back(slice(x, 1, static_cast<int64_t>(v) * vt + 1, cfg.tokens_per_view));
  }
  Tensor sp = mean_axis(concat(specials, 1), 1);  // (B, C)
  Tensor pt = concat(patches, 1);                 // (B, N*K, C)

  res.out.pose = add(matmul(sp, m.pose_head.w), m.pose_head.b);
  Tensor d = add(matmul(pt, m.depth_head.w), m.depth_head.b);  // (B, N*K, 1)
  res.out.depth = reshape(d, {bsz, cfg.num_views, cfg.tokens_per_view});
  Tensor p = add(matmul(pt, m.point_head.w), m.point_head.b);  // (B, N*K, 3)
  res.out.point = reshape(p, {bsz, cfg.num_views, cfg.tokens_per_view, 3});
  return res;
}

// ---------------------------------------------------------------------------
// Losses / training
// ---------------------------------------------------------------------------

Tensor TaskLosses::total() const { return add(add(camera, depth), point); }

TaskLosses task_losses(const TaskOutputs& out, const SyntheticDataset& targets) {
  TaskLosses tl;
  tl.camera = mean(square(sub(out.pose, targets.pose)));
  tl.depth = mean(square(sub(out.depth, targets.depth)));
  tl.point = mean(square(sub(out.point, targets.point)));
  return tl;
}

double dataset_loss(const ToyModel& m, const SyntheticDataset& data, ModelQuantCfg* qc) {
  ForwardResult r = forward(m, data.inputs, qc);
  return task_losses(r.out, data).total().item();
}

TrainResult train_toy(ToyModel& m, const SyntheticDataset& data, const TrainConfig& tc) {
  TrainResult res;
  try {
    res.initial_loss = dataset_loss(m, data);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(std::string("train_toy: diverged before step 0: ") + e.what());
  }
  res.final_loss = res.initial_loss;
  if (tc.steps <= 0) return res;

  int64_t n = data.size();
  int64_t bsz = std::min<int64_t>(tc.batch_size, n);
  std::vector<Tensor> params = m.parameters();
  AdamW opt({AdamW::Group{params, tc.lr, 0.0}});
  Rng shuffle_rng(derive_seed(tc.seed, "batches"));

  std::vector<int64_t> order(n);
  for (int64_t i = 0; i < n; ++i) order[i] = i;
  int64_t cursor = n;  // force shuffle at step 0

  for (int step = 0; step < tc.steps; ++step) {
    if (cursor + bsz > n) {
      shuffle_rng.shuffle(order);
      cursor = 0;
    }
    std::vector<int64_t> idx(order.begin() + cursor, order.begin() + cursor + bsz);
    cursor += bsz;
    SyntheticDataset batch = data.gather(idx);

    Tape tape;
    double lv;
    try {
      TapeScope scope(tape);
      ForwardResult r = forward(m, batch.inputs);
      Tensor loss = task_losses(r.out, batch).total();
      lv = loss.item();
      if (!std::isfinite(lv)) throw std::runtime_error("non-finite loss");
      opt.zero_grad();
      tape.backward(loss);
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("train_toy: diverged at step " + std::to_string(step) + ": " + e.what());
    }
    opt.step();
    res.trace.push_back(lv);
  }

  res.final_loss = dataset_loss(m, data);

  // residual gradient at the end, over the full training set
  {
    Tape tape;
    TapeScope scope(tape);
    ForwardResult r = forward(m, data.inputs);
    Tensor loss = task_losses(r.out, data).total();
    for (auto& p : params) p.zero_grad();
    tape.backward(loss);
  }
  double ss = 0.0;
  int64_t cnt = 0;
  for (auto& p : params) {
    for (double g : p.grad()) ss += g * g;
    cnt += p.size();
  }
  res.final_grad_rms = std::sqrt(ss / static_cast<double>(cnt));
  for (auto& p : params) p.zero_grad();
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {
nlohmann::json config_to_json(const ToyModelConfig& c) {
  return {{"num_views", c.num_views},     {"tokens_per_view", c.tokens_per_view},
          {"hidden_dim", c.hidden_dim},   {"aa_pairs", c.aa_pairs},
          {"pose_dim", c.pose_dim},       {"in_dim", c.in_dim},
          {"mlp_hidden", c.mlp_hidden},   {"seed", c.seed}};
}

ToyModelConfig config_from_json(const nlohmann::json& j) {
  ToyModelConfig c;
  c.num_views = j.at("num_views");
  c.tokens_per_view = j.at("tokens_per_view");
  c.hidden_dim = j.at("hidden_dim");
  c.aa_pairs = j.at("aa_pairs");
  c.pose_dim = j.at("pose_dim");
  c.in_dim = j.at("in_dim");
  c.mlp_hidden = j.at("mlp_hidden");
  c.seed = j.at("seed");
  return c;
}
}  // namespace

nlohmann::json toymodel_config_json(const ToyModelConfig& c) { return config_to_json(c); }
ToyModelConfig toymodel_config_from_json(const nlohmann::json& j) { return config_from_json(j); }

void save_model(const std::string& path, const ToyModel& m) {
  NamedArrays na;
  na.meta = {{"kind", "toymodel"}, {"config", config_to_json(m.cfg)}};
  for (auto& [name, t] : m.named_parameters()) na.arrays.emplace_back(name, t);
  save_arrays(path, na);
}

ToyModel load_model(const std::string& path) {
  NamedArrays na = load_arrays(path);
  if (na.meta.at("kind") != "toymodel") throw std::runtime_error("'" + path + "' is not a model checkpoint");
  ToyModel m = init_model(config_from_json(na.meta.at("config")));
  for (auto& [name, t] : m.named_parameters()) {
    const Tensor& src = na.get(name);
    if (src.shape() != t.shape()) {
      throw std::runtime_error("checkpoint array '" + name + "' has shape " + shape_str(src.shape()) +
                               ", expected " + shape_str(t.shape()));
    }
    t.data() = src.data();
  }
  return m;
}

}  // namespace fgq
