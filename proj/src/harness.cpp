#include "fgq/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "fgq/rng.hpp"
#include "fgq/serialize.hpp"

namespace fgq {

namespace {
double round2(double v) { return std::round(v * 100.0) / 100.0; }
}  // namespace

// ---------------------------------------------------------------------------
// RunConfig
// ---------------------------------------------------------------------------

RunConfig RunConfig::defaults(Method method, uint64_t seed) {
  RunConfig c;
  c.method = method;
  c.seed = seed;
  c.calib.objective = method == Method::FGQ ? "fgq" : "uniform";
  return c;
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json m = toymodel_config_json(model);
  m.erase("seed");  // derived from the master seed
  return nlohmann::json{
      {"schema_version", 1},
      {"seed", seed},
      {"method", method_name(method)},
      {"out_dir", out_dir},
      {"model", m},
      {"data",
       {{"train_samples", train_samples},
        {"calib_samples", calib_samples},
        {"eval_samples", eval_samples},
        {"noise_sigma", noise_sigma}}},
      {"train", {{"steps", train.steps}, {"lr", train.lr}, {"batch_size", train.batch_size}}},
      {"quant", {{"w_bits", w_bits}, {"a_bits", a_bits}}},
      {"calib",
       {{"objective", calib.objective},
        {"epochs", calib.epochs},
        {"batch_size", calib.batch_size},
        {"lr_transform", calib.lr_transform},
        {"lr_clip", calib.lr_clip},
        {"eta_min", calib.eta_min},
        {"weight_decay", calib.weight_decay},
        {"decay_on_clip", calib.decay_on_clip},
        {"weight_floor", calib.weight_floor}}},
      {"fisher", {{"mode", fisher_mode_name(fisher_mode)}, {"samples", fisher_samples}}},
      {"run_correlation", run_correlation},
  };
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  c.seed = j.value("seed", uint64_t{42});
  c.method = method_from_name(j.value("method", std::string("fgq")));
  c.out_dir = j.value("out_dir", std::string("runs/out"));
  if (j.contains("model")) {
    nlohmann::json m = j.at("model");
    m["seed"] = 0;  // placeholder, derived below
    c.model = toymodel_config_from_json(m);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    c.train_samples = d.value("train_samples", c.train_samples);
    c.calib_samples = d.value("calib_samples", c.calib_samples);
    c.eval_samples = d.value("eval_samples", c.eval_samples);
    c.noise_sigma = d.value("noise_sigma", c.noise_sigma);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    c.train.steps = t.value("steps", c.train.steps);
    c.train.lr = t.value("lr", c.train.lr);
    c.train.batch_size = t.value("batch_size", c.train.batch_size);
  }
  if (j.contains("quant")) {
    c.w_bits = j.at("quant").value("w_bits", c.w_bits);
    c.a_bits = j.at("quant").value("a_bits", c.a_bits);
  }
  if (j.contains("calib")) {
    const auto& k = j.at("calib");
    c.calib.objective = k.value("objective", c.calib.objective);
    c.calib.epochs = k.value("epochs", c.calib.epochs);
    c.calib.batch_size = k.value("batch_size", c.calib.batch_size);
    c.calib.lr_transform = k.value("lr_transform", c.calib.lr_transform);
    c.calib.lr_clip = k.value("lr_clip", c.calib.lr_clip);
    c.calib.eta_min = k.value("eta_min", c.calib.eta_min);
    c.calib.weight_decay = k.value("weight_decay", c.calib.weight_decay);
    c.calib.decay_on_clip = k.value("decay_on_clip", c.calib.decay_on_clip);
    c.calib.weight_floor = k.value("weight_floor", c.calib.weight_floor);
  } else {
    c.calib.objective = c.method == Method::FGQ ? "fgq" : "uniform";
  }
  if (j.contains("fisher")) {
    c.fisher_mode = fisher_mode_from_name(j.at("fisher").value("mode", std::string("output_sum")));
    c.fisher_samples = j.at("fisher").value("samples", c.fisher_samples);
  }
  c.run_correlation = j.value("run_correlation", false);
  return c;
}

std::string config_hash(const RunConfig& cfg) {
  std::string s = cfg.to_json().dump();
  uint64_t h = 0xcbf29ce484222325ull;
  for (char ch : s) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {
ToyModelConfig seeded_model_cfg(const RunConfig& cfg) {
  ToyModelConfig m = cfg.model;
  m.seed = derive_seed(cfg.seed, "model");
  return m;
}
}  // namespace

SyntheticDataset make_train_data(const RunConfig& cfg) {
  return generate_dataset(seeded_model_cfg(cfg), cfg.train_samples, derive_seed(cfg.seed, "train_data"),
                          cfg.noise_sigma);
}

namespace {
SyntheticDataset make_pool(const RunConfig& cfg) {
  return generate_dataset(seeded_model_cfg(cfg), cfg.calib_samples + cfg.eval_samples,
                          derive_seed(cfg.seed, "evalcal_pool"), cfg.noise_sigma);
}
}  // namespace

SyntheticDataset make_calib_data(const RunConfig& cfg) { return make_pool(cfg).take(0, cfg.calib_samples); }

SyntheticDataset make_eval_data(const RunConfig& cfg) {
  return make_pool(cfg).take(cfg.calib_samples, cfg.eval_samples);
}

SyntheticDataset make_fisher_data(const RunConfig& cfg) {
  return generate_dataset(seeded_model_cfg(cfg), cfg.fisher_samples, derive_seed(cfg.seed, "fisher_data"),
                          cfg.noise_sigma);
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

MetricSet compute_metrics(const TaskOutputs& pred, const SyntheticDataset& targets) {
  MetricSet ms;
  int64_t n = targets.pose.dim(0);
  int64_t pd = targets.pose.dim(1);
  const auto& pp = pred.pose.data();
  const auto& tp = targets.pose.data();
  std::array<int64_t, 3> hits = {0, 0, 0};
  double rmse_sum = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (int64_t j = 0; j < pd; ++j) {
      double d = pp[i * pd + j] - tp[i * pd + j];
      ss += d * d;
    }
    double rmse = std::sqrt(ss / static_cast<double>(pd));
    rmse_sum += rmse;
    for (size_t t = 0; t < kPoseThresholds.size(); ++t) {
      if (rmse < kPoseThresholds[t]) ++hits[t];
    }
  }
  ms.camera_rmse = rmse_sum / static_cast<double>(n);
  for (size_t t = 0; t < hits.size(); ++t) {
    ms.camera_acc[t] = static_cast<double>(hits[t]) / static_cast<double>(n);
  }

  const auto& pdp = pred.depth.data();
  const auto& tdp = targets.depth.data();
  int64_t dn = static_cast<int64_t>(tdp.size());
  double absrel = 0.0;
  int64_t delta_ok = 0;
  for (int64_t i = 0; i < dn; ++i) {
    absrel += std::fabs(pdp[i] - tdp[i]) / std::fabs(tdp[i]);
    if (pdp[i] > 0.0 && tdp[i] > 0.0) {
      double r = std::max(pdp[i] / tdp[i], tdp[i] / pdp[i]);
      if (r < kDepthDeltaRatio) ++delta_ok;
    }
  }
  ms.depth_absrel = absrel / static_cast<double>(dn);
  ms.depth_delta = static_cast<double>(delta_ok) / static_cast<double>(dn);

  const auto& ppt = pred.point.data();
  const auto& tpt = targets.point.data();
  int64_t pn = static_cast<int64_t>(tpt.size()) / 3;
  std::vector<double> errs(pn);
  double esum = 0.0;
  for (int64_t i = 0; i < pn; ++i) {
    double ss = 0.0;
    for (int j = 0; j < 3; ++j) {
      double d = ppt[i * 3 + j] - tpt[i * 3 + j];
      ss += d * d;
    }
    errs[i] = std::sqrt(ss);
    esum += errs[i];
  }
  ms.point_err_mean = esum / static_cast<double>(pn);
  std::sort(errs.begin(), errs.end());
  ms.point_err_median =
      pn % 2 ? errs[pn / 2] : 0.5 * (errs[pn / 2 - 1] + errs[pn / 2]);
  return ms;
}

nlohmann::json MetricSet::to_json() const {
  return nlohmann::json{{"camera_rmse", camera_rmse},
                        {"camera_acc_05", camera_acc[0]},
                        {"camera_acc_10", camera_acc[1]},
                        {"camera_acc_20", camera_acc[2]},
                        {"depth_absrel", depth_absrel},
                        {"depth_delta", depth_delta},
                        {"point_err_mean", point_err_mean},
                        {"point_err_median", point_err_median}};
}

namespace {
std::vector<std::pair<std::string, double>> metric_items(const MetricSet& m) {
  return {{"camera_rmse", m.camera_rmse},
          {"camera_acc_05", m.camera_acc[0]},
          {"camera_acc_10", m.camera_acc[1]},
          {"camera_acc_20", m.camera_acc[2]},
          {"depth_absrel", m.depth_absrel},
          {"depth_delta", m.depth_delta},
          {"point_err_mean", m.point_err_mean},
          {"point_err_median", m.point_err_median}};
}
}  // namespace

EvalReport evaluate(const ToyModel& m, ModelQuantCfg* qc, const SyntheticDataset& testset,
                    const MetricSet* fp_metrics) {
  ForwardResult fp = forward(m, testset.inputs, nullptr, qc != nullptr);
  ForwardResult run = qc ? forward(m, testset.inputs, qc, true) : std::move(fp);

  EvalReport rep;
  rep.metrics = compute_metrics(run.out, testset);

  rep.per_block_qloss.assign(m.cfg.num_blocks(), 0.0);
  if (qc) {
    for (int l = 0; l < m.cfg.num_blocks(); ++l) {
      const auto& a = fp.hooks[l].data();
      const auto& b = run.hooks[l].data();
      double s = 0.0;
      for (size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
      }
      rep.per_block_qloss[l] = s / static_cast<double>(a.size());
    }
  }

  if (fp_metrics) {
    auto fp_items = metric_items(*fp_metrics);
    auto q_items = metric_items(rep.metrics);
    for (size_t i = 0; i < fp_items.size(); ++i) {
      // a zero FP metric has no defined NPD unless the run metric is zero too
      if (fp_items[i].second == 0.0) {
        if (q_items[i].second == 0.0) rep.npd.emplace_back(fp_items[i].first, 0.0);
        continue;
      }
      rep.npd.emplace_back(fp_items[i].first, round2(npd(q_items[i].second, fp_items[i].second)));
    }
    rep.npd_camera = round2(npd(rep.metrics.camera_rmse, fp_metrics->camera_rmse));
    rep.npd_depth = round2(npd(rep.metrics.depth_absrel, fp_metrics->depth_absrel));
    rep.npd_point = round2(npd(rep.metrics.point_err_mean, fp_metrics->point_err_mean));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Correlation experiment
// ---------------------------------------------------------------------------

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 3) {
    throw std::invalid_argument("pearson: need at least 3 paired points");
  }
  double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw std::runtime_error("pearson: degenerate (constant) series");
  return sxy / std::sqrt(sxx * syy);
}

CorrelationResult correlation_experiment(const ToyModel& m, const FisherTensor& fisher, int w_bits,
                                         int a_bits, const SyntheticDataset& evalset) {
  validate_fisher(fisher, m.cfg);
  int L = m.cfg.num_blocks();
  int C = m.cfg.hidden_dim;
  if (L < 3) throw std::invalid_argument("correlation_experiment: need at least 3 blocks");

  ForwardResult fp = forward(m, evalset.inputs, nullptr, true);
  TaskLosses fp_losses = task_losses(fp.out, evalset);
  std::array<double, kNumTasks> fp_l = {fp_losses.camera.item(), fp_losses.depth.item(),
                                        fp_losses.point.item()};

  CorrelationResult res;
  for (int l = 0; l < L; ++l) {
    ModelQuantCfg qc = make_quant_cfg(m, Method::RTN, w_bits, a_bits, 0);
    qc.only_block = l;
    ForwardResult qr = forward(m, evalset.inputs, &qc, true);
    TaskLosses ql = task_losses(qr.out, evalset);
    std::array<double, kNumTasks> q_l = {ql.camera.item(), ql.depth.item(), ql.point.item()};

    Tensor dh = sub(qr.hooks[l], fp.hooks[l]);
    bool zero = true;
    for (double v : dh.data()) {
      if (v != 0.0) {
        zero = false;
        break;
      }
    }
    if (zero) {
      std::cerr << "correlation_experiment: block " << l << " has zero output perturbation, excluded\n";
      res.excluded_rows += kNumTasks;
      continue;
    }
    for (int k = 0; k < kNumTasks; ++k) {
      std::vector<double> frow(C);
      for (int c = 0; c < C; ++c) frow[c] = fisher.at(k, l, c);
      CorrelationRow row;
      row.task = k;
      row.block = l;
      row.predicted = predicted_loss_increase(frow, dh);
      row.measured = q_l[k] - fp_l[k];
      res.rows.push_back(row);
    }
  }

  if (res.rows.empty()) {
    throw std::runtime_error("correlation_experiment: every block was excluded (zero output perturbation)");
  }
  std::vector<double> px, mx, pz, mz;
  auto standardize = [](std::vector<double> v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    double sd = std::sqrt(var / static_cast<double>(v.size()));
    for (double& x : v) x = (x - mean) / sd;
    return v;
  };
  for (int k = 0; k < kNumTasks; ++k) {
    std::vector<double> tp, tm;
    for (const auto& r : res.rows) {
      if (r.task == k) {
        tp.push_back(r.predicted);
        tm.push_back(r.measured);
      }
    }
    res.per_task_r[k] = pearson(tp, tm);
    px.insert(px.end(), tp.begin(), tp.end());
    mx.insert(mx.end(), tm.begin(), tm.end());
    std::vector<double> sp = standardize(tp), sm = standardize(tm);
    pz.insert(pz.end(), sp.begin(), sp.end());
    mz.insert(mz.end(), sm.begin(), sm.end());
  }
  res.pooled_r_raw = pearson(px, mx);
  res.pooled_r = pearson(pz, mz);
  return res;
}

nlohmann::json CorrelationResult::to_json() const {
  nlohmann::json rows_j = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_j.push_back({{"task", kTaskNames[r.task]},
                      {"block", r.block},
                      {"predicted", r.predicted},
                      {"measured", r.measured}});
  }
  return nlohmann::json{{"rows", rows_j},
                        {"per_task_r",
                         {{kTaskNames[0], per_task_r[0]},
                          {kTaskNames[1], per_task_r[1]},
                          {kTaskNames[2], per_task_r[2]}}},
                        {"pooled_r", pooled_r},
                        {"pooled_r_raw", pooled_r_raw},
                        {"excluded_rows", excluded_rows}};
}

// ---------------------------------------------------------------------------
// Quant state serialization
// ---------------------------------------------------------------------------

void save_quant_state(const std::string& path, const ModelQuantCfg& qc) {
  NamedArrays na;
  na.meta = {{"kind", "quantstate"},
             {"method", method_name(qc.method)},
             {"w_bits", qc.wspec.bits},
             {"a_bits", qc.aspec.bits}};
  for (size_t l = 0; l < qc.blocks.size(); ++l) {
    const BlockQuant& bq = qc.blocks[l];
    std::string p = "block" + std::to_string(l) + ".";
    auto put_tf = [&](const char* name, const std::optional<AffineTransform>& tf) {
      if (!tf) return;
      na.arrays.emplace_back(p + name + ".P", tf->P);
      na.arrays.emplace_back(p + name + ".diag_scale", tf->diag_scale);
    };
    put_tf("tf_attn", bq.tf_attn);
    put_tf("tf_o", bq.tf_o);
    put_tf("tf_mlp_in", bq.tf_mlp_in);
    put_tf("tf_mlp_out", bq.tf_mlp_out);
    const std::pair<const char*, const Tensor*> clips[] = {
        {"cw_q", &bq.cw_q},           {"cw_k", &bq.cw_k},
        {"cw_v", &bq.cw_v},           {"cw_o", &bq.cw_o},
        {"cw_mlp_in", &bq.cw_mlp_in}, {"cw_mlp_out", &bq.cw_mlp_out},
        {"ca_attn", &bq.ca_attn},     {"ca_o", &bq.ca_o},
        {"ca_mlp_in", &bq.ca_mlp_in}, {"ca_mlp_out", &bq.ca_mlp_out}};
    for (const auto& [n, t] : clips) na.arrays.emplace_back(p + n, *t);
  }
  save_arrays(path, na);
}

ModelQuantCfg load_quant_state(const std::string& path, const ToyModel& m) {
  NamedArrays na = load_arrays(path);
  if (na.meta.at("kind") != "quantstate") {
    throw std::runtime_error("'" + path + "' is not a quant state file");
  }
  ModelQuantCfg qc = make_quant_cfg(m, method_from_name(na.meta.at("method")), na.meta.at("w_bits"),
                                    na.meta.at("a_bits"), 0);
  for (size_t l = 0; l < qc.blocks.size(); ++l) {
    BlockQuant& bq = qc.blocks[l];
    std::string p = "block" + std::to_string(l) + ".";
    auto get_tf = [&](const char* name, std::optional<AffineTransform>& tf) {
      if (!tf) return;
      tf->P.data() = na.get(p + name + ".P").data();
      tf->diag_scale.data() = na.get(p + name + ".diag_scale").data();
      tf->bump();
    };
    get_tf("tf_attn", bq.tf_attn);
    get_tf("tf_o", bq.tf_o);
    get_tf("tf_mlp_in", bq.tf_mlp_in);
    get_tf("tf_mlp_out", bq.tf_mlp_out);
    const std::pair<const char*, Tensor*> clips[] = {
        {"cw_q", &bq.cw_q},           {"cw_k", &bq.cw_k},
        {"cw_v", &bq.cw_v},           {"cw_o", &bq.cw_o},
        {"cw_mlp_in", &bq.cw_mlp_in}, {"cw_mlp_out", &bq.cw_mlp_out},
        {"ca_attn", &bq.ca_attn},     {"ca_o", &bq.ca_o},
        {"ca_mlp_in", &bq.ca_mlp_in}, {"ca_mlp_out", &bq.ca_mlp_out}};
    for (const auto& [n, t] : clips) t->data() = na.get(p + n).data();
    bq.invalidate_caches();
  }
  return qc;
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

ToyModel stage_train(const RunConfig& cfg, TrainResult* train_out) {
  std::filesystem::create_directories(cfg.out_dir);
  {
    std::ofstream f(cfg.out_dir + "/config.json");
    f << cfg.to_json().dump(2) << "\n";
  }
  ToyModel m = init_model(seeded_model_cfg(cfg));
  SyntheticDataset train = make_train_data(cfg);
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.seed, "train");
  TrainResult tr = train_toy(m, train, tc);
  if (train_out) *train_out = tr;
  save_model(cfg.out_dir + "/checkpoint.fgqc", m);
  return m;
}

FisherTensor stage_fisher(const RunConfig& cfg, const ToyModel& m) {
  SyntheticDataset fd = make_fisher_data(cfg);
  FisherTensor f = estimate_diagonal_fisher(m, fd, cfg.fisher_mode);
  std::filesystem::create_directories(cfg.out_dir);
  save_fisher(cfg.out_dir + "/fisher.fgqf", f);
  return f;
}

ModelQuantCfg stage_calibrate(const RunConfig& cfg, const ToyModel& m, const FisherTensor* fisher,
                              CalibRunResult* calib_out) {
  ModelQuantCfg qc = make_quant_cfg(m, cfg.method, cfg.w_bits, cfg.a_bits, derive_seed(cfg.seed, "quant"));
  if (cfg.method == Method::UniformAffine || cfg.method == Method::FGQ) {
    CalibConfig cc = cfg.calib;
    cc.seed = derive_seed(cfg.seed, "calib");
    cc.objective = cfg.method == Method::FGQ ? "fgq" : "uniform";
    SyntheticDataset cd = make_calib_data(cfg);
    CalibRunResult cr = calibrate_model(m, qc, fisher, cd, cc);
    if (calib_out) *calib_out = cr;
  } else {
    refold_caches(m, qc);
  }
  std::filesystem::create_directories(cfg.out_dir);
  save_quant_state(cfg.out_dir + "/calibrated.fgqc", qc);
  return qc;
}

namespace {

void write_text_report(const Report& r, const std::string& path) {
  const nlohmann::json& j = r.j;
  std::ostringstream os;
  os << "run report (schema " << j.at("schema_version") << ")\n";
  os << "method: " << j.at("method").get<std::string>() << "   config: " << j.at("config_hash").get<std::string>()
     << "\n\n";
  os << "  metric              fp            run           npd%\n";
  const auto& fp = j.at("fp_metrics");
  const auto& mm = j.at("metrics");
  const auto& npd_j = j.at("npd");
  for (auto& [key, val] : fp.items()) {
    char line[128];
    double fpv = val.get<double>();
    double mv = mm.at(key).get<double>();
    if (npd_j.contains(key)) {
      std::snprintf(line, sizeof(line), "  %-18s %- 13.6f %- 13.6f %8.2f\n", key.c_str(), fpv, mv,
                    npd_j.at(key).get<double>());
    } else {
      std::snprintf(line, sizeof(line), "  %-18s %- 13.6f %- 13.6f %8s\n", key.c_str(), fpv, mv, "-");
    }
    os << line;
  }
  os << "\n  per-block quantization loss:";
  for (const auto& v : j.at("per_block_qloss")) os << " " << v.get<double>();
  os << "\n";
  if (j.contains("correlation") && !j.at("correlation").is_null()) {
    os << "  fisher correlation pooled r: " << j.at("correlation").at("pooled_r").get<double>() << "\n";
  }
  std::ofstream f(path);
  f << os.str();
}

}  // namespace

void emit_report(const Report& r, const std::string& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir + "/report.json");
    if (!f) throw std::runtime_error("cannot write report to '" + dir + "'");
    f << r.j.dump(2) << "\n";
  }
  write_text_report(r, dir + "/report.txt");
}

Report parse_report(const std::string& json_path) {
  std::ifstream f(json_path);
  if (!f) throw std::runtime_error("cannot open '" + json_path + "'");
  Report r;
  f >> r.j;
  return r;
}

Report run_pipeline(const RunConfig& cfg) {
  TrainResult tr;
  ToyModel model = stage_train(cfg, &tr);

  FisherTensor fisher;
  bool has_fisher = cfg.method == Method::FGQ;
  if (has_fisher) fisher = stage_fisher(cfg, model);

  SyntheticDataset evalset = make_eval_data(cfg);
  MetricSet fp_metrics = evaluate(model, nullptr, evalset, nullptr).metrics;

  EvalReport er;
  CalibRunResult cr;
  if (cfg.method == Method::FP) {
    er = evaluate(model, nullptr, evalset, &fp_metrics);
  } else {
    ModelQuantCfg qc = stage_calibrate(cfg, model, has_fisher ? &fisher : nullptr, &cr);
    er = evaluate(model, &qc, evalset, &fp_metrics);
  }

  Report rep;
  rep.j["schema_version"] = 1;
  rep.j["config"] = cfg.to_json();
  rep.j["config_hash"] = config_hash(cfg);
  rep.j["method"] = method_name(cfg.method);
  rep.j["train"] = {{"initial_loss", tr.initial_loss},
                    {"final_loss", tr.final_loss},
                    {"final_grad_rms", tr.final_grad_rms},
                    {"steps", static_cast<int>(tr.trace.size())}};
  rep.j["fp_metrics"] = fp_metrics.to_json();
  rep.j["metrics"] = er.metrics.to_json();
  nlohmann::json npd_j = nlohmann::json::object();
  for (const auto& [k, v] : er.npd) npd_j[k] = v;
  rep.j["npd"] = npd_j;
  rep.j["task_npd"] = {{"camera", er.npd_camera}, {"depth", er.npd_depth}, {"point", er.npd_point}};
  rep.j["per_block_qloss"] = er.per_block_qloss;

  nlohmann::json calib_j = nlohmann::json::array();
  for (const auto& b : cr.blocks) {
    calib_j.push_back({{"initial_loss", b.initial_loss},
                       {"final_loss", b.final_loss},
                       {"steps", static_cast<int>(b.step_losses.size())},
                       {"restored_best", b.restored_best},
                       {"rejected_steps", b.rejected_steps}});
  }
  rep.j["calibration"] = calib_j;

  if (cfg.run_correlation) {
    FisherTensor tf = estimate_diagonal_fisher(model, make_fisher_data(cfg), FisherMode::TaskLoss);
    CorrelationResult corr = correlation_experiment(model, tf, cfg.w_bits, cfg.a_bits, evalset);
    rep.j["correlation"] = corr.to_json();
  } else {
    rep.j["correlation"] = nullptr;
  }

  emit_report(rep, cfg.out_dir);
  return rep;
}

}  // namespace fgq
