#include "fgq/fisher.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "fgq/rng.hpp"

namespace fgq {

const std::array<const char*, kNumTasks> kTaskNames = {"camera", "depth", "point"};

std::string fisher_mode_name(FisherMode m) {
  return m == FisherMode::TaskLoss ? "task_loss" : "output_sum";
}

FisherMode fisher_mode_from_name(const std::string& s) {
  if (s == "task_loss") return FisherMode::TaskLoss;
  if (s == "output_sum") return FisherMode::OutputSum;
  throw std::invalid_argument("unknown fisher objective mode '" + s + "'");
}

namespace {

Tensor task_objective(const TaskOutputs& out, const SyntheticDataset& sample, int task, FisherMode mode) {
  const Tensor& pred = task == 0 ? out.pose : task == 1 ? out.depth : out.point;
  if (mode == FisherMode::OutputSum) return sum(pred);
  const Tensor& tgt = task == 0 ? sample.pose : task == 1 ? sample.depth : sample.point;
  return mean(square(sub(pred, tgt)));
}

}  // namespace

FisherTensor estimate_diagonal_fisher(const ToyModel& model, const SyntheticDataset& data,
                                      FisherMode mode) {
  FisherTensor f;
  f.blocks = model.cfg.num_blocks();
  f.channels = model.cfg.hidden_dim;
  f.raw.assign(static_cast<size_t>(f.tasks) * f.blocks * f.channels, 0.0);
  f.objective_mode = fisher_mode_name(mode);
  f.seed = data.seed;
  f.n_samples = static_cast<int>(data.size());
  int64_t n = data.size();
  int64_t c = f.channels;

  for (int64_t i = 0; i < n; ++i) {
    SyntheticDataset sample = data.take(i, 1);
    Tape tape;
    TapeScope scope(tape);
    ForwardResult r = forward(model, sample.inputs, nullptr, true);
    for (int k = 0; k < f.tasks; ++k) {
      Tensor obj = task_objective(r.out, sample, k, mode);
      tape.backward(obj);
      for (int l = 0; l < f.blocks; ++l) {
        std::vector<double> g = r.hooks[l].grad();
        double* dst = &f.at(k, l, 0);
        int64_t tokens = static_cast<int64_t>(g.size()) / c;
        for (int64_t t = 0; t < tokens; ++t) {
          const double* row = g.data() + t * c;
          for (int64_t ch = 0; ch < c; ++ch) dst[ch] += row[ch] * row[ch];
        }
        r.hooks[l].zero_grad();
      }
    }
  }
  double inv = 1.0 / static_cast<double>(n);
  for (double& v : f.raw) v *= inv;
  return f;
}

std::vector<double> estimate_full_fisher(const ToyModel& model, const SyntheticDataset& data, int block,
                                         int task, FisherMode mode) {
  int c = model.cfg.hidden_dim;
  if (c > 8) throw std::invalid_argument("estimate_full_fisher: oracle is guarded to C <= 8 (C=" +
                                         std::to_string(c) + ")");
  std::vector<double> f(static_cast<size_t>(c) * c, 0.0);
  int64_t n = data.size();
  for (int64_t i = 0; i < n; ++i) {
    SyntheticDataset sample = data.take(i, 1);
    Tape tape;
    TapeScope scope(tape);
    ForwardResult r = forward(model, sample.inputs, nullptr, true);
    Tensor obj = task_objective(r.out, sample, task, mode);
    tape.backward(obj);
    std::vector<double> g = r.hooks[block].grad();
    int64_t tokens = static_cast<int64_t>(g.size()) / c;
    for (int64_t t = 0; t < tokens; ++t) {
      const double* row = g.data() + t * c;
      for (int a = 0; a < c; ++a)
        for (int b = 0; b < c; ++b) f[a * c + b] += row[a] * row[b];
    }
  }
  double inv = 1.0 / static_cast<double>(n);
  for (double& v : f) v *= inv;
  return f;
}

namespace {
// Mean of a row. A constant row returns the constant itself so that the
// normalized ratio is exactly 1.0 (the uniform-Fisher case reduces to the
// uniform objective bit-for-bit).
double row_mean(const double* v, size_t n) {
  bool constant = true;
  for (size_t i = 1; i < n && constant; ++i) constant = v[i] == v[0];
  if (constant) return v[0];
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) s += v[i];
  return s / static_cast<double>(n);
}
}  // namespace

std::vector<double> combine_tasks(const FisherTensor& f) {
  size_t lc = static_cast<size_t>(f.blocks) * f.channels;
  std::vector<double> s(lc, 0.0);
  for (int k = 0; k < f.tasks; ++k) {
    const double* base = &f.raw[k * lc];
    double m = row_mean(base, lc);
    if (m <= 0.0) {
      throw std::runtime_error(std::string("combine_tasks: task '") + kTaskNames[k] +
                               "' has all-zero Fisher (mean 0)");
    }
    for (size_t i = 0; i < lc; ++i) s[i] += base[i] / m;
  }
  return s;
}

CalibrationWeights block_weights(const std::vector<double>& s, int blocks, int channels, double floor) {
  if (static_cast<size_t>(blocks) * channels != s.size()) {
    throw std::invalid_argument("block_weights: size mismatch");
  }
  CalibrationWeights w;
  w.blocks = blocks;
  w.channels = channels;
  w.floor = floor;
  w.w.resize(s.size());
  for (int l = 0; l < blocks; ++l) {
    const double* row = s.data() + static_cast<size_t>(l) * channels;
    double m = row_mean(row, channels);
    if (m <= 0.0) throw std::runtime_error("block_weights: block " + std::to_string(l) + " has all-zero row");
    double* dst = w.w.data() + static_cast<size_t>(l) * channels;
    for (int c = 0; c < channels; ++c) dst[c] = std::max(row[c] / m, floor);
  }
  return w;
}

Tensor CalibrationWeights::block_row(int l) const {
  std::vector<double> row(w.begin() + static_cast<size_t>(l) * channels,
                          w.begin() + static_cast<size_t>(l + 1) * channels);
  return Tensor::from_data({channels}, std::move(row));
}

double predicted_loss_increase(const std::vector<double>& fisher_row, const Tensor& dh) {
  const Shape& s = dh.shape();
  int64_t c = s.back();
  if (static_cast<int64_t>(fisher_row.size()) != c) {
    throw std::invalid_argument("predicted_loss_increase: channel mismatch");
  }
  if (s.size() < 2) throw std::invalid_argument("predicted_loss_increase: dh must be (samples, ..., C)");
  int64_t samples = s[0];
  int64_t per = dh.size() / samples;
  const auto& d = dh.data();
  double acc = 0.0;
  for (int64_t n = 0; n < samples; ++n) {
    const double* base = d.data() + n * per;
    for (int64_t t = 0; t < per / c; ++t) {
      const double* row = base + t * c;
      for (int64_t ch = 0; ch < c; ++ch) acc += fisher_row[ch] * row[ch] * row[ch];
    }
  }
  return 0.5 * acc / static_cast<double>(samples);
}

double npd(double metric_q, double metric_fp) {
  if (metric_fp == 0.0) throw std::invalid_argument("npd: full-precision metric is zero");
  return std::fabs(metric_q - metric_fp) / std::fabs(metric_fp) * 100.0;
}

// ---------------------------------------------------------------------------
// Hessian-Fisher identity
// ---------------------------------------------------------------------------

namespace {
double frob(const std::vector<double>& m) {
  double s = 0.0;
  for (double v : m) s += v * v;
  return std::sqrt(s);
}

// Monte-Carlo mean Hessian and Fisher of the Gaussian NLL at parameter z.
struct McMoments {
  std::vector<double> hess, fisher, mean_score;
  double score_sq_sum = 0.0;  // sum ||score_i||^2
};

McMoments mc_moments(const std::vector<double>& z, const std::vector<double>& wstar,
                     const std::vector<double>& xsd, double sigma, int n, Rng& rng) {
  int d = static_cast<int>(wstar.size());
  McMoments mm;
  mm.hess.assign(static_cast<size_t>(d) * d, 0.0);
  mm.fisher.assign(static_cast<size_t>(d) * d, 0.0);
  mm.mean_score.assign(d, 0.0);
  std::vector<double> x(d), score(d);
  double inv_s2 = 1.0 / (sigma * sigma);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) x[j] = xsd[j] * rng.normal();
    double eps = sigma * rng.normal();
    double y = 0.0;
    for (int j = 0; j < d; ++j) y += wstar[j] * x[j];
    y += eps;
    double resid = y;
    for (int j = 0; j < d; ++j) resid -= z[j] * x[j];
    // NLL = (y - z.x)^2 / (2 sigma^2) + const
    for (int j = 0; j < d; ++j) score[j] = -resid * x[j] * inv_s2;
    for (int a = 0; a < d; ++a) {
      mm.mean_score[a] += score[a];
      for (int b = 0; b < d; ++b) {
        mm.hess[a * d + b] += x[a] * x[b] * inv_s2;
        mm.fisher[a * d + b] += score[a] * score[b];
      }
    }
    double ss = 0.0;
    for (int j = 0; j < d; ++j) ss += score[j] * score[j];
    mm.score_sq_sum += ss;
  }
  double inv = 1.0 / static_cast<double>(n);
  for (double& v : mm.hess) v *= inv;
  for (double& v : mm.fisher) v *= inv;
  for (double& v : mm.mean_score) v *= inv;
  return mm;
}
}  // namespace

IdentityReport verify_hessian_fisher_identity(int n_samples, uint64_t seed) {
  const int d = 3;
  const double sigma = 0.5;
  const std::vector<double> wstar = {0.7, -1.3, 2.1};
  const std::vector<double> xsd = {1.0, 0.7, 1.4};  // x_j ~ N(0, xsd_j^2)

  IdentityReport rep;
  rep.dim = d;
  rep.n_samples = n_samples;
  rep.sigma = sigma;

  Rng rng(derive_seed(seed, "hessian_fisher"));
  McMoments matched = mc_moments(wstar, wstar, xsd, sigma, n_samples, rng);

  double msn = 0.0;
  for (double v : matched.mean_score) msn += v * v;
  rep.mean_score_norm = std::sqrt(msn);
  // sqrt of the trace of the sample covariance of the scores
  rep.score_std = std::sqrt(std::max(0.0, matched.score_sq_sum / n_samples - msn));

  std::vector<double> gap(matched.hess.size());
  for (size_t i = 0; i < gap.size(); ++i) gap[i] = matched.hess[i] - matched.fisher[i];
  rep.frob_gap_rel = frob(gap) / frob(matched.hess);

  // analytic E[xx^T]/sigma^2 is diagonal with entries xsd_j^2/sigma^2
  std::vector<double> analytic(static_cast<size_t>(d) * d, 0.0);
  for (int j = 0; j < d; ++j) analytic[j * d + j] = xsd[j] * xsd[j] / (sigma * sigma);
  std::vector<double> agap(analytic.size());
  for (size_t i = 0; i < agap.size(); ++i) agap[i] = matched.hess[i] - analytic[i];
  rep.analytic_gap_rel = frob(agap) / frob(analytic);

  // misspecified: evaluate at z != w* (offset of norm sigma); the identity
  // requires the matched conditional, so the gap must persist
  std::vector<double> z = wstar;
  double off = sigma / std::sqrt(static_cast<double>(d));
  for (int j = 0; j < d; ++j) z[j] += off;
  Rng rng2(derive_seed(seed, "hessian_fisher_misspec"));
  McMoments mis = mc_moments(z, wstar, xsd, sigma, n_samples, rng2);
  std::vector<double> gap2(mis.hess.size());
  for (size_t i = 0; i < gap2.size(); ++i) gap2[i] = mis.hess[i] - mis.fisher[i];
  rep.frob_gap_rel_misspec = frob(gap2) / frob(mis.hess);
  return rep;
}

// ---------------------------------------------------------------------------
// Fisher file
// ---------------------------------------------------------------------------

void save_fisher(const std::string& path, const FisherTensor& f) {
  nlohmann::json header = {{"tasks", f.tasks},     {"blocks", f.blocks},
                           {"channels", f.channels}, {"objective_mode", f.objective_mode},
                           {"seed", f.seed},       {"n_samples", f.n_samples}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  std::string hs = header.dump();
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  out.put('\n');
  out.write(reinterpret_cast<const char*>(f.raw.data()),
            static_cast<std::streamsize>(f.raw.size() * sizeof(double)));
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

FisherTensor load_fisher(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("missing header in '" + path + "'");
  nlohmann::json h = nlohmann::json::parse(line);
  FisherTensor f;
  f.tasks = h.at("tasks");
  f.blocks = h.at("blocks");
  f.channels = h.at("channels");
  f.objective_mode = h.at("objective_mode");
  f.seed = h.at("seed");
  f.n_samples = h.at("n_samples");
  f.raw.resize(static_cast<size_t>(f.tasks) * f.blocks * f.channels);
  in.read(reinterpret_cast<char*>(f.raw.data()),
          static_cast<std::streamsize>(f.raw.size() * sizeof(double)));
  if (!in) throw std::runtime_error("truncated Fisher payload in '" + path + "'");
  return f;
}

void validate_fisher(const FisherTensor& f, const ToyModelConfig& cfg) {
  if (f.tasks != kNumTasks || f.blocks != cfg.num_blocks() || f.channels != cfg.hidden_dim) {
    throw std::runtime_error("fisher tensor shape (" + std::to_string(f.tasks) + "," +
                             std::to_string(f.blocks) + "," + std::to_string(f.channels) +
                             ") does not match the model config (" + std::to_string(kNumTasks) + "," +
                             std::to_string(cfg.num_blocks()) + "," + std::to_string(cfg.hidden_dim) + ")");
  }
}

}  // namespace fgq
