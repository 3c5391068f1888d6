#include "fgq/pack.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <thread>

namespace fgq {

PackedMatrix pack_int4(int64_t rows, int64_t cols, const int8_t* q, std::vector<double> scales) {
  PackedMatrix p;
  p.rows = rows;
  p.cols = cols;
  p.scales = std::move(scales);
  int64_t bpr = p.bytes_per_row();
  p.bytes.assign(rows * bpr, 0);
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t c = 0; c < cols; ++c) {
      int8_t v = q[r * cols + c];
      if (v < -7 || v > 7) {
        throw std::invalid_argument("pack_int4: value " + std::to_string(int(v)) + " outside [-7, 7]");
      }
      uint8_t nib = static_cast<uint8_t>(v) & 0x0F;
      uint8_t& byte = p.bytes[r * bpr + c / 2];
      if (c % 2 == 0) {
        byte = static_cast<uint8_t>((byte & 0xF0) | nib);
      } else {
        byte = static_cast<uint8_t>((byte & 0x0F) | (nib << 4));
      }
    }
  }
  return p;
}

std::vector<int8_t> unpack_int4(const PackedMatrix& p) {
  std::vector<int8_t> q(p.rows * p.cols);
  int64_t bpr = p.bytes_per_row();
  for (int64_t r = 0; r < p.rows; ++r) {
    for (int64_t c = 0; c < p.cols; ++c) {
      uint8_t byte = p.bytes[r * bpr + c / 2];
      uint8_t nib = (c % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
      q[r * p.cols + c] = static_cast<int8_t>(nib >= 8 ? int(nib) - 16 : int(nib));
    }
  }
  return q;
}

std::vector<double> qgemm(const PackedMatrix& w, const int8_t* qa, int64_t m, int64_t k,
                          const std::vector<double>& a_scales, int threads) {
  if (k != w.cols) {
    throw std::invalid_argument("qgemm: inner dims disagree (" + std::to_string(k) + " vs " +
                                std::to_string(w.cols) + ")");
  }
  if (static_cast<int64_t>(a_scales.size()) != m) throw std::invalid_argument("qgemm: a_scales size");
  if (static_cast<int64_t>(w.scales.size()) != w.rows) throw std::invalid_argument("qgemm: w scales size");
  // 4-bit products are <= 49; the i32 accumulator is safe up to k = 2^16
  if (k > (1LL << 16)) throw std::invalid_argument("qgemm: k exceeds the 32-bit accumulator guard");

  std::vector<int8_t> qw = unpack_int4(w);
  int64_t n = w.rows;
  std::vector<double> y(m * n);

  auto run_rows = [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) {
      const int8_t* arow = qa + i * k;
      for (int64_t j = 0; j < n; ++j) {
        const int8_t* wrow = qw.data() + j * k;
        int32_t acc = 0;
        for (int64_t p = 0; p < k; ++p) acc += int32_t(arow[p]) * int32_t(wrow[p]);
        y[i * n + j] = static_cast<double>(acc) * a_scales[i] * w.scales[j];
      }
    }
  };

  if (threads <= 1) {
    run_rows(0, m);
  } else {
    std::vector<std::thread> pool;
    int64_t chunk = (m + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
      int64_t lo = t * chunk;
      int64_t hi = std::min<int64_t>(m, lo + chunk);
      if (lo < hi) pool.emplace_back(run_rows, lo, hi);
    }
    for (auto& th : pool) th.join();
  }
  return y;
}

// ---------------------------------------------------------------------------
// f16
// ---------------------------------------------------------------------------

uint16_t f64_to_f16(double v) {
  float fl = static_cast<float>(v);
  uint32_t x;
  std::memcpy(&x, &fl, 4);
  uint32_t sign = (x >> 16) & 0x8000u;
  uint32_t fexp = (x >> 23) & 0xffu;
  uint32_t mant = x & 0x7fffffu;
  if (fexp == 0xffu) return static_cast<uint16_t>(sign | 0x7c00u | (mant ? 0x200u : 0));
  int32_t exp = static_cast<int32_t>(fexp) - 127 + 15;
  if (exp >= 31) return static_cast<uint16_t>(sign | 0x7c00u);  // overflow -> inf
  if (exp <= 0) {
    if (exp < -10) return static_cast<uint16_t>(sign);  // underflow -> 0
    mant |= 0x800000u;
    uint32_t shift = static_cast<uint32_t>(14 - exp);
    uint32_t half = mant >> shift;
    uint32_t rem = mant & ((1u << shift) - 1);
    uint32_t midpoint = 1u << (shift - 1);
    if (rem > midpoint || (rem == midpoint && (half & 1u))) ++half;
    return static_cast<uint16_t>(sign | half);
  }
  uint32_t half = (static_cast<uint32_t>(exp) << 10) | (mant >> 13);
  uint32_t rem = mant & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) ++half;  // carry may bump the exponent
  return static_cast<uint16_t>(sign | half);
}

double f16_to_f64(uint16_t h) {
  uint32_t sign = (static_cast<uint32_t>(h) & 0x8000u) << 16;
  uint32_t exp = (h >> 10) & 0x1fu;
  uint32_t mant = h & 0x3ffu;
  uint32_t x;
  if (exp == 0) {
    if (mant == 0) {
      x = sign;
    } else {
      uint32_t e = 127 - 15 + 1;
      while (!(mant & 0x400u)) {
        mant <<= 1;
        --e;
      }
      mant &= 0x3ffu;
      x = sign | (e << 23) | (mant << 13);
    }
  } else if (exp == 31) {
    x = sign | 0x7f800000u | (mant << 13);
  } else {
    x = sign | ((exp - 15 + 127) << 23) | (mant << 13);
  }
  float fl;
  std::memcpy(&fl, &x, 4);
  return static_cast<double>(fl);
}

// ---------------------------------------------------------------------------
// Latency harness (raw f64/int kernels, no autodiff in the timed region)
// ---------------------------------------------------------------------------

namespace {

void mmraw(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  std::fill(c, c + m * n, 0.0);
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      double av = arow[p];
      const double* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void layernorm_raw(const double* x, const double* g, const double* b, double* y, int64_t rows,
                   int64_t c) {
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x + r * c;
    double* yr = y + r * c;
    double mu = 0.0;
    for (int64_t i = 0; i < c; ++i) mu += xr[i];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (int64_t i = 0; i < c; ++i) {
      double d = xr[i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(c);
    double inv = 1.0 / std::sqrt(var + 1e-5);
    for (int64_t i = 0; i < c; ++i) yr[i] = g[i] * ((xr[i] - mu) * inv) + b[i];
  }
}

void softmax_rows(double* x, int64_t rows, int64_t c) {
  for (int64_t r = 0; r < rows; ++r) {
    double* xr = x + r * c;
    double mx = xr[0];
    for (int64_t i = 1; i < c; ++i) mx = std::max(mx, xr[i]);
    double z = 0.0;
    for (int64_t i = 0; i < c; ++i) {
      xr[i] = std::exp(xr[i] - mx);
      z += xr[i];
    }
    double inv = 1.0 / z;
    for (int64_t i = 0; i < c; ++i) xr[i] *= inv;
  }
}

// per-token int8 quantization of activations
void quantize_rows(const double* x, int64_t rows, int64_t c, double clip, int qmax, int8_t* q,
                   double* scales) {
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x + r * c;
    double amax = 0.0;
    for (int64_t i = 0; i < c; ++i) amax = std::max(amax, std::fabs(xr[i]));
    double s = amax == 0.0 ? 1.0 : clip * amax / qmax;
    double inv = 1.0 / s;
    scales[r] = s;
    int8_t* qr = q + r * c;
    for (int64_t i = 0; i < c; ++i) {
      double u = std::round(xr[i] * inv);
      if (u > qmax) u = qmax;
      if (u < -qmax) u = -qmax;
      qr[i] = static_cast<int8_t>(u);
    }
  }
}

// fake-quant the activations in place (the float baseline)
void fake_quant_rows(double* x, int64_t rows, int64_t c, double clip, int qmax) {
  for (int64_t r = 0; r < rows; ++r) {
    double* xr = x + r * c;
    double amax = 0.0;
    for (int64_t i = 0; i < c; ++i) amax = std::max(amax, std::fabs(xr[i]));
    double s = amax == 0.0 ? 1.0 : clip * amax / qmax;
    double inv = 1.0 / s;
    for (int64_t i = 0; i < c; ++i) {
      double u = std::round(xr[i] * inv);
      if (u > qmax) u = qmax;
      if (u < -qmax) u = -qmax;
      xr[i] = u * s;
    }
  }
}

// one linear site prepared for both execution paths
struct BenchLinear {
  int64_t in = 0, out = 0;
  std::vector<double> w_deq;     // dequantized folded weight (in, out)
  PackedMatrix packed;           // (out, in) int4 + per-channel scales
  std::vector<uint16_t> w_f16;   // f16 storage baseline of w_deq
  std::vector<double> bias;
  bool has_tf = false;
  std::vector<double> p_eff;     // P * diag(s), (in, in)
  double clip_a = 1.0;
};

BenchLinear prep_linear(const Linear& lin, const std::optional<AffineTransform>& tf, const Tensor& cw,
                        const Tensor& ca, const QuantSpec& wspec) {
  BenchLinear bl;
  bl.in = lin.w.dim(0);
  bl.out = lin.w.dim(1);
  Tensor folded = tf ? fold_weight(*tf, lin.w) : lin.w.detach();
  QuantizedValue qv = quantize(folded, wspec, cw.item());
  bl.w_deq = dequantize(qv).data();
  // pack the transpose: one row per output channel
  std::vector<int8_t> qt(qv.q.size());
  for (int64_t i = 0; i < bl.in; ++i)
    for (int64_t j = 0; j < bl.out; ++j) qt[j * bl.in + i] = qv.q[i * bl.out + j];
  bl.packed = pack_int4(bl.out, bl.in, qt.data(), qv.scale);
  bl.w_f16.resize(bl.w_deq.size());
  for (size_t i = 0; i < bl.w_deq.size(); ++i) bl.w_f16[i] = f64_to_f16(bl.w_deq[i]);
  bl.bias = lin.b.data();
  if (tf) {
    bl.has_tf = true;
    const auto& p = tf->P.data();
    const auto& s = tf->diag_scale.data();
    bl.p_eff.resize(p.size());
    for (int64_t i = 0; i < bl.in; ++i)
      for (int64_t j = 0; j < bl.in; ++j) bl.p_eff[i * bl.in + j] = p[i * bl.in + j] * s[j];
  }
  bl.clip_a = ca.item();
  return bl;
}

struct BenchBlock {
  BenchLinear q, k, v, o, mlp_in, mlp_out;
  std::vector<double> ln1_g, ln1_b, ln2_g, ln2_b;
  bool global = false;
  int64_t views = 0, view_tokens = 0, c = 0, h = 0;
  int a_qmax = 7;
};

struct Scratch {
  std::vector<double> f0, f1, f2, f3;
  std::vector<int8_t> qtok;
  std::vector<double> atok;
};

// x (rows, in) -> y (rows, out) through the packed int path
void packed_linear(const BenchLinear& bl, const double* x, int64_t rows, double* y, Scratch& sc,
                   int qmax) {
  const double* src = x;
  if (bl.has_tf) {
    sc.f0.resize(rows * bl.in);
    mmraw(x, bl.p_eff.data(), sc.f0.data(), rows, bl.in, bl.in);
    src = sc.f0.data();
  }
  sc.qtok.resize(rows * bl.in);
  sc.atok.resize(rows);
  quantize_rows(src, rows, bl.in, bl.clip_a, qmax, sc.qtok.data(), sc.atok.data());
  std::vector<double> out = qgemm(bl.packed, sc.qtok.data(), rows, bl.in, sc.atok);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < bl.out; ++j) y[r * bl.out + j] = out[r * bl.out + j] + bl.bias[j];
}

// the fake-quant float path
void baseline_linear(const BenchLinear& bl, const double* x, int64_t rows, double* y, Scratch& sc,
                     int qmax) {
  sc.f0.resize(rows * bl.in);
  if (bl.has_tf) {
    mmraw(x, bl.p_eff.data(), sc.f0.data(), rows, bl.in, bl.in);
  } else {
    std::copy(x, x + rows * bl.in, sc.f0.begin());
  }
  fake_quant_rows(sc.f0.data(), rows, bl.in, bl.clip_a, qmax);
  mmraw(sc.f0.data(), bl.w_deq.data(), y, rows, bl.in, bl.out);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < bl.out; ++j) y[r * bl.out + j] += bl.bias[j];
}

template <typename LinearFn>
void block_forward_raw(const BenchBlock& bb, const double* x, int64_t batch, double* out,
                       LinearFn&& linear) {
  int64_t t = bb.views * bb.view_tokens;
  int64_t rows = batch * t;
  int64_t c = bb.c;
  std::vector<double> xn(rows * c), qs(rows * c), ks(rows * c), vs(rows * c), att(rows * c);
  layernorm_raw(x, bb.ln1_g.data(), bb.ln1_b.data(), xn.data(), rows, c);
  linear(bb.q, xn.data(), rows, qs.data());
  linear(bb.k, xn.data(), rows, ks.data());
  linear(bb.v, xn.data(), rows, vs.data());
  double scale = 1.0 / std::sqrt(static_cast<double>(c));
  int64_t span = bb.global ? t : bb.view_tokens;
  std::vector<double> scores(span * span);
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t g = 0; g < t / span; ++g) {
      const double* qb = qs.data() + (b * t + g * span) * c;
      const double* kb = ks.data() + (b * t + g * span) * c;
      const double* vb = vs.data() + (b * t + g * span) * c;
      double* ab = att.data() + (b * t + g * span) * c;
      for (int64_t i = 0; i < span; ++i)
        for (int64_t j = 0; j < span; ++j) {
          double s = 0.0;
          for (int64_t p = 0; p < c; ++p) s += qb[i * c + p] * kb[j * c + p];
          scores[i * span + j] = s * scale;
        }
      softmax_rows(scores.data(), span, span);
      mmraw(scores.data(), vb, ab, span, span, c);
    }
  }
  std::vector<double> oproj(rows * c);
  linear(bb.o, att.data(), rows, oproj.data());
  std::vector<double> x1(rows * c);
  for (int64_t i = 0; i < rows * c; ++i) x1[i] = x[i] + oproj[i];

  std::vector<double> xn2(rows * c), hbuf(rows * bb.h), ybuf(rows * c);
  layernorm_raw(x1.data(), bb.ln2_g.data(), bb.ln2_b.data(), xn2.data(), rows, c);
  linear(bb.mlp_in, xn2.data(), rows, hbuf.data());
  for (double& v : hbuf) v = 0.5 * v * (1.0 + std::erf(v * 0.70710678118654752440));
  linear(bb.mlp_out, hbuf.data(), rows, ybuf.data());
  for (int64_t i = 0; i < rows * c; ++i) out[i] = x1[i] + ybuf[i];
}

using Clock = std::chrono::steady_clock;

// median of `reps` measurements; each measurement amplifies the body until
// it runs for at least ~200us so the clock granularity cannot dominate
template <typename F>
double median_us(F&& body, int reps) {
  int64_t iters = 1;
  for (;;) {
    auto t0 = Clock::now();
    for (int64_t i = 0; i < iters; ++i) body();
    double us = std::chrono::duration<double, std::micro>(Clock::now() - t0).count();
    if (us >= 200.0 || iters >= (1LL << 22)) break;
    iters *= 4;
  }
  std::vector<double> xs(reps);
  for (int r = 0; r < reps; ++r) {
    auto t0 = Clock::now();
    for (int64_t i = 0; i < iters; ++i) body();
    xs[r] = std::chrono::duration<double, std::micro>(Clock::now() - t0).count() /
            static_cast<double>(iters);
  }
  std::sort(xs.begin(), xs.end());
  return xs[reps / 2];
}

}  // namespace

nlohmann::json latency_report_json(const LatencyReport& r) {
  auto comp = [](const LatencyComponent& c) {
    return nlohmann::json{{"param_load_us", c.param_load_us},
                          {"compute_us", c.compute_us},
                          {"block_total_us", c.block_total_us}};
  };
  return nlohmann::json{
      {"schema_version", 1},
      {"mode", r.mode},
      {"block", r.block},
      {"repetitions", r.repetitions},
      {"tokens", r.tokens},
      {"packed", comp(r.packed)},
      {"baseline", comp(r.baseline)},
      {"speedup", {{"param_load", r.speedup_param_load}, {"compute", r.speedup_compute}, {"block", r.speedup_block}}},
      {"packed_param_bytes", r.packed_param_bytes},
      {"f16_param_bytes", r.f16_param_bytes},
      // vendor GPU measurements quoted for context only; not reproduced here
      {"a100_reference_speedups",
       {{"rtn", {{"param_load", 3.41}, {"compute", 6.01}, {"block", 2.01}}},
        {"fgq", {{"param_load", 3.42}, {"compute", 4.67}, {"block", 1.81}}}}},
  };
}

LatencyReport latency_report_from_json(const nlohmann::json& j) {
  LatencyReport r;
  auto comp = [](const nlohmann::json& c, LatencyComponent& out) {
    out.param_load_us = c.at("param_load_us");
    out.compute_us = c.at("compute_us");
    out.block_total_us = c.at("block_total_us");
  };
  r.mode = j.at("mode");
  r.block = j.at("block");
  r.repetitions = j.at("repetitions");
  r.tokens = j.at("tokens");
  comp(j.at("packed"), r.packed);
  comp(j.at("baseline"), r.baseline);
  r.speedup_param_load = j.at("speedup").at("param_load");
  r.speedup_compute = j.at("speedup").at("compute");
  r.speedup_block = j.at("speedup").at("block");
  r.packed_param_bytes = j.at("packed_param_bytes");
  r.f16_param_bytes = j.at("f16_param_bytes");
  return r;
}

LatencyReport bench_block(const ToyModel& m, ModelQuantCfg& qc, int block, int batch, int reps) {
  if (qc.wspec.bits != 4) throw std::invalid_argument("bench_block: the packed path is 4-bit only");
  const Block& blk = m.blocks[block];
  BlockQuant& bq = qc.blocks[block];

  BenchBlock bb;
  bb.q = prep_linear(blk.q, bq.tf_attn, bq.cw_q, bq.ca_attn, qc.wspec);
  bb.k = prep_linear(blk.k, bq.tf_attn, bq.cw_k, bq.ca_attn, qc.wspec);
  bb.v = prep_linear(blk.v, bq.tf_attn, bq.cw_v, bq.ca_attn, qc.wspec);
  bb.o = prep_linear(blk.o, bq.tf_o, bq.cw_o, bq.ca_o, qc.wspec);
  bb.mlp_in = prep_linear(blk.mlp_in, bq.tf_mlp_in, bq.cw_mlp_in, bq.ca_mlp_in, qc.wspec);
  bb.mlp_out = prep_linear(blk.mlp_out, bq.tf_mlp_out, bq.cw_mlp_out, bq.ca_mlp_out, qc.wspec);
  bb.ln1_g = blk.ln1_g.data();
  bb.ln1_b = blk.ln1_b.data();
  bb.ln2_g = blk.ln2_g.data();
  bb.ln2_b = blk.ln2_b.data();
  bb.global = blk.global;
  bb.views = m.cfg.num_views;
  bb.view_tokens = m.cfg.tokens_per_view + 1;
  bb.c = m.cfg.hidden_dim;
  bb.h = m.cfg.mlp_hidden;
  bb.a_qmax = qc.aspec.qmax();

  int64_t t = bb.views * bb.view_tokens;
  int64_t rows = static_cast<int64_t>(batch) * t;

  // deterministic pseudo-input
  std::vector<double> x(rows * bb.c);
  for (size_t i = 0; i < x.size(); ++i) x[i] = std::sin(0.37 * static_cast<double>(i + 1));

  std::vector<const BenchLinear*> lins = {&bb.q, &bb.k, &bb.v, &bb.o, &bb.mlp_in, &bb.mlp_out};
  // per-linear input streams matching each site's width
  std::vector<std::vector<double>> lin_x(lins.size());
  for (size_t i = 0; i < lins.size(); ++i) {
    lin_x[i].resize(rows * lins[i]->in);
    for (size_t k = 0; k < lin_x[i].size(); ++k) {
      lin_x[i][k] = std::sin(0.53 * static_cast<double>(k + 3 * i + 1));
    }
  }

  LatencyReport rep;
  rep.mode = "packed_vs_fake_quant";
  rep.block = block;
  rep.tokens = rows;
  for (const auto* bl : lins) {
    rep.packed_param_bytes += static_cast<int64_t>(bl->packed.bytes.size());
    rep.f16_param_bytes += static_cast<int64_t>(bl->w_f16.size()) * 2;
  }

  Scratch sc;
  std::vector<double> ybuf(rows * std::max(bb.c, bb.h));
  std::vector<int8_t> qbuf;
  std::vector<double> fbuf;
  for (const auto* bl : lins) {
    qbuf.resize(std::max<size_t>(qbuf.size(), bl->packed.rows * bl->packed.cols));
    fbuf.resize(std::max<size_t>(fbuf.size(), bl->w_f16.size()));
  }

  auto measure = [&](int r) {
    LatencyReport out = rep;
    out.repetitions = r;
    // parameter load: storage form -> execution form
    out.packed.param_load_us = median_us(
        [&] {
          for (const auto* bl : lins) {
            std::vector<int8_t> u = unpack_int4(bl->packed);
            std::memcpy(qbuf.data(), u.data(), u.size());
          }
        },
        r);
    out.baseline.param_load_us = median_us(
        [&] {
          for (const auto* bl : lins) {
            for (size_t i = 0; i < bl->w_f16.size(); ++i) fbuf[i] = f16_to_f64(bl->w_f16[i]);
          }
        },
        r);
    // compute kernel: transform + quantize + linear, per stream
    out.packed.compute_us = median_us(
        [&] {
          for (size_t li = 0; li < lins.size(); ++li) packed_linear(*lins[li], lin_x[li].data(), rows, ybuf.data(), sc, bb.a_qmax);
        },
        r);
    out.baseline.compute_us = median_us(
        [&] {
          for (size_t li = 0; li < lins.size(); ++li) baseline_linear(*lins[li], lin_x[li].data(), rows, ybuf.data(), sc, bb.a_qmax);
        },
        r);
    // full block
    std::vector<double> blockout(rows * bb.c);
    out.packed.block_total_us = median_us(
        [&] {
          block_forward_raw(bb, x.data(), batch, blockout.data(),
                            [&](const BenchLinear& bl, const double* in, int64_t rr, double* yy) {
                              packed_linear(bl, in, rr, yy, sc, bb.a_qmax);
                            });
        },
        r);
    out.baseline.block_total_us = median_us(
        [&] {
          block_forward_raw(bb, x.data(), batch, blockout.data(),
                            [&](const BenchLinear& bl, const double* in, int64_t rr, double* yy) {
                              baseline_linear(bl, in, rr, yy, sc, bb.a_qmax);
                            });
        },
        r);
    out.speedup_param_load = out.baseline.param_load_us / out.packed.param_load_us;
    out.speedup_compute = out.baseline.compute_us / out.packed.compute_us;
    out.speedup_block = out.baseline.block_total_us / out.packed.block_total_us;
    return out;
  };

  // re-measure with more repetitions if jitter breaks the containment
  // invariant (block >= each of its components)
  for (int attempt = 0; attempt < 3; ++attempt) {
    LatencyReport out = measure(reps << (2 * attempt));
    bool ok = out.packed.block_total_us >= out.packed.compute_us * 0.999 &&
              out.baseline.block_total_us >= out.baseline.compute_us * 0.999 &&
              out.packed.block_total_us >= out.packed.param_load_us &&
              out.baseline.block_total_us >= out.baseline.param_load_us;
    if (ok || attempt == 2) return out;
  }
  return measure(reps);
}

}  // namespace fgq
