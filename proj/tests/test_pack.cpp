#include <doctest.h>

#include <cmath>
#include <limits>

#include "fgq/pack.hpp"
#include "fgq/rng.hpp"

using namespace fgq;

TEST_SUITE_BEGIN("pack");

TEST_CASE("pack_int4: worked byte example") {
  // [3, -5]: low nibble 0x3, high nibble 0xB (two's complement -5) -> 0xB3
  int8_t q[2] = {3, -5};
  PackedMatrix p = pack_int4(1, 2, q, {1.0});
  REQUIRE(p.bytes.size() == 1);
  CHECK(p.bytes[0] == 0xB3);
  std::vector<int8_t> u = unpack_int4(p);
  CHECK(u[0] == 3);
  CHECK(u[1] == -5);
}

TEST_CASE("pack_int4: zeros, padding, storage arithmetic") {
  std::vector<int8_t> q(3 * 5, 0);
  PackedMatrix p = pack_int4(3, 5, q.data(), std::vector<double>(3, 1.0));
  CHECK(p.bytes.size() == 3 * 3);  // ceil(5/2) = 3 bytes per row
  for (uint8_t b : p.bytes) CHECK(b == 0);
  std::vector<int8_t> u = unpack_int4(p);
  CHECK(u.size() == 15);

  int8_t bad[1] = {-8};
  CHECK_THROWS_AS(pack_int4(1, 1, bad, {1.0}), std::invalid_argument);
}

TEST_CASE("pack_int4: exhaustive round trip over the 15-value code space") {
  std::vector<int8_t> q;
  for (int v = -7; v <= 7; ++v) q.push_back(static_cast<int8_t>(v));
  PackedMatrix p = pack_int4(1, static_cast<int64_t>(q.size()), q.data(), {1.0});
  std::vector<int8_t> u = unpack_int4(p);
  for (size_t i = 0; i < q.size(); ++i) CHECK(u[i] == q[i]);

  // every (even, odd) nibble pairing
  std::vector<int8_t> pairs;
  for (int a = -7; a <= 7; ++a)
    for (int b = -7; b <= 7; ++b) {
      pairs.push_back(static_cast<int8_t>(a));
      pairs.push_back(static_cast<int8_t>(b));
    }
  PackedMatrix pp = pack_int4(1, static_cast<int64_t>(pairs.size()), pairs.data(), {1.0});
  std::vector<int8_t> up = unpack_int4(pp);
  for (size_t i = 0; i < pairs.size(); ++i) CHECK(up[i] == pairs[i]);
}

TEST_CASE("qgemm: hand-worked integer dot") {
  // weights one output channel: q_w = [7, -4]; activations one token [7, 2]
  int8_t qw[2] = {7, -4};
  PackedMatrix w = pack_int4(1, 2, qw, {1.0});
  int8_t qa[2] = {7, 2};
  std::vector<double> y = qgemm(w, qa, 1, 2, {1.0});
  CHECK(y.size() == 1);
  CHECK(y[0] == 41.0);  // 49 - 8

  std::vector<double> ys = qgemm(w, qa, 1, 2, {0.5});
  CHECK(ys[0] == 20.5);
}

TEST_CASE("qgemm: matches the dequantize-then-matmul float oracle") {
  Rng rng(3);
  int64_t m = 9, k = 16, n = 5;
  std::vector<int8_t> qa(m * k), qw(n * k);
  for (auto& v : qa) v = static_cast<int8_t>(static_cast<int>(rng.below(15)) - 7);
  for (auto& v : qw) v = static_cast<int8_t>(static_cast<int>(rng.below(15)) - 7);
  std::vector<double> asc(m), wsc(n);
  for (auto& v : asc) v = rng.uniform(0.01, 0.2);
  for (auto& v : wsc) v = rng.uniform(0.01, 0.2);

  PackedMatrix w = pack_int4(n, k, qw.data(), wsc);
  std::vector<double> y = qgemm(w, qa.data(), m, k, asc);

  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) {
        acc += (double(qa[i * k + p]) * asc[i]) * (double(qw[j * k + p]) * wsc[j]);
      }
      double denom = std::max(std::fabs(acc), 1e-12);
      CHECK(std::fabs(y[i * n + j] - acc) / denom <= 1e-6);
    }
  }
}

TEST_CASE("qgemm: bit-identical across thread partitionings") {
  Rng rng(4);
  int64_t m = 33, k = 24, n = 7;
  std::vector<int8_t> qa(m * k), qw(n * k);
  for (auto& v : qa) v = static_cast<int8_t>(static_cast<int>(rng.below(15)) - 7);
  for (auto& v : qw) v = static_cast<int8_t>(static_cast<int>(rng.below(15)) - 7);
  std::vector<double> asc(m, 0.037), wsc(n, 0.11);
  PackedMatrix w = pack_int4(n, k, qw.data(), wsc);

  std::vector<double> y1 = qgemm(w, qa.data(), m, k, asc, 1);
  for (int threads : {2, 3, 8}) {
    std::vector<double> yt = qgemm(w, qa.data(), m, k, asc, threads);
    CHECK(y1 == yt);
  }
}

TEST_CASE("qgemm: accumulator guard") {
  std::vector<int8_t> qw(1 << 17, 1);
  PackedMatrix w = pack_int4(1, 1 << 17, qw.data(), {1.0});
  std::vector<int8_t> qa(1 << 17, 1);
  CHECK_THROWS_AS(qgemm(w, qa.data(), 1, 1 << 17, {1.0}), std::invalid_argument);
}

TEST_CASE("f16 conversions round trip on representable values") {
  for (double v : {0.0, 1.0, -1.0, 0.5, 2.0, 65504.0, -0.25, 1024.0}) {
    CHECK(f16_to_f64(f64_to_f16(v)) == v);
  }
  CHECK(f16_to_f64(f64_to_f16(1e9)) == std::numeric_limits<double>::infinity());
  // round-to-nearest: 1 + 2^-11 is halfway, rounds to even (stays 1.0)
  CHECK(f16_to_f64(f64_to_f16(1.0 + std::pow(2.0, -11))) == 1.0);
}

TEST_CASE("bench_block: decomposition invariants and report round trip") {
  ToyModelConfig cfg;
  cfg.aa_pairs = 1;
  cfg.tokens_per_view = 4;
  cfg.hidden_dim = 16;
  cfg.mlp_hidden = 32;
  ToyModel m = init_model(cfg);
  ModelQuantCfg qc = make_quant_cfg(m, Method::RTN, 4, 4, 0);
  LatencyReport r = bench_block(m, qc, 0, 4, 5);

  CHECK(r.packed.block_total_us >= r.packed.compute_us * 0.999);
  CHECK(r.baseline.block_total_us >= r.baseline.compute_us * 0.999);
  CHECK(r.packed.param_load_us > 0.0);
  CHECK(r.speedup_param_load > 0.0);

  // packed payload is exactly a quarter of the f16 payload (even columns)
  CHECK(r.packed_param_bytes * 4 == r.f16_param_bytes);

  nlohmann::json j = latency_report_json(r);
  CHECK(j.contains("a100_reference_speedups"));
  LatencyReport rr = latency_report_from_json(j);
  CHECK(rr.packed.compute_us == r.packed.compute_us);
  CHECK(rr.baseline.block_total_us == r.baseline.block_total_us);
  CHECK(rr.speedup_block == r.speedup_block);
  CHECK(rr.packed_param_bytes == r.packed_param_bytes);
}

TEST_SUITE_END();
