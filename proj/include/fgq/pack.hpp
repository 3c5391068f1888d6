#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "fgq/toymodel.hpp"

namespace fgq {

/// Signed 4-bit matrix, two values per byte: low nibble = even column,
/// high nibble = odd column, two's complement, rows padded to a whole byte.
struct PackedMatrix {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<uint8_t> bytes;   // rows * ceil(cols/2)
  std::vector<double> scales;   // one per row (per output channel)

  int64_t bytes_per_row() const { return (cols + 1) / 2; }
};

/// q values must lie in [-7, 7].
PackedMatrix pack_int4(int64_t rows, int64_t cols, const int8_t* q, std::vector<double> scales);
std::vector<int8_t> unpack_int4(const PackedMatrix& p);

/// y (M x N) = dequant( qa (M x K int8, per-row a_scales) . w^T ) where the
/// packed w holds the weight transposed: one row per output channel, K
/// columns. 32-bit integer accumulation; K is guarded so the accumulator
/// cannot overflow at 4 bits. Bit-identical for any thread partitioning.
std::vector<double> qgemm(const PackedMatrix& w, const int8_t* qa, int64_t m, int64_t k,
                          const std::vector<double>& a_scales, int threads = 1);

/// IEEE half conversions (round to nearest even) for the f16 storage
/// baseline in the latency harness.
uint16_t f64_to_f16(double v);
double f16_to_f64(uint16_t h);

// ---------------------------------------------------------------------------
// Latency decomposition
// ---------------------------------------------------------------------------

struct LatencyComponent {
  double param_load_us = 0.0;   // weight materialization from storage
  double compute_us = 0.0;      // transform + activation quant + linear kernels
  double block_total_us = 0.0;  // full block forward
};

struct LatencyReport {
  std::string mode;  // "packed" vs the "fake_quant" float baseline
  int block = 0;
  int repetitions = 0;
  int64_t tokens = 0;
  LatencyComponent packed;
  LatencyComponent baseline;
  double speedup_param_load = 0.0;
  double speedup_compute = 0.0;
  double speedup_block = 0.0;
  int64_t packed_param_bytes = 0;
  int64_t f16_param_bytes = 0;
};

nlohmann::json latency_report_json(const LatencyReport& r);
LatencyReport latency_report_from_json(const nlohmann::json& j);

/// Times one calibrated block in the packed int4 path against the fake-quant
/// float path. Medians over at least `reps` repetitions; repetitions are
/// increased automatically when the timer resolution is insufficient.
LatencyReport bench_block(const ToyModel& m, ModelQuantCfg& qc, int block, int batch, int reps = 10);

}  // namespace fgq
