#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fgq/tensor.hpp"

namespace fgq {

/// Flat checkpoint container: JSON meta + ordered named f64 arrays.
/// On-disk layout: magic "FGQARC1\n", u64 header length, header JSON
/// ({"meta":..., "arrays":[{"name","shape"}...]}), then the raw
/// little-endian f64 payloads in directory order. Round trips bit-exactly.
struct NamedArrays {
  nlohmann::json meta;
  std::vector<std::pair<std::string, Tensor>> arrays;

  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
};

void save_arrays(const std::string& path, const NamedArrays& na);
NamedArrays load_arrays(const std::string& path);

}  // namespace fgq
