#include "fgq/serialize.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace fgq {

namespace {
constexpr char kMagic[8] = {'F', 'G', 'Q', 'A', 'R', 'C', '1', '\n'};
}

const Tensor& NamedArrays::get(const std::string& name) const {
  for (const auto& [n, t] : arrays) {
    if (n == name) return t;
  }
  throw std::runtime_error("checkpoint: missing array '" + name + "'");
}

bool NamedArrays::has(const std::string& name) const {
  for (const auto& [n, t] : arrays) {
    if (n == name) return true;
  }
  return false;
}

void save_arrays(const std::string& path, const NamedArrays& na) {
  nlohmann::json dir = nlohmann::json::array();
  for (const auto& [name, t] : na.arrays) {
    dir.push_back({{"name", name}, {"shape", t.shape()}});
  }
  nlohmann::json header = {{"meta", na.meta}, {"arrays", dir}};
  std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f.write(kMagic, sizeof(kMagic));
  uint64_t hlen = hs.size();
  f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : na.arrays) {
    const auto& d = t.data();
    f.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(double)));
  }
  if (!f) throw std::runtime_error("write failed for '" + path + "'");
}

NamedArrays load_arrays(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("'" + path + "' is not a checkpoint file");
  }
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hs(hlen, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw std::runtime_error("truncated header in '" + path + "'");
  nlohmann::json header = nlohmann::json::parse(hs);

  NamedArrays na;
  na.meta = header.at("meta");
  for (const auto& e : header.at("arrays")) {
    Shape shape = e.at("shape").get<Shape>();
    std::vector<double> data(shape_numel(shape));
    f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!f) throw std::runtime_error("truncated payload in '" + path + "'");
    na.arrays.emplace_back(e.at("name").get<std::string>(), Tensor::from_data(shape, std::move(data)));
  }
  return na;
}

}  // namespace fgq
