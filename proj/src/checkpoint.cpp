// SPDX-License-Identifier: Apache-2.0
#include <fstream>
#include <map>
#include <stdexcept>

#include "amn/model.hpp"
#include "binio.hpp"

namespace amn {

namespace {

constexpr char kMagic[4] = {'A', 'M', 'N', '1'};

void put_string(std::ostream &os, const std::string &s) {
  binio::put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream &is, const char *what, std::uint32_t limit = 1u << 26) {
  const std::uint32_t n = binio::get_u32(is, what);
  if (n > limit)
    throw std::runtime_error(std::string("checkpoint: implausible length for ") + what);
  std::string s(n, '\0');
  binio::get_bytes(is, s.data(), n, what);
  return s;
}

void put_record(std::ostream &os, const std::string &name, const Shape &shape,
                std::span<const double> values) {
  put_string(os, name);
  binio::put_u32(os, static_cast<std::uint32_t>(shape.size()));
  for (std::size_t d : shape)
    binio::put_u32(os, static_cast<std::uint32_t>(d));
  for (double v : values)
    binio::put_f32(os, static_cast<float>(v));
}

std::string bn_name(std::size_t i, const char *what) {
  return "block" + std::to_string(i + 1) + ".bn." + what;
}

} // namespace

void save_checkpoint(const std::filesystem::path &path, const Checkpoint &checkpoint) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os)
    throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  os.write(kMagic, 4);
  binio::put_u32(os, kCheckpointVersion);
  put_string(os, checkpoint.config.serialize());
  put_string(os, checkpoint.extra);
  const auto &p = checkpoint.params;
  binio::put_u32(os, static_cast<std::uint32_t>(p.entries.size() + 2 * p.batchnorm.size()));
  for (const auto &[name, t] : p.entries)
    put_record(os, name, t.shape(), t.values());
  for (std::size_t i = 0; i < p.batchnorm.size(); ++i) {
    const auto &bn = p.batchnorm[i];
    put_record(os, bn_name(i, "running_mean"), {bn.running_mean.size()}, bn.running_mean);
    put_record(os, bn_name(i, "running_var"), {bn.running_var.size()}, bn.running_var);
  }
  if (!os)
    throw std::runtime_error("write failed for '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is)
    throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
  char magic[4];
  binio::get_bytes(is, magic, 4, "checkpoint magic");
  if (!std::equal(magic, magic + 4, kMagic))
    throw std::runtime_error("'" + path.string() + "' is not an AMN checkpoint (bad magic)");
  const std::uint32_t version = binio::get_u32(is, "checkpoint version");
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint version " + std::to_string(version) +
                             " is not supported (expected " +
                             std::to_string(kCheckpointVersion) + ")");
  Checkpoint ck;
  ck.config = ModelConfig::deserialize(get_string(is, "model config"));
  ck.extra = get_string(is, "extra settings");

  // The reference layout tells us which records to expect and their shapes.
  ModelParams ref = init_params(ck.config, 0);
  std::map<std::string, std::vector<double>> records;
  std::map<std::string, Shape> shapes;
  const std::uint32_t count = binio::get_u32(is, "record count");
  for (std::uint32_t r = 0; r < count; ++r) {
    std::string name = get_string(is, "record name", 4096);
    const std::uint32_t rank = binio::get_u32(is, "record rank");
    if (rank > 8)
      throw std::runtime_error("checkpoint: record '" + name + "' has rank " +
                               std::to_string(rank));
    Shape shape(rank);
    std::size_t n = 1;
    for (auto &d : shape) {
      d = binio::get_u32(is, "record extent");
      n *= d;
    }
    if (n > (std::size_t{1} << 28))
      throw std::runtime_error("checkpoint: record '" + name + "' is implausibly large");
    std::vector<double> values(n);
    for (double &v : values)
      v = binio::get_f32(is, "record data");
    if (records.contains(name))
      throw std::runtime_error("checkpoint: duplicate record '" + name + "'");
    shapes[name] = std::move(shape);
    records[name] = std::move(values);
  }
  if (is.peek() != std::char_traits<char>::eof())
    throw std::runtime_error("checkpoint: trailing bytes after the last record");

  auto take = [&](const std::string &name, const Shape &want) {
    auto it = records.find(name);
    if (it == records.end())
      throw std::runtime_error("checkpoint: missing record '" + name + "'");
    if (shapes[name] != want)
      throw std::runtime_error("checkpoint: record '" + name + "' has shape " +
                               shape_str(shapes[name]) + ", expected " + shape_str(want));
    std::vector<double> v = std::move(it->second);
    records.erase(it);
    return v;
  };
  for (auto &[name, t] : ref.entries)
    ck.params.entries.emplace_back(name, Tensor(t.shape(), take(name, t.shape()), true));
  for (std::size_t i = 0; i < ref.batchnorm.size(); ++i) {
    BatchNormState bn = ref.batchnorm[i];
    const Shape s{bn.running_mean.size()};
    bn.running_mean = take(bn_name(i, "running_mean"), s);
    bn.running_var = take(bn_name(i, "running_var"), s);
    ck.params.batchnorm.push_back(std::move(bn));
  }
  if (!records.empty())
    throw std::runtime_error("checkpoint: unexpected record '" + records.begin()->first + "'");
  return ck;
}

} // namespace amn
