#include "attncal/model/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "attncal/errors.hpp"

namespace attncal::model {

namespace {

constexpr char kMagic[8] = {'A', 'T', 'T', 'N', 'C', 'A', 'L', '1'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

void put_f64(std::string& out, double x) { put_u64(out, std::bit_cast<std::uint64_t>(x)); }

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    if (!t.tensor.defined()) throw ContractError("checkpoint tensor '" + t.name + "' is undefined");
    manifest.push_back({{"name", t.name}, {"shape", t.tensor.shape()}, {"offset", offset}});
    offset += 8 * t.tensor.size();
  }
  nlohmann::json header = {{"format_version", kCheckpointFormatVersion},
                           {"kind", ckpt.kind},
                           {"config", ckpt.config},
                           {"tensors", manifest}};
  const auto h = header.dump();
  std::string out(kMagic, 8);
  put_u64(out, h.size());
  out += h;
  out.reserve(out.size() + offset);
  for (const auto& t : ckpt.tensors)
    for (double x : t.tensor.data()) put_f64(out, x);
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw IoError("not a checkpoint (bad magic)");
  const auto hlen = get_u64(bytes, 8);
  if (hlen > bytes.size() - 16) throw IoError("checkpoint header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  Checkpoint ck;
  try {
    const auto version = header.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion)
      throw IoError("unsupported checkpoint format_version " + std::to_string(version));
    ck.kind = header.at("kind").get<std::string>();
    ck.config = header.at("config");
    const std::size_t base = 16 + hlen;
    for (const auto& e : header.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<nd::Shape>();
      const auto off = e.at("offset").get<std::uint64_t>();
      const auto count = nd::numel(shape);
      if (off > bytes.size() - base || 8 * count > bytes.size() - base - off)
        throw IoError("checkpoint blob for '" + name + "' is truncated");
      std::vector<double> v(count);
      for (std::size_t i = 0; i < count; ++i) v[i] = std::bit_cast<double>(get_u64(bytes, base + off + 8 * i));
      ck.tensors.push_back({name, nd::Tensor::from(shape, std::move(v))});
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed checkpoint header: ") + e.what());
  }
  return ck;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_checkpoint(ss.str());
}

void save_model(const std::filesystem::path& path, const Model& model) {
  write_checkpoint(path, {"model", model.config(), model.named_parameters()});
}

Model load_model(const std::filesystem::path& path) {
  auto ck = read_checkpoint(path);
  if (ck.kind != "model") throw IoError(path.string() + " holds a '" + ck.kind + "' checkpoint, not a model");
  ModelConfig config;
  try {
    config = ck.config.get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad model config in checkpoint: ") + e.what());
  }
  std::map<std::string, nd::Tensor> by_name;
  for (auto& t : ck.tensors) by_name[t.name] = t.tensor;
  // Shapes come from a freshly initialized model; values from the file.
  Model shell(config, 0);
  for (auto& p : shell.named_parameters()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw IoError("checkpoint is missing tensor '" + p.name + "'");
    if (it->second.shape() != p.tensor.shape())
      throw IoError("tensor '" + p.name + "' has shape " + nd::shape_str(it->second.shape()) + ", expected " +
                    nd::shape_str(p.tensor.shape()));
    auto dst = p.tensor.mutable_data();
    auto src = it->second.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  if (by_name.size() != shell.named_parameters().size()) throw IoError("checkpoint carries unexpected tensors");
  return shell;
}

}  // namespace attncal::model
