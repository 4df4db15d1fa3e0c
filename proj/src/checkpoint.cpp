#include "kinaema/models/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <fstream>

namespace kinaema::models {

using nlohmann::json;

const NamedArray* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return &a;
  return nullptr;
}

namespace {

uint32_t array_crc(const std::vector<float>& data) {
  return static_cast<uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(data.data()),
                                     static_cast<uInt>(data.size() * sizeof(float))));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string());

  std::vector<const NamedArray*> sorted;
  sorted.reserve(ckpt.arrays.size());
  for (const auto& a : ckpt.arrays) sorted.push_back(&a);
  std::sort(sorted.begin(), sorted.end(),
            [](const NamedArray* a, const NamedArray* b) { return a->name < b->name; });

  std::ofstream bin(dir / "weights.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw IoError("cannot open weights.bin for writing");
  json index = json::array();
  uint64_t offset = 0;
  for (const NamedArray* a : sorted) {
    uint64_t bytes = a->data.size() * sizeof(float);
    bin.write(reinterpret_cast<const char*>(a->data.data()),
              static_cast<std::streamsize>(bytes));
    index.push_back(json{{"name", a->name},
                         {"shape", a->shape},
                         {"offset", offset},
                         {"size", bytes},
                         {"crc32", array_crc(a->data)}});
    offset += bytes;
  }
  bin.close();
  if (!bin) throw IoError("failed writing weights.bin");

  json j = {{"format_version", 1},
            {"model_spec", ckpt.spec.to_json()},
            {"step", ckpt.step},
            {"extra", ckpt.extra},
            {"arrays", index}};
  std::ofstream jf(dir / "checkpoint.json", std::ios::trunc);
  if (!jf) throw IoError("cannot open checkpoint.json for writing");
  jf << j.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream jf(dir / "checkpoint.json");
  if (!jf) throw IoError("cannot open " + (dir / "checkpoint.json").string());
  json j;
  try {
    jf >> j;
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint.json: " + std::string(e.what()));
  }
  if (j.at("format_version").get<int>() != 1)
    throw IoError("unsupported checkpoint format_version");

  Checkpoint ckpt;
  ckpt.spec = ModelSpec::from_json(j.at("model_spec"));
  ckpt.step = j.at("step").get<int64_t>();
  ckpt.extra = j.at("extra");

  std::ifstream bin(dir / "weights.bin", std::ios::binary);
  if (!bin) throw IoError("cannot open " + (dir / "weights.bin").string());
  for (const auto& meta : j.at("arrays")) {
    NamedArray a;
    a.name = meta.at("name").get<std::string>();
    a.shape = meta.at("shape").get<std::vector<int>>();
    uint64_t bytes = meta.at("size").get<uint64_t>();
    a.data.resize(bytes / sizeof(float));
    bin.seekg(static_cast<std::streamoff>(meta.at("offset").get<uint64_t>()));
    bin.read(reinterpret_cast<char*>(a.data.data()), static_cast<std::streamsize>(bytes));
    if (bin.gcount() != static_cast<std::streamsize>(bytes))
      throw IoError("truncated weights.bin reading " + a.name);
    if (array_crc(a.data) != meta.at("crc32").get<uint32_t>())
      throw IoError("checksum mismatch for array " + a.name);
    ckpt.arrays.push_back(std::move(a));
  }
  return ckpt;
}

std::vector<NamedArray> arrays_from_params(const nn::ParamSet<float>& params,
                                           const std::string& name_prefix) {
  std::vector<NamedArray> out;
  out.reserve(params.size());
  for (const auto& e : params.entries())
    out.push_back({name_prefix + e.name, e.tensor.shape(), e.tensor.values()});
  return out;
}

void load_into_params(const std::vector<NamedArray>& arrays, nn::ParamSet<float>& params,
                      const std::string& name_prefix) {
  for (auto& e : params.entries()) {
    const NamedArray* found = nullptr;
    std::string want = name_prefix + e.name;
    for (const auto& a : arrays)
      if (a.name == want) {
        found = &a;
        break;
      }
    if (!found) throw ConfigError("checkpoint is missing parameter " + want);
    if (found->shape != e.tensor.shape())
      throw ConfigError("checkpoint shape mismatch for " + want);
    e.tensor.values() = found->data;
  }
}

}  // namespace kinaema::models
