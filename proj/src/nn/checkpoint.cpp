#include "geniedrive/nn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "geniedrive/core/errors.hpp"

namespace geniedrive::nn {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest");
  if (!in) throw FormatError("checkpoint manifest missing in " + dir.string());
  try {
    auto j = nlohmann::json::parse(in);
    if (!j.is_object() || j.value("format", "") != "geniedrive-checkpoint" || !j.contains("tensors")) {
      throw FormatError("not a checkpoint manifest: " + (dir / "manifest").string());
    }
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed checkpoint manifest: " + std::string(e.what()));
  }
}

}  // namespace

void save_checkpoint(const ParamStore& params, const std::filesystem::path& dir, const nlohmann::json& meta) {
  std::filesystem::create_directories(dir);
  nlohmann::json tensors = nlohmann::json::object();
  std::vector<float> blob;
  blob.reserve(static_cast<size_t>(params.parameter_count()));
  for (const auto& [name, t] : params.entries()) {
    const auto offset = blob.size() * sizeof(float);
    for (double v : t.data()) blob.push_back(static_cast<float>(v));
    tensors[name] = {{"dtype", "float32"},
                     {"shape", t.shape()},
                     {"byte_offset", offset},
                     {"byte_length", static_cast<size_t>(t.numel()) * sizeof(float)}};
  }
  nlohmann::json manifest = {{"format", "geniedrive-checkpoint"},
                             {"version", 1},
                             {"total_bytes", blob.size() * sizeof(float)},
                             {"tensors", tensors},
                             {"meta", meta}};
  std::ofstream(dir / "manifest") << manifest.dump(2) << '\n';
  std::ofstream out(dir / "weights.bin", std::ios::binary);
  out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size() * sizeof(float)));
  if (!out) throw Error("failed writing " + (dir / "weights.bin").string());
}

nlohmann::json read_checkpoint_meta(const std::filesystem::path& dir) {
  return read_manifest(dir).value("meta", nlohmann::json::object());
}

nlohmann::json load_checkpoint(ParamStore& params, const std::filesystem::path& dir) {
  const auto manifest = read_manifest(dir);
  std::ifstream in(dir / "weights.bin", std::ios::binary | std::ios::ate);
  if (!in) throw FormatError("checkpoint weights missing in " + dir.string());
  const auto size = static_cast<size_t>(in.tellg());
  in.seekg(0);
  std::vector<char> bytes(size);
  in.read(bytes.data(), static_cast<std::streamsize>(size));

  const auto& tensors = manifest.at("tensors");
  size_t declared = 0;
  for (const auto& [name, entry] : tensors.items()) declared += entry.at("byte_length").get<size_t>();
  if (declared != size || manifest.value("total_bytes", declared) != size) {
    throw TruncatedError("checkpoint blob is " + std::to_string(size) + " bytes, manifest declares " +
                         std::to_string(declared));
  }
  for (const auto& [name, t] : params.entries()) {
    if (!tensors.contains(name)) throw ConsistencyError("checkpoint lacks tensor " + name);
    const auto& entry = tensors.at(name);
    if (entry.at("dtype") != "float32") throw FormatError("unsupported dtype for " + name);
    const auto shape = entry.at("shape").get<Shape>();
    if (shape != t.shape()) {
      throw ShapeError("checkpoint tensor " + name + " has shape " + to_string(shape) + ", model expects " +
                       to_string(t.shape()));
    }
    const auto offset = entry.at("byte_offset").get<size_t>();
    const auto length = entry.at("byte_length").get<size_t>();
    if (length != static_cast<size_t>(t.numel()) * sizeof(float) || offset + length > size) {
      throw ConsistencyError("checkpoint tensor " + name + " has inconsistent extent");
    }
    Tensor dst = t;
    auto values = dst.mutable_data();
    for (size_t i = 0; i < values.size(); ++i) {
      float f;
      std::memcpy(&f, bytes.data() + offset + i * sizeof(float), sizeof f);
      values[i] = f;
    }
  }
  return manifest.value("meta", nlohmann::json::object());
}

}  // namespace geniedrive::nn
