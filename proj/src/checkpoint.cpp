#include "lightseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace lightseg {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian");

namespace {
constexpr char kMagic[8] = {'L', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};
}

void save_tensors(const std::filesystem::path& path,
                  const std::vector<std::pair<std::string, Tensor<float>>>& tensors) {
  nlohmann::json manifest;
  manifest["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const auto& s = t.shape();
    const std::uint64_t nbytes = static_cast<std::uint64_t>(t.numel()) * sizeof(float);
    manifest["tensors"].push_back({{"name", name},
                                   {"shape", {s.n, s.c, s.h, s.w}},
                                   {"dtype", "f32"},
                                   {"offset", offset},
                                   {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string mjson = manifest.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot open checkpoint for writing: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t mlen = mjson.size();
  out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  out.write(mjson.data(), static_cast<std::streamsize>(mjson.size()));
  for (const auto& [name, t] : tensors) {
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.numel() * sizeof(float)));
  }
  if (!out) throw data_error("failed writing checkpoint: " + path.string());
}

std::vector<std::pair<std::string, Tensor<float>>> load_tensors(
    const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw data_error("not a checkpoint file: " + path.string());
  }
  std::uint64_t mlen = 0;
  in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  std::string mjson(mlen, '\0');
  in.read(mjson.data(), static_cast<std::streamsize>(mlen));
  if (!in) throw data_error("truncated checkpoint manifest: " + path.string());

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mjson);
  } catch (const nlohmann::json::exception& e) {
    throw data_error("bad checkpoint manifest: " + std::string(e.what()));
  }

  const std::streampos payload_start = in.tellg();
  std::vector<std::pair<std::string, Tensor<float>>> result;
  for (const auto& entry : manifest.at("tensors")) {
    const std::string name = entry.at("name");
    const auto shape = entry.at("shape");
    if (entry.at("dtype") != "f32") {
      throw data_error("unsupported dtype in checkpoint for tensor " + name);
    }
    const Shape4 s{shape.at(0), shape.at(1), shape.at(2), shape.at(3)};
    const std::uint64_t offset = entry.at("offset");
    std::vector<float> data(static_cast<std::size_t>(s.numel()));
    in.seekg(payload_start + static_cast<std::streamoff>(offset));
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!in) throw data_error("truncated checkpoint payload for tensor " + name);
    result.emplace_back(name, Tensor<float>(s, std::move(data)));
  }
  return result;
}

}  // namespace lightseg
