#include <bit>
#include <cstring>
#include <fstream>

#include "sineseg/error.hpp"
#include "sineseg/network.hpp"

namespace sineseg {

namespace {

constexpr char kMagic[8] = {'S', 'S', 'E', 'G', 'N', 'E', 'T', '1'};

std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) return __builtin_bswap64(v);
  return v;
}

}  // namespace

void save_network(const Network<float>& net, const std::filesystem::path& path) {
  nlohmann::json manifest;
  manifest["format"] = "sineseg-network";
  manifest["version"] = 1;
  manifest["config"] = to_json(net.config());
  nlohmann::json params = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& p : net.parameters()) {
    params.push_back({{"name", p.name}, {"shape", p.shape}, {"offset", offset}, {"count", p.value.size()}});
    offset += static_cast<std::uint64_t>(p.value.size());
  }
  manifest["parameters"] = params;
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kMagic, sizeof kMagic);
  const std::uint64_t len = to_le(text.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : net.parameters()) {
    if constexpr (std::endian::native == std::endian::little) {
      out.write(reinterpret_cast<const char*>(p.value.data()), static_cast<std::streamsize>(p.value.size() * 4));
    } else {
      for (Index i = 0; i < p.value.size(); ++i) {
        const auto u = __builtin_bswap32(std::bit_cast<std::uint32_t>(p.value[i]));
        out.write(reinterpret_cast<const char*>(&u), 4);
      }
    }
  }
  if (!out) throw IoError("write failed for " + path.string());
}

Network<float> load_network(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw FormatError(path.string() + ": not a network file");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  len = to_le(len);
  if (!in || len > (std::uint64_t(1) << 30)) throw FormatError(path.string() + ": bad manifest length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw FormatError(path.string() + ": truncated manifest");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed manifest: " + e.what());
  }
  Network<float> net(network_config_from_json(manifest.at("config")));
  const auto& entries = manifest.at("parameters");
  if (entries.size() != net.parameters().size()) throw FormatError(path.string() + ": parameter count mismatch");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& p = net.parameters()[i];
    if (entries[i].at("name").get<std::string>() != p.name ||
        entries[i].at("shape").get<std::vector<Index>>() != p.shape)
      throw FormatError(path.string() + ": parameter '" + p.name + "' does not match the config layout");
    in.read(reinterpret_cast<char*>(p.value.data()), static_cast<std::streamsize>(p.value.size() * 4));
    if (!in) throw FormatError(path.string() + ": truncated parameter blob");
    if constexpr (std::endian::native == std::endian::big) {
      for (Index k = 0; k < p.value.size(); ++k)
        p.value[k] = std::bit_cast<float>(__builtin_bswap32(std::bit_cast<std::uint32_t>(p.value[k])));
    }
  }
  return net;
}

}  // namespace sineseg
