#include "sineseg/volume.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "sineseg/error.hpp"

namespace sineseg {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Modality m) {
  switch (m) {
    case Modality::CT: return "CT";
    case Modality::PET: return "PET";
    case Modality::LABEL: return "LABEL";
    case Modality::DERIVED: return "DERIVED";
  }
  return "DERIVED";
}

Modality modality_from_string(const std::string& s) {
  if (s == "CT") return Modality::CT;
  if (s == "PET") return Modality::PET;
  if (s == "LABEL") return Modality::LABEL;
  if (s == "DERIVED") return Modality::DERIVED;
  throw FormatError("unknown modality '" + s + "'");
}

void VolumeMeta::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (dims[a] < 1) throw ShapeError("volume dims must be >= 1");
    if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
      throw PreconditionError("volume spacing must be positive and finite");
  }
}

Volume::Volume(VolumeMeta m) : meta(std::move(m)), voxels(Eigen::VectorXf::Zero(voxel_count(meta.dims))) {}

Volume::Volume(VolumeMeta m, Eigen::VectorXf values) : meta(std::move(m)), voxels(std::move(values)) {
  if (voxels.size() != voxel_count(meta.dims))
    throw ShapeError("voxel count does not match dims");
}

void Volume::validate() const {
  meta.validate();
  if (voxels.size() != voxel_count(meta.dims)) throw ShapeError("voxel count does not match dims");
  if (!voxels.allFinite()) throw PreconditionError("volume contains NaN or infinite values");
  if (meta.modality == Modality::LABEL) {
    for (Index i = 0; i < voxels.size(); ++i)
      if (voxels[i] != 0.0f && voxels[i] != 1.0f)
        throw PreconditionError("LABEL volume holds values outside {0, 1}");
  }
}

Volume MultiChannelVolume::channel(Index c) const {
  if (c < 0 || c >= channels.rows()) throw ShapeError("channel index out of range");
  VolumeMeta m = meta;
  return Volume(m, channels.row(c).transpose());
}

Index MultiChannelVolume::find_channel(const std::string& name) const {
  for (std::size_t i = 0; i < channel_names.size(); ++i)
    if (channel_names[i] == name) return static_cast<Index>(i);
  return -1;
}

MultiChannelVolume MultiChannelVolume::select(const std::vector<std::string>& names) const {
  MultiChannelVolume out;
  out.meta = meta;
  out.channel_names = names;
  out.channels.resize(static_cast<Index>(names.size()), channels.cols());
  for (std::size_t i = 0; i < names.size(); ++i) {
    const Index c = find_channel(names[i]);
    if (c < 0) throw ShapeError("input has no channel named '" + names[i] + "'");
    out.channels.row(static_cast<Index>(i)) = channels.row(c);
  }
  return out;
}

void MultiChannelVolume::validate() const {
  meta.validate();
  if (channels.cols() != voxel_count(meta.dims)) throw ShapeError("channel length does not match dims");
  if (static_cast<Index>(channel_names.size()) != channels.rows())
    throw ShapeError("channel name count does not match channel count");
  for (std::size_t i = 0; i < channel_names.size(); ++i)
    for (std::size_t j = i + 1; j < channel_names.size(); ++j)
      if (channel_names[i] == channel_names[j])
        throw ShapeError("duplicate channel name '" + channel_names[i] + "'");
}

namespace {

json meta_to_json(const VolumeMeta& m) {
  return json{{"dims", {m.dims[0], m.dims[1], m.dims[2]}},
              {"spacing", {m.spacing[0], m.spacing[1], m.spacing[2]}},
              {"modality", to_string(m.modality)},
              {"intensity_units", m.intensity_units}};
}

VolumeMeta meta_from_json(const json& j) {
  VolumeMeta m;
  try {
    const auto& d = j.at("dims");
    const auto& s = j.at("spacing");
    if (!d.is_array() || d.size() != 3 || !s.is_array() || s.size() != 3)
      throw FormatError("dims and spacing must be 3-element arrays");
    for (int a = 0; a < 3; ++a) {
      m.dims[a] = d.at(a).get<Index>();
      m.spacing[a] = s.at(a).get<double>();
    }
    m.modality = modality_from_string(j.at("modality").get<std::string>());
    m.intensity_units = j.value("intensity_units", std::string{});
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed volume meta: ") + e.what());
  }
  try {
    m.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("malformed volume meta: ") + e.what());
  }
  return m;
}

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

void write_json_file(const json& j, const fs::path& p) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed for " + p.string());
}

std::vector<float> read_f32_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open " + p.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes % 4 != 0) throw FormatError(p.string() + ": length is not a multiple of 4 bytes");
  std::vector<float> values(bytes / 4);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw IoError("read failed for " + p.string());
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& v : values) {
      auto u = std::bit_cast<std::uint32_t>(v);
      u = __builtin_bswap32(u);
      v = std::bit_cast<float>(u);
    }
  }
  return values;
}

void write_f32_file(const float* data, std::size_t n, const fs::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * 4));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      auto u = __builtin_bswap32(std::bit_cast<std::uint32_t>(data[i]));
      out.write(reinterpret_cast<const char*>(&u), 4);
    }
  }
  if (!out) throw IoError("write failed for " + p.string());
}

fs::path with_ext(const fs::path& stem, const char* ext) {
  fs::path p = stem;
  p += ext;
  return p;
}

}  // namespace

Volume read_raw_volume(const fs::path& data_path, const fs::path& meta_path) {
  const VolumeMeta meta = meta_from_json(read_json_file(meta_path));
  auto values = read_f32_file(data_path);
  if (static_cast<Index>(values.size()) != voxel_count(meta.dims)) {
    std::ostringstream os;
    os << data_path.string() << ": holds " << values.size() << " floats but dims require "
       << voxel_count(meta.dims);
    throw FormatError(os.str());
  }
  Volume v(meta, Eigen::Map<Eigen::VectorXf>(values.data(), static_cast<Index>(values.size())));
  if (!v.voxels.allFinite()) throw FormatError(data_path.string() + ": non-finite voxel values");
  if (meta.modality == Modality::LABEL) {
    try {
      v.validate();
    } catch (const Error& e) {
      throw FormatError(data_path.string() + ": " + e.what());
    }
  }
  return v;
}

void write_raw_volume(const Volume& v, const fs::path& data_path, const fs::path& meta_path) {
  v.meta.validate();
  if (v.voxels.size() != voxel_count(v.meta.dims)) throw ShapeError("voxel count does not match dims");
  write_f32_file(v.voxels.data(), static_cast<std::size_t>(v.voxels.size()), data_path);
  write_json_file(meta_to_json(v.meta), meta_path);
}

Volume read_volume(const fs::path& stem) {
  return read_raw_volume(with_ext(stem, ".f32"), with_ext(stem, ".json"));
}

void write_volume(const Volume& v, const fs::path& stem) {
  write_raw_volume(v, with_ext(stem, ".f32"), with_ext(stem, ".json"));
}

MultiChannelVolume read_multichannel(const fs::path& stem) {
  const json j = read_json_file(with_ext(stem, ".json"));
  MultiChannelVolume out;
  out.meta = meta_from_json(j);
  try {
    out.channel_names = j.at("channels").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("multi-channel sidecar lacks a channel list: ") + e.what());
  }
  auto values = read_f32_file(with_ext(stem, ".f32"));
  const Index n = voxel_count(out.meta.dims);
  const auto c = static_cast<Index>(out.channel_names.size());
  if (static_cast<Index>(values.size()) != n * c)
    throw FormatError("multi-channel data length does not match dims x channels");
  out.channels = Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      values.data(), c, n);
  out.validate();
  return out;
}

void write_multichannel(const MultiChannelVolume& v, const fs::path& stem) {
  v.validate();
  json j = meta_to_json(v.meta);
  j["channels"] = v.channel_names;
  write_f32_file(v.channels.data(), static_cast<std::size_t>(v.channels.size()), with_ext(stem, ".f32"));
  write_json_file(j, with_ext(stem, ".json"));
}

}  // namespace sineseg
