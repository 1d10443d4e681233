#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "sineseg/error.hpp"
#include "sineseg/volume.hpp"

namespace sineseg {

namespace {

constexpr std::size_t kHeaderSize = 348;

// Byte offsets into the NIfTI-1 header.
constexpr std::size_t kOffSizeofHdr = 0;
constexpr std::size_t kOffDim = 40;
constexpr std::size_t kOffDatatype = 70;
constexpr std::size_t kOffPixdim = 76;
constexpr std::size_t kOffVoxOffset = 108;
constexpr std::size_t kOffSclSlope = 112;
constexpr std::size_t kOffSclInter = 116;
constexpr std::size_t kOffMagic = 344;

constexpr std::int16_t kDtUint8 = 2;
constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtFloat32 = 16;

class HeaderView {
 public:
  HeaderView(const std::array<char, kHeaderSize>& bytes, bool swap) : bytes_(bytes), swap_(swap) {}

  template <typename T>
  T get(std::size_t off) const {
    std::array<char, sizeof(T)> raw;
    std::memcpy(raw.data(), bytes_.data() + off, sizeof(T));
    if (swap_) std::reverse(raw.begin(), raw.end());
    T v;
    std::memcpy(&v, raw.data(), sizeof(T));
    return v;
  }

 private:
  const std::array<char, kHeaderSize>& bytes_;
  bool swap_;
};

template <typename T>
T swapped(T v) {
  std::array<char, sizeof(T)> raw;
  std::memcpy(raw.data(), &v, sizeof(T));
  std::reverse(raw.begin(), raw.end());
  std::memcpy(&v, raw.data(), sizeof(T));
  return v;
}

template <typename T>
void decode(const std::vector<char>& raw, bool swap, Eigen::VectorXf& out) {
  const auto n = static_cast<Index>(raw.size() / sizeof(T));
  for (Index i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, raw.data() + static_cast<std::size_t>(i) * sizeof(T), sizeof(T));
    if (swap) v = swapped(v);
    out[i] = static_cast<float>(v);
  }
}

}  // namespace

Volume read_nifti_subset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::array<char, kHeaderSize> hdr{};
  in.read(hdr.data(), kHeaderSize);
  if (in.gcount() != static_cast<std::streamsize>(kHeaderSize))
    throw FormatError(path.string() + ": shorter than a NIfTI-1 header");

  const char* magic = hdr.data() + kOffMagic;
  const bool single_file = std::memcmp(magic, "n+1\0", 4) == 0;
  const bool pair_file = std::memcmp(magic, "ni1\0", 4) == 0;
  if (!single_file && !pair_file) throw FormatError(path.string() + ": bad NIfTI-1 magic");

  std::int32_t sizeof_hdr;
  std::memcpy(&sizeof_hdr, hdr.data() + kOffSizeofHdr, 4);
  bool swap = false;
  if (sizeof_hdr != 348) {
    if (swapped(sizeof_hdr) != 348) throw FormatError(path.string() + ": sizeof_hdr is not 348");
    swap = true;
  }
  const HeaderView h(hdr, swap);

  std::array<std::int16_t, 8> dim{};
  for (int i = 0; i < 8; ++i) dim[i] = h.get<std::int16_t>(kOffDim + 2 * i);
  // Trailing singleton dims are tolerated; anything else is not a 3D image.
  if (dim[0] != 3) throw FormatError(path.string() + ": dim[0] must be 3, got " + std::to_string(dim[0]));

  const auto datatype = h.get<std::int16_t>(kOffDatatype);
  std::size_t elem = 0;
  switch (datatype) {
    case kDtUint8: elem = 1; break;
    case kDtInt16: elem = 2; break;
    case kDtFloat32: elem = 4; break;
    default:
      throw FormatError(path.string() + ": unsupported datatype " + std::to_string(datatype));
  }

  VolumeMeta meta;
  meta.dims = {dim[3], dim[2], dim[1]};
  for (int a = 0; a < 3; ++a) {
    const float pd = h.get<float>(kOffPixdim + 4 * (3 - a));
    meta.spacing[a] = pd > 0.0f ? static_cast<double>(pd) : 1.0;
  }
  meta.modality = Modality::DERIVED;
  meta.intensity_units = "unknown";
  meta.validate();

  const float vox_offset = h.get<float>(kOffVoxOffset);
  const float slope = h.get<float>(kOffSclSlope);
  const float inter = h.get<float>(kOffSclInter);

  std::filesystem::path data_path = path;
  std::size_t offset = static_cast<std::size_t>(vox_offset);
  if (pair_file) {
    data_path.replace_extension(".img");
  } else if (offset < kHeaderSize) {
    offset = 352;
  }

  std::ifstream data(data_path, std::ios::binary);
  if (!data) throw IoError("cannot open " + data_path.string());
  data.seekg(static_cast<std::streamoff>(offset));
  const auto n = static_cast<std::size_t>(voxel_count(meta.dims));
  std::vector<char> raw(n * elem);
  data.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (data.gcount() != static_cast<std::streamsize>(raw.size()))
    throw FormatError(path.string() + ": image data shorter than dims require");

  Volume v(meta);
  switch (datatype) {
    case kDtUint8: decode<std::uint8_t>(raw, false, v.voxels); break;
    case kDtInt16: decode<std::int16_t>(raw, swap, v.voxels); break;
    default: decode<float>(raw, swap, v.voxels); break;
  }
  if (slope != 0.0f && std::isfinite(slope)) {
    v.voxels = (v.voxels.array() * slope + inter).matrix();
  }
  if (!v.voxels.allFinite()) throw FormatError(path.string() + ": non-finite voxel values");
  return v;
}

}  // namespace sineseg
