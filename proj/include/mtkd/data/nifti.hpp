#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <zlib.h>

#include "mtkd/core/error.hpp"
#include "mtkd/core/log.hpp"

namespace mtkd {

/// A 3D scalar volume. Indexing follows the NIfTI array order: voxel (h, w, d) lives at
/// h + H * (w + W * d), i.e. H is the first (fastest) NIfTI axis.
struct Volume {
    std::vector<float> voxels;
    std::string subject_id;
    std::array<std::size_t, 3> shape{0, 0, 0};  // (H, W, D)

    float at(std::size_t h, std::size_t w, std::size_t d) const { return voxels[h + shape[0] * (w + shape[1] * d)]; }
    float& at(std::size_t h, std::size_t w, std::size_t d) { return voxels[h + shape[0] * (w + shape[1] * d)]; }

    void validate() const {
        if (shape[0] == 0 || shape[1] == 0 || shape[2] == 0) throw Error("volume shape must be positive");
        if (voxels.size() != shape[0] * shape[1] * shape[2]) throw Error("volume voxel count does not match shape");
    }
};

/// Subject id of a NIfTI file: the file name without .nii / .nii.gz.
inline std::string nifti_subject_id(const std::filesystem::path& path) {
    std::string name = path.filename().string();
    for (const char* ext : {".nii.gz", ".nii"}) {
        const std::string e = ext;
        if (name.size() > e.size() && name.compare(name.size() - e.size(), e.size(), e) == 0) {
            return name.substr(0, name.size() - e.size());
        }
    }
    return path.stem().string();
}

namespace detail {

inline constexpr std::size_t nifti_header_size = 348;

class GzFile {
public:
    GzFile(const std::filesystem::path& path, const char* mode) : file_(gzopen(path.string().c_str(), mode)) {}
    ~GzFile() {
        if (file_) gzclose(file_);
    }
    GzFile(const GzFile&) = delete;
    GzFile& operator=(const GzFile&) = delete;
    explicit operator bool() const { return file_ != nullptr; }
    gzFile get() const { return file_; }

    /// Reads up to `n` bytes; returns the count actually read.
    std::size_t read(void* dst, std::size_t n) {
        std::size_t total = 0;
        auto* out = static_cast<unsigned char*>(dst);
        while (total < n) {
            const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(n - total, 1u << 30));
            const int got = gzread(file_, out + total, chunk);
            if (got <= 0) break;
            total += static_cast<std::size_t>(got);
        }
        return total;
    }

    void write(const void* src, std::size_t n) {
        if (gzwrite(file_, src, static_cast<unsigned>(n)) != static_cast<int>(n)) throw Error("NIfTI write failed");
    }

private:
    gzFile file_;
};

template <typename V>
V read_field(const unsigned char* hdr, std::size_t offset, bool swap) {
    unsigned char bytes[sizeof(V)];
    std::memcpy(bytes, hdr + offset, sizeof(V));
    if (swap) std::reverse(bytes, bytes + sizeof(V));
    V v;
    std::memcpy(&v, bytes, sizeof(V));
    return v;
}

template <typename V>
void put_field(unsigned char* hdr, std::size_t offset, V value) {
    std::memcpy(hdr + offset, &value, sizeof(V));
}

} // namespace detail

/// Reads a single-file NIfTI-1 volume (.nii or .nii.gz). A missing file yields std::nullopt with
/// a warning so callers can skip the subject; malformed content throws FormatError.
inline std::optional<Volume> load_volume(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) {
        log().warn("NIfTI file {} not found; skipping subject", path.string());
        return std::nullopt;
    }
    detail::GzFile file(path, "rb");
    if (!file) throw FormatError("cannot open NIfTI file " + path.string());

    unsigned char hdr[detail::nifti_header_size];
    if (file.read(hdr, sizeof hdr) != sizeof hdr) throw FormatError("truncated NIfTI header in " + path.string());

    bool swap = false;
    if (detail::read_field<std::int32_t>(hdr, 0, false) != 348) {
        if (detail::read_field<std::int32_t>(hdr, 0, true) != 348) {
            throw FormatError("not a NIfTI-1 file (sizeof_hdr != 348): " + path.string());
        }
        swap = true;
    }
    if (std::memcmp(hdr + 344, "n+1", 4) != 0) {
        throw FormatError("unsupported NIfTI magic in " + path.string() + " (only single-file n+1 is read)");
    }

    std::array<std::int16_t, 8> dim{};
    for (std::size_t i = 0; i < 8; ++i) dim[i] = detail::read_field<std::int16_t>(hdr, 40 + 2 * i, swap);
    if (dim[0] < 1 || dim[0] > 7) throw FormatError("invalid NIfTI rank " + std::to_string(dim[0]) + " in " + path.string());
    for (int i = 1; i <= dim[0]; ++i) {
        if (dim[i] < 1) throw FormatError("invalid NIfTI dimension in " + path.string());
    }
    if (dim[0] >= 4 && dim[4] > 1) log().warn("{} has {} volumes; reading the first", path.string(), dim[4]);

    Volume vol;
    vol.subject_id = nifti_subject_id(path);
    vol.shape = {static_cast<std::size_t>(dim[1]), dim[0] >= 2 ? static_cast<std::size_t>(dim[2]) : 1,
                 dim[0] >= 3 ? static_cast<std::size_t>(dim[3]) : 1};

    const auto datatype = detail::read_field<std::int16_t>(hdr, 70, swap);
    const float vox_offset = detail::read_field<float>(hdr, 108, swap);
    float slope = detail::read_field<float>(hdr, 112, swap);
    const float inter = detail::read_field<float>(hdr, 116, swap);
    if (slope == 0.0f || !std::isfinite(slope)) slope = 1.0f;

    std::size_t bytes_per = 0;
    switch (datatype) {
    case 2: case 256: bytes_per = 1; break;     // uint8, int8
    case 4: case 512: bytes_per = 2; break;     // int16, uint16
    case 8: case 16: case 768: bytes_per = 4; break;  // int32, float32, uint32
    case 64: bytes_per = 8; break;              // float64
    default: throw FormatError("unsupported NIfTI datatype " + std::to_string(datatype) + " in " + path.string());
    }

    if (vox_offset < static_cast<float>(detail::nifti_header_size)) throw FormatError("invalid vox_offset in " + path.string());
    const std::size_t skip = static_cast<std::size_t>(vox_offset) - detail::nifti_header_size;
    std::vector<unsigned char> pad(skip);
    if (file.read(pad.data(), skip) != skip) throw FormatError("truncated NIfTI file " + path.string());

    const std::size_t count = vol.shape[0] * vol.shape[1] * vol.shape[2];
    std::vector<unsigned char> raw(count * bytes_per);
    if (file.read(raw.data(), raw.size()) != raw.size()) {
        throw FormatError("truncated NIfTI voxel data in " + path.string());
    }

    vol.voxels.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        const unsigned char* p = raw.data() + i * bytes_per;
        double v = 0.0;
        switch (datatype) {
        case 2: v = p[0]; break;
        case 256: v = static_cast<std::int8_t>(p[0]); break;
        case 4: v = detail::read_field<std::int16_t>(p, 0, swap); break;
        case 512: v = detail::read_field<std::uint16_t>(p, 0, swap); break;
        case 8: v = detail::read_field<std::int32_t>(p, 0, swap); break;
        case 768: v = detail::read_field<std::uint32_t>(p, 0, swap); break;
        case 16: v = detail::read_field<float>(p, 0, swap); break;
        case 64: v = detail::read_field<double>(p, 0, swap); break;
        }
        vol.voxels[i] = static_cast<float>(v * slope + inter);
    }
    return vol;
}

/// Writes a float32 single-file NIfTI-1 volume; gzip-compressed when the name ends in .gz.
inline void save_volume(const std::filesystem::path& path, const Volume& vol) {
    vol.validate();
    unsigned char hdr[detail::nifti_header_size + 4] = {};
    detail::put_field<std::int32_t>(hdr, 0, 348);
    const std::int16_t dims[8] = {3, static_cast<std::int16_t>(vol.shape[0]), static_cast<std::int16_t>(vol.shape[1]),
                                  static_cast<std::int16_t>(vol.shape[2]), 1, 1, 1, 1};
    for (std::size_t i = 0; i < 8; ++i) detail::put_field<std::int16_t>(hdr, 40 + 2 * i, dims[i]);
    detail::put_field<std::int16_t>(hdr, 70, 16);
    detail::put_field<std::int16_t>(hdr, 72, 32);
    for (std::size_t i = 0; i < 8; ++i) detail::put_field<float>(hdr, 76 + 4 * i, 1.0f);
    detail::put_field<float>(hdr, 108, 352.0f);
    detail::put_field<float>(hdr, 112, 1.0f);
    std::memcpy(hdr + 344, "n+1", 4);

    const bool gz = path.extension() == ".gz";
    detail::GzFile file(path, gz ? "wb" : "wbT");
    if (!file) throw Error("cannot create NIfTI file " + path.string());
    file.write(hdr, sizeof hdr);
    file.write(vol.voxels.data(), vol.voxels.size() * sizeof(float));
}

} // namespace mtkd
