#pragma once

#include <array>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <png.h>

#include "mtkd/core/error.hpp"
#include "mtkd/data/image.hpp"

namespace mtkd {

/// Reads any PNG as 8-bit grayscale.
inline Image8 read_png_gray(const std::filesystem::path& path) {
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
        throw FormatError("cannot read PNG " + path.string() + ": " + image.message);
    }
    image.format = PNG_FORMAT_GRAY;
    Image8 out(image.height, image.width);
    if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
        const std::string msg = image.message;
        png_image_free(&image);
        throw FormatError("cannot decode PNG " + path.string() + ": " + msg);
    }
    return out;
}

namespace detail {
inline void write_png(const std::filesystem::path& path, png_uint_32 h, png_uint_32 w, png_uint_32 format,
                      const void* data) {
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    image.width = w;
    image.height = h;
    image.format = format;
    if (!png_image_write_to_file(&image, path.string().c_str(), 0, data, 0, nullptr)) {
        throw Error("cannot write PNG " + path.string() + ": " + image.message);
    }
}
} // namespace detail

inline void write_png_gray(const std::filesystem::path& path, const Image8& img) {
    detail::write_png(path, static_cast<png_uint_32>(img.height), static_cast<png_uint_32>(img.width), PNG_FORMAT_GRAY,
                      img.pixels.data());
}

/// Interleaved 8-bit RGB raster.
struct RgbImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> pixels;

    RgbImage(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w * 3, 255) {}
    void set(std::ptrdiff_t r, std::ptrdiff_t c, std::array<std::uint8_t, 3> rgb) {
        if (r < 0 || c < 0 || r >= static_cast<std::ptrdiff_t>(height) || c >= static_cast<std::ptrdiff_t>(width)) return;
        std::copy(rgb.begin(), rgb.end(), pixels.begin() + (static_cast<std::size_t>(r) * width + static_cast<std::size_t>(c)) * 3);
    }
};

inline void write_png_rgb(const std::filesystem::path& path, const RgbImage& img) {
    detail::write_png(path, static_cast<png_uint_32>(img.height), static_cast<png_uint_32>(img.width), PNG_FORMAT_RGB,
                      img.pixels.data());
}

} // namespace mtkd
