#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace mtkd {

/// 8-bit single-channel raster, row-major.
struct Image8 {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> pixels;

    Image8() = default;
    Image8(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), pixels(h * w, fill) {}

    std::uint8_t& operator()(std::size_t r, std::size_t c) { return pixels[r * width + c]; }
    std::uint8_t operator()(std::size_t r, std::size_t c) const { return pixels[r * width + c]; }
    bool operator==(const Image8&) const = default;
};

/// Bilinear resampling with half-pixel centres (align_corners = false).
inline Image8 resize_bilinear(const Image8& src, std::size_t h, std::size_t w) {
    if (src.height == h && src.width == w) return src;
    Image8 out(h, w);
    const double sy = static_cast<double>(src.height) / static_cast<double>(h);
    const double sx = static_cast<double>(src.width) / static_cast<double>(w);
    for (std::size_t r = 0; r < h; ++r) {
        const double fy = std::max(0.0, (static_cast<double>(r) + 0.5) * sy - 0.5);
        const std::size_t y0 = std::min(static_cast<std::size_t>(fy), src.height - 1);
        const std::size_t y1 = std::min(y0 + 1, src.height - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t c = 0; c < w; ++c) {
            const double fx = std::max(0.0, (static_cast<double>(c) + 0.5) * sx - 0.5);
            const std::size_t x0 = std::min(static_cast<std::size_t>(fx), src.width - 1);
            const std::size_t x1 = std::min(x0 + 1, src.width - 1);
            const double wx = fx - static_cast<double>(x0);
            const double v = (1 - wy) * ((1 - wx) * src(y0, x0) + wx * src(y0, x1)) +
                             wy * ((1 - wx) * src(y1, x0) + wx * src(y1, x1));
            out(r, c) = static_cast<std::uint8_t>(std::min(255.0, std::floor(v + 0.5)));
        }
    }
    return out;
}

/// Nearest-neighbour resampling; preserves the value set (used for masks).
inline Image8 resize_nearest(const Image8& src, std::size_t h, std::size_t w) {
    if (src.height == h && src.width == w) return src;
    Image8 out(h, w);
    for (std::size_t r = 0; r < h; ++r) {
        const std::size_t y = std::min(src.height - 1, (2 * r + 1) * src.height / (2 * h));
        for (std::size_t c = 0; c < w; ++c) {
            const std::size_t x = std::min(src.width - 1, (2 * c + 1) * src.width / (2 * w));
            out(r, c) = src(y, x);
        }
    }
    return out;
}

} // namespace mtkd
