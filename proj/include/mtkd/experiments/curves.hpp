#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include "mtkd/data/png_io.hpp"
#include "mtkd/distill/trainer.hpp"

namespace mtkd {

struct CurveFiles {
    std::filesystem::path csv;
    std::optional<std::filesystem::path> plot;
};

namespace detail {

inline void draw_line(RgbImage& img, double x0, double y0, double x1, double y1, std::array<std::uint8_t, 3> rgb, int thickness = 1) {
    const double steps = std::max({std::abs(x1 - x0), std::abs(y1 - y0), 1.0});
    for (int i = 0; i <= static_cast<int>(steps); ++i) {
        const double t = i / steps;
        const auto x = static_cast<std::ptrdiff_t>(std::lround(x0 + t * (x1 - x0)));
        const auto y = static_cast<std::ptrdiff_t>(std::lround(y0 + t * (y1 - y0)));
        for (int dy = 0; dy < thickness; ++dy)
            for (int dx = 0; dx < thickness; ++dx) img.set(y + dy, x + dx, rgb);
    }
}

} // namespace detail

/// Loss-vs-epoch plot: training total in blue, validation total in orange, light grid at
/// quarters of each axis. The y axis starts at 0.
inline void plot_training_curves(const TrainingRecord& r, const std::filesystem::path& path, std::size_t width = 640,
                                 std::size_t height = 400) {
    if (r.empty()) throw Error("cannot plot an empty training record");
    RgbImage img(height, width);
    const double left = 50, right = static_cast<double>(width) - 20, top = 20, bottom = static_cast<double>(height) - 40;
    double y_max = 0.0;
    for (const auto& row : r.rows) {
        y_max = std::max(y_max, row.train.total);
        if (row.val) y_max = std::max(y_max, row.val->total);
    }
    if (!(y_max > 0.0) || !std::isfinite(y_max)) y_max = 1.0;
    y_max *= 1.05;
    const double n = static_cast<double>(r.rows.size());
    auto px = [&](double epoch) { return n <= 1 ? (left + right) / 2 : left + (epoch - 1) / (n - 1) * (right - left); };
    auto py = [&](double v) { return bottom - std::clamp(v / y_max, 0.0, 1.0) * (bottom - top); };

    const std::array<std::uint8_t, 3> grid{225, 225, 225}, axis{0, 0, 0}, blue{31, 119, 180}, orange{255, 127, 14};
    for (int q = 1; q <= 4; ++q) {
        const double y = bottom - q * (bottom - top) / 4, x = left + q * (right - left) / 4;
        detail::draw_line(img, left, y, right, y, grid);
        detail::draw_line(img, x, top, x, bottom, grid);
    }
    detail::draw_line(img, left, bottom, right, bottom, axis, 2);
    detail::draw_line(img, left, top, left, bottom, axis, 2);

    for (std::size_t i = 0; i < r.rows.size(); ++i) {
        const auto& row = r.rows[i];
        const double x = px(static_cast<double>(row.epoch));
        if (i > 0) {
            const auto& prev = r.rows[i - 1];
            const double xp = px(static_cast<double>(prev.epoch));
            detail::draw_line(img, xp, py(prev.train.total), x, py(row.train.total), blue, 2);
            if (row.val && prev.val) detail::draw_line(img, xp, py(prev.val->total), x, py(row.val->total), orange, 2);
        } else {
            detail::draw_line(img, x - 2, py(row.train.total), x + 2, py(row.train.total), blue, 2);
            if (row.val) detail::draw_line(img, x - 2, py(row.val->total), x + 2, py(row.val->total), orange, 2);
        }
    }
    // legend swatches: train (blue), validation (orange)
    for (int k = 0; k < 2; ++k) {
        const double x = right - 90 + 50 * k;
        for (int t = 0; t < 10; ++t) detail::draw_line(img, x, top + t, x + 30, top + t, k == 0 ? blue : orange);
    }
    write_png_rgb(path, img);
}

/// Writes <stem>.csv (always) and <stem>.png (when `plot`) into out_dir.
inline CurveFiles emit_training_curves(const TrainingRecord& r, const std::filesystem::path& out_dir, const std::string& stem = "curves",
                                       bool plot = true) {
    if (r.empty()) throw Error("training record is empty");
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec || !std::filesystem::is_directory(out_dir)) throw Error("cannot create output directory " + out_dir.string());
    CurveFiles files;
    files.csv = out_dir / (stem + ".csv");
    write_record_csv(r, files.csv);
    if (plot) {
        files.plot = out_dir / (stem + ".png");
        plot_training_curves(r, *files.plot);
    }
    return files;
}

} // namespace mtkd
