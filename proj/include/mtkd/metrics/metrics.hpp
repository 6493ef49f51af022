#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "mtkd/data/dataset.hpp"
#include "mtkd/models/networks.hpp"

namespace mtkd {

struct ConfusionCounts {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;

    std::size_t total() const noexcept { return tp + fp + fn + tn; }
    bool operator==(const ConfusionCounts&) const = default;
};

/// Pixelwise tallies of two binary masks (values 0/1).
template <typename Range>
ConfusionCounts confusion_counts(const Range& pred, const Range& gt) {
    if (std::size(pred) != std::size(gt)) throw ShapeError("confusion_counts: mask sizes differ");
    ConfusionCounts c;
    auto g = std::begin(gt);
    for (auto p = std::begin(pred); p != std::end(pred); ++p, ++g) {
        const auto pv = *p, gv = *g;
        if ((pv != 0 && pv != 1) || (gv != 0 && gv != 1)) throw Error("confusion_counts: masks must be binary {0,1}");
        if (pv == 1) (gv == 1 ? c.tp : c.fp)++;
        else (gv == 1 ? c.fn : c.tn)++;
    }
    return c;
}

inline ConfusionCounts confusion_counts(const Image8& pred, const Image8& gt) {
    if (pred.height != gt.height || pred.width != gt.width) {
        throw ShapeError(fmt::format("confusion_counts: {}x{} vs {}x{}", pred.height, pred.width, gt.height, gt.width));
    }
    return confusion_counts(pred.pixels, gt.pixels);
}

// Empty denominators mean both masks agree on "nothing here"; they score 1.
inline double iou(const ConfusionCounts& c) {
    const std::size_t d = c.tp + c.fp + c.fn;
    return d == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(d);
}
inline double dice_coef(const ConfusionCounts& c) {
    const std::size_t d = 2 * c.tp + c.fp + c.fn;
    return d == 0 ? 1.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(d);
}
inline double precision(const ConfusionCounts& c) {
    const std::size_t d = c.tp + c.fp;
    return d == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(d);
}
inline double recall(const ConfusionCounts& c) {
    const std::size_t d = c.tp + c.fn;
    return d == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(d);
}

/// Peak signal-to-noise ratio in dB; +inf for identical inputs.
template <typename Range>
double psnr(const Range& recon, const Range& image, double max_value = 255.0) {
    if (std::size(recon) != std::size(image)) throw ShapeError("psnr: sizes differ");
    if (std::size(recon) == 0) throw Error("psnr: empty input");
    double se = 0.0;
    auto b = std::begin(image);
    for (auto a = std::begin(recon); a != std::end(recon); ++a, ++b) {
        const double d = static_cast<double>(*a) - static_cast<double>(*b);
        se += d * d;
    }
    const double mse = se / static_cast<double>(std::size(recon));
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(max_value * max_value / mse);
}

struct ImageMetrics {
    std::string id;
    double iou = 0, dice = 0, precision = 0, recall = 0;
    std::optional<double> psnr;
};

struct MetricsSummary {
    double iou = 0, dice = 0, precision = 0, recall = 0;
    std::optional<double> psnr;  // mean over finite values
    std::size_t n_images = 0;
};

struct MetricsReport {
    std::vector<ImageMetrics> per_image;
    MetricsSummary aggregate;
};

inline MetricsSummary aggregate_metrics(const std::vector<ImageMetrics>& rows) {
    MetricsSummary s;
    s.n_images = rows.size();
    if (rows.empty()) return s;
    double psnr_sum = 0;
    std::size_t psnr_n = 0;
    for (const auto& r : rows) {
        s.iou += r.iou;
        s.dice += r.dice;
        s.precision += r.precision;
        s.recall += r.recall;
        if (r.psnr && std::isfinite(*r.psnr)) {
            psnr_sum += *r.psnr;
            ++psnr_n;
        }
    }
    const double n = static_cast<double>(rows.size());
    s.iou /= n;
    s.dice /= n;
    s.precision /= n;
    s.recall /= n;
    if (psnr_n) s.psnr = psnr_sum / static_cast<double>(psnr_n);
    return s;
}

/// Per-image metrics of sigmoid(logits) > threshold against the dataset masks. Reconstruction
/// PSNR (on the 8-bit scale, channel 0) is added for models that have a reconstruction head.
template <typename T>
MetricsReport evaluate_model(SegmentationModel<T>& model, const Dataset& ds, double threshold = 0.5,
                             std::size_t batch_size = 8) {
    if (ds.empty()) throw Error("evaluate_model: empty dataset");
    if (!ds.labeled()) throw Error("evaluate_model: dataset has no masks");
    if (!(threshold > 0.0 && threshold < 1.0)) throw Error("evaluate_model: threshold must lie in (0, 1)");
    // Probability > threshold is equivalent to logit > logit(threshold).
    const double logit_threshold = std::log(threshold / (1.0 - threshold));
    const bool was_training = model.training();
    model.set_training(false);
    NoGradGuard no_grad;

    MetricsReport report;
    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (const auto& idx : chunk(order, batch_size)) {
        const Batch<T> batch = make_batch<T>(ds, idx);
        const ForwardOutput<T> out = model.forward(Var<T>(batch.images));
        const std::size_t h = batch.images.shape()[2], w = batch.images.shape()[3], hw = h * w;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const SliceSample& s = ds.samples[idx[i]];
            std::vector<std::uint8_t> pred(hw);
            for (std::size_t p = 0; p < hw; ++p) pred[p] = out.seg_logits.value()[i * hw + p] > logit_threshold ? 1 : 0;
            const ConfusionCounts c = confusion_counts(pred, s.mask->pixels);
            ImageMetrics m{s.subject_id + "_" + std::to_string(s.slice_index), iou(c), dice_coef(c), precision(c), recall(c), {}};
            if (out.recon) {
                std::vector<double> rec(hw);
                for (std::size_t p = 0; p < hw; ++p) {
                    rec[p] = std::clamp(static_cast<double>(out.recon->value()[i * 3 * hw + p]), 0.0, 1.0) * 255.0;
                }
                m.psnr = psnr(rec, std::vector<double>(s.image.pixels.begin(), s.image.pixels.end()));
            }
            report.per_image.push_back(std::move(m));
        }
    }
    model.set_training(was_training);
    report.aggregate = aggregate_metrics(report.per_image);
    return report;
}

inline nlohmann::json summary_json(const MetricsSummary& s) {
    nlohmann::json j{{"iou", s.iou}, {"dice", s.dice}, {"recall", s.recall}, {"precision", s.precision}, {"n_images", s.n_images}};
    if (s.psnr) j["psnr"] = *s.psnr;
    return j;
}

inline MetricsSummary summary_from_json(const nlohmann::json& j) {
    MetricsSummary s;
    s.iou = j.at("iou").get<double>();
    s.dice = j.at("dice").get<double>();
    s.recall = j.at("recall").get<double>();
    s.precision = j.at("precision").get<double>();
    s.n_images = j.at("n_images").get<std::size_t>();
    if (j.contains("psnr")) s.psnr = j.at("psnr").get<double>();
    return s;
}

/// Per-image CSV: id,iou,dice,precision,recall[,psnr].
inline void write_metrics_csv(const MetricsReport& report, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    const bool with_psnr = !report.per_image.empty() && report.per_image.front().psnr.has_value();
    out << "id,iou,dice,precision,recall" << (with_psnr ? ",psnr" : "") << '\n';
    for (const auto& r : report.per_image) {
        out << fmt::format("{},{:.9g},{:.9g},{:.9g},{:.9g}", r.id, r.iou, r.dice, r.precision, r.recall);
        if (with_psnr) out << fmt::format(",{:.9g}", r.psnr.value_or(0.0));
        out << '\n';
    }
}

inline void write_metrics_json(const MetricsSummary& summary, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << summary_json(summary).dump(2) << '\n';
}

} // namespace mtkd
