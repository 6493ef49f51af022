#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "mtkd/core/autograd.hpp"
#include "mtkd/core/log.hpp"
#include "mtkd/core/random.hpp"
#include "mtkd/data/image.hpp"
#include "mtkd/data/nifti.hpp"
#include "mtkd/data/png_io.hpp"

namespace mtkd {

namespace fs = std::filesystem;

/// Axis-aligned rectangle in pixel coordinates.
struct Rect {
    std::size_t top = 0, left = 0, height = 0, width = 0;
    bool contains(std::size_t r, std::size_t c) const {
        return r >= top && r < top + height && c >= left && c < left + width;
    }
    bool operator==(const Rect&) const = default;
};

/// One 2D slice: 8-bit image, optional binary mask ({0,1}) and identity.
struct SliceSample {
    Image8 image;
    std::optional<Image8> mask;
    std::string subject_id;
    std::size_t slice_index = 0;
    std::optional<Rect> rect;  // generating rectangle of synthetic samples

    bool operator==(const SliceSample&) const = default;
};

struct Dataset {
    std::vector<SliceSample> samples;

    std::size_t size() const noexcept { return samples.size(); }
    bool empty() const noexcept { return samples.empty(); }
    bool labeled() const {
        return std::all_of(samples.begin(), samples.end(), [](const SliceSample& s) { return s.mask.has_value(); });
    }
    /// Distinct subject ids in first-appearance order.
    std::vector<std::string> subjects() const {
        std::vector<std::string> out;
        std::set<std::string> seen;
        for (const auto& s : samples)
            if (seen.insert(s.subject_id).second) out.push_back(s.subject_id);
        return out;
    }
    std::array<std::size_t, 2> image_size() const {
        if (samples.empty()) throw Error("empty dataset has no image size");
        return {samples.front().image.height, samples.front().image.width};
    }
    bool operator==(const Dataset&) const = default;
};

enum class Split { train, test };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

struct DatasetSpec {
    fs::path source_dir;
    Split split = Split::train;
    double fraction = 1.0;
    std::uint64_t seed = 0;
    std::array<std::size_t, 2> image_size{256, 256};
    bool labeled = true;

    void validate() const {
        if (!(fraction > 0.0 && fraction <= 1.0)) throw Error("dataset fraction must lie in (0, 1], got " + std::to_string(fraction));
        if (image_size[0] == 0 || image_size[1] == 0) throw Error("dataset image size must be positive");
    }
};

/// Scales a volume to 8 bits with multiplier 255 / max voxel (round half up, clamped to
/// [0, 255]) and returns one sample per axial slice. A volume whose maximum is not positive
/// yields all-zero slices.
inline std::vector<SliceSample> volume_to_slices(const Volume& vol) {
    vol.validate();
    const float max_voxel = *std::max_element(vol.voxels.begin(), vol.voxels.end());
    const bool degenerate = !(max_voxel > 0.0f);
    if (degenerate) log().warn("volume {} has no positive voxel; emitting all-zero slices", vol.subject_id);
    const auto [h, w, d] = vol.shape;
    std::vector<SliceSample> out;
    out.reserve(d);
    for (std::size_t k = 0; k < d; ++k) {
        SliceSample s;
        s.subject_id = vol.subject_id;
        s.slice_index = k;
        s.image = Image8(h, w);
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < w; ++c) {
                double v = degenerate ? 0.0 : std::floor(static_cast<double>(vol.at(r, c, k)) * 255.0 / max_voxel + 0.5);
                s.image(r, c) = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
            }
        out.push_back(std::move(s));
    }
    return out;
}

/// Binary masks (label > 0) for every slice of a label volume.
inline std::vector<Image8> label_volume_to_masks(const Volume& labels) {
    labels.validate();
    const auto [h, w, d] = labels.shape;
    std::vector<Image8> out;
    for (std::size_t k = 0; k < d; ++k) {
        Image8 m(h, w);
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < w; ++c) m(r, c) = labels.at(r, c, k) > 0.0f ? 1 : 0;
        out.push_back(std::move(m));
    }
    return out;
}

inline std::string image_filename(const std::string& subject, std::size_t slice) {
    return "image_" + subject + "_" + std::to_string(slice) + ".png";
}
inline std::string mask_filename(const std::string& subject, std::size_t slice) {
    return "mask_" + subject + "_" + std::to_string(slice) + ".png";
}

/// Parses "<prefix>_<subject>_<slice>.png"; the slice number follows the last underscore so
/// subject ids may themselves contain underscores.
inline std::optional<std::pair<std::string, std::size_t>> parse_slice_filename(const std::string& name,
                                                                                const std::string& prefix) {
    const std::string head = prefix + "_";
    if (name.size() <= head.size() + 4 || name.compare(0, head.size(), head) != 0) return std::nullopt;
    if (name.compare(name.size() - 4, 4, ".png") != 0) return std::nullopt;
    const std::string core = name.substr(head.size(), name.size() - head.size() - 4);
    const auto us = core.rfind('_');
    if (us == std::string::npos || us == 0 || us + 1 == core.size()) return std::nullopt;
    std::size_t slice = 0;
    const char* first = core.data() + us + 1;
    const char* last = core.data() + core.size();
    auto [ptr, ec] = std::from_chars(first, last, slice);
    if (ec != std::errc{} || ptr != last) return std::nullopt;
    return std::make_pair(core.substr(0, us), slice);
}

/// Writes images/image_<subject>_<slice>.png and, for labelled samples,
/// masks/mask_<subject>_<slice>.png (mask stored as 0/255).
inline void export_slices(const std::vector<SliceSample>& samples, const fs::path& out_dir) {
    fs::create_directories(out_dir / "images");
    bool masks_dir = false;
    for (const auto& s : samples) {
        write_png_gray(out_dir / "images" / image_filename(s.subject_id, s.slice_index), s.image);
        if (s.mask) {
            if (!masks_dir) {
                fs::create_directories(out_dir / "masks");
                masks_dir = true;
            }
            Image8 m = *s.mask;
            for (auto& p : m.pixels) p = p ? 255 : 0;
            write_png_gray(out_dir / "masks" / mask_filename(s.subject_id, s.slice_index), m);
        }
    }
}

/// Subjects kept by a subject-level subsample: the sorted subject list is shuffled with a
/// mt19937_64 seeded from `seed` and the first max(1, round(fraction * n)) are kept.
inline std::set<std::string> select_subjects(std::vector<std::string> subjects, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw Error("fraction must lie in (0, 1], got " + std::to_string(fraction));
    std::sort(subjects.begin(), subjects.end());
    subjects.erase(std::unique(subjects.begin(), subjects.end()), subjects.end());
    if (fraction >= 1.0) return {subjects.begin(), subjects.end()};
    Rng rng(derive_seed(seed, stream::subsample));
    std::shuffle(subjects.begin(), subjects.end(), rng);
    const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(subjects.size()))));
    return {subjects.begin(), subjects.begin() + static_cast<std::ptrdiff_t>(std::min(keep, subjects.size()))};
}

/// Keeps whole subjects only; sample order is preserved.
inline Dataset subsample_by_subject(const Dataset& ds, double fraction, std::uint64_t seed) {
    const auto keep = select_subjects(ds.subjects(), fraction, seed);
    Dataset out;
    for (const auto& s : ds.samples)
        if (keep.count(s.subject_id)) out.samples.push_back(s);
    return out;
}

/// Holds out round(val_fraction * subjects) whole subjects (at least one when there are two or
/// more subjects) as a validation set. Returns (train, val).
inline std::pair<Dataset, Dataset> split_by_subject(const Dataset& ds, double val_fraction, std::uint64_t seed) {
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw Error("validation fraction must lie in [0, 1)");
    auto subjects = ds.subjects();
    std::sort(subjects.begin(), subjects.end());
    Rng rng(derive_seed(seed, stream::split));
    std::shuffle(subjects.begin(), subjects.end(), rng);
    std::size_t n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(subjects.size())));
    if (val_fraction > 0.0 && subjects.size() >= 2) n_val = std::clamp<std::size_t>(n_val, 1, subjects.size() - 1);
    const std::set<std::string> val(subjects.begin(), subjects.begin() + static_cast<std::ptrdiff_t>(n_val));
    Dataset train, validation;
    for (const auto& s : ds.samples) (val.count(s.subject_id) ? validation : train).samples.push_back(s);
    return {train, validation};
}

/// Loads a PNG slice corpus laid out as {images/, masks/}. When `source_dir/<split>` exists it is
/// used, otherwise `source_dir` itself. Samples are ordered by (subject, slice); images are
/// resized bilinearly and masks with nearest neighbour, then binarised at > 127.
inline Dataset build_dataset(const DatasetSpec& spec) {
    spec.validate();
    fs::path root = spec.source_dir;
    if (fs::is_directory(root / to_string(spec.split))) root /= to_string(spec.split);
    const fs::path images_dir = root / "images";
    const fs::path masks_dir = root / "masks";
    if (!fs::is_directory(images_dir)) throw Error("no images/ directory under " + root.string());

    std::map<std::pair<std::string, std::size_t>, fs::path> images;
    for (const auto& entry : fs::directory_iterator(images_dir)) {
        if (!entry.is_regular_file()) continue;
        const std::string name = entry.path().filename().string();
        auto key = parse_slice_filename(name, "image");
        if (!key) {
            log().warn("ignoring {}: name does not match image_<subject>_<slice>.png", name);
            continue;
        }
        images.emplace(*key, entry.path());
    }

    std::map<std::pair<std::string, std::size_t>, fs::path> masks;
    if (spec.labeled) {
        if (fs::is_directory(masks_dir)) {
            for (const auto& entry : fs::directory_iterator(masks_dir)) {
                if (!entry.is_regular_file()) continue;
                if (auto key = parse_slice_filename(entry.path().filename().string(), "mask")) masks.emplace(*key, entry.path());
            }
        }
        for (const auto& [key, path] : images) {
            if (!masks.count(key)) {
                throw Error("image without matching mask: " + path.filename().string() + " (expected masks/" +
                            mask_filename(key.first, key.second) + ")");
            }
        }
    }

    std::vector<std::string> subjects;
    for (const auto& [key, path] : images) subjects.push_back(key.first);
    const auto keep = select_subjects(subjects, spec.fraction, spec.seed);

    Dataset ds;
    const auto [h, w] = spec.image_size;
    for (const auto& [key, path] : images) {
        if (!keep.count(key.first)) continue;
        SliceSample s;
        s.subject_id = key.first;
        s.slice_index = key.second;
        s.image = resize_bilinear(read_png_gray(path), h, w);
        if (spec.labeled) {
            Image8 m = resize_nearest(read_png_gray(masks.at(key)), h, w);
            for (auto& p : m.pixels) p = p > 127 ? 1 : 0;
            s.mask = std::move(m);
        }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

struct PrepSummary {
    std::size_t subjects = 0;
    std::size_t skipped = 0;
    std::size_t slices = 0;
};

/// Converts a NIfTI corpus to the PNG slice layout. Volumes are read from imagesTr/ (or images/,
/// or the directory itself) and labels with the same file name from labelsTr/ (or labels/).
/// A subject whose label file is missing is skipped with a warning.
inline PrepSummary prepare_corpus(const fs::path& in_dir, const fs::path& out_dir, double fraction, std::uint64_t seed) {
    fs::path image_dir = in_dir;
    for (const char* candidate : {"imagesTr", "images"}) {
        if (fs::is_directory(in_dir / candidate)) {
            image_dir = in_dir / candidate;
            break;
        }
    }
    std::optional<fs::path> label_dir;
    for (const char* candidate : {"labelsTr", "labels"}) {
        if (fs::is_directory(in_dir / candidate)) {
            label_dir = in_dir / candidate;
            break;
        }
    }
    if (!fs::is_directory(image_dir)) throw Error("input directory " + in_dir.string() + " does not exist");

    std::vector<fs::path> volumes;
    for (const auto& entry : fs::directory_iterator(image_dir)) {
        const std::string name = entry.path().filename().string();
        if (entry.is_regular_file() && name[0] != '.' &&
            (name.ends_with(".nii") || name.ends_with(".nii.gz"))) {
            volumes.push_back(entry.path());
        }
    }
    std::sort(volumes.begin(), volumes.end());
    std::vector<std::string> ids;
    for (const auto& v : volumes) ids.push_back(nifti_subject_id(v));
    const auto keep = select_subjects(ids, fraction, seed);

    PrepSummary summary;
    for (const auto& path : volumes) {
        const std::string id = nifti_subject_id(path);
        if (!keep.count(id)) continue;
        auto vol = load_volume(path);
        if (!vol) {
            ++summary.skipped;
            continue;
        }
        auto samples = volume_to_slices(*vol);
        if (label_dir) {
            auto labels = load_volume(*label_dir / path.filename());
            if (!labels) {
                ++summary.skipped;
                continue;
            }
            if (labels->shape != vol->shape) throw FormatError("label volume shape differs from image for " + id);
            auto masks = label_volume_to_masks(*labels);
            for (std::size_t k = 0; k < samples.size(); ++k) samples[k].mask = std::move(masks[k]);
        }
        export_slices(samples, out_dir);
        ++summary.subjects;
        summary.slices += samples.size();
    }
    return summary;
}

/// Desk-scale corpus: each sample is one bright rectangle on a dark noisy background with the
/// mask equal to the rectangle footprint. Every sample is its own subject.
inline Dataset make_synthetic_dataset(std::size_t n, std::array<std::size_t, 2> size, std::uint64_t seed) {
    if (n == 0) throw Error("synthetic dataset needs at least one sample");
    const auto [h, w] = size;
    if (h < 4 || w < 4) throw Error("synthetic image size must be at least 4x4");
    Dataset ds;
    ds.samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(derive_seed(seed, stream::synthetic), i));
        auto uniform_int = [&rng](std::size_t lo, std::size_t hi) {
            return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
        };
        Rect rect;
        rect.height = uniform_int(std::max<std::size_t>(4, h / 8), std::max<std::size_t>(4, h / 2));
        rect.width = uniform_int(std::max<std::size_t>(4, w / 8), std::max<std::size_t>(4, w / 2));
        rect.top = uniform_int(0, h - rect.height);
        rect.left = uniform_int(0, w - rect.width);
        const double foreground = std::uniform_real_distribution<double>(110.0, 200.0)(rng);
        const double background = std::uniform_real_distribution<double>(20.0, 60.0)(rng);
        std::normal_distribution<double> noise(0.0, 25.0);

        SliceSample s;
        s.subject_id = fmt::format("synth{:04d}", i);
        s.slice_index = 0;
        s.image = Image8(h, w);
        s.mask = Image8(h, w);
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < w; ++c) {
                const bool inside = rect.contains(r, c);
                const double v = (inside ? foreground : background) + noise(rng);
                s.image(r, c) = static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
                (*s.mask)(r, c) = inside ? 1 : 0;
            }
        s.rect = rect;
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

/// Network-ready batch: images N x 3 x H x W in [0, 1] (grayscale replicated), masks N x 1 x H x W.
template <typename T>
struct Batch {
    Tensor<T> images;
    Tensor<T> masks;
    std::vector<std::size_t> indices;
};

template <typename T>
Batch<T> make_batch(const Dataset& ds, const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw Error("empty batch");
    const auto [h, w] = ds.image_size();
    const std::size_t n = indices.size(), hw = h * w;
    Batch<T> b;
    b.indices = indices;
    b.images = Tensor<T>({n, 3, h, w});
    const bool labeled = ds.samples[indices.front()].mask.has_value();
    if (labeled) b.masks = Tensor<T>({n, 1, h, w});
    for (std::size_t i = 0; i < n; ++i) {
        const SliceSample& s = ds.samples.at(indices[i]);
        if (s.image.height != h || s.image.width != w) throw ShapeError("dataset images differ in size");
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t p = 0; p < hw; ++p) b.images[(i * 3 + c) * hw + p] = static_cast<T>(s.image.pixels[p]) / T(255);
        if (labeled) {
            if (!s.mask) throw Error("batch mixes labelled and unlabelled samples");
            for (std::size_t p = 0; p < hw; ++p) b.masks[i * hw + p] = static_cast<T>(s.mask->pixels[p]);
        }
    }
    return b;
}

/// Sample order for one epoch: a seeded permutation, identical for identical (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(derive_seed(seed, stream::shuffle), epoch));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

/// Splits an order into consecutive batches; the last one may be short.
inline std::vector<std::vector<std::size_t>> chunk(const std::vector<std::size_t>& order, std::size_t batch_size) {
    if (batch_size == 0) throw Error("batch size must be positive");
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < order.size(); i += batch_size) {
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
    }
    return out;
}

} // namespace mtkd
