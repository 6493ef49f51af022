#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "mtkd/data/dataset.hpp"

namespace fs = std::filesystem;
using namespace mtkd;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("mtkd_data_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                            "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

Volume ramp_volume(std::size_t h, std::size_t w, std::size_t d, const std::string& id) {
    Volume v;
    v.subject_id = id;
    v.shape = {h, w, d};
    v.voxels.resize(h * w * d);
    for (std::size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = static_cast<float>(i) * 1.5f - 20.0f;
    return v;
}

// Writes a PNG corpus with `subjects` subjects of `slices` slices each.
void write_corpus(const fs::path& dir, std::size_t subjects, std::size_t slices, std::size_t size = 8) {
    std::vector<SliceSample> samples;
    for (std::size_t s = 0; s < subjects; ++s)
        for (std::size_t k = 0; k < slices; ++k) {
            SliceSample x;
            x.subject_id = "subj" + std::to_string(s);
            x.slice_index = k;
            x.image = Image8(size, size, static_cast<std::uint8_t>(10 * s + k));
            x.mask = Image8(size, size, 0);
            (*x.mask)(1, 1) = 1;
            samples.push_back(x);
        }
    export_slices(samples, dir);
}

} // namespace

TEST(Nifti, RoundTripPreservesShapeAndVoxels) {
    TempDir tmp;
    for (const char* name : {"vol.nii", "vol.nii.gz"}) {
        const Volume v = ramp_volume(8, 8, 3, "vol");
        save_volume(tmp.path / name, v);
        const auto back = load_volume(tmp.path / name);
        ASSERT_TRUE(back.has_value());
        EXPECT_EQ(back->shape, (std::array<std::size_t, 3>{8, 8, 3}));
        EXPECT_EQ(back->voxels, v.voxels);
        EXPECT_EQ(back->subject_id, "vol");
    }
}

TEST(Nifti, MissingFileIsSkippedNotFatal) {
    TempDir tmp;
    EXPECT_FALSE(load_volume(tmp.path / "absent.nii.gz").has_value());
}

TEST(Nifti, TruncatedFilesThrow) {
    TempDir tmp;
    {
        std::ofstream f(tmp.path / "short.nii", std::ios::binary);
        f << "not a header";
    }
    EXPECT_THROW(load_volume(tmp.path / "short.nii"), FormatError);

    save_volume(tmp.path / "full.nii", ramp_volume(8, 8, 3, "full"));
    fs::resize_file(tmp.path / "full.nii", 352 + 100);
    EXPECT_THROW(load_volume(tmp.path / "full.nii"), FormatError);
}

TEST(Slicing, IdentityScalingWhenMaxIs255) {
    Volume v;
    v.shape = {2, 2, 1};
    v.voxels = {0, 17, 128, 255};
    const auto s = volume_to_slices(v);
    ASSERT_EQ(s.size(), 1u);
    // Indexing h + H*w: (0,0)=0, (1,0)=17, (0,1)=128, (1,1)=255.
    EXPECT_EQ(s[0].image(0, 0), 0);
    EXPECT_EQ(s[0].image(1, 0), 17);
    EXPECT_EQ(s[0].image(0, 1), 128);
    EXPECT_EQ(s[0].image(1, 1), 255);
}

TEST(Slicing, ScalesByMaxVoxelRoundingHalfUp) {
    Volume v;
    v.shape = {1, 4, 1};
    v.voxels = {1000, 500, 2, 0};
    const auto s = volume_to_slices(v);
    EXPECT_EQ(s[0].image(0, 0), 255);
    EXPECT_EQ(s[0].image(0, 1), 128);  // 127.5 rounds up
    EXPECT_EQ(s[0].image(0, 2), 1);    // 0.51
    EXPECT_EQ(s[0].image(0, 3), 0);
}

TEST(Slicing, CountMonotonicityAndMax) {
    const Volume v = ramp_volume(5, 4, 7, "r");
    const auto s = volume_to_slices(v);
    ASSERT_EQ(s.size(), 7u);
    std::uint8_t prev = 0, top = 0;
    for (std::size_t k = 0; k < 7; ++k)
        for (std::size_t w = 0; w < 4; ++w)
            for (std::size_t h = 0; h < 5; ++h) {
                // the ramp increases with linear index, so scaled values must not decrease
                const auto p = s[k].image(h, w);
                EXPECT_GE(p, prev);
                prev = p;
                top = std::max(top, p);
            }
    EXPECT_EQ(top, 255);
}

TEST(Slicing, NonPositiveVolumeGivesZeros) {
    Volume v;
    v.shape = {2, 2, 2};
    v.voxels.assign(8, -3.0f);
    for (const auto& s : volume_to_slices(v))
        for (auto p : s.image.pixels) EXPECT_EQ(p, 0);
}

TEST(Filenames, SliceNumberFollowsLastUnderscore) {
    auto p = parse_slice_filename("image_spleen_12_34.png", "image");
    ASSERT_TRUE(p);
    EXPECT_EQ(p->first, "spleen_12");
    EXPECT_EQ(p->second, 34u);
    EXPECT_FALSE(parse_slice_filename("image_x.png", "image"));
    EXPECT_FALSE(parse_slice_filename("mask_a_1.png", "image"));
    EXPECT_FALSE(parse_slice_filename("image_a_1x.png", "image"));
}

TEST(Prep, VolumeToPngCorpusAndBack) {
    TempDir tmp;
    fs::create_directories(tmp.path / "in" / "imagesTr");
    fs::create_directories(tmp.path / "in" / "labelsTr");
    Volume v = ramp_volume(8, 6, 3, "spleen_1");
    save_volume(tmp.path / "in" / "imagesTr" / "spleen_1.nii.gz", v);
    Volume lab = v;
    for (auto& x : lab.voxels) x = x > 30.0f ? 1.0f : 0.0f;
    save_volume(tmp.path / "in" / "labelsTr" / "spleen_1.nii.gz", lab);
    // an image volume without labels is skipped
    save_volume(tmp.path / "in" / "imagesTr" / "spleen_2.nii.gz", v);

    const auto summary = prepare_corpus(tmp.path / "in", tmp.path / "out", 1.0, 0);
    EXPECT_EQ(summary.subjects, 1u);
    EXPECT_EQ(summary.skipped, 1u);
    EXPECT_EQ(summary.slices, 3u);

    std::set<std::string> names;
    for (const auto& e : fs::directory_iterator(tmp.path / "out" / "images")) names.insert(e.path().filename().string());
    EXPECT_EQ(names, (std::set<std::string>{"image_spleen_1_0.png", "image_spleen_1_1.png", "image_spleen_1_2.png"}));

    const auto expected = volume_to_slices(v);
    const auto masks = label_volume_to_masks(lab);
    DatasetSpec spec;
    spec.source_dir = tmp.path / "out";
    spec.image_size = {8, 6};
    const Dataset ds = build_dataset(spec);
    ASSERT_EQ(ds.size(), 3u);
    std::uint8_t top = 0;
    for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_EQ(ds.samples[k].image, expected[k].image);
        EXPECT_EQ(*ds.samples[k].mask, masks[k]);
        for (auto p : ds.samples[k].image.pixels) top = std::max(top, p);
    }
    EXPECT_EQ(top, 255);
}

TEST(BuildDataset, FullFractionKeepsEverything) {
    TempDir tmp;
    write_corpus(tmp.path, 3, 4);
    DatasetSpec spec;
    spec.source_dir = tmp.path;
    spec.image_size = {8, 8};
    const Dataset ds = build_dataset(spec);
    EXPECT_EQ(ds.size(), 12u);
    // ordered by (subject, slice)
    EXPECT_EQ(ds.samples[0].subject_id, "subj0");
    EXPECT_EQ(ds.samples[3].slice_index, 3u);
    EXPECT_EQ(ds.samples[4].subject_id, "subj1");
}

TEST(BuildDataset, HalfFractionKeepsWholeSubjectsDeterministically) {
    TempDir tmp;
    write_corpus(tmp.path, 4, 10);
    DatasetSpec spec;
    spec.source_dir = tmp.path;
    spec.image_size = {8, 8};
    spec.fraction = 0.5;
    spec.seed = 42;
    const Dataset a = build_dataset(spec);
    const Dataset b = build_dataset(spec);
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.size(), 20u);
    EXPECT_EQ(a.subjects().size(), 2u);
    std::map<std::string, int> per_subject;
    for (const auto& s : a.samples) ++per_subject[s.subject_id];
    for (const auto& [id, n] : per_subject) EXPECT_EQ(n, 10) << id;

    // across seeds, more than one subject pair is chosen
    std::set<std::vector<std::string>> choices;
    for (std::uint64_t seed = 0; seed < 16; ++seed) {
        spec.seed = seed;
        auto subj = build_dataset(spec).subjects();
        std::sort(subj.begin(), subj.end());
        choices.insert(subj);
    }
    EXPECT_GT(choices.size(), 1u);
}

TEST(BuildDataset, OrphanImageIsNamed) {
    TempDir tmp;
    write_corpus(tmp.path, 1, 2);
    write_png_gray(tmp.path / "images" / "image_lonely_7.png", Image8(8, 8));
    DatasetSpec spec;
    spec.source_dir = tmp.path;
    spec.image_size = {8, 8};
    try {
        build_dataset(spec);
        FAIL() << "expected an orphan error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("image_lonely_7.png"), std::string::npos) << e.what();
    }
    spec.labeled = false;
    EXPECT_EQ(build_dataset(spec).size(), 3u);
}

TEST(BuildDataset, ResizesAndBinarisesMasks) {
    TempDir tmp;
    fs::create_directories(tmp.path / "train" / "images");
    fs::create_directories(tmp.path / "train" / "masks");
    Image8 img(4, 4, 200);
    Image8 mask(4, 4, 0);
    mask(0, 0) = 255;
    mask(3, 3) = 100;  // below threshold
    write_png_gray(tmp.path / "train" / "images" / "image_a_0.png", img);
    write_png_gray(tmp.path / "train" / "masks" / "mask_a_0.png", mask);
    DatasetSpec spec;
    spec.source_dir = tmp.path;
    spec.image_size = {8, 8};
    const Dataset ds = build_dataset(spec);
    ASSERT_EQ(ds.size(), 1u);
    EXPECT_EQ(ds.samples[0].image.height, 8u);
    for (auto p : ds.samples[0].image.pixels) EXPECT_EQ(p, 200);
    const Image8& m = *ds.samples[0].mask;
    EXPECT_EQ(m(0, 0), 1);
    EXPECT_EQ(m(1, 1), 1);
    EXPECT_EQ(m(2, 2), 0);
    EXPECT_EQ(m(7, 7), 0);
}

TEST(BuildDataset, InvalidFractionRejected) {
    DatasetSpec spec;
    spec.fraction = 0.0;
    EXPECT_THROW(spec.validate(), Error);
    spec.fraction = 1.5;
    EXPECT_THROW(spec.validate(), Error);
}

TEST(Synthetic, DeterministicAndCounted) {
    const Dataset a = make_synthetic_dataset(10, {64, 64}, 0);
    const Dataset b = make_synthetic_dataset(10, {64, 64}, 0);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, make_synthetic_dataset(10, {64, 64}, 1));
    EXPECT_EQ(make_synthetic_dataset(200, {16, 16}, 3).size(), 200u);
    EXPECT_THROW(make_synthetic_dataset(1, {3, 64}, 0), Error);
    EXPECT_THROW(make_synthetic_dataset(0, {64, 64}, 0), Error);
}

TEST(Synthetic, MaskIsExactlyTheRectangle) {
    const Dataset ds = make_synthetic_dataset(25, {32, 48}, 9);
    for (const auto& s : ds.samples) {
        ASSERT_TRUE(s.rect && s.mask);
        const Rect r = *s.rect;
        EXPECT_GE(r.height, 4u);
        EXPECT_GE(r.width, 4u);
        EXPECT_LE(r.top + r.height, 32u);
        EXPECT_LE(r.left + r.width, 48u);
        double in = 0, out = 0;
        std::size_t n_in = 0;
        for (std::size_t y = 0; y < 32; ++y)
            for (std::size_t x = 0; x < 48; ++x) {
                const bool inside = y >= r.top && y < r.top + r.height && x >= r.left && x < r.left + r.width;
                EXPECT_EQ((*s.mask)(y, x), inside ? 1 : 0);
                (inside ? in : out) += s.image(y, x);
                n_in += inside;
            }
        EXPECT_GT(in / static_cast<double>(n_in), out / static_cast<double>(32 * 48 - n_in));
    }
}

TEST(Batches, ReplicatedChannelsAndSeededOrder) {
    const Dataset ds = make_synthetic_dataset(5, {8, 8}, 1);
    const auto b = make_batch<float>(ds, {2, 0});
    EXPECT_EQ(b.images.shape(), (Shape{2, 3, 8, 8}));
    EXPECT_EQ(b.masks.shape(), (Shape{2, 1, 8, 8}));
    for (std::size_t c = 0; c < 3; ++c) EXPECT_FLOAT_EQ(b.images.at(0, c, 3, 4), ds.samples[2].image(3, 4) / 255.0f);
    EXPECT_FLOAT_EQ(b.masks.at(1, 0, 5, 5), (*ds.samples[0].mask)(5, 5));

    EXPECT_EQ(epoch_order(50, 7, 2), epoch_order(50, 7, 2));
    EXPECT_NE(epoch_order(50, 7, 2), epoch_order(50, 7, 3));
    auto order = epoch_order(50, 7, 0);
    std::sort(order.begin(), order.end());
    for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(order[i], i);
    const auto chunks = chunk(epoch_order(10, 1, 0), 4);
    ASSERT_EQ(chunks.size(), 3u);
    EXPECT_EQ(chunks[2].size(), 2u);
}

TEST(Splits, SubjectsNeverStraddle) {
    Dataset ds;
    for (int s = 0; s < 10; ++s)
        for (int k = 0; k < 3; ++k) {
            SliceSample x;
            x.subject_id = "s" + std::to_string(s);
            x.slice_index = static_cast<std::size_t>(k);
            x.image = Image8(2, 2);
            ds.samples.push_back(x);
        }
    const auto [train, val] = split_by_subject(ds, 0.1, 5);
    EXPECT_EQ(val.subjects().size(), 1u);
    EXPECT_EQ(train.size() + val.size(), 30u);
    const auto train_subjects = train.subjects();
    const std::set<std::string> tr(train_subjects.begin(), train_subjects.end());
    for (const auto& id : val.subjects()) EXPECT_FALSE(tr.count(id));

    for (double f : {0.25, 0.5, 0.8}) {
        const Dataset sub = subsample_by_subject(ds, f, 11);
        std::map<std::string, int> count;
        for (const auto& s : sub.samples) ++count[s.subject_id];
        for (const auto& [id, n] : count) EXPECT_EQ(n, 3);
    }
}
