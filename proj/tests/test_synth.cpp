#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "protomargin/dataset.hpp"
#include "protomargin/synth.hpp"

using namespace protomargin;
using namespace protomargin::synth;
namespace fs = std::filesystem;

namespace {

LesionSpec circ_spec() {
    LesionSpec s;
    s.margin_class = kCircumscribed;
    s.center_x = 58;
    s.center_y = 60;
    s.radius_a = 15;
    s.radius_b = 12;
    s.orientation = 0.4;
    s.edge_blur_sigma = 0.6;
    s.background_texture_seed = 99;
    return s;
}

LesionSpec spic_spec() {
    LesionSpec s = circ_spec();
    s.margin_class = kSpiculated;
    s.spicule_count = 9;
    s.spicule_length = 10;
    return s;
}

std::vector<unsigned char> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(GenerateSample, DeterministicForFixedSeed) {
    const SynthSample a = generate_sample(circ_spec(), 1234);
    const SynthSample b = generate_sample(circ_spec(), 1234);
    ASSERT_EQ(a.image.px.size(), b.image.px.size());
    EXPECT_EQ(std::memcmp(a.image.px.data(), b.image.px.data(),
                          a.image.px.size() * sizeof(double)), 0);
    EXPECT_EQ(std::memcmp(a.lesion_mask.px.data(), b.lesion_mask.px.data(),
                          a.lesion_mask.px.size() * sizeof(double)), 0);
    EXPECT_EQ(std::memcmp(a.fine_mask.px.data(), b.fine_mask.px.data(),
                          a.fine_mask.px.size() * sizeof(double)), 0);
    EXPECT_EQ(a.y_mal, b.y_mal);
}

TEST(GenerateSample, MasksShareImageDims) {
    const SynthSample s = generate_sample(circ_spec(), 5);
    EXPECT_EQ(s.image.width, kImageSize);
    EXPECT_EQ(s.lesion_mask.width, s.image.width);
    EXPECT_EQ(s.fine_mask.height, s.image.height);
    for (double v : s.image.px) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(GenerateSample, SpiculatedPixelsAreFineRelevant) {
    const LesionSpec spec = spic_spec();
    const SynthSample s = generate_sample(spec, 77);
    std::size_t fine_relevant = 0;
    for (double v : s.fine_mask.px)
        if (v == 0.0) ++fine_relevant;
    EXPECT_GT(fine_relevant, 0u);

    // every lesion pixel outside the ellipse is a spicule pixel and must be
    // marked relevant in the fine mask
    const double cw = std::cos(spec.orientation), sw = std::sin(spec.orientation);
    std::size_t outside_ellipse_lesion = 0;
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x) {
            if (s.lesion_mask.at(y, x) != 0.0) continue;
            const double rx = x - spec.center_x, ry = y - spec.center_y;
            const double ux = (rx * cw + ry * sw) / spec.radius_a;
            const double uy = (-rx * sw + ry * cw) / spec.radius_b;
            if (ux * ux + uy * uy <= 1.0) continue;
            ++outside_ellipse_lesion;
            EXPECT_EQ(s.fine_mask.at(y, x), 0.0) << "spicule pixel at " << y << "," << x;
        }
    EXPECT_GT(outside_ellipse_lesion, 0u);
}

TEST(GenerateSample, FineBandHugsLesionBoundary) {
    const SynthSample s = generate_sample(circ_spec(), 31);
    // boundary of the lesion region
    Image boundary(kImageSize, kImageSize);
    for (int y = 1; y < kImageSize - 1; ++y)
        for (int x = 1; x < kImageSize - 1; ++x) {
            if (s.lesion_mask.at(y, x) != 0.0) continue;
            if (s.lesion_mask.at(y, x - 1) != 0.0 || s.lesion_mask.at(y, x + 1) != 0.0 ||
                s.lesion_mask.at(y - 1, x) != 0.0 || s.lesion_mask.at(y + 1, x) != 0.0)
                boundary.at(y, x) = 1.0;
        }
    const Image d2 = squared_distance_transform(boundary);
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x)
            if (s.fine_mask.at(y, x) == 0.0)
                EXPECT_LE(d2.at(y, x), (kFineBandRadius + 1.0) * (kFineBandRadius + 1.0))
                    << "fine-relevant pixel far from boundary";
}

TEST(GenerateSample, MalignancyRatesMatchClassConditionals) {
    SeedStreams streams(2024);
    std::array<double, 3> rates{};
    std::array<int, 3> counts{};
    for (int c = 0; c < 3; ++c) {
        const int n = c == 0 ? 334 : 333;
        for (int i = 0; i < n; ++i) {
            Rng rng = streams.stream("mc", static_cast<std::uint64_t>(c) * 1000 + i);
            const LesionSpec spec = random_spec(c, rng);
            const SynthSample s = generate_sample(spec, rng());
            rates[static_cast<std::size_t>(c)] += s.y_mal;
            ++counts[static_cast<std::size_t>(c)];
        }
    }
    EXPECT_NEAR(rates[0] / counts[0], 0.1, 0.05);
    EXPECT_NEAR(rates[1] / counts[1], 0.6, 0.05);
    EXPECT_NEAR(rates[2] / counts[2], 0.9, 0.05);
}

TEST(GenerateSample, RejectsInvalidSpecs) {
    LesionSpec bad = circ_spec();
    bad.spicule_count = 3;  // spicules on a non-spiculated class
    EXPECT_THROW(validate_spec(bad), std::invalid_argument);

    bad = circ_spec();
    bad.center_x = 10;  // violates the 8 px border
    EXPECT_THROW(validate_spec(bad), std::invalid_argument);

    bad = spic_spec();
    bad.spicule_count = 0;
    EXPECT_THROW(validate_spec(bad), std::invalid_argument);
}

TEST(Augment, IdentityParamsLeaveSampleUnchanged) {
    const SynthSample s = generate_sample(circ_spec(), 8);
    const SynthSample t = apply_augment(s, AugmentParams::identity());
    EXPECT_EQ(std::memcmp(s.image.px.data(), t.image.px.data(),
                          s.image.px.size() * sizeof(double)), 0);
    EXPECT_EQ(std::memcmp(s.fine_mask.px.data(), t.fine_mask.px.data(),
                          s.fine_mask.px.size() * sizeof(double)), 0);
}

TEST(Augment, FlipKeepsImageAndMasksRegistered) {
    const SynthSample s = generate_sample(spic_spec(), 9);
    AugmentParams p = AugmentParams::identity();
    p.flip_h = true;
    const SynthSample t = apply_augment(s, p);
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x) {
            EXPECT_DOUBLE_EQ(t.image.at(y, x), s.image.at(y, kImageSize - 1 - x));
            EXPECT_DOUBLE_EQ(t.lesion_mask.at(y, x), s.lesion_mask.at(y, kImageSize - 1 - x));
            EXPECT_DOUBLE_EQ(t.fine_mask.at(y, x), s.fine_mask.at(y, kImageSize - 1 - x));
        }
    EXPECT_EQ(t.y_margin, s.y_margin);
    EXPECT_EQ(t.y_mal, s.y_mal);
}

TEST(Augment, RotationKeepsMasksRegisteredWithImage) {
    const SynthSample s = generate_sample(circ_spec(), 10);
    Rng rng(555);
    const AugmentParams p = draw_augment_params(rng);
    const SynthSample t = apply_augment(s, p);
    // lesion-mask centroid must track the bright-lesion centroid
    double mx = 0, my = 0, mn = 0, ix = 0, iy = 0, in = 0;
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x) {
            if (t.lesion_mask.at(y, x) == 0.0) {
                mx += x;
                my += y;
                mn += 1;
            }
            const double w = std::max(0.0, t.image.at(y, x) - 0.3);
            ix += w * x;
            iy += w * y;
            in += w;
        }
    ASSERT_GT(mn, 0.0);
    ASSERT_GT(in, 0.0);
    EXPECT_NEAR(mx / mn, ix / in, 3.0);
    EXPECT_NEAR(my / mn, iy / in, 3.0);
}

TEST(Augment, CropDimsFollowEightyPercentRule) {
    Rng rng(77);
    const AugmentParams p = draw_augment_params(rng, 0.8);
    EXPECT_EQ(p.crop_size, 90);  // round(0.8 * 112)
}

TEST(Confounder, StrengthZeroLeavesSampleUnchanged) {
    const SynthSample s = generate_sample(circ_spec(), 11);
    Rng rng(1);
    const SynthSample t = inject_confounder(s, 0.0, rng);
    EXPECT_EQ(std::memcmp(s.image.px.data(), t.image.px.data(),
                          s.image.px.size() * sizeof(double)), 0);
    EXPECT_FALSE(t.confounder_flag);
}

TEST(Confounder, StrengthOneAlwaysStampsClassGlyph) {
    for (int c = 0; c < 3; ++c) {
        Rng rng(static_cast<std::uint64_t>(c) + 5);
        const LesionSpec spec = random_spec(c, rng);
        SynthSample s = generate_sample(spec, rng());
        Rng crng(42);
        const SynthSample t = inject_confounder(s, 1.0, crng);
        EXPECT_TRUE(t.confounder_flag);
        double diff = 0;
        for (std::size_t i = 0; i < s.image.px.size(); ++i)
            diff += std::abs(t.image.px[i] - s.image.px[i]);
        EXPECT_GT(diff, 1.0);
    }
}

TEST(Confounder, GlyphPixelsNeverFineRelevant) {
    for (int c = 0; c < 3; ++c)
        for (int trial = 0; trial < 10; ++trial) {
            Rng rng(static_cast<std::uint64_t>(c) * 100 + trial);
            const LesionSpec spec = random_spec(c, rng);
            SynthSample s = generate_sample(spec, rng());
            Rng crng(trial);
            const SynthSample t = inject_confounder(s, 1.0, crng);
            for (int y = kGlyphOrigin; y < kGlyphOrigin + kGlyphSize; ++y)
                for (int x = kGlyphOrigin; x < kGlyphOrigin + kGlyphSize; ++x)
                    if (t.image.at(y, x) == 0.95) EXPECT_EQ(t.fine_mask.at(y, x), 1.0);
        }
}

TEST(WriteDataset, HundredSamplesSplitAtPaperRatios) {
    std::vector<int> class_counts = {100};
    const auto counts = stratified_split_counts(class_counts, kDefaultSplitRatios);
    EXPECT_EQ(counts[0][0], 73);
    EXPECT_EQ(counts[0][1], 12);
    EXPECT_EQ(counts[0][2], 15);
}

TEST(WriteDataset, DefaultCorpusSplitsTo600_100_125) {
    const auto counts = stratified_split_counts({275, 275, 275}, kDefaultSplitRatios);
    int train = 0, val = 0, test = 0;
    for (const auto& c : counts) {
        train += c[0];
        val += c[1];
        test += c[2];
    }
    EXPECT_EQ(train, 600);
    EXPECT_EQ(val, 100);
    EXPECT_EQ(test, 125);
}

TEST(WriteDataset, StratificationWithinOneSampleOfGlobalRatios) {
    const std::vector<int> class_counts = {57, 113, 85};
    const auto counts = stratified_split_counts(class_counts, kDefaultSplitRatios);
    for (std::size_t c = 0; c < class_counts.size(); ++c) {
        int total = 0;
        for (int s = 0; s < 3; ++s) {
            const double ideal = kDefaultSplitRatios[static_cast<std::size_t>(s)] * class_counts[c];
            EXPECT_LE(std::abs(counts[c][static_cast<std::size_t>(s)] - ideal), 1.0 + 1e-9);
            total += counts[c][static_cast<std::size_t>(s)];
        }
        EXPECT_EQ(total, class_counts[c]);
    }
}

TEST(WriteDataset, RoundTripAndDeterminism) {
    const fs::path dir1 = fs::temp_directory_path() / "pm_ds_a";
    const fs::path dir2 = fs::temp_directory_path() / "pm_ds_b";
    fs::remove_all(dir1);
    fs::remove_all(dir2);
    GenerateConfig cfg;
    cfg.per_class = 8;
    cfg.fine_count = 6;
    cfg.seed = 31337;
    const fs::path m1 = generate_dataset(cfg, dir1);
    const fs::path m2 = generate_dataset(cfg, dir2);
    EXPECT_EQ(slurp(m1), slurp(m2));
    EXPECT_EQ(file_fnv1a(m1), file_fnv1a(m2));

    const Dataset ds = read_dataset(m1);
    EXPECT_EQ(ds.samples.size(), 24u);
    int fine_train = 0;
    for (const auto& s : ds.samples) {
        // image files re-read bit-exactly: writing the loaded pixels again
        // reproduces the original bytes (8-bit lossless round trip)
        const fs::path rewritten = dir2 / "rewrite.pgm";
        write_pgm(s.image, rewritten);
        EXPECT_EQ(slurp(dir1 / s.meta.image_path), slurp(rewritten));
        if (s.meta.split == "train" && s.meta.has_fine_mask) ++fine_train;
        if (s.meta.split != "train") EXPECT_TRUE(s.meta.has_fine_mask);
    }
    EXPECT_EQ(fine_train, 6);
    // any sample with a fine mask keeps the 0-means-relevant convention
    for (const auto& s : ds.samples)
        if (s.fine_mask) {
            std::size_t relevant = 0;
            for (double v : s.fine_mask->px) relevant += v == 0.0 ? 1u : 0u;
            EXPECT_GT(relevant, 0u);
        }
    fs::remove_all(dir1);
    fs::remove_all(dir2);
}
