#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "protomargin/explain.hpp"
#include "protomargin/trainer.hpp"

using namespace protomargin;
using namespace protomargin::explain;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

struct Fixture {
    fs::path data_dir;
    synth::Dataset ds;
    model::ModelParams params;

    Fixture() {
        data_dir = fs::temp_directory_path() / "pm_explain_data";
        fs::remove_all(data_dir);
        synth::GenerateConfig gc;
        gc.per_class = 5;
        gc.fine_count = 3;
        gc.seed = 44;
        synth::generate_dataset(gc, data_dir);
        ds = synth::read_dataset(data_dir / "manifest.json");
        Rng rng(45);
        params = model::init_model(rng, 2, 3);
        std::vector<const synth::DatasetSample*> train;
        for (const auto& s : ds.samples)
            if (s.meta.split == "train") train.push_back(&s);
        trainer::project_prototypes(params, train);  // provenance for the gallery
    }
    ~Fixture() {
        std::error_code ec;
        fs::remove_all(data_dir, ec);
    }
};

}  // namespace

TEST(ReceptiveField, MatchesStackArithmetic) {
    // stride 8, size 22, first center at 3.5
    const ReceptiveField f00 = cell_receptive_field(0, 0);
    EXPECT_DOUBLE_EQ(f00.center_x, 3.5);
    EXPECT_EQ(f00.x0, 0);  // clipped from -7
    EXPECT_EQ(f00.x1, 14);
    const ReceptiveField f57 = cell_receptive_field(5, 7);
    EXPECT_DOUBLE_EQ(f57.center_y, 3.5 + 8 * 5);
    EXPECT_EQ(f57.y0, 8 * 5 - 7);
    EXPECT_EQ(f57.y1, 8 * 5 + 14);
    EXPECT_EQ(f57.x1 - f57.x0 + 1, 22);
    const ReceptiveField last = cell_receptive_field(13, 13);
    EXPECT_EQ(last.x1, 111);  // clipped at the border
}

TEST(Cav, SinglePrototypeEqualsNormalizedPam) {
    model::ForwardResult fr;
    Rng rng(1);
    Tensor grid = Tensor::zeros({14, 14});
    for (double& v : grid.values) v = uniform_double(rng, 0.2, 3.0);
    fr.sim_maps.push_back(grid);
    fr.scores.push_back(1.7);
    const Tensor pam = model::compute_pam(fr, 0);
    const Tensor cav = class_activation_visualization(fr, {0}, 0);
    const auto mm = std::minmax_element(pam.values.begin(), pam.values.end());
    for (std::size_t i = 0; i < cav.numel(); ++i)
        EXPECT_NEAR(cav.values[i], (pam.values[i] - *mm.first) / (*mm.second - *mm.first),
                    1e-12);
    EXPECT_DOUBLE_EQ(*std::min_element(cav.values.begin(), cav.values.end()), 0.0);
    EXPECT_DOUBLE_EQ(*std::max_element(cav.values.begin(), cav.values.end()), 1.0);
}

TEST(Cav, TwoIdenticalPamsEqualEither) {
    model::ForwardResult fr;
    Rng rng(2);
    Tensor grid = Tensor::zeros({14, 14});
    for (double& v : grid.values) v = uniform_double(rng, 0.1, 2.0);
    fr.sim_maps.push_back(grid);
    fr.sim_maps.push_back(grid);
    fr.scores = {0.9, 0.9};
    const Tensor one = class_activation_visualization(fr, {0, 1}, 0);
    const Tensor both = class_activation_visualization(fr, {0, 0}, 0);
    for (std::size_t i = 0; i < one.numel(); ++i)
        EXPECT_NEAR(both.values[i], one.values[i], 1e-12);
}

TEST(Cav, ArgmaxInvariantUnderUniformRescaling) {
    model::ForwardResult fr;
    Rng rng(3);
    for (int j = 0; j < 3; ++j) {
        Tensor grid = Tensor::zeros({14, 14});
        for (double& v : grid.values) v = uniform_double(rng, 0.1, 2.0);
        fr.sim_maps.push_back(grid);
        fr.scores.push_back(uniform_double(rng, 0.5, 2.0));
    }
    const Tensor base = class_activation_visualization(fr, {0, 0, 0}, 0);
    for (double& s : fr.scores) s *= 7.3;
    const Tensor scaled = class_activation_visualization(fr, {0, 0, 0}, 0);
    const auto argmax = [](const Tensor& t) {
        return std::max_element(t.values.begin(), t.values.end()) - t.values.begin();
    };
    EXPECT_EQ(argmax(base), argmax(scaled));
}

TEST(Cav, RejectsClassWithoutPrototypes) {
    model::ForwardResult fr;
    fr.sim_maps.push_back(Tensor::full({14, 14}, 1.0));
    fr.scores.push_back(1.0);
    EXPECT_THROW(class_activation_visualization(fr, {0}, 1), std::invalid_argument);
}

TEST(RenderOverlay, DeterministicBytesAndColormapContract) {
    Image base(14, 14, 0.4);
    Tensor map = Tensor::zeros({14, 14});
    for (std::size_t i = 0; i < map.numel(); ++i) map.values[i] = static_cast<double>(i);
    const fs::path dir = fs::temp_directory_path() / "pm_overlay";
    fs::create_directories(dir);
    render_overlay(base, map, dir / "a.ppm");
    render_overlay(base, map, dir / "b.ppm");
    EXPECT_EQ(slurp(dir / "a.ppm"), slurp(dir / "b.ppm"));

    // argmax pixel (the last one) carries the reddest entry
    const std::string bytes = slurp(dir / "a.ppm");
    const std::size_t pixel_bytes = 14 * 14 * 3;
    const std::string payload = bytes.substr(bytes.size() - pixel_bytes);
    const auto red_of = [&](std::size_t i) {
        return static_cast<unsigned char>(payload[3 * i]);
    };
    std::size_t argmax_red = red_of(14 * 14 - 1);
    for (std::size_t i = 0; i < 14 * 14; ++i) EXPECT_LE(red_of(i), argmax_red);

    // constant map tints uniformly
    render_overlay(base, Tensor::full({14, 14}, 3.0), dir / "c.ppm");
    const std::string cbytes = slurp(dir / "c.ppm");
    const std::string cpayload = cbytes.substr(cbytes.size() - pixel_bytes);
    for (std::size_t i = 3; i < cpayload.size(); ++i)
        EXPECT_EQ(cpayload[i], cpayload[i % 3]);
    fs::remove_all(dir);
}

TEST(CaseReport, ContributionsReproduceMarginLogits) {
    Fixture fx;
    const Image& img = fx.ds.samples[0].image;
    const CaseExplanation ce = explain_case(fx.params, img, "case0");
    // summing similarity * weight over all prototypes of a class, with the
    // weights of that class's row, reproduces the class logit
    for (int cls = 0; cls < 3; ++cls) {
        double total = 0.0;
        const int m = fx.params.num_prototypes();
        for (const PrototypeMatch& pm : ce.matches)
            total += pm.similarity *
                     fx.params.w1.values[static_cast<std::size_t>(cls) * m + pm.proto_index];
        EXPECT_NEAR(total, ce.forward.margin_logits[static_cast<std::size_t>(cls)], 1e-9);
    }
    // matches are sorted by descending similarity
    for (std::size_t i = 1; i < ce.matches.size(); ++i)
        EXPECT_GE(ce.matches[i - 1].similarity, ce.matches[i].similarity);
}

TEST(CaseReport, WritesThreePrototypeRowsAndIsDeterministic) {
    Fixture fx;
    const fs::path out1 = fs::temp_directory_path() / "pm_report1";
    const fs::path out2 = fs::temp_directory_path() / "pm_report2";
    fs::remove_all(out1);
    fs::remove_all(out2);
    const Image& img = fx.ds.samples[3].image;
    const fs::path h1 = write_case_report(fx.params, fx.ds, img, "case3", out1);
    const fs::path h2 = write_case_report(fx.params, fx.ds, img, "case3", out2);
    const std::string html = slurp(h1);
    EXPECT_EQ(html, slurp(h2));

    std::size_t rows = 0, pos = 0;
    while ((pos = html.find("<h3>prototype", pos)) != std::string::npos) {
        ++rows;
        pos += 1;
    }
    EXPECT_EQ(rows, 3u);
    EXPECT_NE(html.find("P(malignant)"), std::string::npos);
    EXPECT_TRUE(fs::exists(out1 / "case3_input.pgm"));
    // asset bytes identical across regenerations
    for (const auto& entry : fs::directory_iterator(out1))
        EXPECT_EQ(slurp(entry.path()), slurp(out2 / entry.path().filename()))
            << entry.path();
    fs::remove_all(out1);
    fs::remove_all(out2);
}

TEST(Gallery, OneEntryPerPrototypeWithProvenancePatches) {
    Fixture fx;
    const fs::path out = fs::temp_directory_path() / "pm_gallery";
    fs::remove_all(out);
    const fs::path html_path = write_prototype_gallery(fx.params, fx.ds, out);
    const std::string html = slurp(html_path);
    std::size_t entries = 0, pos = 0;
    while ((pos = html.find("<h2>prototype ", pos)) != std::string::npos) {
        ++entries;
        pos += 1;
    }
    EXPECT_EQ(entries, static_cast<std::size_t>(fx.params.num_prototypes()));
    for (int j = 0; j < fx.params.num_prototypes(); ++j) {
        EXPECT_TRUE(fs::exists(out / ("proto" + std::to_string(j) + "_patch.pgm")));
        const auto& prov = fx.params.provenance[static_cast<std::size_t>(j)];
        ASSERT_TRUE(prov.valid);
        EXPECT_NE(html.find("source image " + std::to_string(prov.image_id)),
                  std::string::npos);
    }
    fs::remove_all(out);
}

TEST(Gallery, SelfSimilarityPeaksAtProvenanceCell) {
    Fixture fx;
    // projection makes each prototype equal a latent patch of its source
    // image; its similarity map there attains the log(1/epsilon) supremum
    const double cap = std::log(1.0 / fx.params.epsilon);
    for (int j = 0; j < fx.params.num_prototypes(); ++j) {
        const auto& prov = fx.params.provenance[static_cast<std::size_t>(j)];
        const synth::DatasetSample* src = nullptr;
        for (const auto& s : fx.ds.samples)
            if (s.meta.id == prov.image_id) src = &s;
        ASSERT_NE(src, nullptr);
        const model::ForwardResult fr = model::forward(fx.params, src->image);
        const Tensor& sim = fr.sim_maps[static_cast<std::size_t>(j)];
        const std::size_t cell = static_cast<std::size_t>(prov.row) * 14 +
                                 static_cast<std::size_t>(prov.col);
        EXPECT_DOUBLE_EQ(sim.values[cell], cap);
        for (double v : sim.values) EXPECT_LE(v, cap);
    }
}

TEST(Gallery, MissingSourceImageIsAnError) {
    Fixture fx;
    synth::Dataset empty;
    empty.root = fx.ds.root;
    const fs::path out = fs::temp_directory_path() / "pm_gallery_missing";
    fs::remove_all(out);
    EXPECT_THROW(write_prototype_gallery(fx.params, empty, out), std::runtime_error);
    fs::remove_all(out);
}
