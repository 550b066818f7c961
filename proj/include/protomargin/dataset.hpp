#pragma once

// Dataset on disk: per-split directories of 8-bit PGM images and masks plus
// a JSON manifest. Splits are class-stratified with a deterministic
// largest-remainder apportionment that also honors the global split quotas.

#include <array>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "protomargin/image.hpp"
#include "protomargin/rng.hpp"
#include "protomargin/synth.hpp"

namespace protomargin::synth {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

constexpr std::array<const char*, 3> kSplitNames = {"train", "val", "test"};
constexpr std::array<double, 3> kDefaultSplitRatios = {600.0 / 825.0, 100.0 / 825.0,
                                                       125.0 / 825.0};

struct SampleMeta {
    int id = 0;
    std::string split;
    int y_margin = 0;
    int y_mal = 0;
    bool has_fine_mask = false;
    bool confounder = false;
    std::uint64_t seed = 0;
    std::string image_path, lesion_path, fine_path;  // manifest-relative
};

struct DatasetSample {
    SampleMeta meta;
    Image image;
    Image lesion_mask;
    std::optional<Image> fine_mask;
};

struct Dataset {
    fs::path root;
    std::vector<DatasetSample> samples;

    std::vector<const DatasetSample*> split(const std::string& name) const {
        std::vector<const DatasetSample*> out;
        for (const auto& s : samples)
            if (s.meta.split == name) out.push_back(&s);
        return out;
    }
};

/// Class-stratified split sizes. Global quotas come first (largest remainder
/// over the total count), then per-class floors are topped up greedily by
/// fractional remainder subject to both class totals and global quotas.
inline std::vector<std::array<int, 3>> stratified_split_counts(
    const std::vector<int>& class_counts, const std::array<double, 3>& ratios) {
    const double rsum = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(rsum - 1.0) > 1e-9)
        throw std::invalid_argument("split ratios must sum to 1");
    int total = 0;
    for (int n : class_counts) total += n;

    std::array<int, 3> global{};
    {
        std::array<double, 3> ideal{};
        int assigned = 0;
        for (int s = 0; s < 3; ++s) {
            ideal[static_cast<std::size_t>(s)] = ratios[static_cast<std::size_t>(s)] * total;
            global[static_cast<std::size_t>(s)] =
                static_cast<int>(std::floor(ideal[static_cast<std::size_t>(s)] + 1e-9));
            assigned += global[static_cast<std::size_t>(s)];
        }
        std::array<int, 3> order = {0, 1, 2};
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            const double ra = ideal[static_cast<std::size_t>(a)] - global[static_cast<std::size_t>(a)];
            const double rb = ideal[static_cast<std::size_t>(b)] - global[static_cast<std::size_t>(b)];
            if (ra != rb) return ra > rb;
            return a < b;
        });
        for (int i = 0; assigned < total; ++i, ++assigned)
            ++global[static_cast<std::size_t>(order[static_cast<std::size_t>(i % 3)])];
    }

    const std::size_t nc = class_counts.size();
    std::vector<std::array<int, 3>> counts(nc);
    std::vector<std::array<double, 3>> frac(nc);
    std::array<int, 3> split_used{};
    std::vector<int> class_left(nc);
    for (std::size_t c = 0; c < nc; ++c) {
        int used = 0;
        for (int s = 0; s < 3; ++s) {
            const double ideal = ratios[static_cast<std::size_t>(s)] * class_counts[c];
            counts[c][static_cast<std::size_t>(s)] = static_cast<int>(std::floor(ideal + 1e-9));
            frac[c][static_cast<std::size_t>(s)] = ideal - counts[c][static_cast<std::size_t>(s)];
            used += counts[c][static_cast<std::size_t>(s)];
            split_used[static_cast<std::size_t>(s)] += counts[c][static_cast<std::size_t>(s)];
        }
        class_left[c] = class_counts[c] - used;
    }
    struct Cell {
        std::size_t c;
        int s;
        double f;
    };
    std::vector<Cell> cells;
    for (std::size_t c = 0; c < nc; ++c)
        for (int s = 0; s < 3; ++s) cells.push_back({c, s, frac[c][static_cast<std::size_t>(s)]});
    std::sort(cells.begin(), cells.end(), [](const Cell& a, const Cell& b) {
        if (a.f != b.f) return a.f > b.f;
        if (a.c != b.c) return a.c < b.c;
        return a.s < b.s;
    });
    for (const Cell& cell : cells) {
        if (class_left[cell.c] <= 0) continue;
        if (split_used[static_cast<std::size_t>(cell.s)] >=
            global[static_cast<std::size_t>(cell.s)])
            continue;
        ++counts[cell.c][static_cast<std::size_t>(cell.s)];
        ++split_used[static_cast<std::size_t>(cell.s)];
        --class_left[cell.c];
    }
    // mop-up pass in case greedy ran out of matching quota
    for (std::size_t c = 0; c < nc; ++c)
        for (int s = 0; class_left[c] > 0 && s < 3; ++s)
            while (class_left[c] > 0 &&
                   split_used[static_cast<std::size_t>(s)] < global[static_cast<std::size_t>(s)]) {
                ++counts[c][static_cast<std::size_t>(s)];
                ++split_used[static_cast<std::size_t>(s)];
                --class_left[c];
            }
    return counts;
}

inline std::string sample_file_stem(int id) {
    std::ostringstream os;
    os << std::setw(6) << std::setfill('0') << id;
    return os.str();
}

/// Writes per-split image/mask files and the manifest. Fine-mask files are
/// written for the first `fine_count` training samples of each class quota
/// (the annotated subset) and for every val/test sample, where they serve as
/// evaluation ground truth.
inline fs::path write_dataset(const std::vector<SynthSample>& samples,
                              const std::vector<std::uint64_t>& seeds,
                              const std::array<double, 3>& ratios, int fine_count,
                              const fs::path& out_dir,
                              const ordered_json& generator_info = {}) {
    if (samples.empty()) throw std::invalid_argument("write_dataset: empty sample set");
    if (samples.size() != seeds.size())
        throw std::invalid_argument("write_dataset: one seed per sample required");

    std::vector<int> class_counts(3, 0);
    for (const auto& s : samples) ++class_counts[static_cast<std::size_t>(s.y_margin)];
    const auto quotas = stratified_split_counts(class_counts, ratios);

    // fine-annotation quota per class, as even as possible
    std::array<int, 3> fine_quota{};
    for (int c = 0, left = fine_count; c < 3; ++c) {
        fine_quota[static_cast<std::size_t>(c)] = std::min(left, (fine_count + 2 - c) / 3);
        left -= fine_quota[static_cast<std::size_t>(c)];
    }

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    for (const char* split : kSplitNames) fs::create_directories(out_dir / split, ec);

    std::vector<int> class_seen(3, 0);
    std::vector<int> fine_assigned(3, 0);
    ordered_json manifest;
    manifest["format_version"] = 1;
    manifest["image_size"] = kImageSize;
    manifest["classes"] = kMarginClassNames;
    manifest["split_ratios"] = ratios;
    manifest["fine_count"] = fine_count;
    if (!generator_info.is_null() && !generator_info.empty())
        manifest["generator"] = generator_info;
    ordered_json entries = ordered_json::array();
    std::array<int, 3> split_sizes{};

    for (std::size_t i = 0; i < samples.size(); ++i) {
        const SynthSample& s = samples[i];
        const int c = s.y_margin;
        const int seen = class_seen[static_cast<std::size_t>(c)]++;
        int split_idx;
        if (seen < quotas[static_cast<std::size_t>(c)][0]) split_idx = 0;
        else if (seen < quotas[static_cast<std::size_t>(c)][0] + quotas[static_cast<std::size_t>(c)][1]) split_idx = 1;
        else split_idx = 2;
        ++split_sizes[static_cast<std::size_t>(split_idx)];
        const std::string split = kSplitNames[static_cast<std::size_t>(split_idx)];

        bool has_fine = split_idx != 0;
        if (split_idx == 0 && fine_assigned[static_cast<std::size_t>(c)] <
                                  fine_quota[static_cast<std::size_t>(c)]) {
            has_fine = true;
            ++fine_assigned[static_cast<std::size_t>(c)];
        }

        const std::string stem = sample_file_stem(static_cast<int>(i));
        const std::string img_rel = split + "/" + stem + "_img.pgm";
        const std::string lesion_rel = split + "/" + stem + "_lesion.pgm";
        const std::string fine_rel = split + "/" + stem + "_fine.pgm";
        write_pgm(s.image, out_dir / img_rel);
        write_pgm(s.lesion_mask, out_dir / lesion_rel);
        if (has_fine) write_pgm(s.fine_mask, out_dir / fine_rel);

        ordered_json e;
        e["id"] = static_cast<int>(i);
        e["split"] = split;
        e["margin_class"] = kMarginClassNames[static_cast<std::size_t>(c)];
        e["malignant"] = s.y_mal;
        e["has_fine_mask"] = has_fine;
        e["confounder"] = s.confounder_flag;
        e["seed"] = seeds[i];
        e["image"] = img_rel;
        e["lesion_mask"] = lesion_rel;
        if (has_fine) e["fine_mask"] = fine_rel;
        else e["fine_mask"] = nullptr;
        entries.push_back(std::move(e));
    }
    manifest["counts"] = {{"train", split_sizes[0]}, {"val", split_sizes[1]}, {"test", split_sizes[2]}};
    manifest["samples"] = std::move(entries);

    const fs::path manifest_path = out_dir / "manifest.json";
    std::ofstream out(manifest_path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + manifest_path.string());
    out << manifest.dump(2) << "\n";
    if (!out) throw std::runtime_error("short write to " + manifest_path.string());
    return manifest_path;
}

struct GenerateConfig {
    int per_class = 275;
    std::array<double, 3> split_ratios = kDefaultSplitRatios;
    int fine_count = 30;
    double confounder_strength = 0.9;
    std::array<double, 3> malignancy_rates = kDefaultMalignancyRates;
    std::uint64_t seed = 7;
};

/// Generates the full corpus and writes it under out_dir. Everything flows
/// from the master seed through the "data" and "confounder" streams.
inline fs::path generate_dataset(const GenerateConfig& cfg, const fs::path& out_dir) {
    if (cfg.per_class <= 0) throw std::invalid_argument("per_class must be positive");
    SeedStreams streams(cfg.seed);
    std::vector<SynthSample> samples;
    std::vector<std::uint64_t> seeds;
    samples.reserve(static_cast<std::size_t>(cfg.per_class) * 3);
    for (int c = 0; c < 3; ++c) {
        for (int i = 0; i < cfg.per_class; ++i) {
            const std::uint64_t idx = static_cast<std::uint64_t>(c) * cfg.per_class + i;
            const std::uint64_t sample_seed = streams.stream_seed("data", idx);
            Rng rng(sample_seed);
            const LesionSpec spec = random_spec(c, rng);
            SynthSample s = generate_sample(spec, splitmix64(sample_seed ^ 0x5eed),
                                            cfg.malignancy_rates);
            Rng conf_rng = streams.stream("confounder", idx);
            s = inject_confounder(std::move(s), cfg.confounder_strength, conf_rng);
            samples.push_back(std::move(s));
            seeds.push_back(sample_seed);
        }
    }
    ordered_json gen;
    gen["per_class"] = cfg.per_class;
    gen["confounder_strength"] = cfg.confounder_strength;
    gen["malignancy_rates"] = cfg.malignancy_rates;
    gen["seed"] = cfg.seed;
    return write_dataset(samples, seeds, cfg.split_ratios, cfg.fine_count, out_dir, gen);
}

inline Dataset read_dataset(const fs::path& manifest_path) {
    std::ifstream in(manifest_path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + manifest_path.string());
    ordered_json manifest = ordered_json::parse(in);
    Dataset ds;
    ds.root = manifest_path.parent_path();
    for (const auto& e : manifest.at("samples")) {
        DatasetSample s;
        s.meta.id = e.at("id").get<int>();
        s.meta.split = e.at("split").get<std::string>();
        s.meta.y_margin = margin_class_from_name(e.at("margin_class").get<std::string>());
        s.meta.y_mal = e.at("malignant").get<int>();
        s.meta.has_fine_mask = e.at("has_fine_mask").get<bool>();
        s.meta.confounder = e.at("confounder").get<bool>();
        s.meta.seed = e.at("seed").get<std::uint64_t>();
        s.meta.image_path = e.at("image").get<std::string>();
        s.meta.lesion_path = e.at("lesion_mask").get<std::string>();
        s.image = read_pgm(ds.root / s.meta.image_path);
        s.lesion_mask = read_pgm(ds.root / s.meta.lesion_path);
        for (double& v : s.lesion_mask.px) v = v >= 0.5 ? 1.0 : 0.0;
        if (s.meta.has_fine_mask) {
            s.meta.fine_path = e.at("fine_mask").get<std::string>();
            s.fine_mask = read_pgm(ds.root / s.meta.fine_path);
            for (double& v : s.fine_mask->px) v = v >= 0.5 ? 1.0 : 0.0;
        }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

inline std::uint64_t file_fnv1a(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[4096];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
        h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
    return h;
}

}  // namespace protomargin::synth
