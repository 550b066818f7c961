#pragma once

// Explanation artifacts: per-case HTML reports (test image, top prototype
// matches with activation overlays, source patches and contribution table),
// class activation visualizations, and the global prototype gallery. All
// artifacts are static files; images are PGM/PPM assets named
// <caseid>_<protoid>_<role>.(pgm|ppm) next to the HTML.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "protomargin/dataset.hpp"
#include "protomargin/model.hpp"

namespace protomargin::explain {

namespace fs = std::filesystem;
using model::ModelParams;
using synth::Dataset;
using synth::DatasetSample;

// ---- receptive-field arithmetic -------------------------------------------
//
// The backbone is conv(3x3, s1, p1) + maxpool(2x2, s2) three times. Walking
// that stack with the standard recurrence (rf += (k-1)*jump;
// start += ((k-1)/2 - pad)*jump; jump *= stride) gives each latent cell a
// 22 px receptive field at stride 8 centered at 3.5 + 8*i.

struct ReceptiveField {
    int y0 = 0, x0 = 0, y1 = 0, x1 = 0;  // inclusive pixel box, clipped
    double center_y = 0.0, center_x = 0.0;
};

inline ReceptiveField cell_receptive_field(int row, int col) {
    struct Layer {
        int k, s, p;
    };
    const Layer stack[] = {{3, 1, 1}, {2, 2, 0}, {3, 1, 1}, {2, 2, 0}, {3, 1, 1}, {2, 2, 0}};
    double rf = 1.0, jump = 1.0, start = 0.0;
    for (const Layer& l : stack) {
        rf += (l.k - 1) * jump;
        start += ((l.k - 1) / 2.0 - l.p) * jump;
        jump *= l.s;
    }
    ReceptiveField f;
    f.center_y = start + row * jump;
    f.center_x = start + col * jump;
    const double half = (rf - 1.0) / 2.0;
    const auto clip = [](double v) {
        return std::clamp(static_cast<int>(std::lround(v)), 0, model::kImageSize - 1);
    };
    f.y0 = clip(std::floor(f.center_y - half));
    f.y1 = clip(std::ceil(f.center_y + half));
    f.x0 = clip(std::floor(f.center_x - half));
    f.x1 = clip(std::ceil(f.center_x + half));
    return f;
}

// ---- class activation visualization ---------------------------------------

/// Similarity-weighted average of the PAMs of one class's prototypes,
/// min-max normalized to [0,1]. A constant aggregate normalizes to zeros.
inline Tensor class_activation_visualization(const model::ForwardResult& fr,
                                             const std::vector<int>& proto_class,
                                             int cls) {
    Tensor cav = Tensor::zeros({model::kImageSize, model::kImageSize});
    int count = 0;
    for (std::size_t j = 0; j < proto_class.size(); ++j) {
        if (proto_class[j] != cls) continue;
        const Tensor pam = model::compute_pam(fr, static_cast<int>(j));
        const double weight = fr.scores[j];
        for (std::size_t i = 0; i < cav.numel(); ++i) cav.values[i] += weight * pam.values[i];
        ++count;
    }
    if (count == 0)
        throw std::invalid_argument("class activation visualization: no prototype of class " +
                                    std::to_string(cls));
    const auto mm = std::minmax_element(cav.values.begin(), cav.values.end());
    const double lo = *mm.first, hi = *mm.second;
    if (hi > lo)
        for (double& v : cav.values) v = (v - lo) / (hi - lo);
    else
        for (double& v : cav.values) v = 0.0;
    return cav;
}

// ---- rendering ---------------------------------------------------------------

/// Heatmap-over-grayscale composite: the map is min-max normalized per call
/// and colored blue (low) to red (high); the argmax pixel gets pure red.
inline void render_overlay(const Image& base, const Tensor& map, const fs::path& out) {
    if (map.rank() != 2 || map.dim(0) != base.height || map.dim(1) != base.width)
        throw std::invalid_argument("render_overlay: map " + shape_str(map.shape) +
                                    " does not match image " + std::to_string(base.width) +
                                    "x" + std::to_string(base.height));
    const auto mm = std::minmax_element(map.values.begin(), map.values.end());
    const double lo = *mm.first, span = *mm.second - *mm.first;
    std::vector<Rgb> px(map.numel());
    for (std::size_t i = 0; i < map.numel(); ++i) {
        const double t = span > 0.0 ? (map.values[i] - lo) / span : 0.5;
        const double gray = 255.0 * std::clamp(base.px[i], 0.0, 1.0);
        const double r = 255.0 * t, g = 0.0, b = 255.0 * (1.0 - t);
        px[i].r = static_cast<std::uint8_t>(std::lround(0.55 * gray + 0.45 * r));
        px[i].g = static_cast<std::uint8_t>(std::lround(0.55 * gray + 0.45 * g));
        px[i].b = static_cast<std::uint8_t>(std::lround(0.55 * gray + 0.45 * b));
    }
    write_ppm(px, base.width, base.height, out);
}

inline Image crop(const Image& src, const ReceptiveField& f) {
    Image out(f.x1 - f.x0 + 1, f.y1 - f.y0 + 1);
    for (int y = f.y0; y <= f.y1; ++y)
        for (int x = f.x0; x <= f.x1; ++x) out.at(y - f.y0, x - f.x0) = src.at(y, x);
    return out;
}

inline Image with_box(Image img, const ReceptiveField& f) {
    for (int x = f.x0; x <= f.x1; ++x) {
        img.at(f.y0, x) = 1.0;
        img.at(f.y1, x) = 1.0;
    }
    for (int y = f.y0; y <= f.y1; ++y) {
        img.at(y, f.x0) = 1.0;
        img.at(y, f.x1) = 1.0;
    }
    return img;
}

// ---- case explanation ----------------------------------------------------------

struct PrototypeMatch {
    int proto_index = 0;
    int proto_class = 0;
    double similarity = 0.0;    // pooled s_j
    double weight = 0.0;        // margin-head weight for the predicted class
    double contribution = 0.0;  // similarity * weight
    model::ProtoProvenance provenance;
};

struct CaseExplanation {
    std::string case_id;
    model::ForwardResult forward;
    int pred_class = 0;
    std::vector<PrototypeMatch> matches;  // all prototypes, sorted by similarity desc
};

inline CaseExplanation explain_case(const ModelParams& params, const Image& image,
                                    const std::string& case_id) {
    CaseExplanation ce;
    ce.case_id = case_id;
    ce.forward = model::forward(params, image);
    ce.pred_class = static_cast<int>(std::max_element(ce.forward.margin_probs.begin(),
                                                      ce.forward.margin_probs.end()) -
                                     ce.forward.margin_probs.begin());
    const int m = params.num_prototypes();
    for (int j = 0; j < m; ++j) {
        PrototypeMatch pm;
        pm.proto_index = j;
        pm.proto_class = params.proto_class[static_cast<std::size_t>(j)];
        pm.similarity = ce.forward.scores[static_cast<std::size_t>(j)];
        pm.weight = params.w1.values[static_cast<std::size_t>(ce.pred_class) * m + j];
        pm.contribution = pm.similarity * pm.weight;
        pm.provenance = params.provenance[static_cast<std::size_t>(j)];
        ce.matches.push_back(pm);
    }
    std::sort(ce.matches.begin(), ce.matches.end(),
              [](const PrototypeMatch& a, const PrototypeMatch& b) {
                  if (a.similarity != b.similarity) return a.similarity > b.similarity;
                  return a.proto_index < b.proto_index;
              });
    return ce;
}

namespace detail {

inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

inline const DatasetSample* find_sample(const Dataset& ds, int id) {
    for (const auto& s : ds.samples)
        if (s.meta.id == id) return &s;
    return nullptr;
}

}  // namespace detail

/// Writes one self-contained case report: the input, the top-n prototype
/// rows (activation over the input, the prototype's source patch, the
/// prototype's activation over its own source image), the contribution
/// table and both head outputs.
inline fs::path write_case_report(const ModelParams& params, const Dataset& ds,
                                  const Image& image, const std::string& case_id,
                                  const fs::path& out_dir, int top_n = 3) {
    fs::create_directories(out_dir);
    const CaseExplanation ce = explain_case(params, image, case_id);
    const int shown = std::min<int>(top_n, static_cast<int>(ce.matches.size()));

    const std::string input_name = case_id + "_input.pgm";
    write_pgm(image, out_dir / input_name);

    std::ostringstream html;
    html << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">\n<title>case " << case_id
         << "</title>\n<style>body{font-family:sans-serif;margin:2em}"
            "table{border-collapse:collapse}td,th{border:1px solid #999;"
            "padding:4px 8px}img{image-rendering:pixelated}</style></head>\n<body>\n";
    html << "<h1>Case " << case_id << "</h1>\n";
    html << "<img src=\"" << input_name << "\" width=\"224\" alt=\"input\">\n";

    html << "<h2>Margin prediction</h2>\n<table><tr><th>class</th><th>logit</th>"
            "<th>probability</th></tr>\n";
    for (int c = 0; c < 3; ++c)
        html << "<tr><td>" << synth::kMarginClassNames[static_cast<std::size_t>(c)] << "</td><td>"
             << detail::fmt(ce.forward.margin_logits[static_cast<std::size_t>(c)]) << "</td><td>"
             << detail::fmt(ce.forward.margin_probs[static_cast<std::size_t>(c)]) << "</td></tr>\n";
    html << "</table>\n<p>predicted margin: <b>"
         << synth::kMarginClassNames[static_cast<std::size_t>(ce.pred_class)] << "</b></p>\n";

    html << "<h2>Most similar prototypes</h2>\n";
    for (int r = 0; r < shown; ++r) {
        const PrototypeMatch& pm = ce.matches[static_cast<std::size_t>(r)];
        const std::string pid = std::to_string(pm.proto_index);
        const std::string pam_name = case_id + "_" + pid + "_pam.ppm";
        render_overlay(image, model::compute_pam(ce.forward, pm.proto_index),
                       out_dir / pam_name);
        html << "<h3>prototype " << pid << " ("
             << synth::kMarginClassNames[static_cast<std::size_t>(pm.proto_class)]
             << ", similarity " << detail::fmt(pm.similarity) << ")</h3>\n";
        html << "<img src=\"" << pam_name << "\" width=\"224\" alt=\"activation\">\n";
        if (pm.provenance.valid) {
            const DatasetSample* src = detail::find_sample(ds, pm.provenance.image_id);
            if (src == nullptr)
                throw std::runtime_error("case report: prototype source image id " +
                                         std::to_string(pm.provenance.image_id) +
                                         " is not in the dataset");
            const ReceptiveField rf =
                cell_receptive_field(pm.provenance.row, pm.provenance.col);
            const std::string patch_name = case_id + "_" + pid + "_patch.pgm";
            write_pgm(crop(src->image, rf), out_dir / patch_name);
            const std::string src_name = case_id + "_" + pid + "_src.pgm";
            write_pgm(with_box(src->image, rf), out_dir / src_name);
            const model::ForwardResult src_fr = model::forward(params, src->image);
            const std::string srcpam_name = case_id + "_" + pid + "_srcpam.ppm";
            render_overlay(src->image, model::compute_pam(src_fr, pm.proto_index),
                           out_dir / srcpam_name);
            html << "<img src=\"" << patch_name << "\" height=\"112\" alt=\"patch\">\n"
                 << "<img src=\"" << src_name << "\" width=\"224\" alt=\"source\">\n"
                 << "<img src=\"" << srcpam_name << "\" width=\"224\" "
                 << "alt=\"activation on source\">\n";
        }
    }

    html << "<h2>Contributions to the predicted class score</h2>\n"
            "<table><tr><th>prototype</th><th>class</th><th>similarity</th>"
            "<th>weight</th><th>contribution</th></tr>\n";
    for (const PrototypeMatch& pm : ce.matches)
        html << "<tr><td>" << pm.proto_index << "</td><td>"
             << synth::kMarginClassNames[static_cast<std::size_t>(pm.proto_class)] << "</td><td>"
             << detail::fmt(pm.similarity) << "</td><td>" << detail::fmt(pm.weight)
             << "</td><td>" << detail::fmt(pm.contribution) << "</td></tr>\n";
    html << "</table>\n";

    html << "<h2>Malignancy</h2>\n<p>";
    double z = params.b2;
    for (int c = 0; c < 3; ++c) {
        const double term = params.w2.values[static_cast<std::size_t>(c)] *
                            ce.forward.margin_logits[static_cast<std::size_t>(c)];
        z += term;
        html << detail::fmt(params.w2.values[static_cast<std::size_t>(c)]) << " &times; "
             << detail::fmt(ce.forward.margin_logits[static_cast<std::size_t>(c)])
             << (c < 2 ? " + " : " + ");
    }
    html << detail::fmt(params.b2) << " = " << detail::fmt(z) << "</p>\n";
    html << "<p>P(malignant) = <b>" << detail::fmt(ce.forward.malignancy_prob)
         << "</b></p>\n</body></html>\n";

    const fs::path html_path = out_dir / (case_id + ".html");
    std::ofstream out(html_path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write report " + html_path.string());
    out << html.str();
    return html_path;
}

/// One gallery page with a section per surviving prototype: class, source
/// image with the patch box, the cropped patch, and the prototype's
/// activation map over its own source image.
inline fs::path write_prototype_gallery(const ModelParams& params, const Dataset& ds,
                                        const fs::path& out_dir) {
    fs::create_directories(out_dir);
    std::ostringstream html;
    html << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">\n"
            "<title>prototype gallery</title>\n<style>body{font-family:sans-serif;"
            "margin:2em}img{image-rendering:pixelated}</style></head>\n<body>\n"
            "<h1>Prototype gallery</h1>\n";
    for (int j = 0; j < params.num_prototypes(); ++j) {
        const auto& prov = params.provenance[static_cast<std::size_t>(j)];
        html << "<h2>prototype " << j << " ("
             << synth::kMarginClassNames[static_cast<std::size_t>(
                    params.proto_class[static_cast<std::size_t>(j)])]
             << ")</h2>\n";
        if (!prov.valid) {
            html << "<p>not yet projected onto a training patch</p>\n";
            continue;
        }
        const DatasetSample* src = detail::find_sample(ds, prov.image_id);
        if (src == nullptr)
            throw std::runtime_error("gallery: prototype source image id " +
                                     std::to_string(prov.image_id) +
                                     " is not in the dataset");
        const ReceptiveField rf = cell_receptive_field(prov.row, prov.col);
        const std::string pid = "proto" + std::to_string(j);
        write_pgm(with_box(src->image, rf), out_dir / (pid + "_src.pgm"));
        write_pgm(crop(src->image, rf), out_dir / (pid + "_patch.pgm"));
        const model::ForwardResult fr = model::forward(params, src->image);
        render_overlay(src->image, model::compute_pam(fr, j),
                       out_dir / (pid + "_selfpam.ppm"));
        html << "<p>source image " << prov.image_id << ", cell (" << prov.row << ","
             << prov.col << "), pixels [" << rf.y0 << ".." << rf.y1 << "] x [" << rf.x0
             << ".." << rf.x1 << "], self-similarity "
             << detail::fmt(fr.scores[static_cast<std::size_t>(j)]) << "</p>\n";
        html << "<img src=\"" << pid << "_src.pgm\" width=\"224\"> <img src=\"" << pid
             << "_patch.pgm\" height=\"112\"> <img src=\"" << pid
             << "_selfpam.ppm\" width=\"224\">\n";
    }
    html << "</body></html>\n";
    const fs::path html_path = out_dir / "gallery.html";
    std::ofstream out(html_path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write gallery " + html_path.string());
    out << html.str();
    return html_path;
}

}  // namespace protomargin::explain
