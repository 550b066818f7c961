#pragma once

// The four training-loss terms. Cluster pulls each image's latent patches
// toward its nearest same-class prototype through the mean of the k smallest
// patch distances; separation pushes the nearest wrong-class prototype away
// (entering the breakdown negated); the fine-annotation loss penalizes
// prototype-activation mass outside the relevant region of every annotated
// image (fine mask for the annotated subset, lesion mask otherwise) plus all
// activation mass of wrong-class prototypes.
//
// Per-image fine contributions are divided by sqrt(pixel count): the
// Frobenius norm of a map grows with sqrt of its area, so this keeps the
// fine coefficient independent of image resolution.

#include <span>
#include <vector>

#include "protomargin/model.hpp"
#include "protomargin/ops.hpp"

namespace protomargin::losses {

using model::ImageGraph;
using model::ModelParams;
using model::ParamVars;

struct Coefficients {
    double cluster = 0.8;
    double separation = 0.08;
    double fine = 0.001;
};

struct BatchItem {
    const Image* image = nullptr;
    int label = 0;
    const Image* mask = nullptr;  // 0 = relevant; fine mask on annotated items,
                                  // lesion mask on the rest
    bool fine_annotated = false;
};

struct LossBreakdown {
    double cross_entropy = 0.0;
    double cluster = 0.0;
    double separation = 0.0;  // <= 0
    double fine = 0.0;
    double total = 0.0;
    Coefficients coefficients;
};

/// min over prototypes of the chosen class relation of the mean of the k
/// smallest squared patch distances (the relaxed-min gamma).
inline Var min_class_gamma(Tape& tape, std::span<const Var> dist_maps,
                           const std::vector<int>& proto_class, int label, int k,
                           bool same_class) {
    std::vector<Var> gammas;
    for (std::size_t j = 0; j < dist_maps.size(); ++j) {
        if ((proto_class[j] == label) != same_class) continue;
        gammas.push_back(mink_avg_pool(dist_maps[j], k));
    }
    if (gammas.empty())
        throw std::invalid_argument(
            std::string("no ") + (same_class ? "same" : "wrong") +
            "-class prototype exists for label " + std::to_string(label));
    return min_of(gammas);
}

namespace detail {

inline std::vector<Var> distance_maps(Tape& tape, Var latent,
                                      std::span<const Var> prototypes) {
    std::vector<Var> maps;
    maps.reserve(prototypes.size());
    for (Var p : prototypes) maps.push_back(l2_distance_map(latent, p));
    return maps;
}

inline Var mean_of(Tape& tape, std::vector<Var>& terms) {
    Var s = stack_scalars(terms);
    return scale(sum(s), 1.0 / static_cast<double>(terms.size()));
}

}  // namespace detail

/// Mean over images of the same-class relaxed-min distance. Always >= 0.
inline Var cluster_cost(Tape& tape, std::span<const Var> latents,
                        std::span<const int> labels, std::span<const Var> prototypes,
                        const std::vector<int>& proto_class, int k) {
    std::vector<Var> per_image;
    for (std::size_t i = 0; i < latents.size(); ++i) {
        const std::vector<Var> maps = detail::distance_maps(tape, latents[i], prototypes);
        per_image.push_back(min_class_gamma(tape, maps, proto_class, labels[i], k, true));
    }
    return detail::mean_of(tape, per_image);
}

/// Negated mean over images of the wrong-class relaxed-min distance.
/// Always <= 0; minimizing the weighted objective pushes wrong-class
/// prototypes away.
inline Var separation_cost(Tape& tape, std::span<const Var> latents,
                           std::span<const int> labels, std::span<const Var> prototypes,
                           const std::vector<int>& proto_class, int k) {
    std::vector<Var> per_image;
    for (std::size_t i = 0; i < latents.size(); ++i) {
        const std::vector<Var> maps = detail::distance_maps(tape, latents[i], prototypes);
        per_image.push_back(min_class_gamma(tape, maps, proto_class, labels[i], k, false));
    }
    return scale(detail::mean_of(tape, per_image), -1.0);
}

struct FineTerms {
    Var same_class;   // sum over same-class prototypes of ||m (.) PAM||_F
    Var other_class;  // sum over wrong-class prototypes of ||PAM||_F
    Var normalized;   // (same + other) / sqrt(pixels)
};

/// Fine-annotation terms for one image from its similarity maps. The mask
/// uses 0 = relevant; a mask of all zeros silences every same-class term.
inline FineTerms fine_annotation_terms(Tape& tape, std::span<const Var> sim_maps,
                                       const std::vector<int>& proto_class, int label,
                                       const Image& mask) {
    if (sim_maps.empty()) throw std::invalid_argument("fine terms: no prototypes");
    const Shape& grid = tape.shape(sim_maps[0]);
    if (mask.width < grid[1] || mask.height < grid[0])
        throw std::invalid_argument("fine terms: mask " + std::to_string(mask.width) +
                                    "x" + std::to_string(mask.height) +
                                    " smaller than similarity grid " + shape_str(grid));
    Var mask_var = tape.constant(Tensor(Shape{mask.height, mask.width}, mask.px));
    std::vector<Var> same, other;
    for (std::size_t j = 0; j < sim_maps.size(); ++j) {
        Var pam = bilinear_upsample(sim_maps[j], mask.height, mask.width);
        if (proto_class[j] == label)
            same.push_back(frobenius_norm(mul(pam, mask_var)));
        else
            other.push_back(frobenius_norm(pam));
    }
    auto total_or_zero = [&tape](std::vector<Var>& terms) {
        if (terms.empty()) return tape.constant(Tensor::scalar(0.0));
        return sum(stack_scalars(terms));
    };
    FineTerms t;
    t.same_class = total_or_zero(same);
    t.other_class = total_or_zero(other);
    t.normalized = scale(add(t.same_class, t.other_class),
                         1.0 / std::sqrt(static_cast<double>(mask.numel())));
    return t;
}

/// All per-image loss pieces from one forward graph.
struct ImageLossVars {
    Var cross_entropy;
    Var cluster_gamma;     // same-class relaxed-min distance
    Var separation_gamma;  // wrong-class relaxed-min distance (pre-negation)
    Var fine;              // normalized fine term
};

inline ImageLossVars build_image_loss(Tape& tape, const ModelParams& params,
                                      const ImageGraph& graph, const BatchItem& item) {
    ImageLossVars v;
    v.cross_entropy = softmax_cross_entropy(graph.logits, item.label);
    v.cluster_gamma =
        min_class_gamma(tape, graph.dist_maps, params.proto_class, item.label, params.k, true);
    v.separation_gamma =
        min_class_gamma(tape, graph.dist_maps, params.proto_class, item.label, params.k, false);
    v.fine = fine_annotation_terms(tape, graph.sim_maps, params.proto_class, item.label,
                                   *item.mask)
                 .normalized;
    return v;
}

/// Per-image share of the batch objective: mean-normalized cross-entropy,
/// cluster and separation terms plus the summed fine term. Adding these over
/// a batch reproduces the batch objective exactly.
inline Var combine_image_loss(Tape& tape, const ImageLossVars& v,
                              const Coefficients& c, int batch_size) {
    Var l = scale(v.cross_entropy, 1.0 / batch_size);
    l = add(l, scale(v.cluster_gamma, c.cluster / batch_size));
    l = add(l, scale(v.separation_gamma, -c.separation / batch_size));
    l = add(l, scale(v.fine, c.fine));
    return l;
}

struct BatchObjective {
    Var cross_entropy;
    Var cluster;
    Var separation;
    Var fine;
    Var total;
    LossBreakdown breakdown;
};

/// The full stage-A1 objective on one differentiable graph:
/// CrsEnt + c_cluster*Clst + c_separation*Sep + c_fine*Fine.
inline BatchObjective total_objective(Tape& tape, const ModelParams& params,
                                      const ParamVars& pv,
                                      std::span<const BatchItem> batch,
                                      const Coefficients& coeffs) {
    if (batch.empty()) throw std::invalid_argument("total_objective: empty batch");
    std::vector<Var> ces, clsts, seps, fines;
    for (const BatchItem& item : batch) {
        const ImageGraph g = model::build_image_graph(tape, pv, params, *item.image);
        const ImageLossVars v = build_image_loss(tape, params, g, item);
        ces.push_back(v.cross_entropy);
        clsts.push_back(v.cluster_gamma);
        seps.push_back(v.separation_gamma);
        fines.push_back(v.fine);
    }
    BatchObjective obj;
    obj.cross_entropy = detail::mean_of(tape, ces);
    obj.cluster = detail::mean_of(tape, clsts);
    obj.separation = scale(detail::mean_of(tape, seps), -1.0);
    obj.fine = sum(stack_scalars(fines));
    Var total = obj.cross_entropy;
    total = add(total, scale(obj.cluster, coeffs.cluster));
    total = add(total, scale(obj.separation, coeffs.separation));
    total = add(total, scale(obj.fine, coeffs.fine));
    obj.total = total;
    obj.breakdown.cross_entropy = tape.scalar(obj.cross_entropy);
    obj.breakdown.cluster = tape.scalar(obj.cluster);
    obj.breakdown.separation = tape.scalar(obj.separation);
    obj.breakdown.fine = tape.scalar(obj.fine);
    obj.breakdown.total = tape.scalar(obj.total);
    obj.breakdown.coefficients = coeffs;
    return obj;
}

}  // namespace protomargin::losses
