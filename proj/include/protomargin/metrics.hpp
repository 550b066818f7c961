#pragma once

// Evaluation metrics: one-vs-all AUROC by the Mann-Whitney statistic,
// Cohen's kappa, activation precision at lesion and fine scale, and
// non-parametric bootstrap confidence intervals. The split evaluator feeds
// every score from the same forward pass the rest of the project uses.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "protomargin/dataset.hpp"
#include "protomargin/model.hpp"
#include "protomargin/parallel.hpp"

namespace protomargin::metrics {

using synth::Dataset;
using synth::DatasetSample;

/// Marks the top (1-tau) fraction of entries with 1 (exactly
/// ceil((1-tau)*N) of them), the rest 0. Ties break toward the lower
/// row-major index.
inline Tensor threshold_top(const Tensor& map, double tau) {
    if (map.numel() == 0) throw std::invalid_argument("threshold_top: empty map");
    if (!(tau > 0.0 && tau < 1.0))
        throw std::invalid_argument("threshold_top: tau must be in (0,1), got " +
                                    std::to_string(tau));
    const std::size_t n = map.numel();
    const std::size_t count = static_cast<std::size_t>(
        std::ceil((1.0 - tau) * static_cast<double>(n) - 1e-12));
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(count),
                      idx.end(), [&](int a, int b) {
                          const double va = map.values[static_cast<std::size_t>(a)];
                          const double vb = map.values[static_cast<std::size_t>(b)];
                          if (va != vb) return va > vb;
                          return a < b;
                      });
    Tensor out = Tensor::zeros(map.shape);
    for (std::size_t i = 0; i < count; ++i) out.values[static_cast<std::size_t>(idx[i])] = 1.0;
    return out;
}

/// Fraction of the top-activated pixels of one activation map that fall in
/// the relevant region (mask value 0).
inline double map_precision(const Tensor& pam, const Image& mask, double tau) {
    if (mask.width != pam.dim(1) || mask.height != pam.dim(0))
        throw std::invalid_argument("activation precision: mask dims " +
                                    std::to_string(mask.width) + "x" +
                                    std::to_string(mask.height) + " do not match map " +
                                    shape_str(pam.shape));
    const Tensor top = threshold_top(pam, tau);
    double hits = 0.0, total = 0.0;
    for (std::size_t i = 0; i < top.numel(); ++i) {
        if (top.values[i] == 0.0) continue;
        total += 1.0;
        if (mask.px[i] == 0.0) hits += 1.0;
    }
    return hits / total;
}

/// Activation precision for one sample: the mean over prototypes of the
/// sample's true class of the per-map precision against the given mask.
inline double activation_precision(const std::vector<Tensor>& pams,
                                   const std::vector<int>& proto_class, int true_class,
                                   const Image& mask, double tau = 0.95) {
    double sum = 0.0;
    int count = 0;
    for (std::size_t j = 0; j < pams.size(); ++j) {
        if (proto_class[j] != true_class) continue;
        sum += map_precision(pams[j], mask, tau);
        ++count;
    }
    if (count == 0)
        throw std::invalid_argument("activation precision: no prototype of class " +
                                    std::to_string(true_class));
    return sum / count;
}

/// Mann-Whitney AUROC: the fraction of (positive, negative) pairs ordered
/// correctly, ties counted one half. Computed via average ranks.
inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw std::invalid_argument("auroc: scores/labels size mismatch");
    std::size_t pos = 0, neg = 0;
    for (int y : labels) (y == 1 ? pos : neg) += 1;
    if (pos == 0 || neg == 0)
        throw std::invalid_argument("auroc: need both classes present");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] < scores[b];
        return a < b;
    });
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (std::size_t t = i; t <= j; ++t)
            if (labels[order[t]] == 1) rank_sum_pos += avg_rank;
        i = j + 1;
    }
    return (rank_sum_pos - static_cast<double>(pos) * (static_cast<double>(pos) + 1.0) / 2.0) /
           (static_cast<double>(pos) * static_cast<double>(neg));
}

/// Cohen's kappa with marginal-product expected agreement.
inline double cohens_kappa(const std::vector<int>& pred, const std::vector<int>& truth) {
    if (pred.size() != truth.size() || pred.size() < 2)
        throw std::invalid_argument("cohens_kappa: need >= 2 paired labels");
    int num_classes = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        num_classes = std::max({num_classes, pred[i] + 1, truth[i] + 1});
    const double n = static_cast<double>(pred.size());
    std::vector<double> mp(static_cast<std::size_t>(num_classes), 0.0);
    std::vector<double> mt(static_cast<std::size_t>(num_classes), 0.0);
    double agree = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        mp[static_cast<std::size_t>(pred[i])] += 1.0;
        mt[static_cast<std::size_t>(truth[i])] += 1.0;
        if (pred[i] == truth[i]) agree += 1.0;
    }
    const double po = agree / n;
    double pe = 0.0;
    for (int c = 0; c < num_classes; ++c)
        pe += (mp[static_cast<std::size_t>(c)] / n) * (mt[static_cast<std::size_t>(c)] / n);
    if (pe >= 1.0)
        throw std::invalid_argument("cohens_kappa: degenerate marginals (expected "
                                    "agreement is 1)");
    return (po - pe) / (1.0 - pe);
}

struct BootstrapResult {
    double lo = 0.0, hi = 0.0;
    int redraws = 0;  // resamples redrawn because the metric was undefined
};

/// Percentile bootstrap over resamples-with-replacement of {0..n-1}.
/// A resample on which the metric throws is redrawn (and counted).
inline BootstrapResult bootstrap_ci(
    const std::function<double(const std::vector<std::size_t>&)>& metric, std::size_t n,
    int n_resamples, double level, std::uint64_t seed) {
    if (n == 0) throw std::invalid_argument("bootstrap_ci: empty sample");
    if (n_resamples < 100)
        throw std::invalid_argument("bootstrap_ci: need at least 100 resamples");
    if (!(level > 0.0 && level < 1.0))
        throw std::invalid_argument("bootstrap_ci: level must be in (0,1)");
    BootstrapResult result;
    std::vector<double> values;
    values.reserve(static_cast<std::size_t>(n_resamples));
    std::uint64_t draw = 0;
    for (int b = 0; b < n_resamples; ++b) {
        for (int attempt = 0;; ++attempt) {
            if (attempt >= 1000)
                throw std::runtime_error("bootstrap_ci: metric undefined on 1000 "
                                         "consecutive resamples");
            Rng rng(splitmix64(seed + 0x9e3779b9ULL * (++draw)));
            std::vector<std::size_t> idx(n);
            for (std::size_t i = 0; i < n; ++i) idx[i] = uniform_index(rng, n);
            try {
                values.push_back(metric(idx));
                break;
            } catch (const std::invalid_argument&) {
                ++result.redraws;
            }
        }
    }
    std::sort(values.begin(), values.end());
    auto quantile = [&](double q) {
        const double pos = q * static_cast<double>(values.size() - 1);
        const std::size_t lo = static_cast<std::size_t>(pos);
        const std::size_t hi = std::min(lo + 1, values.size() - 1);
        const double frac = pos - static_cast<double>(lo);
        return values[lo] * (1.0 - frac) + values[hi] * frac;
    };
    result.lo = quantile((1.0 - level) / 2.0);
    result.hi = quantile(1.0 - (1.0 - level) / 2.0);
    return result;
}

// ---- split evaluation -------------------------------------------------------

struct EvalConfig {
    double tau = 0.95;
    int bootstrap_resamples = 5000;
    double ci_level = 0.95;
    std::uint64_t seed = 7;
    int threads = 0;
};

/// Per-sample evaluation state; activation maps are reduced to their
/// precision values as soon as they are computed.
struct EvalRecord {
    int id = 0;
    std::array<double, 3> margin_probs{};
    int pred_class = 0;
    int true_class = 0;
    double malignancy_prob = 0.0;
    int true_mal = 0;
    double ap_lesion = 0.0;
    std::optional<double> ap_fine;
};

struct SplitEvaluation {
    std::vector<EvalRecord> records;
    double avg_margin_auroc = 0.0;
    std::array<double, 3> per_class_auroc{};
    double malignancy_auroc = 0.0;
    double kappa = 0.0;
    double ap_lesion = 0.0;
    double ap_fine = 0.0;  // over records that carry fine masks
    int bootstrap_redraws = 0;
    nlohmann::ordered_json report;
    std::string csv;
};

inline SplitEvaluation evaluate_split(const model::ModelParams& params, const Dataset& ds,
                                      const std::string& split, const EvalConfig& cfg) {
    std::vector<const DatasetSample*> samples;
    for (const auto& s : ds.samples)
        if (s.meta.split == split) samples.push_back(&s);
    if (samples.empty())
        throw std::invalid_argument("evaluate_split: split '" + split + "' is empty");

    SplitEvaluation out;
    out.records.resize(samples.size());
    parallel_for(samples.size(), cfg.threads, [&](std::size_t i) {
        const DatasetSample& s = *samples[i];
        const model::ForwardResult fr = model::forward(params, s.image);
        EvalRecord r;
        r.id = s.meta.id;
        r.margin_probs = fr.margin_probs;
        r.pred_class = static_cast<int>(std::max_element(fr.margin_probs.begin(),
                                                         fr.margin_probs.end()) -
                                        fr.margin_probs.begin());
        r.true_class = s.meta.y_margin;
        r.malignancy_prob = fr.malignancy_prob;
        r.true_mal = s.meta.y_mal;
        std::vector<Tensor> pams;
        pams.reserve(fr.sim_maps.size());
        for (std::size_t j = 0; j < fr.sim_maps.size(); ++j)
            pams.push_back(model::compute_pam(fr, static_cast<int>(j)));
        r.ap_lesion =
            activation_precision(pams, params.proto_class, r.true_class, s.lesion_mask, cfg.tau);
        if (s.fine_mask)
            r.ap_fine = activation_precision(pams, params.proto_class, r.true_class,
                                             *s.fine_mask, cfg.tau);
        out.records[i] = std::move(r);
    });

    const std::size_t n = out.records.size();
    auto class_scores = [&](int cls, const std::vector<std::size_t>& idx) {
        std::vector<double> scores;
        std::vector<int> labels;
        scores.reserve(idx.size());
        for (std::size_t i : idx) {
            scores.push_back(out.records[i].margin_probs[static_cast<std::size_t>(cls)]);
            labels.push_back(out.records[i].true_class == cls ? 1 : 0);
        }
        return auroc(scores, labels);
    };
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);

    for (int cls = 0; cls < 3; ++cls)
        out.per_class_auroc[static_cast<std::size_t>(cls)] = class_scores(cls, all);
    out.avg_margin_auroc =
        (out.per_class_auroc[0] + out.per_class_auroc[1] + out.per_class_auroc[2]) / 3.0;

    auto mal_metric = [&](const std::vector<std::size_t>& idx) {
        std::vector<double> scores;
        std::vector<int> labels;
        for (std::size_t i : idx) {
            scores.push_back(out.records[i].malignancy_prob);
            labels.push_back(out.records[i].true_mal);
        }
        return auroc(scores, labels);
    };
    auto kappa_metric = [&](const std::vector<std::size_t>& idx) {
        std::vector<int> pred, truth;
        for (std::size_t i : idx) {
            pred.push_back(out.records[i].pred_class);
            truth.push_back(out.records[i].true_class);
        }
        return cohens_kappa(pred, truth);
    };
    auto avg_margin_metric = [&](const std::vector<std::size_t>& idx) {
        return (class_scores(0, idx) + class_scores(1, idx) + class_scores(2, idx)) / 3.0;
    };
    auto ap_lesion_metric = [&](const std::vector<std::size_t>& idx) {
        double s = 0.0;
        for (std::size_t i : idx) s += out.records[i].ap_lesion;
        return s / static_cast<double>(idx.size());
    };
    auto ap_fine_metric = [&](const std::vector<std::size_t>& idx) {
        double s = 0.0;
        int c = 0;
        for (std::size_t i : idx)
            if (out.records[i].ap_fine) {
                s += *out.records[i].ap_fine;
                ++c;
            }
        if (c == 0) throw std::invalid_argument("no fine-annotated records in resample");
        return s / c;
    };

    out.malignancy_auroc = mal_metric(all);
    out.kappa = kappa_metric(all);
    out.ap_lesion = ap_lesion_metric(all);
    bool any_fine = false;
    for (const auto& r : out.records) any_fine = any_fine || r.ap_fine.has_value();
    if (any_fine) out.ap_fine = ap_fine_metric(all);

    using nlohmann::ordered_json;
    int redraws = 0;
    auto ci = [&](const std::function<double(const std::vector<std::size_t>&)>& metric,
                  std::uint64_t salt) {
        const BootstrapResult b = bootstrap_ci(metric, n, cfg.bootstrap_resamples,
                                               cfg.ci_level, cfg.seed ^ salt);
        redraws += b.redraws;
        return ordered_json::array({b.lo, b.hi});
    };
    auto entry = [&](double value, ordered_json ci_pair) {
        ordered_json e;
        e["value"] = value;
        e["ci"] = std::move(ci_pair);
        return e;
    };

    ordered_json report;
    report["split"] = split;
    report["n"] = n;
    report["bootstrap"] = {{"resamples", cfg.bootstrap_resamples},
                           {"level", cfg.ci_level},
                           {"seed", cfg.seed}};
    ordered_json margin;
    margin["average"] = entry(out.avg_margin_auroc, ci(avg_margin_metric, 0xA1));
    for (int cls = 0; cls < 3; ++cls)
        margin[synth::kMarginClassNames[static_cast<std::size_t>(cls)]] =
            entry(out.per_class_auroc[static_cast<std::size_t>(cls)],
                  ci([&, cls](const std::vector<std::size_t>& idx) { return class_scores(cls, idx); },
                     0xB0 + static_cast<std::uint64_t>(cls)));
    report["margin_auroc"] = std::move(margin);
    report["malignancy_auroc"] = entry(out.malignancy_auroc, ci(mal_metric, 0xC1));
    report["cohens_kappa"] = entry(out.kappa, ci(kappa_metric, 0xD1));
    ordered_json ap;
    ap["lesion_scale"] = entry(out.ap_lesion, ci(ap_lesion_metric, 0xE1));
    if (any_fine) ap["fine_scale"] = entry(out.ap_fine, ci(ap_fine_metric, 0xE2));
    report["activation_precision"] = std::move(ap);
    report["bootstrap_redraws"] = redraws;
    out.bootstrap_redraws = redraws;
    out.report = std::move(report);

    std::string csv =
        "id,split,true_class,pred_class,p_circumscribed,p_indistinct,p_spiculated,"
        "true_malignant,p_malignant,ap_lesion,ap_fine\n";
    for (const auto& r : out.records) {
        char fine_buf[40] = "";
        if (r.ap_fine) std::snprintf(fine_buf, sizeof(fine_buf), "%.10g", *r.ap_fine);
        char buf[320];
        std::snprintf(buf, sizeof(buf), "%d,%s,%d,%d,%.10g,%.10g,%.10g,%d,%.10g,%.10g,%s\n",
                      r.id, split.c_str(), r.true_class, r.pred_class, r.margin_probs[0],
                      r.margin_probs[1], r.margin_probs[2], r.true_mal, r.malignancy_prob,
                      r.ap_lesion, fine_buf);
        csv += buf;
    }
    out.csv = std::move(csv);
    return out;
}

}  // namespace protomargin::metrics
