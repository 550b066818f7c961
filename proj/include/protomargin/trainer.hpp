#pragma once

// Four-stage training protocol:
//   A1  joint gradient descent on backbone + prototypes (heads frozen)
//   A2  projection of each prototype onto its nearest same-class training
//       patch, recording provenance
//   A3  margin-head tuning on frozen features (first entry initializes the
//       +1/-1 pattern)
//   B   affine logistic regression from unnormalized margin logits to
//       malignancy, run exactly once after the A-cycles
// A1->A2->A3 repeats until the A1 loss stops improving or the cycle budget
// runs out; duplicate prototypes (same projection provenance) are pruned
// after the final cycle, followed by a short head re-tune.
//
// Batches mix coarse-annotated samples (lesion masks) with fine-annotated
// ones, each augmented on the fly. Gradients accumulate per image into
// per-slot buffers and reduce in batch order, so training is a deterministic
// function of (dataset, config) at any thread count.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <vector>

#include <json.hpp>

#include "protomargin/dataset.hpp"
#include "protomargin/losses.hpp"
#include "protomargin/model.hpp"
#include "protomargin/parallel.hpp"

namespace protomargin::trainer {

using model::ModelParams;
using synth::Dataset;
using synth::DatasetSample;

struct TrainConfig {
    losses::Coefficients coefficients;  // cluster 0.8, separation 0.08, fine 0.001
    int k = 5;
    int prototypes_per_class = 5;
    double epsilon = 1e-4;
    int a1_epochs_per_cycle = 20;
    int a3_steps_per_cycle = 150;
    int num_cycles = 3;
    double cycle_tolerance = 1e-3;  // relative loss improvement per cycle
    int coarse_per_batch = 75;
    int fine_per_batch = 10;
    double lr_a1 = 1e-3;
    double lr_a3 = 1e-3;
    double lr_b = 1e-2;
    int b_iterations = 2000;
    bool prune_enabled = true;
    bool augment = true;
    double crop_fraction = 0.8;
    std::uint64_t seed = 7;
    int threads = 0;  // 0 = hardware, capped by PROTO_MARGIN_THREADS
};

// ---- optimizer ------------------------------------------------------------

/// Adaptive-moment gradient descent over a fixed set of parameter buffers.
class Adam {
public:
    Adam(double lr, std::vector<std::size_t> sizes, double beta1 = 0.9,
         double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (std::size_t n : sizes) {
            m_.emplace_back(n, 0.0);
            v_.emplace_back(n, 0.0);
        }
    }

    void step(const std::vector<double*>& params,
              const std::vector<const double*>& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t p = 0; p < m_.size(); ++p) {
            double* x = params[p];
            const double* g = grads[p];
            auto& m = m_[p];
            auto& v = v_[p];
            for (std::size_t i = 0; i < m.size(); ++i) {
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
                x[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
            }
        }
    }

private:
    double lr_, beta1_, beta2_, eps_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

// ---- batches ---------------------------------------------------------------

struct TrainPools {
    std::vector<const DatasetSample*> coarse;  // D: lesion-scale masks only
    std::vector<const DatasetSample*> fine;    // D': fine-annotated subset
};

inline TrainPools split_train_pools(const Dataset& ds) {
    TrainPools pools;
    for (const auto& s : ds.samples) {
        if (s.meta.split != "train") continue;
        if (s.meta.has_fine_mask) pools.fine.push_back(&s);
        else pools.coarse.push_back(&s);
    }
    if (pools.coarse.empty())
        throw std::invalid_argument("training pool D is empty (no coarse-annotated "
                                    "train samples)");
    return pools;
}

/// Requested batch composition after proportional scaling for small corpora.
inline std::pair<int, int> batch_composition(const TrainPools& pools,
                                             const TrainConfig& cfg) {
    const int coarse_n = std::min<int>(cfg.coarse_per_batch,
                                       static_cast<int>(pools.coarse.size()));
    int fine_n = 0;
    if (!pools.fine.empty() && cfg.fine_per_batch > 0) {
        if (coarse_n == cfg.coarse_per_batch) fine_n = cfg.fine_per_batch;
        else
            fine_n = std::max(1, static_cast<int>(std::lround(
                                     static_cast<double>(cfg.fine_per_batch) * coarse_n /
                                     cfg.coarse_per_batch)));
    }
    return {coarse_n, fine_n};
}

/// coarse_per_batch samples from D (without replacement) plus fine_per_batch
/// from D' (with replacement when D' is smaller), shuffled deterministically.
inline std::vector<const DatasetSample*> build_batch(const TrainPools& pools,
                                                     const TrainConfig& cfg, Rng& rng) {
    const auto [coarse_n, fine_n] = batch_composition(pools, cfg);
    std::vector<const DatasetSample*> batch;
    batch.reserve(static_cast<std::size_t>(coarse_n + fine_n));

    std::vector<std::size_t> idx(pools.coarse.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (int i = 0; i < coarse_n; ++i) {  // partial Fisher-Yates draw
        const std::size_t j = i + uniform_index(rng, idx.size() - static_cast<std::size_t>(i));
        std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
        batch.push_back(pools.coarse[idx[static_cast<std::size_t>(i)]]);
    }
    if (fine_n > 0) {
        const bool with_replacement = static_cast<int>(pools.fine.size()) < fine_n;
        std::vector<std::size_t> fidx(pools.fine.size());
        for (std::size_t i = 0; i < fidx.size(); ++i) fidx[i] = i;
        for (int i = 0; i < fine_n; ++i) {
            if (with_replacement) {
                batch.push_back(pools.fine[uniform_index(rng, pools.fine.size())]);
            } else {
                const std::size_t j =
                    i + uniform_index(rng, fidx.size() - static_cast<std::size_t>(i));
                std::swap(fidx[static_cast<std::size_t>(i)], fidx[j]);
                batch.push_back(pools.fine[fidx[static_cast<std::size_t>(i)]]);
            }
        }
    }
    for (std::size_t i = batch.size(); i > 1; --i)
        std::swap(batch[i - 1], batch[uniform_index(rng, i)]);
    return batch;
}

// ---- logging ----------------------------------------------------------------

class TrainLog {
public:
    explicit TrainLog(const std::filesystem::path& path) : out_(path, std::ios::binary) {
        if (!out_) throw std::runtime_error("cannot open training log " + path.string());
        out_ << "step,stage,cross_entropy,cluster,separation,fine,total\n";
    }

    void row(long step, const std::string& stage, const losses::LossBreakdown& b) {
        out_ << step << ',' << stage << ',';
        char buf[200];
        std::snprintf(buf, sizeof(buf), "%.10g,%.10g,%.10g,%.10g,%.10g\n",
                      b.cross_entropy, b.cluster, b.separation, b.fine, b.total);
        out_ << buf;
    }

    void flush() { out_.flush(); }

private:
    std::ofstream out_;
};

// ---- stage A1 ----------------------------------------------------------------

namespace detail {

struct A1Workspace {
    // parameter order: conv weights/biases (3 pairs), then every prototype
    std::vector<double*> param_ptrs;
    std::vector<std::size_t> sizes;

    explicit A1Workspace(ModelParams& p) {
        for (int b = 0; b < 3; ++b) {
            add(p.blocks[static_cast<std::size_t>(b)].weight);
            add(p.blocks[static_cast<std::size_t>(b)].bias);
        }
        add(p.prototypes);
    }

    void add(Tensor& t) {
        param_ptrs.push_back(t.values.data());
        sizes.push_back(t.values.size());
    }
};

struct TrainItem {
    Image image;
    Image mask;  // 0 = relevant (fine mask for D', lesion mask for D)
    int label = 0;
    bool fine = false;
};

inline TrainItem make_train_item(const DatasetSample& s, const TrainConfig& cfg,
                                 Rng& augment_rng) {
    TrainItem item;
    item.label = s.meta.y_margin;
    item.fine = s.meta.has_fine_mask;
    if (cfg.augment) {
        const synth::AugmentParams ap =
            synth::draw_augment_params(augment_rng, cfg.crop_fraction);
        synth::SynthSample tmp;
        tmp.image = s.image;
        tmp.lesion_mask = s.lesion_mask;
        tmp.fine_mask = item.fine ? *s.fine_mask : s.lesion_mask;
        const synth::SynthSample aug = synth::apply_augment(tmp, ap);
        item.image = aug.image;
        item.mask = item.fine ? aug.fine_mask : aug.lesion_mask;
    } else {
        item.image = s.image;
        item.mask = item.fine ? *s.fine_mask : s.lesion_mask;
    }
    return item;
}

struct PerImageResult {
    std::vector<std::vector<double>> grads;  // A1Workspace order
    double ce = 0, cluster_gamma = 0, separation_gamma = 0, fine = 0;
};

}  // namespace detail

struct StepOutcome {
    losses::LossBreakdown breakdown;
    bool finite = true;
};

/// One gradient step on the stage-A1 objective over one batch. Heads stay
/// bit-identical; per-image gradients reduce in batch order.
inline StepOutcome a1_step(ModelParams& params, const std::vector<detail::TrainItem>& items,
                           const TrainConfig& cfg, Adam& adam) {
    const int n = static_cast<int>(items.size());
    std::vector<detail::PerImageResult> slots(static_cast<std::size_t>(n));

    parallel_for(static_cast<std::size_t>(n), cfg.threads, [&](std::size_t i) {
        const detail::TrainItem& item = items[i];
        Tape tape;
        const model::ParamVars pv = model::make_param_vars(tape, params, true, true, false);
        const model::ImageGraph g = model::build_image_graph(tape, pv, params, item.image);
        losses::BatchItem bi{&item.image, item.label, &item.mask, item.fine};
        const losses::ImageLossVars lv = losses::build_image_loss(tape, params, g, bi);
        Var loss = losses::combine_image_loss(tape, lv, cfg.coefficients, n);
        tape.backward(loss);

        detail::PerImageResult& r = slots[i];
        r.ce = tape.scalar(lv.cross_entropy);
        r.cluster_gamma = tape.scalar(lv.cluster_gamma);
        r.separation_gamma = tape.scalar(lv.separation_gamma);
        r.fine = tape.scalar(lv.fine);
        for (int b = 0; b < 3; ++b) {
            r.grads.push_back(tape.grad_tensor(pv.conv_w[static_cast<std::size_t>(b)]).values);
            r.grads.push_back(tape.grad_tensor(pv.conv_b[static_cast<std::size_t>(b)]).values);
        }
        std::vector<double> proto_grad;
        proto_grad.reserve(params.prototypes.numel());
        for (const Var pvar : pv.prototypes) {
            const Tensor g2 = tape.grad_tensor(pvar);
            proto_grad.insert(proto_grad.end(), g2.values.begin(), g2.values.end());
        }
        r.grads.push_back(std::move(proto_grad));
    });

    detail::A1Workspace ws(params);
    std::vector<std::vector<double>> total_grads;
    for (std::size_t p = 0; p < ws.sizes.size(); ++p)
        total_grads.emplace_back(ws.sizes[p], 0.0);
    StepOutcome out;
    auto& b = out.breakdown;
    b.coefficients = cfg.coefficients;
    for (const auto& r : slots) {
        for (std::size_t p = 0; p < total_grads.size(); ++p)
            for (std::size_t i = 0; i < total_grads[p].size(); ++i)
                total_grads[p][i] += r.grads[p][i];
        b.cross_entropy += r.ce;
        b.cluster += r.cluster_gamma;
        b.separation -= r.separation_gamma;
        b.fine += r.fine;
    }
    b.cross_entropy /= n;
    b.cluster /= n;
    b.separation /= n;
    b.total = b.cross_entropy + cfg.coefficients.cluster * b.cluster +
              cfg.coefficients.separation * b.separation + cfg.coefficients.fine * b.fine;
    if (!std::isfinite(b.total)) {
        out.finite = false;
        return out;
    }

    std::vector<const double*> grad_ptrs;
    for (auto& g : total_grads) grad_ptrs.push_back(g.data());
    adam.step(ws.param_ptrs, grad_ptrs);
    for (double& v : params.prototypes.values)  // keep prototypes finite
        v = std::clamp(v, -1e6, 1e6);
    return out;
}

// ---- stage A2: projection ------------------------------------------------------

/// Replaces each prototype by its nearest same-class training patch (squared
/// L2), recording provenance. Ties break toward the lowest image id, then
/// row-major cell. Latents come from the original (unaugmented) images.
inline void project_prototypes(ModelParams& params,
                               const std::vector<const DatasetSample*>& train,
                               int threads = 0) {
    const int m = params.num_prototypes();
    const int c = params.latent_channels();
    std::vector<Tensor> latents(train.size());
    parallel_for(train.size(), threads, [&](std::size_t i) {
        latents[i] = model::compute_latent(params, train[i]->image);
    });

    struct Best {
        double dist = std::numeric_limits<double>::infinity();
        int image_id = -1, cell = -1;
        std::size_t latent_index = 0;
    };
    std::vector<Best> best(static_cast<std::size_t>(m));
    const int grid = model::kLatentGrid;
    const int hw = grid * grid;
    for (std::size_t i = 0; i < train.size(); ++i) {
        const Tensor& latent = latents[i];
        for (int j = 0; j < m; ++j) {
            if (params.proto_class[static_cast<std::size_t>(j)] != train[i]->meta.y_margin)
                continue;
            const double* proto =
                params.prototypes.values.data() + static_cast<std::size_t>(j) * c;
            Best& bj = best[static_cast<std::size_t>(j)];
            for (int l = 0; l < hw; ++l) {
                double d = 0.0;
                for (int ch = 0; ch < c; ++ch) {
                    const double diff =
                        latent.values[static_cast<std::size_t>(ch) * hw + l] - proto[ch];
                    d += diff * diff;
                }
                if (d < bj.dist) {  // strict: earlier image id / cell wins ties
                    bj.dist = d;
                    bj.image_id = train[i]->meta.id;
                    bj.cell = l;
                    bj.latent_index = i;
                }
            }
        }
    }
    for (int j = 0; j < m; ++j) {
        const Best& bj = best[static_cast<std::size_t>(j)];
        if (bj.cell < 0)
            throw std::invalid_argument("projection: no training patch for prototype class " +
                                        std::to_string(params.proto_class[static_cast<std::size_t>(j)]));
        const Tensor& latent = latents[bj.latent_index];
        std::vector<double> patch(static_cast<std::size_t>(c));
        for (int ch = 0; ch < c; ++ch)
            patch[static_cast<std::size_t>(ch)] =
                latent.values[static_cast<std::size_t>(ch) * hw + bj.cell];
        params.set_prototype_vector(j, patch);
        params.provenance[static_cast<std::size_t>(j)] = {true, bj.image_id,
                                                          bj.cell / grid, bj.cell % grid};
    }
}

// ---- pruning ----------------------------------------------------------------

/// Among same-class prototypes sharing projection provenance, keeps the
/// first; margin-head columns of removed prototypes are deleted.
inline void prune_duplicates(ModelParams& params) {
    const int m = params.num_prototypes();
    const int c = params.latent_channels();
    std::vector<int> keep;
    for (int j = 0; j < m; ++j) {
        const auto& pj = params.provenance[static_cast<std::size_t>(j)];
        bool duplicate = false;
        for (int i : keep) {
            const auto& pi = params.provenance[static_cast<std::size_t>(i)];
            if (params.proto_class[static_cast<std::size_t>(i)] ==
                    params.proto_class[static_cast<std::size_t>(j)] &&
                pi.valid && pj.valid && pi.image_id == pj.image_id && pi.row == pj.row &&
                pi.col == pj.col) {
                duplicate = true;
                break;
            }
        }
        if (!duplicate) keep.push_back(j);
    }
    if (static_cast<int>(keep.size()) == m) return;

    const int m2 = static_cast<int>(keep.size());
    Tensor protos = Tensor::zeros({m2, c});
    Tensor w1 = Tensor::zeros({model::kNumClasses, m2});
    std::vector<int> classes(static_cast<std::size_t>(m2));
    std::vector<model::ProtoProvenance> prov(static_cast<std::size_t>(m2));
    for (int jj = 0; jj < m2; ++jj) {
        const int j = keep[static_cast<std::size_t>(jj)];
        for (int ch = 0; ch < c; ++ch)
            protos.values[static_cast<std::size_t>(jj) * c + ch] =
                params.prototypes.values[static_cast<std::size_t>(j) * c + ch];
        classes[static_cast<std::size_t>(jj)] = params.proto_class[static_cast<std::size_t>(j)];
        prov[static_cast<std::size_t>(jj)] = params.provenance[static_cast<std::size_t>(j)];
        for (int cls = 0; cls < model::kNumClasses; ++cls)
            w1.values[static_cast<std::size_t>(cls) * m2 + jj] =
                params.w1.values[static_cast<std::size_t>(cls) * m + j];
    }
    params.prototypes = std::move(protos);
    params.proto_class = std::move(classes);
    params.provenance = std::move(prov);
    params.w1 = std::move(w1);
}

// ---- stage A3 ----------------------------------------------------------------

/// Margin-head tuning on frozen features: full-batch adaptive gradient steps
/// on the margin cross-entropy over precomputed pooled similarity scores.
/// Returns (loss before, loss after).
inline std::pair<double, double> stage_a3(ModelParams& params,
                                          const std::vector<const DatasetSample*>& train,
                                          const TrainConfig& cfg, bool first_entry,
                                          TrainLog* log = nullptr, long* step_counter = nullptr) {
    if (first_entry) params.w1 = model::signed_init_w1(params.proto_class);
    const int m = params.num_prototypes();
    std::vector<std::vector<double>> scores(train.size());
    parallel_for(train.size(), cfg.threads, [&](std::size_t i) {
        scores[i] = model::forward(params, train[i]->image).scores;
    });

    auto epoch_loss = [&](Tape& tape, Var w1) {
        std::vector<Var> ces;
        ces.reserve(train.size());
        for (std::size_t i = 0; i < train.size(); ++i) {
            Var s = tape.constant(Tensor(Shape{m}, scores[i]));
            ces.push_back(softmax_cross_entropy(linear(s, w1), train[i]->meta.y_margin));
        }
        return scale(sum(stack_scalars(ces)), 1.0 / static_cast<double>(train.size()));
    };

    Adam adam(cfg.lr_a3, {params.w1.numel()});
    double before = 0.0, after = 0.0;
    for (int it = 0; it < cfg.a3_steps_per_cycle; ++it) {
        Tape tape;
        Var w1 = tape.param(params.w1);
        Var loss = epoch_loss(tape, w1);
        tape.backward(loss);
        const double value = tape.scalar(loss);
        if (it == 0) before = value;
        after = value;
        const Tensor g = tape.grad_tensor(w1);
        std::vector<double*> ps{params.w1.values.data()};
        std::vector<const double*> gs{g.values.data()};
        adam.step(ps, gs);
        if (log && step_counter) {
            losses::LossBreakdown b;
            b.cross_entropy = value;
            b.total = value;
            log->row(++*step_counter, "A3", b);
        }
    }
    // value after the final update
    {
        Tape tape;
        Var w1 = tape.constant(params.w1);
        after = tape.scalar(epoch_loss(tape, w1));
    }
    return {before, after};
}

// ---- stage B -----------------------------------------------------------------

struct LogisticFit {
    std::array<double, 3> weights{};  // raw-feature space
    double intercept = 0.0;
    double final_loss = 0.0;
};

/// Affine logistic regression by full-batch adaptive gradient descent on the
/// log-loss. Features are standardized internally for conditioning and the
/// learned map is folded back to raw-feature space; zero-variance features
/// get exactly zero weight, leaving the intercept to carry the base rate.
inline LogisticFit fit_logistic(const std::vector<std::array<double, 3>>& feats,
                                const std::vector<double>& labels, double lr,
                                int iterations,
                                const std::function<void(int, double)>& on_progress = {}) {
    const std::size_t n = feats.size();
    if (n == 0 || labels.size() != n)
        throw std::invalid_argument("logistic fit: empty or mismatched inputs");
    {
        double pos = 0;
        for (double y : labels) pos += y;
        if (pos == 0.0 || pos == static_cast<double>(n))
            throw std::invalid_argument(
                "logistic fit: labels are all one class; the fit is degenerate");
    }

    std::array<double, 3> mean{}, sd{};
    for (int f = 0; f < 3; ++f) {
        for (std::size_t i = 0; i < n; ++i) mean[static_cast<std::size_t>(f)] += feats[i][static_cast<std::size_t>(f)];
        mean[static_cast<std::size_t>(f)] /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double d = feats[i][static_cast<std::size_t>(f)] - mean[static_cast<std::size_t>(f)];
            sd[static_cast<std::size_t>(f)] += d * d;
        }
        sd[static_cast<std::size_t>(f)] = std::sqrt(sd[static_cast<std::size_t>(f)] / static_cast<double>(n));
    }

    std::array<double, 3> w{};
    double bias = 0.0, loss = 0.0;
    Adam adam(lr, {3, 1});
    for (int it = 0; it < iterations; ++it) {
        std::array<double, 3> gw{};
        double gb = 0.0;
        loss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double z = bias;
            std::array<double, 3> x{};
            for (int f = 0; f < 3; ++f) {
                x[static_cast<std::size_t>(f)] =
                    sd[static_cast<std::size_t>(f)] > 1e-12
                        ? (feats[i][static_cast<std::size_t>(f)] - mean[static_cast<std::size_t>(f)]) /
                              sd[static_cast<std::size_t>(f)]
                        : 0.0;
                z += w[static_cast<std::size_t>(f)] * x[static_cast<std::size_t>(f)];
            }
            const double p = protomargin::detail::sigmoid_stable(z);
            const double r = p - labels[i];
            for (int f = 0; f < 3; ++f) gw[static_cast<std::size_t>(f)] += r * x[static_cast<std::size_t>(f)];
            gb += r;
            loss += z > 0.0 ? z + std::log1p(std::exp(-z)) - labels[i] * z
                            : std::log1p(std::exp(z)) - labels[i] * z;
        }
        for (double& g : gw) g /= static_cast<double>(n);
        gb /= static_cast<double>(n);
        loss /= static_cast<double>(n);
        std::vector<double*> ps{w.data(), &bias};
        std::vector<const double*> gs{gw.data(), &gb};
        adam.step(ps, gs);
        if (on_progress) on_progress(it, loss);
    }

    LogisticFit fit;
    fit.final_loss = loss;
    for (int f = 0; f < 3; ++f)
        fit.weights[static_cast<std::size_t>(f)] =
            sd[static_cast<std::size_t>(f)] > 1e-12
                ? w[static_cast<std::size_t>(f)] / sd[static_cast<std::size_t>(f)]
                : 0.0;
    fit.intercept = bias;
    for (int f = 0; f < 3; ++f)
        fit.intercept -= fit.weights[static_cast<std::size_t>(f)] * mean[static_cast<std::size_t>(f)];
    return fit;
}

/// Fits the malignancy head on (margin logits, malignancy label) pairs from
/// the original training images. Touches only w2/b2.
inline void stage_b(ModelParams& params, const std::vector<const DatasetSample*>& train,
                    const TrainConfig& cfg, TrainLog* log = nullptr,
                    long* step_counter = nullptr) {
    const std::size_t n = train.size();
    if (n == 0) throw std::invalid_argument("stage B: empty training set");
    std::vector<std::array<double, 3>> feats(n);
    std::vector<double> labels(n);
    parallel_for(n, cfg.threads, [&](std::size_t i) {
        feats[i] = model::forward(params, train[i]->image).margin_logits;
        labels[i] = train[i]->meta.y_mal;
    });
    auto progress = [&](int it, double loss) {
        if (log && step_counter && (it % 100 == 0 || it + 1 == cfg.b_iterations)) {
            losses::LossBreakdown b;
            b.cross_entropy = loss;
            b.total = loss;
            log->row(++*step_counter, "B", b);
        }
    };
    const LogisticFit fit = fit_logistic(feats, labels, cfg.lr_b, cfg.b_iterations, progress);
    for (int f = 0; f < 3; ++f) params.w2.values[static_cast<std::size_t>(f)] = fit.weights[static_cast<std::size_t>(f)];
    params.b2 = fit.intercept;
}

// ---- full protocol --------------------------------------------------------------

struct TrainResult {
    ModelParams params;
    int cycles_run = 0;
    bool converged = false;
    bool diverged = false;
    long steps = 0;
    std::filesystem::path final_checkpoint;
};

inline nlohmann::ordered_json config_json(const TrainConfig& cfg) {
    nlohmann::ordered_json j;
    j["lambda_cluster"] = cfg.coefficients.cluster;
    j["lambda_separation"] = cfg.coefficients.separation;
    j["lambda_fine"] = cfg.coefficients.fine;
    j["k"] = cfg.k;
    j["prototypes_per_class"] = cfg.prototypes_per_class;
    j["epsilon"] = cfg.epsilon;
    j["a1_epochs_per_cycle"] = cfg.a1_epochs_per_cycle;
    j["a3_steps_per_cycle"] = cfg.a3_steps_per_cycle;
    j["num_cycles"] = cfg.num_cycles;
    j["cycle_tolerance"] = cfg.cycle_tolerance;
    j["coarse_per_batch"] = cfg.coarse_per_batch;
    j["fine_per_batch"] = cfg.fine_per_batch;
    j["lr_a1"] = cfg.lr_a1;
    j["lr_a3"] = cfg.lr_a3;
    j["lr_b"] = cfg.lr_b;
    j["b_iterations"] = cfg.b_iterations;
    j["prune_enabled"] = cfg.prune_enabled;
    j["augment"] = cfg.augment;
    j["crop_fraction"] = cfg.crop_fraction;
    j["seed"] = cfg.seed;
    return j;
}

/// Runs A-cycles to convergence (or the cycle budget), prunes, re-tunes the
/// margin head, then fits the malignancy head once. Writes per-stage
/// checkpoints, a CSV loss log and a run manifest under out_dir.
inline TrainResult train(const Dataset& ds, const TrainConfig& cfg,
                         const std::filesystem::path& out_dir,
                         const std::filesystem::path& dataset_manifest = {}) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    TrainPools pools = split_train_pools(ds);
    std::vector<const DatasetSample*> train_all;
    for (const auto& s : ds.samples)
        if (s.meta.split == "train") train_all.push_back(&s);

    SeedStreams streams(cfg.seed);
    Rng init_rng = streams.stream("init");
    Rng batch_rng = streams.stream("batching");
    Rng augment_rng = streams.stream("augment");

    TrainResult result;
    result.params = model::init_model(init_rng, cfg.prototypes_per_class, cfg.k, cfg.epsilon);
    ModelParams& params = result.params;

    TrainLog log(out_dir / "training_log.csv");
    long step = 0;
    const int steps_per_epoch = std::max<std::size_t>(
        1, (pools.coarse.size() + static_cast<std::size_t>(cfg.coarse_per_batch) - 1) /
               static_cast<std::size_t>(cfg.coarse_per_batch));

    double prev_cycle_loss = std::numeric_limits<double>::quiet_NaN();
    bool first_a3 = true;
    for (int cycle = 1; cycle <= cfg.num_cycles; ++cycle) {
        // A1: joint optimization, heads frozen
        Adam adam(cfg.lr_a1, detail::A1Workspace(params).sizes);
        double last_epoch_loss = 0.0;
        for (int epoch = 0; epoch < cfg.a1_epochs_per_cycle; ++epoch) {
            const ModelParams snapshot = params;
            double epoch_loss = 0.0;
            for (int s = 0; s < steps_per_epoch; ++s) {
                const auto batch = build_batch(pools, cfg, batch_rng);
                std::vector<detail::TrainItem> items;
                items.reserve(batch.size());
                for (const DatasetSample* ds_ptr : batch)
                    items.push_back(detail::make_train_item(*ds_ptr, cfg, augment_rng));
                const StepOutcome outcome = a1_step(params, items, cfg, adam);
                if (!outcome.finite) {
                    params = snapshot;  // divergence: back to last good state
                    result.diverged = true;
                    result.final_checkpoint = out_dir / "checkpoint_diverged.pmck";
                    model::save_checkpoint(params, result.final_checkpoint);
                    log.flush();
                    return result;
                }
                log.row(++step, "A1", outcome.breakdown);
                epoch_loss += outcome.breakdown.total;
            }
            last_epoch_loss = epoch_loss / steps_per_epoch;
        }

        project_prototypes(params, train_all, cfg.threads);
        model::save_checkpoint(params, out_dir / ("checkpoint_cycle" + std::to_string(cycle) +
                                                  "_a2.pmck"));
        stage_a3(params, train_all, cfg, first_a3, &log, &step);
        first_a3 = false;

        result.cycles_run = cycle;
        if (!std::isnan(prev_cycle_loss)) {
            const double improvement =
                (prev_cycle_loss - last_epoch_loss) / std::max(std::abs(prev_cycle_loss), 1e-12);
            if (improvement < cfg.cycle_tolerance) {
                result.converged = true;
            }
        }
        prev_cycle_loss = last_epoch_loss;
        if (result.converged) break;
    }

    if (cfg.prune_enabled) {
        prune_duplicates(params);
        stage_a3(params, train_all, cfg, false, &log, &step);  // re-tune pruned head
    }
    stage_b(params, train_all, cfg, &log, &step);

    result.steps = step;
    result.final_checkpoint = out_dir / "checkpoint_final.pmck";
    model::save_checkpoint(params, result.final_checkpoint);

    nlohmann::ordered_json manifest;
    manifest["config"] = config_json(cfg);
    manifest["cycles_run"] = result.cycles_run;
    manifest["converged"] = result.converged;
    if (!dataset_manifest.empty())
        manifest["dataset_manifest_fnv1a"] = synth::file_fnv1a(dataset_manifest);
    std::ofstream mf(out_dir / "run_manifest.json", std::ios::binary);
    mf << manifest.dump(2) << "\n";
    log.flush();
    return result;
}

}  // namespace protomargin::trainer
