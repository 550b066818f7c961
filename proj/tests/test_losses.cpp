#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "protomargin/gradcheck.hpp"
#include "protomargin/losses.hpp"
#include "protomargin/synth.hpp"

using namespace protomargin;
using namespace protomargin::losses;
using protomargin::model::ModelParams;
using protomargin::model::ParamVars;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.values) v = uniform_double(rng, lo, hi);
    return t;
}

}  // namespace

TEST(ClusterCost, ZeroWhenPrototypeMatchesPatch) {
    Rng rng(1);
    Tensor latent = random_tensor({3, 2, 2}, rng);
    Tensor proto = Tensor::zeros({3});
    for (int c = 0; c < 3; ++c) proto.values[static_cast<std::size_t>(c)] = latent.values[static_cast<std::size_t>(c) * 4 + 2];
    Tape tape;
    std::vector<Var> latents = {tape.constant(latent)};
    std::vector<Var> protos = {tape.constant(proto)};
    std::vector<int> labels = {0};
    Var c = cluster_cost(tape, latents, labels, protos, {0}, 1);
    EXPECT_DOUBLE_EQ(tape.scalar(c), 0.0);
}

TEST(ClusterCost, MinkAverageHandToy) {
    // two patches at squared distances 1 and 4 from the only same-class
    // prototype; k = 2 averages both: gamma = 2.5
    Tape tape;
    Tensor latent({1, 1, 2}, {1.0, 2.0});
    Tensor proto({1}, {0.0});
    std::vector<Var> latents = {tape.constant(latent)};
    std::vector<Var> protos = {tape.constant(proto)};
    std::vector<int> labels = {0};
    Var c = cluster_cost(tape, latents, labels, protos, {0}, 2);
    EXPECT_DOUBLE_EQ(tape.scalar(c), 2.5);
}

TEST(ClusterCost, KOneReducesToProtoPNet) {
    Rng rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        const int n_images = 3, C = 4, HW = 9;
        std::vector<std::vector<double>> latents_raw;
        std::vector<int> labels;
        for (int i = 0; i < n_images; ++i) {
            Tensor t = random_tensor({C, 3, 3}, rng);
            latents_raw.push_back(t.values);
            labels.push_back(uniform_int(rng, 0, 2));
        }
        std::vector<std::vector<double>> protos_raw;
        std::vector<int> proto_class;
        for (int j = 0; j < 6; ++j) {
            protos_raw.push_back(random_tensor({C}, rng).values);
            proto_class.push_back(j % 3);
        }
        Tape tape;
        std::vector<Var> latents, protos;
        for (const auto& lv : latents_raw) latents.push_back(tape.constant(Tensor({C, 3, 3}, lv)));
        for (const auto& pv : protos_raw) protos.push_back(tape.constant(Tensor({C}, pv)));
        const double ours = tape.scalar(cluster_cost(tape, latents, labels, protos, proto_class, 1));
        const double ref =
            oracles::protopnet_cluster(latents_raw, C, HW, labels, protos_raw, proto_class);
        EXPECT_NEAR(ours, ref, 1e-12);
    }
}

TEST(ClusterCost, RejectsClassWithoutPrototype) {
    Tape tape;
    std::vector<Var> latents = {tape.constant(Tensor::full({1, 2, 2}, 0.3))};
    std::vector<Var> protos = {tape.constant(Tensor::full({1}, 0.1))};
    std::vector<int> labels = {2};  // no prototype carries class 2
    EXPECT_THROW(cluster_cost(tape, latents, labels, protos, {0}, 1), std::invalid_argument);
}

TEST(SeparationCost, SingleImageContributesNegatedGamma) {
    // nearest wrong-class prototype at squared distance 4 -> Sep = -4
    Tape tape;
    Tensor latent({1, 1, 1}, {2.0});
    std::vector<Var> latents = {tape.constant(latent)};
    std::vector<Var> protos = {tape.constant(Tensor({1}, {2.0})),   // same class
                               tape.constant(Tensor({1}, {0.0}))};  // wrong class, d = 4
    std::vector<int> labels = {0};
    Var s = separation_cost(tape, latents, labels, protos, {0, 1}, 1);
    EXPECT_DOUBLE_EQ(tape.scalar(s), -4.0);
}

TEST(SeparationCost, MovingWrongPrototypesFartherNeverIncreasesSep) {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor latent = random_tensor({2, 2, 2}, rng);  // values in [0,1]
        const double base = uniform_double(rng, 1.5, 2.0);
        const double farther = base + uniform_double(rng, 0.1, 2.0);
        auto eval = [&](double level) {
            Tape tape;
            std::vector<Var> latents = {tape.constant(latent)};
            std::vector<Var> protos = {tape.constant(Tensor::full({2}, 0.5)),
                                       tape.constant(Tensor::full({2}, level))};
            std::vector<int> labels = {0};
            return tape.scalar(separation_cost(tape, latents, labels, protos, {0, 1}, 2));
        };
        EXPECT_LE(eval(farther), eval(base) + 1e-12);
    }
}

TEST(SeparationCost, KOneReducesToProtoPNet) {
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        const int C = 3, HW = 4;
        std::vector<std::vector<double>> latents_raw = {random_tensor({C, 2, 2}, rng).values,
                                                        random_tensor({C, 2, 2}, rng).values};
        std::vector<int> labels = {uniform_int(rng, 0, 2), uniform_int(rng, 0, 2)};
        std::vector<std::vector<double>> protos_raw;
        std::vector<int> proto_class;
        for (int j = 0; j < 6; ++j) {
            protos_raw.push_back(random_tensor({C}, rng).values);
            proto_class.push_back(j % 3);
        }
        Tape tape;
        std::vector<Var> latents, protos;
        for (const auto& lv : latents_raw) latents.push_back(tape.constant(Tensor({C, 2, 2}, lv)));
        for (const auto& pv : protos_raw) protos.push_back(tape.constant(Tensor({C}, pv)));
        const double ours =
            tape.scalar(separation_cost(tape, latents, labels, protos, proto_class, 1));
        const double ref =
            oracles::protopnet_separation(latents_raw, C, HW, labels, protos_raw, proto_class);
        EXPECT_NEAR(ours, ref, 1e-12);
        EXPECT_LE(ours, 0.0);
    }
}

TEST(FineLoss, AllRelevantMaskSilencesSameClassTerms) {
    Tape tape;
    std::vector<Var> sims = {tape.constant(Tensor::full({2, 2}, 1.3)),
                             tape.constant(Tensor::full({2, 2}, 0.7))};
    Image mask(8, 8, 0.0);  // everything relevant
    const FineTerms t = fine_annotation_terms(tape, sims, {0, 1}, 0, mask);
    EXPECT_DOUBLE_EQ(tape.scalar(t.same_class), 0.0);
    EXPECT_NEAR(tape.scalar(t.other_class), 0.7 * 8.0, 1e-12);  // ||const 0.7 on 8x8||
}

TEST(FineLoss, AllOnesMaskCountsEveryPrototype) {
    Tape tape;
    std::vector<Var> sims = {tape.constant(Tensor::full({2, 2}, 1.5)),
                             tape.constant(Tensor::full({2, 2}, 2.0))};
    Image mask(8, 8, 1.0);  // nothing relevant
    const FineTerms t = fine_annotation_terms(tape, sims, {0, 1}, 0, mask);
    EXPECT_NEAR(tape.scalar(t.same_class), 1.5 * 8.0, 1e-12);
    EXPECT_NEAR(tape.scalar(t.other_class), 2.0 * 8.0, 1e-12);
    // normalized by sqrt(64): (12 + 16) / 8
    EXPECT_NEAR(tape.scalar(t.normalized), 3.5, 1e-12);
}

TEST(FineLoss, HalfRelevantClosedForm) {
    // constant PAM value v on a p x p map with a half-relevant mask:
    // same-class term v*p/sqrt(2), wrong-class term v*p
    const double v = 1.7;
    const int p = 16;
    Tape tape;
    std::vector<Var> sims = {tape.constant(Tensor::full({2, 2}, v)),
                             tape.constant(Tensor::full({2, 2}, v))};
    Image mask(p, p, 0.0);
    for (int y = 0; y < p; ++y)
        for (int x = 0; x < p / 2; ++x) mask.at(y, x) = 1.0;
    const FineTerms t = fine_annotation_terms(tape, sims, {0, 1}, 0, mask);
    EXPECT_NEAR(tape.scalar(t.same_class), v * p / std::sqrt(2.0), 1e-12);
    EXPECT_NEAR(tape.scalar(t.other_class), v * p, 1e-12);
}

TEST(FineLoss, RejectsMaskSmallerThanGrid) {
    Tape tape;
    std::vector<Var> sims = {tape.constant(Tensor::full({14, 14}, 1.0))};
    Image mask(8, 8, 1.0);
    EXPECT_THROW(fine_annotation_terms(tape, sims, {0}, 0, mask), std::invalid_argument);
}

namespace {

struct ToyBatch {
    ModelParams params;
    std::vector<synth::SynthSample> samples;
    std::vector<BatchItem> items;
};

ToyBatch make_toy_batch(std::uint64_t seed, int n_images, int per_class = 1, int k = 2) {
    ToyBatch toy;
    Rng rng(seed);
    toy.params = model::init_model(rng, per_class, k);
    for (int i = 0; i < n_images; ++i) {
        const int cls = i % 3;
        Rng srng(seed + 100 + static_cast<std::uint64_t>(i));
        toy.samples.push_back(
            synth::generate_sample(synth::random_spec(cls, srng), srng()));
    }
    // seed prototypes near real latent patches so similarity values spread
    // out; finite-difference probes must stay clear of top-k ties
    {
        const model::ForwardResult fr = model::forward(toy.params, toy.samples[0].image);
        const int c = toy.params.latent_channels();
        for (int j = 0; j < toy.params.num_prototypes(); ++j) {
            const int cell = uniform_int(rng, 0, 14 * 14 - 1);
            std::vector<double> v(static_cast<std::size_t>(c));
            for (int ch = 0; ch < c; ++ch)
                v[static_cast<std::size_t>(ch)] =
                    fr.latent.values[static_cast<std::size_t>(ch) * 196 + cell] +
                    uniform_double(rng, -0.2, 0.2);
            toy.params.set_prototype_vector(j, v);
        }
    }
    for (int i = 0; i < n_images; ++i) {
        BatchItem item;
        item.image = &toy.samples[static_cast<std::size_t>(i)].image;
        item.label = toy.samples[static_cast<std::size_t>(i)].y_margin;
        item.mask = i % 2 == 0 ? &toy.samples[static_cast<std::size_t>(i)].fine_mask
                               : &toy.samples[static_cast<std::size_t>(i)].lesion_mask;
        item.fine_annotated = i % 2 == 0;
        toy.items.push_back(item);
    }
    return toy;
}

}  // namespace

TEST(TotalObjective, DefaultCoefficientsAreTheShippedOnes) {
    const Coefficients c;
    EXPECT_DOUBLE_EQ(c.cluster, 0.8);
    EXPECT_DOUBLE_EQ(c.separation, 0.08);
    EXPECT_DOUBLE_EQ(c.fine, 0.001);
}

TEST(TotalObjective, BreakdownIsConsistent) {
    ToyBatch toy = make_toy_batch(50, 3);
    Tape tape;
    const ParamVars pv = model::make_param_vars(tape, toy.params, true, true, false);
    const BatchObjective obj = total_objective(tape, toy.params, pv, toy.items, {});
    const auto& b = obj.breakdown;
    EXPECT_NEAR(b.total,
                b.cross_entropy + 0.8 * b.cluster + 0.08 * b.separation + 0.001 * b.fine,
                1e-12);
    EXPECT_GE(b.cluster, 0.0);
    EXPECT_LE(b.separation, 0.0);
    EXPECT_GE(b.fine, 0.0);
}

TEST(TotalObjective, ZeroFineCoefficientReducesToPrototypeObjective) {
    ToyBatch toy = make_toy_batch(51, 2);
    Coefficients no_fine;
    no_fine.fine = 0.0;
    Tape tape;
    const ParamVars pv = model::make_param_vars(tape, toy.params, true, true, false);
    const BatchObjective obj = total_objective(tape, toy.params, pv, toy.items, no_fine);
    EXPECT_NEAR(obj.breakdown.total,
                obj.breakdown.cross_entropy + 0.8 * obj.breakdown.cluster +
                    0.08 * obj.breakdown.separation,
                1e-12);
}

TEST(TotalObjective, PermutationInvariantOverBatchOrder) {
    ToyBatch toy = make_toy_batch(52, 4);
    auto eval = [&](const std::vector<BatchItem>& items) {
        Tape tape;
        const ParamVars pv = model::make_param_vars(tape, toy.params, false, false, false);
        return total_objective(tape, toy.params, pv, items, {}).breakdown;
    };
    const LossBreakdown a = eval(toy.items);
    std::vector<BatchItem> shuffled = {toy.items[2], toy.items[0], toy.items[3], toy.items[1]};
    const LossBreakdown b = eval(shuffled);
    EXPECT_NEAR(a.total, b.total, 1e-12);
    EXPECT_NEAR(a.cluster, b.cluster, 1e-12);
    EXPECT_NEAR(a.fine, b.fine, 1e-12);
}

TEST(TotalObjective, GradientMatchesCentralDifferencesOnToyBatch) {
    ToyBatch toy = make_toy_batch(53, 2, 1, 2);
    const ModelParams& mp = toy.params;
    std::vector<Tensor> params;
    for (int b = 0; b < 3; ++b) {
        params.push_back(mp.blocks[static_cast<std::size_t>(b)].weight);
        params.push_back(mp.blocks[static_cast<std::size_t>(b)].bias);
    }
    for (int j = 0; j < mp.num_prototypes(); ++j)
        params.push_back(Tensor({mp.latent_channels()}, mp.prototype_vector(j)));

    auto build = [&](Tape& tape, const std::vector<Var>& v) {
        ParamVars pv;
        for (int b = 0; b < 3; ++b) {
            pv.conv_w[static_cast<std::size_t>(b)] = v[static_cast<std::size_t>(2 * b)];
            pv.conv_b[static_cast<std::size_t>(b)] = v[static_cast<std::size_t>(2 * b + 1)];
        }
        for (int j = 0; j < mp.num_prototypes(); ++j)
            pv.prototypes.push_back(v[static_cast<std::size_t>(6 + j)]);
        pv.w1 = tape.constant(mp.w1);
        return total_objective(tape, mp, pv, toy.items, {}).total;
    };
    // step 1e-5: small enough that the probe interval stays clear of the
    // nearest top-k / relu kinks at this seed
    const auto report = grad_check(params, build, 1e-5, 6, 99);
    EXPECT_LE(report.max_rel_err, 1e-3) << report.worst_location;
    EXPECT_GE(report.coords_checked, 50u);
}
