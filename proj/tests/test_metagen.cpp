#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "oracles.hpp"

using namespace dam;
using namespace dam::testing;

namespace {

double tensor_norm(const Tensor<float>& t) {
    double s = 0;
    for (float v : t.data()) s += double(v) * v;
    return std::sqrt(s);
}

}  // namespace

TEST(Pairs, CountsFollowTheFormula) {
    const auto five_one = build_pairs(5, 1);
    EXPECT_EQ(five_one.size(), 20u);
    const auto five_five = build_pairs(5, 5);
    for (std::size_t c = 0; c < 5; ++c)
        EXPECT_EQ(std::count_if(five_five.begin(), five_five.end(), [c](const auto& p) { return p.anchor_class == c; }),
                  100);
}

TEST(Pairs, MatchBruteForceEnumeration) {
    const Outcome o = check_pair_oracle();
    EXPECT_TRUE(o.pass) << o.detail;
}

TEST(Pairs, GroupedByAnchorClass) {
    const auto pairs = build_pairs(4, 3);
    for (std::size_t i = 1; i < pairs.size(); ++i) EXPECT_LE(pairs[i - 1].anchor_class, pairs[i].anchor_class);
    for (const auto& p : pairs) {
        EXPECT_EQ(p.anchor_row / 3, p.anchor_class);
        EXPECT_EQ(p.other_row / 3, p.other_class);
    }
}

TEST(Pairs, RejectsSingleClass) {
    EXPECT_THROW(build_pairs(1, 3), std::invalid_argument);
    EXPECT_THROW(build_pairs(3, 0), std::invalid_argument);
}

TEST(Pairs, FeaturesConcatenateAnchorThenOther) {
    // Support rows carry their own row index in every channel.
    Tensor<double> support({4, 1, 1, 2});
    for (std::size_t r = 0; r < 4; ++r) support[r * 2] = support[r * 2 + 1] = double(r);
    Tape<double> tape;
    const auto pairs = build_pairs(2, 2);
    const Tensor<double> f = pair_features(tape.constant(support), pairs).value();
    ASSERT_EQ(f.shape(), (Shape{8, 1, 1, 4}));
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        EXPECT_EQ(f[i * 4 + 0], double(pairs[i].anchor_row));
        EXPECT_EQ(f[i * 4 + 1], double(pairs[i].anchor_row));
        EXPECT_EQ(f[i * 4 + 2], double(pairs[i].other_row));
        EXPECT_EQ(f[i * 4 + 3], double(pairs[i].other_row));
    }
}

TEST(Encoder, PoolsOnlyWhileTheMapAllows) {
    for (std::size_t side : {16u, 32u, 84u}) {
        ModelDims dims = small_dims(side, 2, 5);
        const Model<double> model = init_model<double>(dims, Variant::full, 1);
        std::mt19937_64 rng(side);
        const std::size_t h = dims.feat_side();
        Tape<double> tape;
        Binding<double> bind(tape, false);
        const Tensor<double> out =
            encode(bind, model.meta, tape.constant(random_tensor({4, h, h, kPairChannels}, rng)), true).value();
        EXPECT_EQ(out.shape(), (Shape{4, 5})) << side;
    }
}

TEST(Stats, TwoPointExample) {
    Tape<double> tape;
    const auto stats = class_stats(tape.constant(Tensor<double>::of({2, 1}, {1, 3})), 1);
    EXPECT_DOUBLE_EQ(stats.mu[0].value()[0], 2.0);
    EXPECT_DOUBLE_EQ(stats.sigma[0].value()[0], std::sqrt(2.0));
}

TEST(Stats, IdenticalEncodingsHaveZeroSigma) {
    Tape<double> tape;
    const auto stats = class_stats(tape.constant(Tensor<double>({6, 3}, 0.37)), 2);
    for (const auto& s : stats.sigma)
        for (double v : s.value().data()) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(tape.diagnostics().degenerate_std, 0u);
}

TEST(Stats, MatchIndependentRecomputationAndFallback) {
    const StatsOracle o = check_stats_oracle();
    EXPECT_LE(o.max_error, 1e-6);
    EXPECT_TRUE(o.fallback_ok) << o.detail;
}

TEST(Stats, InvariantToPairOrderWithinClass) {
    std::mt19937_64 rng(3);
    const Tensor<double> enc = random_tensor({8, 5}, rng);
    Tensor<double> shuffled = enc;
    // Reverse the rows of the second class (rows 4..7).
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t d = 0; d < 5; ++d) shuffled[(4 + r) * 5 + d] = enc[(7 - r) * 5 + d];
    Tape<double> tape;
    const auto a = class_stats(tape.constant(enc), 2);
    const auto b = class_stats(tape.constant(shuffled), 2);
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t d = 0; d < 5; ++d) {
            EXPECT_NEAR(a.mu[c].value()[d], b.mu[c].value()[d], 1e-14);
            EXPECT_NEAR(a.sigma[c].value()[d], b.sigma[c].value()[d], 1e-14);
        }
}

TEST(Stats, RejectsUnevenGroups) {
    Tape<double> tape;
    EXPECT_THROW(class_stats(tape.constant(Tensor<double>({5, 2})), 2), ShapeError);
}

TEST(Latent, ZeroSigmaReturnsMean) {
    std::mt19937_64 gen(4);
    Tape<double> tape;
    LatentClassStats<double> stats;
    for (int c = 0; c < 3; ++c) {
        stats.mu.push_back(tape.constant(random_tensor({4}, gen)));
        stats.sigma.push_back(tape.constant(Tensor<double>({4})));
    }
    Rng rng(1);
    const auto sample = sample_latent(stats, rng, false);
    for (int c = 0; c < 3; ++c) EXPECT_EQ(sample.per_class[c].value().storage(), stats.mu[c].value().storage());
}

TEST(Latent, DeterministicJointIsConcatenatedMeans) {
    std::mt19937_64 gen(5);
    Tape<double> tape;
    LatentClassStats<double> stats;
    std::vector<double> expected;
    for (int c = 0; c < 3; ++c) {
        stats.mu.push_back(tape.constant(random_tensor({4}, gen)));
        stats.sigma.push_back(tape.constant(uniform_tensor({4}, gen, 0.5, 2.0)));
        expected.insert(expected.end(), stats.mu.back().value().data().begin(), stats.mu.back().value().data().end());
    }
    Rng rng(1);
    EXPECT_EQ(sample_latent(stats, rng, true).joint.value().storage(), expected);
    Rng rng2(1);
    const auto noisy = sample_latent(stats, rng2, false);
    std::vector<double> joined;
    for (const auto& d : noisy.per_class) joined.insert(joined.end(), d.value().data().begin(), d.value().data().end());
    EXPECT_EQ(noisy.joint.value().storage(), joined);
    EXPECT_NE(joined, expected);
}

TEST(Latent, MonteCarloMeanApproachesMu) {
    std::mt19937_64 gen(6);
    const Tensor<double> mu = random_tensor({8}, gen), sigma = uniform_tensor({8}, gen, 0.1, 3.0);
    std::vector<double> acc(8, 0.0);
    const std::size_t draws = 10000;
    Rng rng(7);
    for (std::size_t i = 0; i < draws; ++i) {
        Tape<double> tape;
        LatentClassStats<double> stats{{tape.constant(mu)}, {tape.constant(sigma)}};
        const auto s = sample_latent(stats, rng, false);
        for (std::size_t d = 0; d < 8; ++d) acc[d] += s.per_class[0].value()[d];
    }
    for (std::size_t d = 0; d < 8; ++d)
        EXPECT_LE(std::abs(acc[d] / double(draws) - mu[d]), 4 * sigma[d] / std::sqrt(double(draws))) << d;
}

TEST(Latent, FreshNoisePerClass) {
    Tape<double> tape;
    LatentClassStats<double> stats;
    for (int c = 0; c < 2; ++c) {
        stats.mu.push_back(tape.constant(Tensor<double>({6})));
        stats.sigma.push_back(tape.constant(Tensor<double>({6}, 1.0)));
    }
    Rng rng(8);
    const auto s = sample_latent(stats, rng, false);
    EXPECT_NE(s.per_class[0].value().storage(), s.per_class[1].value().storage());
}

TEST(Generate, NormalisationInvariants) {
    const NormalizationOracle o = check_normalization(100, small_dims(32, 5, 16));
    EXPECT_EQ(o.generations, 100u);
    EXPECT_LE(o.max_conv_norm_error, 1e-5);
    EXPECT_LE(o.max_fc_norm_error, 1e-5);
    EXPECT_GE(o.min_attention, 0.0);
    EXPECT_LE(o.max_attention, 1.0);
}

TEST(Generate, ShapesAndPerClassAttention) {
    const ModelDims dims = small_dims(32, 3, 4);
    const Model<double> model = init_model<double>(dims, Variant::full, 2);
    std::mt19937_64 gen(9);
    Tape<double> tape;
    Binding<double> bind(tape, false);
    LatentSample<double> latent;
    for (int c = 0; c < 3; ++c) latent.per_class.push_back(tape.constant(random_tensor({4}, gen)));
    latent.joint = concat(latent.per_class);
    const auto w = generate_weights(bind, latent, model.meta, dims);
    ASSERT_EQ(w.attention.size(), 3u);
    for (const auto& a : w.attention) EXPECT_EQ(a.shape(), (Shape{2, 2, 128}));
    EXPECT_EQ(w.conv_kernel.shape(), (Shape{3, 3, 128, 64}));
    EXPECT_EQ(w.fc_weight.shape(), (Shape{1, 256}));
    EXPECT_EQ(w.fc_bias.shape(), (Shape{1}));
    EXPECT_NE(w.attention[0].value().storage(), w.attention[1].value().storage());
    // Attention of class n depends only on d^n.
    Tape<double> tape2;
    Binding<double> bind2(tape2, false);
    const Tensor<double> a0 = sigmoid(affine(bind2, model.meta.gen_attention, tape2.constant(latent.per_class[0].value()))).value();
    EXPECT_EQ(a0.storage(), w.attention[0].value().storage());
    const auto off = generate_weights(bind, latent, model.meta, dims, false);
    for (const auto& a : off.attention)
        for (double v : a.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Generate, ZeroKernelIsGuardedAndFlagged) {
    const ModelDims dims = small_dims(16, 2, 3);
    Model<double> model = init_model<double>(dims, Variant::full, 3);
    model.meta.gen_conv.weight.fill(0.0);
    model.meta.gen_conv.bias.fill(0.0);
    Tape<double> tape;
    Binding<double> bind(tape, false);
    LatentSample<double> latent;
    for (int c = 0; c < 2; ++c) latent.per_class.push_back(tape.constant(Tensor<double>({3}, 1.0)));
    latent.joint = concat(latent.per_class);
    const auto w = generate_weights(bind, latent, model.meta, dims);
    for (double v : w.conv_kernel.value().data()) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(tape.diagnostics().zero_norm_guards, kEmbeddingFilters);
}

TEST(Generate, ClassPermutationPermutesOutputs) {
    const Dataset ds = small_synthetic(32);
    const ModelDims dims = small_dims(32, 3, 6);
    const Model<double> model = init_model<double>(dims, Variant::full, 4);
    Rng rng(10);
    const Episode ep = sample_episode(ds, Split::train, 3, 2, 1, rng);
    const EpisodeImages imgs = materialize(ds, ep, false);
    const std::vector<std::size_t> perm{2, 0, 1};  // new class c holds old class perm[c]
    const std::size_t per = imgs.support.size() / 6;
    Tensor<float> permuted(imgs.support.shape());
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t s = 0; s < 2; ++s)
            std::copy_n(imgs.support.raw() + (perm[c] * 2 + s) * per, per, permuted.raw() + (c * 2 + s) * per);

    auto run = [&](const Tensor<float>& support, std::vector<Tensor<double>>& attention, Tensor<double>& joint) {
        Tape<double> tape;
        Binding<double> bind(tape, false);
        const auto feats = embed_episode(bind, model, support.cast<double>(), imgs.query.cast<double>(), true);
        const auto latent = latent_stats(bind, model, feats.support, 3, 2, true);
        Rng unused(0);
        const auto sample = draw_latent(latent, unused, true);
        const auto w = generate_weights(bind, sample, model.meta, dims);
        for (const auto& a : w.attention) attention.push_back(a.value());
        joint = sample.joint.value();
    };
    std::vector<Tensor<double>> att_a, att_b;
    Tensor<double> joint_a, joint_b;
    run(imgs.support, att_a, joint_a);
    run(permuted, att_b, joint_b);
    const std::size_t dz = 6;
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < att_b[c].size(); ++i) EXPECT_NEAR(att_b[c][i], att_a[perm[c]][i], 1e-9);
        for (std::size_t d = 0; d < dz; ++d) EXPECT_NEAR(joint_b[c * dz + d], joint_a[perm[c] * dz + d], 1e-9);
    }
}

TEST(Generate, EveryMetaParameterReceivesGradient) {
    const Dataset ds = small_synthetic();
    for (Variant v : kAllVariants) {
        const Model<float> model = init_model<float>(small_dims(), v, 5);
        Rng rng(11), latent(12);
        const Episode ep = sample_episode(ds, Split::train, 3, 1, 2, rng);
        Tape<float> tape;
        Binding<float> bind(tape, true);
        tape.backward(episode_loss(bind, model, ds, ep, latent));
        model.meta.visit([&](const std::string& name, const Tensor<float>& p) {
            if (v == Variant::no_attention && name.find("gen_attention") != std::string::npos) {
                EXPECT_EQ(bind.grad(p), nullptr) << name;
                return;
            }
            const Tensor<float>* g = bind.grad(p);
            ASSERT_NE(g, nullptr) << to_string(v) << " " << name;
            EXPECT_GT(tensor_norm(*g), 0.0) << to_string(v) << " " << name;
        });
    }
}

TEST(Variants, GeneratorAndEncoderShapes) {
    const ModelDims dims = small_dims(32, 4, 8);
    const Model<float> full = init_model<float>(dims, Variant::full, 1);
    EXPECT_EQ(full.meta.encoder[0].kernel.dim(2), 128u);
    EXPECT_EQ(full.meta.gen_attention.in_dim(), 8u);
    EXPECT_EQ(full.meta.gen_conv.in_dim(), 32u);
    EXPECT_EQ(full.meta.gen_fc.in_dim(), 32u);
    EXPECT_EQ(full.meta.gen_fc.out_dim(), 2u * 2u * 64u + 1u);
    EXPECT_FALSE(full.meta.sigma_head.has_value());
    EXPECT_EQ(init_model<float>(dims, Variant::no_pairs, 1).meta.encoder[0].kernel.dim(2), 64u);
    EXPECT_TRUE(init_model<float>(dims, Variant::no_variance, 1).meta.sigma_head.has_value());
    const Model<float> mn = init_model<float>(dims, Variant::matching_net, 1);
    EXPECT_EQ(mn.meta.gen_conv.out_dim(), 9u * 64u * 64u);
    EXPECT_EQ(mn.meta.gen_fc.out_dim(), dims.transform_dim * dims.fc_in() + dims.transform_dim);
}

TEST(Variants, NoMultimodalSharesOneDraw) {
    const Dataset ds = small_synthetic();
    const Model<double> model = init_model<double>(small_dims(), Variant::no_multimodal, 6);
    Rng rng(13);
    const Episode ep = sample_episode(ds, Split::train, 3, 1, 1, rng);
    const EpisodeImages imgs = materialize(ds, ep, false);
    Tape<double> tape;
    Binding<double> bind(tape, false);
    const auto feats = embed_episode(bind, model, imgs.support.cast<double>(), imgs.query.cast<double>(), true);
    const auto latent = latent_stats(bind, model, feats.support, 3, 1, true);
    Rng noise(1);
    const auto s = draw_latent(latent, noise, false);
    for (std::size_t c = 1; c < 3; ++c) EXPECT_EQ(s.per_class[c].value().storage(), s.per_class[0].value().storage());
}

TEST(Variants, NoVarianceSigmaIsPositive) {
    const Dataset ds = small_synthetic();
    const Model<double> model = init_model<double>(small_dims(), Variant::no_variance, 7);
    Rng rng(14);
    const Episode ep = sample_episode(ds, Split::train, 3, 1, 1, rng);
    const EpisodeImages imgs = materialize(ds, ep, false);
    Tape<double> tape;
    Binding<double> bind(tape, false);
    const auto feats = embed_episode(bind, model, imgs.support.cast<double>(), imgs.query.cast<double>(), true);
    const auto latent = latent_stats(bind, model, feats.support, 3, 1, true);
    for (const auto& s : latent.stats.sigma)
        for (double v : s.value().data()) EXPECT_GT(v, 0.0);
}

TEST(Variants, TransformWeightsAreNormalised) {
    const ModelDims dims = small_dims(32, 3, 4);
    const Model<float> model = init_model<float>(dims, Variant::matching_net, 8);
    Tape<float> tape;
    Binding<float> bind(tape, false);
    LatentSample<float> latent;
    std::mt19937_64 gen(15);
    for (int c = 0; c < 3; ++c) latent.per_class.push_back(tape.constant(random_tensor({4}, gen).cast<float>()));
    latent.joint = concat(latent.per_class);
    const auto w = generate_transform(bind, latent, model.meta, dims);
    EXPECT_EQ(w.attention.shape(), (Shape{2, 2, 64}));
    for (float v : w.attention.value().data()) EXPECT_TRUE(v >= 0.0f && v <= 1.0f);
    const Tensor<float>& k = w.conv_kernel.value();
    for (std::size_t j = 0; j < 64; ++j) EXPECT_NEAR(l2(k.raw() + j, 9 * 64, 64), 1.0, 1e-5);
    const Tensor<float>& fc = w.fc_weight.value();
    for (std::size_t r = 0; r < dims.transform_dim; ++r) EXPECT_NEAR(l2(fc.raw() + r * fc.dim(1), fc.dim(1)), 1.0, 1e-5);
}
