#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"

using namespace dam;
using namespace dam::testing;

namespace {

struct Fixture {
    ModelDims dims = small_dims(32, 2, 4);
    Model<double> model = init_model<double>(dims, Variant::full, 3);
    std::mt19937_64 rng{5};

    LatentSample<double> latent(Tape<double>& tape) {
        LatentSample<double> s;
        for (std::size_t c = 0; c < dims.n_way; ++c) s.per_class.push_back(tape.constant(random_tensor({dims.dz}, rng)));
        s.joint = concat(s.per_class);
        return s;
    }

    Tensor<double> feature() { return random_tensor({2, 2, 64}, rng); }
};

GeneratedMetricWeights<double> with_attention(Tape<double>& tape, GeneratedMetricWeights<double> w, double value) {
    for (auto& a : w.attention) a = tape.constant(Tensor<double>(a.shape(), value));
    return w;
}

double manual_score(const Tensor<double>& x, const Tensor<double>& z, double multiplier,
                    const GeneratedMetricWeights<double>& w) {
    Tape<double> tape;
    Var<double> f = scale(concat_channels(tape.constant(x), tape.constant(z)), multiplier);
    Var<double> hidden = relu(conv2d(reshape(f, {1, x.dim(0), x.dim(1), 2 * x.dim(2)}),
                                     tape.constant(w.conv_kernel.value())));
    return linear(reshape(hidden, {1, hidden.size()}), tape.constant(w.fc_weight.value()),
                  tape.constant(w.fc_bias.value()))
        .value()[0];
}

}  // namespace

TEST(ScorePair, ZeroAttentionUsesRawConcatenation) {
    Fixture fx;
    Tape<double> tape;
    Binding<double> bind(tape, false);
    const auto w = with_attention(tape, generate_weights(bind, fx.latent(tape), fx.model.meta, fx.dims), 0.0);
    const Tensor<double> x = fx.feature(), z = fx.feature();
    const double s = score_pair(tape.constant(x), tape.constant(z), 1, w).value()[0];
    EXPECT_NEAR(s, manual_score(x, z, 1.0, w), 1e-12);
}

TEST(ScorePair, FullAttentionDoublesTheConcatenation) {
    Fixture fx;
    Tape<double> tape;
    Binding<double> bind(tape, false);
    const auto w = with_attention(tape, generate_weights(bind, fx.latent(tape), fx.model.meta, fx.dims), 1.0);
    const Tensor<double> x = fx.feature(), z = fx.feature();
    const double s = score_pair(tape.constant(x), tape.constant(z), 0, w).value()[0];
    EXPECT_NEAR(s, manual_score(x, z, 2.0, w), 1e-12);
}

TEST(ScorePair, QueryGradientMatchesFiniteDifferences) {
    Fixture fx;
    Tape<double> gen_tape;
    Binding<double> bind(gen_tape, false);
    const auto w = generate_weights(bind, fx.latent(gen_tape), fx.model.meta, fx.dims);
    const Tensor<double> x = fx.feature();
    const GradCheck g = check_gradients({x, fx.feature()}, [&](Tape<double>& t, const auto& v) {
        GeneratedMetricWeights<double> local;
        for (const auto& a : w.attention) local.attention.push_back(t.constant(a.value()));
        local.conv_kernel = t.constant(w.conv_kernel.value());
        local.fc_weight = t.constant(w.fc_weight.value());
        local.fc_bias = t.constant(w.fc_bias.value());
        return score_pair(v[0], v[1], 1, local);
    });
    EXPECT_LE(g.relative[1], 1e-3);
    EXPECT_LE(g.relative[0], 1e-3);
}

TEST(ScorePair, RejectsMismatchedInputs) {
    Fixture fx;
    Tape<double> tape;
    Binding<double> bind(tape, false);
    const auto w = generate_weights(bind, fx.latent(tape), fx.model.meta, fx.dims);
    EXPECT_THROW(score_pair(tape.constant(fx.feature()), tape.constant(fx.feature()), 2, w), ShapeError);
    EXPECT_THROW(score_pair(tape.constant(fx.feature()), tape.constant(Tensor<double>({2, 2, 32})), 0, w), ShapeError);
    EXPECT_THROW(score_pair(tape.constant(Tensor<double>({1, 1, 64})), tape.constant(Tensor<double>({1, 1, 64})), 0, w),
                 ShapeError);
}

TEST(ScoreEpisode, ShapeAndLoopEquivalence) {
    Fixture fx;
    Tape<double> tape;
    Binding<double> bind(tape, false);
    const auto w = generate_weights(bind, fx.latent(tape), fx.model.meta, fx.dims);
    const Tensor<double> support = random_tensor({4, 2, 2, 64}, fx.rng), query = random_tensor({3, 2, 2, 64}, fx.rng);
    const std::vector<std::size_t> labels{0, 0, 1, 1};
    const Tensor<double> scores = score_episode(tape.constant(support), tape.constant(query), labels, w).value();
    ASSERT_EQ(scores.shape(), (Shape{3, 4}));
    const std::size_t per = 2 * 2 * 64;
    for (std::size_t j = 0; j < 3; ++j)
        for (std::size_t s = 0; s < 4; ++s) {
            Tensor<double> x({2, 2, 64}), z({2, 2, 64});
            std::copy_n(support.raw() + s * per, per, x.raw());
            std::copy_n(query.raw() + j * per, per, z.raw());
            const double looped = score_pair(tape.constant(x), tape.constant(z), labels[s], w).value()[0];
            EXPECT_EQ(scores.at({j, s}), looped) << j << "," << s;
        }
}

TEST(ScoreEpisode, TwoWayOneShotGivesTwoByTwo) {
    Fixture fx;
    Tape<double> tape;
    Binding<double> bind(tape, false);
    const auto w = generate_weights(bind, fx.latent(tape), fx.model.meta, fx.dims);
    const Tensor<double> scores =
        score_episode(tape.constant(random_tensor({2, 2, 2, 64}, fx.rng)), tape.constant(random_tensor({2, 2, 2, 64}, fx.rng)),
                      {0, 1}, w)
            .value();
    EXPECT_EQ(scores.shape(), (Shape{2, 2}));
}

TEST(ScoreEpisode, DuplicateQueriesGiveIdenticalRows) {
    Fixture fx;
    Tape<double> tape;
    Binding<double> bind(tape, false);
    const auto w = generate_weights(bind, fx.latent(tape), fx.model.meta, fx.dims);
    Tensor<double> query = random_tensor({2, 2, 2, 64}, fx.rng);
    std::copy_n(query.raw(), 256, query.raw() + 256);
    const Tensor<double> scores =
        score_episode(tape.constant(random_tensor({4, 2, 2, 64}, fx.rng)), tape.constant(query), {0, 0, 1, 1}, w).value();
    for (std::size_t s = 0; s < 4; ++s) EXPECT_EQ(scores.at({0, s}), scores.at({1, s}));
}

TEST(Predict, HandCase) {
    const Tensor<double> p = predict(Tensor<double>::of({1, 4}, {1, 1, 0, 0}), {0, 0, 1, 1}, 2);
    const double e = std::exp(1.0);
    EXPECT_NEAR(p[0], 2 * e / (2 * e + 2), 1e-12);
    EXPECT_NEAR(p[0], 0.7311, 1e-4);
    EXPECT_NEAR(p[1], 2 / (2 * e + 2), 1e-12);
}

TEST(Predict, EqualScoresAreUniform) {
    const Tensor<double> p = predict(Tensor<double>({2, 5}, 3.25), {0, 1, 2, 3, 4}, 5);
    for (double v : p.data()) EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(Predict, DominantScoreIsOneHot) {
    const Tensor<double> p = predict(Tensor<double>::of({1, 4}, {0, 0, 1e4, 0}), {0, 1, 2, 3}, 4);
    EXPECT_EQ(p[2], 1.0);
    EXPECT_EQ(p[0], 0.0);
}

TEST(Predict, InvariantsOnRandomMatrices) {
    const PredictionOracle o = check_predictions(100);
    EXPECT_EQ(o.matrices, 100u);
    EXPECT_LE(o.max_row_sum_error, 1e-6);
    EXPECT_EQ(o.shift_mismatches, 0u);
    EXPECT_EQ(o.permutation_mismatches, 0u);
    EXPECT_LE(o.hand_case_error, 1e-6);
}

TEST(Predict, AgreesWithDifferentiableLogProbs) {
    std::mt19937_64 rng(6);
    const Tensor<double> scores = random_tensor({4, 6}, rng, 3.0);
    const std::vector<std::size_t> labels{0, 0, 1, 1, 2, 2};
    const Tensor<double> p = predict(scores, labels, 3);
    Tape<double> tape;
    const Tensor<double> lp = class_log_probs(tape.constant(scores), labels, 3).value();
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(std::log(p[i]), lp[i], 1e-12);
}

TEST(Predict, RejectsMisalignedLabels) {
    EXPECT_THROW(predict(Tensor<double>({1, 3}), {0, 1}, 2), ShapeError);
    EXPECT_THROW(predict(Tensor<double>({1, 2}), {0, 2}, 2), ShapeError);
}

TEST(MatchingNet, IdenticalFeatureScoresOneAndIsRowMaximum) {
    const ModelDims dims = small_dims(32, 3, 4);
    const Model<double> model = init_model<double>(dims, Variant::matching_net, 9);
    std::mt19937_64 rng(10);
    Tape<double> tape;
    Binding<double> bind(tape, false);
    LatentSample<double> latent;
    for (int c = 0; c < 3; ++c) latent.per_class.push_back(tape.constant(random_tensor({4}, rng)));
    latent.joint = concat(latent.per_class);
    const auto w = generate_transform(bind, latent, model.meta, dims);
    const Tensor<double> support = random_tensor({3, 2, 2, 64}, rng);
    Tensor<double> query({1, 2, 2, 64});
    std::copy_n(support.raw() + 256, 256, query.raw());
    const Tensor<double> s = cosine_scores(tape.constant(support), tape.constant(query), w).value();
    ASSERT_EQ(s.shape(), (Shape{1, 3}));
    EXPECT_NEAR(s[1], 1.0, 1e-12);
    EXPECT_GE(s[1], s[0]);
    EXPECT_GE(s[1], s[2]);
}

TEST(MatchingNet, ScalingTransformedQueryKeepsPrediction) {
    std::mt19937_64 rng(11);
    const Tensor<double> sup = random_tensor({3, 5}, rng);
    Tensor<double> qry = random_tensor({2, 5}, rng);
    const std::vector<std::size_t> labels{0, 1, 2};
    Tape<double> tape;
    const Tensor<double> base = predict(cosine_similarity(tape.constant(qry), tape.constant(sup)).value(), labels, 3);
    for (std::size_t i = 0; i < 5; ++i) qry[i] *= 7.5;
    const Tensor<double> scaled = predict(cosine_similarity(tape.constant(qry), tape.constant(sup)).value(), labels, 3);
    for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(base[i], scaled[i], 1e-12);
}

TEST(MatchingNet, MatchesBruteForceCosineSoftmax) {
    const ModelDims dims = small_dims(32, 2, 4);
    const Model<double> model = init_model<double>(dims, Variant::matching_net, 12);
    std::mt19937_64 rng(13);
    Tape<double> tape;
    Binding<double> bind(tape, false);
    LatentSample<double> latent;
    for (int c = 0; c < 2; ++c) latent.per_class.push_back(tape.constant(random_tensor({4}, rng)));
    latent.joint = concat(latent.per_class);
    const auto w = generate_transform(bind, latent, model.meta, dims);
    const Tensor<double> support = random_tensor({4, 2, 2, 64}, rng), query = random_tensor({3, 2, 2, 64}, rng);
    const std::vector<std::size_t> labels{0, 0, 1, 1};
    const Tensor<double> p =
        predict(cosine_scores(tape.constant(support), tape.constant(query), w).value(), labels, 2);
    const Tensor<double> ts = transform_features(tape.constant(support), w).value();
    const Tensor<double> tq = transform_features(tape.constant(query), w).value();
    const std::size_t e = dims.transform_dim;
    for (std::size_t j = 0; j < 3; ++j) {
        std::vector<double> cos(4);
        for (std::size_t s = 0; s < 4; ++s) {
            long double dot = 0, nq = 0, ns = 0;
            for (std::size_t d = 0; d < e; ++d) {
                dot += (long double)tq[j * e + d] * ts[s * e + d];
                nq += (long double)tq[j * e + d] * tq[j * e + d];
                ns += (long double)ts[s * e + d] * ts[s * e + d];
            }
            cos[s] = double(dot / std::sqrt(nq * ns));
        }
        const auto ref = reference_prediction(cos, labels, 2);
        for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(p[j * 2 + c], double(ref[c]), 1e-9);
    }
}

TEST(NoAttention, MatchesFullWhenGeneratedAttentionIsZero) {
    Fixture fx;
    Tape<double> tape;
    Binding<double> bind(tape, false);
    const auto latent = fx.latent(tape);
    const auto off = generate_weights(bind, latent, fx.model.meta, fx.dims, false);
    const auto zeroed = with_attention(tape, generate_weights(bind, latent, fx.model.meta, fx.dims, true), 0.0);
    const Tensor<double> support = random_tensor({2, 2, 2, 64}, fx.rng), query = random_tensor({2, 2, 2, 64}, fx.rng);
    EXPECT_EQ(score_episode(tape.constant(support), tape.constant(query), {0, 1}, off).value().storage(),
              score_episode(tape.constant(support), tape.constant(query), {0, 1}, zeroed).value().storage());
}
