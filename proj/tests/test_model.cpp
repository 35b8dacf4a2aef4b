// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "cape/grad_check.hpp"
#include "cape/model.hpp"

using namespace cape;
using namespace cape::model;
using ad::Graph;
using ad::Tensor;
using ad::Var;

namespace {

ModelConfig toy_config() {
    ModelConfig c;
    c.T = 12;
    c.patch_len = 4;
    c.d = 16;
    c.layers = 2;
    c.heads = 2;
    c.K = 4;
    c.ffn_hidden = 32;
    c.horizon = 4;
    c.roles = roles_from_counts(1, 1, 1, 1);
    return c;
}

Tensor random_input(std::size_t B, std::size_t T, Rng& rng) { return Tensor::randn({B, T}, rng); }

std::vector<Parameter*> all_params(CapeModel& m) {
    std::vector<Parameter*> out;
    for (auto& p : m.parameters()) {
        out.push_back(&p);
    }
    return out;
}

}  // namespace

TEST(ModelConfig, DefaultsAndValidation) {
    ModelConfig c;
    EXPECT_EQ(c.C(), 9u);
    EXPECT_EQ(c.roles.size(), 16u);
    EXPECT_EQ(c.indices_with(Role::mono_inc).size(), 1u);
    EXPECT_EQ(c.indices_with(Role::mono_dec).size(), 1u);
    EXPECT_EQ(c.indices_with(Role::infectious).size(), 6u);
    EXPECT_EQ(c.indices_with(Role::free).size(), 8u);
    EXPECT_NO_THROW(c.validate());
    c.T = 35;
    EXPECT_THROW(c.validate(), ValidationError);
    c = {};
    c.heads = 3;
    EXPECT_THROW(c.validate(), ValidationError);
    c = {};
    c.K = 4;
    EXPECT_THROW(c.validate(), ValidationError);
    EXPECT_EQ(parse_role("mono_dec"), Role::mono_dec);
    EXPECT_THROW(parse_role("bogus"), ValidationError);
}

TEST(EmbedPatches, ZeroInputGivesPositionsPlusBias) {
    CapeModel m(ModelConfig{}, 1);
    Rng rng(2);
    m.param(m.index_of("embed.b")).value = Tensor::randn({64}, rng);
    Graph g;
    Bound p = m.bind(g);
    Var out = m.embed_patches(p, g.constant(Tensor({1, 36})));
    ASSERT_EQ(out.shape(), (ad::Shape{1, 9, 64}));
    const Tensor& pos = m.param(m.index_of("embed.pos")).value;
    const Tensor& bias = m.param(m.index_of("embed.b")).value;
    for (std::size_t c = 0; c < 9; ++c) {
        for (std::size_t j = 0; j < 64; ++j) {
            EXPECT_EQ(out.value()[c * 64 + j], pos[c * 64 + j] + bias[j]);
        }
    }
}

TEST(EmbedPatches, WithoutPositionsPermutingPatchesPermutesRows) {
    CapeModel m(toy_config(), 3);
    m.param(m.index_of("embed.pos")).value.fill(0.0);
    Rng rng(4);
    Tensor x = random_input(1, 12, rng);
    Tensor swapped = x;
    for (std::size_t j = 0; j < 4; ++j) {
        std::swap(swapped[j], swapped[8 + j]);
    }
    Graph g;
    Bound p = m.bind(g);
    Var a = m.embed_patches(p, g.constant(x));
    Var b = m.embed_patches(p, g.constant(swapped));
    for (std::size_t j = 0; j < 16; ++j) {
        EXPECT_EQ(a.value()[j], b.value()[2 * 16 + j]);
        EXPECT_EQ(a.value()[16 + j], b.value()[16 + j]);
    }
}

TEST(EmbedPatches, LengthMismatchRejected) {
    CapeModel m(toy_config(), 1);
    Graph g;
    Bound p = m.bind(g);
    EXPECT_THROW(m.embed_patches(p, g.constant(Tensor({1, 11}))), ShapeError);
}

TEST(MixtureWeights, EqualLogitsAreUniform) {
    CapeModel m(toy_config(), 5);
    Tensor& e = m.prototypes();
    for (std::size_t k = 1; k < 4; ++k) {
        for (std::size_t j = 0; j < 16; ++j) {
            e[k * 16 + j] = e[j];
        }
    }
    Rng rng(6);
    Graph g;
    Bound p = m.bind(g);
    Var pi = m.mixture_weights(p, 0, g.constant(Tensor::randn({2, 3, 16}, rng)));
    for (double v : pi.value().values()) {
        EXPECT_NEAR(v, 0.25, 1e-15);
    }
}

TEST(MixtureWeights, DominantLogitSaturates) {
    CapeModel m(toy_config(), 7);
    m.param(m.layers()[0].proto_k).value = Tensor::identity(16);
    m.param(m.layers()[0].proto_s).value = Tensor::identity(16);
    Tensor e({4, 16});
    e[0 * 16 + 0] = 50.0;
    e[1 * 16 + 1] = 1.0;
    e[2 * 16 + 2] = 1.0;
    e[3 * 16 + 3] = 1.0;
    m.prototypes() = e;
    Tensor h({1, 1, 16});
    h[0] = 1.0;
    Graph g;
    Bound p = m.bind(g);
    Var pi = m.mixture_weights(p, 0, g.constant(h));
    EXPECT_GT(pi.value()[0], 0.999);
}

TEST(MixtureWeights, SimplexOverRandomInputsAndWeights) {
    for (std::uint64_t trial = 0; trial < 200; ++trial) {
        CapeModel m(toy_config(), 100 + trial);
        Rng rng(trial);
        Graph g;
        Bound p = m.bind(g);
        auto out = m.forward(p, g.constant(random_input(3, 12, rng)), Mode::pretrain);
        ASSERT_EQ(out.mixture.size(), 2u);
        for (const Var& pi : out.mixture) {
            ASSERT_EQ(pi.shape(), (ad::Shape{3, 3, 4}));
            for (std::size_t row = 0; row < 9; ++row) {
                double s = 0.0;
                for (std::size_t k = 0; k < 4; ++k) {
                    const double v = pi.value()[row * 4 + k];
                    EXPECT_GE(v, 0.0);
                    s += v;
                }
                EXPECT_NEAR(s, 1.0, 1e-6);
            }
        }
    }
}

TEST(MixtureWeights, ShiftInvariantSoftmax) {
    Rng rng(9);
    Tensor logits = Tensor::randn({5, 7}, rng, 3.0);
    Graph g;
    Var a = ad::softmax(g.constant(logits));
    Var b = ad::softmax(ad::affine(g.constant(logits), 1.0, 123.4));
    for (std::size_t i = 0; i < logits.size(); ++i) {
        EXPECT_NEAR(a.value()[i], b.value()[i], 1e-9);
    }
}

TEST(BlockForward, SinglePrototypeReducesToHadamard) {
    ModelConfig c = toy_config();
    c.K = 1;
    c.roles = {Role::free};
    CapeModel m(c, 11);
    Rng rng(12);
    Tensor x = Tensor::randn({2, 3, 16}, rng);
    Graph g;
    Bound p = m.bind(g);
    auto out = m.block_forward(p, 0, g.constant(x));
    for (double v : out.pi.value().values()) {
        EXPECT_EQ(v, 1.0);
    }
    const LayerIndex& li = m.layers()[0];
    Var h = m.self_attention(p, li, g.constant(x));
    Var z = ad::matmul(ad::mul(h, ad::reshape(p[m.prototypes_index()], {16})), p[li.wf]);
    Var hidden = ad::relu(ad::add(ad::matmul(ad::layer_norm(z, p[li.ln2_g], p[li.ln2_b]), p[li.w1]), p[li.b1]));
    Var ref = ad::add(z, ad::add(ad::matmul(hidden, p[li.w2]), p[li.b2]));
    for (std::size_t i = 0; i < ref.size(); ++i) {
        EXPECT_NEAR(out.x.value()[i], ref.value()[i], 1e-12);
    }
}

TEST(BlockForward, IdenticalPrototypesMakeOutputIndependentOfMixture) {
    CapeModel m(toy_config(), 13);
    Tensor& e = m.prototypes();
    for (std::size_t k = 1; k < 4; ++k) {
        for (std::size_t j = 0; j < 16; ++j) {
            e[k * 16 + j] = e[j];
        }
    }
    Rng rng(14);
    Tensor x = Tensor::randn({2, 3, 16}, rng);
    Graph g1;
    auto a = m.block_forward(m.bind(g1), 0, g1.constant(x));
    m.param(m.layers()[0].proto_s).value = Tensor::randn({16, 16}, rng, 5.0);
    Graph g2;
    auto b = m.block_forward(m.bind(g2), 0, g2.constant(x));
    for (std::size_t i = 0; i < a.x.size(); ++i) {
        EXPECT_NEAR(a.x.value()[i], b.x.value()[i], 1e-7);
    }
}

TEST(BlockForward, ShapePreservedAcrossLayers) {
    ModelConfig c;
    c.layers = 3;
    CapeModel m(c, 15);
    Rng rng(16);
    Graph g;
    Bound p = m.bind(g);
    Var cur = m.embed_patches(p, g.constant(random_input(2, 36, rng)));
    for (std::size_t l = 0; l < 3; ++l) {
        cur = m.block_forward(p, l, cur).x;
        EXPECT_EQ(cur.shape(), (ad::Shape{2, 9, 64}));
    }
}

TEST(BlockForward, GradientsReachMixtureAndPrototypes) {
    ModelConfig c = toy_config();
    c.T = 8;
    c.layers = 1;
    CapeModel m(c, 17);
    Rng rng(18);
    Tensor x = random_input(1, 8, rng);
    Tensor target = random_input(1, 8, rng);
    auto loss = [&](Graph& g) {
        Bound p = m.bind(g, Trainable::all);
        auto out = m.forward(p, g.constant(x), Mode::pretrain);
        return ad::mean(ad::square(ad::sub(out.reconstruction, g.constant(target))));
    };
    Graph g;
    auto grads = g.backward(loss(g));
    const Tensor ge = grads.get(m.param(m.prototypes_index()));
    double norm = 0.0;
    for (double v : ge.values()) {
        norm += v * v;
    }
    EXPECT_GT(norm, 0.0);
    const Tensor gs = grads.get(m.param(m.layers()[0].proto_s));
    double norm_s = 0.0;
    for (double v : gs.values()) {
        norm_s += v * v;
    }
    EXPECT_GT(norm_s, 0.0);
    auto params = all_params(m);
    auto rep = ad::grad_check_parameters(loss, params);
    EXPECT_TRUE(rep.passed) << rep.message;
}

TEST(Forward, Deterministic) {
    CapeModel m(ModelConfig{}, 19);
    Rng rng(20);
    Tensor x = random_input(2, 36, rng);
    Graph g1;
    Graph g2;
    auto a = m.forward(m.bind(g1), g1.constant(x), Mode::pretrain);
    auto b = m.forward(m.bind(g2), g2.constant(x), Mode::pretrain);
    EXPECT_EQ(a.reconstruction.value(), b.reconstruction.value());
    EXPECT_EQ(a.reconstruction.shape(), (ad::Shape{2, 36}));
    CapeModel same(ModelConfig{}, 19);
    for (std::size_t i = 0; i < m.parameters().size(); ++i) {
        EXPECT_EQ(m.param(i).value, same.param(i).value);
    }
}

TEST(Forward, ForecastLengthMatchesHorizon) {
    Rng rng(21);
    Tensor x = random_input(3, 36, rng);
    for (std::size_t h : {1u, 2u, 4u, 8u, 16u}) {
        ModelConfig c;
        c.horizon = h;
        CapeModel m(c, 22);
        Graph g;
        auto out = m.forward(m.bind(g), g.constant(x), Mode::forecast);
        EXPECT_EQ(out.forecast.shape(), (ad::Shape{3, h}));
    }
    ModelConfig c;
    c.horizon = 0;
    CapeModel m(c, 22);
    Graph g;
    EXPECT_THROW(m.forward(m.bind(g), g.constant(x), Mode::forecast), ValidationError);
}

TEST(Forward, WithoutAttentionMaskingOnlyAffectsMaskedPatch) {
    ModelConfig c;
    c.attention = false;
    CapeModel m(c, 23);
    Rng rng(24);
    Tensor x = random_input(1, 36, rng);
    Tensor masked = x;
    for (std::size_t j = 0; j < 4; ++j) {
        masked[12 + j] = 0.0;
    }
    Graph g;
    Bound p = m.bind(g);
    auto a = m.forward(p, g.constant(x), Mode::pretrain);
    auto b = m.forward(p, g.constant(masked), Mode::pretrain);
    for (std::size_t t = 0; t < 36; ++t) {
        if (t >= 12 && t < 16) {
            EXPECT_NE(a.reconstruction.value()[t], b.reconstruction.value()[t]);
        } else {
            EXPECT_EQ(a.reconstruction.value()[t], b.reconstruction.value()[t]);
        }
    }
}

TEST(Forward, ForecastHeadStartsFromReconstructionHead) {
    CapeModel m(ModelConfig{}, 25);
    Rng rng(26);
    Tensor x = random_input(1, 36, rng);
    Graph g;
    Bound p = m.bind(g);
    auto enc = m.encode(p, g.constant(x));
    Var rec = m.reconstruct_head(p, enc);
    Var fc = m.forecast_head(p, enc);
    for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_NEAR(fc.value()[j], rec.value()[32 + j], 1e-12);
    }
}

TEST(DfeEmbedding, PiStarOnSimplexAndMatchesLoopOracle) {
    CapeModel m(toy_config(), 27);
    Graph g;
    Bound p = m.bind(g);
    Var e_dfe = m.dfe_embedding(g, p);
    ASSERT_EQ(e_dfe.shape(), (ad::Shape{3, 16}));
    Var pi_star = m.patch_mean_mixture(p, e_dfe);
    ASSERT_EQ(pi_star.shape(), (ad::Shape{4}));
    const Tensor& E = m.prototypes();
    std::vector<double> ref(4, 0.0);
    for (std::size_t c = 0; c < 3; ++c) {
        std::vector<double> logit(4, 0.0);
        double mx = -1e300;
        for (std::size_t k = 0; k < 4; ++k) {
            for (std::size_t j = 0; j < 16; ++j) {
                logit[k] += e_dfe.value()[c * 16 + j] * E[k * 16 + j];
            }
            mx = std::max(mx, logit[k]);
        }
        double z = 0.0;
        for (double l : logit) {
            z += std::exp(l - mx);
        }
        for (std::size_t k = 0; k < 4; ++k) {
            ref[k] += std::exp(logit[k] - mx) / z / 3.0;
        }
    }
    double s = 0.0;
    for (std::size_t k = 0; k < 4; ++k) {
        EXPECT_NEAR(pi_star.value()[k], ref[k], 1e-10);
        s += pi_star.value()[k];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
}

TEST(DfeEmbedding, IdenticalPrototypesGiveUniformPiStar) {
    CapeModel m(toy_config(), 28);
    Tensor& e = m.prototypes();
    for (std::size_t k = 1; k < 4; ++k) {
        for (std::size_t j = 0; j < 16; ++j) {
            e[k * 16 + j] = e[j];
        }
    }
    Graph g;
    Bound p = m.bind(g);
    Var pi_star = m.patch_mean_mixture(p, m.dfe_embedding(g, p));
    for (double v : pi_star.value().values()) {
        EXPECT_NEAR(v, 0.25, 1e-12);
    }
}

TEST(ZeroShot, LengthAndDeterminism) {
    CapeModel m(ModelConfig{}, 29);
    Rng rng(30);
    std::vector<double> x(36);
    for (double& v : x) {
        v = rng.normal();
    }
    auto a = m.zero_shot_forecast(x);
    auto b = m.zero_shot_forecast(x);
    EXPECT_EQ(a.size(), 4u);
    EXPECT_EQ(a, b);
    auto longer = m.zero_shot_forecast(x, 10);
    ASSERT_EQ(longer.size(), 10u);
    for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_EQ(longer[j], a[j]);
    }
    EXPECT_THROW(m.zero_shot_forecast(std::vector<double>(35, 0.0)), ShapeError);
}

TEST(ZeroShot, MatchesReconstructionOfShiftedMaskedWindow) {
    CapeModel m(ModelConfig{}, 31);
    Rng rng(32);
    std::vector<double> x(36);
    for (double& v : x) {
        v = rng.normal();
    }
    Tensor window({1, 36});
    for (std::size_t t = 0; t < 32; ++t) {
        window[t] = x[t + 4];
    }
    Graph g;
    auto out = m.forward(m.bind(g), g.constant(window), Mode::pretrain);
    auto z = m.zero_shot_forecast(x);
    for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_EQ(z[j], out.reconstruction.value()[32 + j]);
    }
}
