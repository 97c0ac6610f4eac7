#include <gtest/gtest.h>

#include <cmath>

#include "vistok/gradcheck.hpp"
#include "vistok/vq.hpp"

using namespace vistok;

namespace {

Codebook<double> two_code_book() {
    Rng rng(0);
    Codebook<double> cb(2, 2, rng);
    cb.embeddings.mutable_value() = Tensor<double>({2, 2}, {0, 0, 1, 1});
    cb.ema_embed_sum = cb.embeddings.value();
    return cb;
}

Tensor<double> random_simplex_rows(std::size_t n, std::size_t k, Rng& rng) {
    std::exponential_distribution<double> ex(1.0);
    Tensor<double> p({n, k});
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < k; ++j) s += (p[i * k + j] = ex(rng));
        for (std::size_t j = 0; j < k; ++j) p[i * k + j] /= s;
    }
    return p;
}

}  // namespace

TEST(QuantizeHard, NearestCode) {
    const auto cb = two_code_book();
    const auto q = quantize_hard(Tensor<double>({1, 2}, {0.1, 0.2}), cb);
    EXPECT_EQ(q.indices[0], 0);
}

TEST(QuantizeHard, TieBreaksToLowestIndex) {
    const auto cb = two_code_book();
    EXPECT_EQ(quantize_hard(Tensor<double>({1, 2}, {0.5, 0.5}), cb).indices[0], 0);
}

TEST(QuantizeHard, IdempotentOnCodeRows) {
    Rng rng(1);
    Codebook<float> cb(64, 8, rng);
    const auto q = quantize_hard(cb.embeddings.value(), cb);
    for (int k = 0; k < 64; ++k) EXPECT_EQ(q.indices[k], k);
    EXPECT_EQ(q.z_q, cb.embeddings.value());
}

TEST(QuantizeHard, DimensionMismatch) {
    const auto cb = two_code_book();
    EXPECT_THROW(quantize_hard(Tensor<double>({1, 3}), cb), ShapeError);
    EXPECT_THROW(quantize_hard(Tensor<double>({1, 2}), Codebook<double>{}), ContractError);
}

TEST(EmbedSoft, OneHotEqualsRowExactly) {
    Rng rng(2);
    Codebook<float> cb(16, 5, rng);
    std::vector<int> idx{3, 0, 15, 3};
    const auto soft = embed_soft(Var<float>::constant(one_hot<float>(idx, 16)), cb);
    EXPECT_EQ(soft.value(), embed_indices<float>(idx, cb).reshaped({4, 5}));
}

TEST(EmbedSoft, MidpointArithmetic) {
    const auto cb = two_code_book();
    const auto out = embed_soft(Var<double>::constant(Tensor<double>({1, 2}, {0.5, 0.5})), cb);
    EXPECT_DOUBLE_EQ(out.value()[0], 0.5);
    EXPECT_DOUBLE_EQ(out.value()[1], 0.5);
}

TEST(EmbedSoft, RejectsNonDistributions) {
    const auto cb = two_code_book();
    EXPECT_THROW(embed_soft(Var<double>::constant(Tensor<double>({1, 2}, {0.5, 0.6})), cb), ContractError);
    EXPECT_THROW(embed_soft(Var<double>::constant(Tensor<double>({1, 3}, {1, 0, 0})), cb), ShapeError);
}

TEST(EmbedSoft, ConvexCombinationBoundsProperty) {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t K = 2 + rng() % 30, D = 1 + rng() % 6, N = 1 + rng() % 8;
        Codebook<double> cb(K, D, rng);
        const auto p = random_simplex_rows(N, K, rng);
        const auto out = embed_soft(Var<double>::constant(p), cb);
        for (std::size_t d = 0; d < D; ++d) {
            double lo = 1e300, hi = -1e300;
            for (std::size_t k = 0; k < K; ++k) {
                lo = std::min(lo, cb.embeddings.value()[k * D + d]);
                hi = std::max(hi, cb.embeddings.value()[k * D + d]);
            }
            for (std::size_t i = 0; i < N; ++i) {
                EXPECT_GE(out.value()[i * D + d], lo - 1e-12);
                EXPECT_LE(out.value()[i * D + d], hi + 1e-12);
            }
        }
    }
}

TEST(EmbedSoft, DifferentiableInProbabilities) {
    const auto cb = two_code_book();
    Rng rng(4);
    const double err = grad_check(
        [&](const std::vector<Var<double>>& v) {
            return ops::sum(ops::mul(embed_soft(v[0], cb), embed_soft(v[0], cb)));
        },
        {random_simplex_rows(3, 2, rng)});
    EXPECT_LT(err, 1e-6);
}

TEST(StraightThrough, ForwardIsQuantizedBackwardIsIdentity) {
    auto z = Var<double>::leaf(Tensor<double>({2, 2}, {0.1, 0.2, 0.9, 0.7}));
    const auto cb = two_code_book();
    const auto q = quantize_hard(z.value(), cb);
    const auto st = ops::straight_through(z, Var<double>::constant(q.z_q));
    EXPECT_EQ(st.value(), q.z_q);
    ops::sum(st).backward();
    for (double g : z.grad().data()) EXPECT_EQ(g, 1.0);
}

TEST(EmaUpdate, UnusedCodeShrinksByDecay) {
    Rng rng(5);
    Codebook<double> cb(4, 2, rng, 0.99);
    const double before = cb.ema_cluster_size[3];
    const Tensor<double> z({2, 2}, {0.1, 0.1, 0.2, 0.2});
    const std::vector<int> idx{0, 1};
    ema_update(cb, z, idx);
    EXPECT_DOUBLE_EQ(cb.ema_cluster_size[3], 0.99 * before);
}

TEST(EmaUpdate, CountConservation) {
    Rng rng(6);
    Codebook<double> cb(16, 3, rng, 0.95);
    for (int step = 0; step < 10; ++step) {
        Tensor<double> z = uniform_tensor<double>({37, 3}, 1.0, rng);
        double old_total = 0;
        for (double c : cb.ema_cluster_size.data()) old_total += c;
        const auto q = quantize_hard(z, cb);
        ema_update(cb, z, q.indices);
        double total = 0;
        for (double c : cb.ema_cluster_size.data()) total += c;
        EXPECT_NEAR(total, 0.95 * old_total + 0.05 * 37, 1e-5);
        // Embeddings remain the smoothed means of the EMA statistics.
        const std::size_t K = cb.size();
        for (std::size_t k = 0; k < K; ++k) {
            const double smoothed = (cb.ema_cluster_size[k] + cb.epsilon) / (total + K * cb.epsilon) * total;
            for (std::size_t d = 0; d < 3; ++d)
                EXPECT_NEAR(cb.embeddings.value()[k * 3 + d], cb.ema_embed_sum[k * 3 + d] / smoothed, 1e-12);
        }
    }
}

TEST(EmaUpdate, ConvergesToConstantInputGeometrically) {
    // Oracle: closed-form geometric series for the unit-initialized statistics.
    Rng rng(7);
    const std::size_t K = 4, D = 2, N = 8;
    const double a = 0.99, eps = 1e-5;
    Codebook<double> cb(K, D, rng, a, eps);
    const std::vector<double> v{0.3, -0.2};
    Tensor<double> z({N, D});
    for (std::size_t i = 0; i < N; ++i) std::copy(v.begin(), v.end(), z.ptr() + i * D);
    const int k0 = quantize_hard(z, cb).indices[0];
    const std::vector<double> e0(cb.embeddings.value().ptr() + k0 * D, cb.embeddings.value().ptr() + (k0 + 1) * D);
    double prev = 1e300;
    for (int t = 1; t <= 600; ++t) {
        const auto q = quantize_hard(z, cb);
        ASSERT_EQ(q.indices[0], k0);
        ema_update(cb, z, q.indices);
        const double at = std::pow(a, t);
        const double size = at + (1 - at) * N;
        const double total = at * K + (1 - at) * N;
        const double smoothed = (size + eps) / (total + K * eps) * total;
        double dist = 0;
        for (std::size_t d = 0; d < D; ++d) {
            const double expect = (at * e0[d] + (1 - at) * N * v[d]) / smoothed;
            EXPECT_NEAR(cb.embeddings.value()[k0 * D + d], expect, 1e-9) << "step " << t;
            dist += std::abs(cb.embeddings.value()[k0 * D + d] - v[d]);
        }
        EXPECT_LE(dist, prev + 1e-12);
        prev = dist;
    }
    EXPECT_LT(prev, 1e-3);
}

TEST(EmaUpdate, ZeroDecayGivesBatchMeans) {
    Rng rng(8);
    Codebook<double> cb(2, 2, rng, 0.0, 1e-5);
    const Tensor<double> z({3, 2}, {1, 1, 3, 3, -2, 4});
    const std::vector<int> idx{0, 0, 1};
    ema_update(cb, z, idx);
    EXPECT_NEAR(cb.embeddings.value()[0], 2.0, 1e-4);
    EXPECT_NEAR(cb.embeddings.value()[1], 2.0, 1e-4);
    EXPECT_NEAR(cb.embeddings.value()[2], -2.0, 1e-4);
    EXPECT_NEAR(cb.embeddings.value()[3], 4.0, 1e-4);
}

TEST(EmaUpdate, ReseedHookOnlyTouchesDeadCodes) {
    Rng rng(9);
    Codebook<double> cb(4, 2, rng, 0.5);
    const Tensor<double> z({2, 2}, {5, 5, 5, 5});
    const std::vector<int> idx{0, 0};
    for (int i = 0; i < 6; ++i) ema_update(cb, z, idx);
    EXPECT_EQ(reseed_dead_codes(cb, z, 0.0, rng), 0u);
    const std::size_t n = reseed_dead_codes(cb, z, 0.1, rng);
    EXPECT_EQ(n, 3u);
    for (std::size_t k = 1; k < 4; ++k) EXPECT_EQ(cb.ema_cluster_size[k], 1.0);
}

TEST(Commitment, Examples) {
    const auto z = Var<double>::leaf(Tensor<double>({1, 2}, {0, 0}));
    EXPECT_DOUBLE_EQ(commitment_loss(z, Tensor<double>({1, 2}, {1, 1}), 0.25).item(), 0.25);
    EXPECT_EQ(commitment_loss(z, Tensor<double>({1, 2}, {1, 1}), 0.0).item(), 0.0);
    EXPECT_EQ(commitment_loss(z, z.value(), 0.25).item(), 0.0);
}

TEST(Bottleneck, EncoderGradientIsReconstructionPlusCommitment) {
    // Two-element toy: recon loss = w . ST(z); commitment = beta * mean((z - z_q)^2).
    const auto cb = two_code_book();
    const double beta = 0.25;
    const Tensor<double> w({1, 2}, {0.7, -1.3});
    auto z = Var<double>::leaf(Tensor<double>({1, 2}, {0.8, 0.6}));
    const auto q = quantize_hard(z.value(), cb);
    const auto st = ops::straight_through(z, Var<double>::constant(q.z_q));
    const auto loss = ops::add(ops::sum(ops::mul(st, Var<double>::constant(w))), commitment_loss(z, q.z_q, beta));
    loss.backward();
    const double n = 2.0;
    for (std::size_t d = 0; d < 2; ++d) {
        const double expected = w[d] + 2.0 * beta * (z.value()[d] - q.z_q[d]) / n;
        EXPECT_NEAR(z.grad()[d], expected, 1e-15);
    }
}

TEST(CodebookIo, SaveLoadRoundTrip) {
    Rng rng(10);
    Codebook<float> cb(8, 3, rng);
    io::Checkpoint ck;
    cb.save(ck);
    EXPECT_TRUE(ck.contains("codebook.embeddings"));
    EXPECT_TRUE(ck.contains("codebook.ema_size"));
    EXPECT_TRUE(ck.contains("codebook.ema_sum"));
    const auto back = Codebook<float>::load(io::Checkpoint::deserialize(ck.serialize()), "codebook", 0.99, 1e-5);
    EXPECT_EQ(back.embeddings.value(), cb.embeddings.value());
}
