#include <gtest/gtest.h>

#include <cmath>
#include <memory>

#include "test_util.hpp"

using namespace sandwich;
using namespace sandwich::testutil;

namespace {

double rel_err(double got, double want) { return std::abs(got - want) / std::max(1.0, std::abs(want)); }

KernelConfig rbf_cfg() { return {}; }

KernelConfig linear_cfg() {
    KernelConfig k;
    k.kind = KernelKind::linear;
    return k;
}

KernelConfig fixed_rbf(double sigma2) {
    KernelConfig k;
    k.bandwidth_rule = BandwidthRule::fixed;
    k.fixed_sigma2 = sigma2;
    return k;
}

}  // namespace

TEST(Mmd, MatchesDoubleSumOracle) {
    Rng rng(101);
    for (int i = 0; i < 100; ++i) {
        const int m = 2 + static_cast<int>(rng.uniform_int(31));
        const int n = 2 + static_cast<int>(rng.uniform_int(31));
        const int d = 1 + static_cast<int>(rng.uniform_int(16));
        Tensord x = rand_mat(rng, m, d);
        Tensord y = rand_mat(rng, n, d);
        for (const auto& cfg : {rbf_cfg(), linear_cfg()}) {
            const double lib = mmd_squared_value(x, y, cfg);
            const double want = oracle_mmd2(x, y, cfg);
            ASSERT_LE(rel_err(lib, want), 1e-9)
                << "instance " << i << " m=" << m << " n=" << n << " d=" << d;
        }
    }
}

TEST(Mmd, SelfIsZero) {
    Rng rng(102);
    for (int i = 0; i < 50; ++i) {
        Tensord x = rand_mat(rng, 2 + static_cast<int>(rng.uniform_int(20)), 1 + static_cast<int>(rng.uniform_int(8)));
        EXPECT_LE(std::abs(mmd_squared_value(x, x, rbf_cfg())), 1e-9);
        EXPECT_LE(std::abs(mmd_squared_value(x, x, linear_cfg())), 1e-9);
    }
}

TEST(Mmd, SymmetricAndNonNegative) {
    Rng rng(103);
    for (int i = 0; i < 1000; ++i) {
        const int m = 2 + static_cast<int>(rng.uniform_int(12));
        const int n = 2 + static_cast<int>(rng.uniform_int(12));
        const int d = 1 + static_cast<int>(rng.uniform_int(6));
        Tensord x = rand_mat(rng, m, d);
        Tensord y = rand_mat(rng, n, d);
        const double fwd = mmd_squared_value(x, y, rbf_cfg());
        const double rev = mmd_squared_value(y, x, rbf_cfg());
        ASSERT_LE(std::abs(fwd - rev), 1e-12 + 1e-9 * std::abs(fwd));
        ASSERT_GE(fwd, -1e-12);
        ASSERT_GE(mmd_squared_value(x, y, linear_cfg()), -1e-9);
    }
}

TEST(Mmd, HandValueLinear) {
    // x = {(0),(2)}, y = {(0),(0)}: k_xx entries {0,0,0,4} mean 1, k_yy and
    // k_xy all zero, so mmd^2 = 1.
    Tensord x({2, 1});
    x.at2(0, 0) = 0.0;
    x.at2(1, 0) = 2.0;
    Tensord y({2, 1}, 0.0);
    EXPECT_NEAR(mmd_squared_value(x, y, linear_cfg()), 1.0, 1e-12);
}

TEST(Mmd, ShapeAndEmptyErrors) {
    Graph<double> g;
    Tensord x({3, 2}, 0.5), y({3, 3}, 0.5), flat({4}, 0.1), empty({0, 2});
    Var vx = g.leaf(x, false), vy = g.leaf(y, false);
    EXPECT_THROW(mmd_squared(g, vx, vy, rbf_cfg()), ShapeError);
    Var vf = g.leaf(flat, false);
    EXPECT_THROW(mmd_squared(g, vx, vf, rbf_cfg()), ShapeError);
    Var ve = g.leaf(empty, false);
    EXPECT_THROW(mmd_squared(g, vx, ve, rbf_cfg()), EstimationError);
    KernelConfig bad;
    bad.bandwidth_rule = BandwidthRule::fixed;  // no sigma given
    EXPECT_THROW(mmd_squared(g, vx, vx, bad), ConfigError);
}

TEST(Mmd, GradientMatchesFiniteDifference) {
    // Fixed bandwidth so the kernel scale is genuinely constant under the
    // finite-difference probe, matching the treat-as-constant convention of
    // the adaptive rule.
    Rng rng(104);
    Tensord x0 = rand_mat(rng, 5, 3), y0 = rand_mat(rng, 4, 3);
    const KernelConfig cfg = fixed_rbf(1.7);

    Graph<double> g;
    Var x = g.leaf(x0, true), y = g.leaf(y0, true);
    g.backward(mmd_squared(g, x, y, cfg));
    const Tensord gx = g.grad(x), gy = g.grad(y);

    auto value_at = [&](const Tensord& xa, const Tensord& ya) {
        return mmd_squared_value(xa, ya, cfg);
    };
    const double h = 1e-6;
    for (std::int64_t i = 0; i < x0.size(); ++i) {
        Tensord xp = x0, xm = x0;
        xp[i] += h;
        xm[i] -= h;
        const double fd = (value_at(xp, y0) - value_at(xm, y0)) / (2 * h);
        ASSERT_NEAR(gx[i], fd, 1e-6 + 1e-5 * std::abs(fd)) << "x[" << i << "]";
    }
    for (std::int64_t i = 0; i < y0.size(); ++i) {
        Tensord yp = y0, ym = y0;
        yp[i] += h;
        ym[i] -= h;
        const double fd = (value_at(x0, yp) - value_at(x0, ym)) / (2 * h);
        ASSERT_NEAR(gy[i], fd, 1e-6 + 1e-5 * std::abs(fd)) << "y[" << i << "]";
    }
}

TEST(Alignment, GroupIdsFollowAlignedLabelOrder) {
    AlignmentConfig cfg;  // aligned: left_hand, right_hand
    const std::vector<std::string> names = {"rest", "left_hand", "right_hand", "feet"};
    const auto ids = aligned_group_ids({0, 1, 2, 3, 2, 1}, names, cfg);
    EXPECT_EQ(ids, (std::vector<int>{0, 1, 2, 0, 2, 1}));
    EXPECT_THROW(aligned_group_ids({4}, names, cfg), ValidationError);
    EXPECT_THROW(aligned_group_ids({-1}, names, cfg), ValidationError);
}

TEST(Alignment, PenaltySkipsGroupsMissingOnEitherSide) {
    Rng rng(105);
    Graph<double> g;
    AlignmentConfig cfg;
    // Source has group 1 only; target has both. Only one term may appear.
    AlignedFeatures src{g.leaf(rand_mat(rng, 6, 4), false), {1, 1, 1, 0, 0, 1}};
    AlignedFeatures tgt{g.leaf(rand_mat(rng, 6, 4), false), {1, 2, 1, 2, 0, 1}};
    std::vector<MmdTerm> breakdown;
    Var p = alignment_penalty(g, {src}, tgt, cfg, &breakdown);
    ASSERT_EQ(breakdown.size(), 1u);
    EXPECT_EQ(breakdown[0].source, 0u);
    EXPECT_EQ(breakdown[0].group, 1);
    EXPECT_NEAR(g.scalar(p), breakdown[0].value, 1e-12);
    EXPECT_GE(breakdown[0].value, 0.0);
}

TEST(Alignment, PenaltySumsAcrossSourcesAndGroups) {
    Rng rng(106);
    Graph<double> g;
    AlignmentConfig cfg;
    AlignedFeatures s0{g.leaf(rand_mat(rng, 8, 3), false), {1, 1, 2, 2, 1, 2, 0, 0}};
    AlignedFeatures s1{g.leaf(rand_mat(rng, 8, 3), false), {2, 2, 1, 1, 2, 1, 1, 2}};
    AlignedFeatures tgt{g.leaf(rand_mat(rng, 8, 3), false), {1, 2, 1, 2, 1, 2, 1, 2}};
    std::vector<MmdTerm> terms;
    Var p = alignment_penalty(g, {s0, s1}, tgt, cfg, &terms);
    ASSERT_EQ(terms.size(), 4u);
    double sum = 0.0;
    for (const auto& t : terms) sum += t.value;
    EXPECT_NEAR(g.scalar(p), sum, 1e-12);
}

TEST(Alignment, LambdaZeroReturnsClassificationLossUntouched) {
    Rng rng(107);
    Graph<double> g;
    AlignmentConfig cfg;
    cfg.lambda_weight = 0.0;
    Var lc = g.leaf(Tensord({1}, 3.25), false);
    AlignedFeatures src{g.leaf(rand_mat(rng, 4, 2), false), {1, 1, 2, 2}};
    AlignedFeatures tgt{g.leaf(rand_mat(rng, 4, 2), false), {1, 2, 1, 2}};
    const std::size_t nodes_before = g.node_count();
    Var out = sandwich_loss(g, lc, {src}, tgt, cfg);
    EXPECT_EQ(out.id, lc.id);
    EXPECT_EQ(g.node_count(), nodes_before);
    EXPECT_NEAR(g.scalar(out), 3.25, 0.0);
}

TEST(Alignment, LambdaScalesPenalty) {
    Rng rng(108);
    AlignmentConfig one;
    AlignmentConfig half;
    half.lambda_weight = 0.5;
    Tensord sx = rand_mat(rng, 6, 3), tx = rand_mat(rng, 6, 3);
    auto loss_with = [&](const AlignmentConfig& cfg) {
        Graph<double> g;
        Var lc = g.leaf(Tensord({1}, 2.0), false);
        AlignedFeatures src{g.leaf(sx, false), {1, 1, 1, 2, 2, 2}};
        AlignedFeatures tgt{g.leaf(tx, false), {1, 1, 1, 2, 2, 2}};
        return g.scalar(sandwich_loss(g, lc, {src}, tgt, cfg));
    };
    const double l1 = loss_with(one) - 2.0;
    const double lh = loss_with(half) - 2.0;
    EXPECT_NEAR(lh, 0.5 * l1, 1e-12 + 1e-9 * std::abs(l1));
}

TEST(Deepset, MatchesStraightLineOracle) {
    // Block contract on (S, T, N, f): mean over the T set members, linear
    // N->8 on axis 2, broadcast back over T, concat on axis 2, linear
    // (N+8)->N, ELU. Recompute the whole thing with plain loops.
    const int S = 2, T = 3, N = 4, f = 5;
    Rng rng(109);
    Tensord x({S, T, N, f});
    for (std::int64_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(-1.5, 1.5);

    Graph<double> g;
    ParamSet<double> params(11);
    ParamBinding<double> pb(g, params);
    ForwardCtx<double> ctx{&g, &pb, &params, false, 0};
    Var out = deepset_block(ctx, g.leaf(x, false), "blk");
    const Tensord& got = g.value(out);
    ASSERT_EQ(got.dim(0), S);
    ASSERT_EQ(got.dim(1), T);
    ASSERT_EQ(got.dim(2), N);
    ASSERT_EQ(got.dim(3), f);

    const Tensord& w1 = params.at("blk/w1");  // (8, N)
    const Tensord& b1 = params.at("blk/b1");
    const Tensord& w2 = params.at("blk/w2");  // (N, N+8)
    const Tensord& b2 = params.at("blk/b2");
    const int K = w1.dim(0);
    ASSERT_EQ(K, 8);

    for (int s = 0; s < S; ++s)
        for (int c = 0; c < f; ++c) {
            // set mean over T at each (n, c)
            std::vector<double> mu(N, 0.0);
            for (int n = 0; n < N; ++n) {
                for (int t = 0; t < T; ++t) mu[n] += x.at4(s, t, n, c);
                mu[n] /= T;
            }
            std::vector<double> summary(K, 0.0);
            for (int k = 0; k < K; ++k) {
                summary[k] = b1[k];
                for (int n = 0; n < N; ++n) summary[k] += w1.at2(k, n) * mu[n];
            }
            for (int t = 0; t < T; ++t)
                for (int n = 0; n < N; ++n) {
                    double acc = b2[n];
                    for (int j = 0; j < N; ++j) acc += w2.at2(n, j) * x.at4(s, t, j, c);
                    for (int k = 0; k < K; ++k) acc += w2.at2(n, N + k) * summary[k];
                    const double want = acc > 0.0 ? acc : std::expm1(acc);
                    ASSERT_NEAR(got.at4(s, t, n, c), want, 1e-12)
                        << "s=" << s << " t=" << t << " n=" << n << " c=" << c;
                }
        }
}

TEST(Deepset, EquivariantToWithinSetPermutation) {
    Rng rng(110);
    for (int trial = 0; trial < 100; ++trial) {
        const int n_sets = 1 + static_cast<int>(rng.uniform_int(3));
        const int set_size = 2 + static_cast<int>(rng.uniform_int(4));
        const int B = n_sets * set_size;
        const int F = 1 + static_cast<int>(rng.uniform_int(6));
        const int f = 1 + static_cast<int>(rng.uniform_int(5));
        Tensorf x = rand_mat_f(rng, {B, F, 1, f});
        std::vector<int> set_index(static_cast<std::size_t>(B));
        for (int i = 0; i < B; ++i) set_index[static_cast<std::size_t>(i)] = i / set_size;

        ParamSet<float> params(1000 + trial);
        auto run = [&](const Tensorf& input, const std::vector<int>& sets) {
            Graph<float> g;
            ParamBinding<float> pb(g, params);
            ForwardCtx<float> ctx{&g, &pb, &params, false, 0};
            Var out = deepset_on_flat(ctx, g.leaf(input, false), sets, "blk");
            return g.value(out);
        };
        const Tensorf base = run(x, set_index);

        // permute rows within each set
        std::vector<int> where(static_cast<std::size_t>(B));
        for (int s = 0; s < n_sets; ++s) {
            std::vector<int> rows;
            for (int i = 0; i < B; ++i)
                if (set_index[static_cast<std::size_t>(i)] == s) rows.push_back(i);
            std::vector<int> perm = rows;
            rng.shuffle(perm);
            for (std::size_t k = 0; k < rows.size(); ++k) where[static_cast<std::size_t>(rows[k])] = perm[k];
        }
        Tensorf xp({B, F, 1, f});
        std::vector<int> sets_p(static_cast<std::size_t>(B));
        const std::int64_t row_sz = static_cast<std::int64_t>(F) * f;
        for (int i = 0; i < B; ++i) {
            const int src = where[static_cast<std::size_t>(i)];
            std::copy(&x[src * row_sz], &x[src * row_sz] + row_sz, &xp[i * row_sz]);
            sets_p[static_cast<std::size_t>(i)] = set_index[static_cast<std::size_t>(src)];
        }
        const Tensorf perm_out = run(xp, sets_p);
        for (int i = 0; i < B; ++i) {
            const int src = where[static_cast<std::size_t>(i)];
            for (std::int64_t j = 0; j < row_sz; ++j)
                ASSERT_NEAR(perm_out[i * row_sz + j], base[src * row_sz + j], 1e-6)
                    << "trial " << trial << " row " << i;
        }
    }
}

TEST(Deepset, UnequalSetSizesRejected) {
    Graph<float> g;
    ParamSet<float> params(3);
    ParamBinding<float> pb(g, params);
    ForwardCtx<float> ctx{&g, &pb, &params, false, 0};
    Tensorf x({5, 2, 1, 3}, 0.1f);
    EXPECT_THROW(deepset_on_flat(ctx, g.leaf(x, false), {0, 0, 0, 1, 1}, "blk"), GroupingError);
    EXPECT_THROW(group_into_sets({}), GroupingError);
}

TEST(Alignment, MmdIsTrainablySmall) {
    // Push a trainable point cloud onto a fixed target with Adam on the MMD
    // alone; the penalty must shrink by a large factor.
    Rng rng(111);
    Tensorf tgt = rand_mat_f(rng, {16, 4}, 1.0, 2.0);
    ParamSet<float> params(12);
    Adam<float> opt(5e-2);
    KernelConfig kc;
    double first = -1.0, last = -1.0;
    for (int step = 0; step < 200; ++step) {
        Graph<float> g;
        ParamBinding<float> pb(g, params);
        Var x = pb.init("cloud", {16, 4}, 4);
        Var t = g.leaf(tgt, false);
        Var m = mmd_squared(g, x, t, kc);
        const double v = g.scalar(m);
        if (step == 0) first = v;
        last = v;
        g.backward(m);
        opt.step(params, pb.collect_grads());
    }
    EXPECT_LT(last, 0.05 * first) << "first " << first << " last " << last;
}
