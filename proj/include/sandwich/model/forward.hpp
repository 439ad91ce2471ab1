#pragma once

#include <string>
#include <vector>

#include "sandwich/core/graph.hpp"
#include "sandwich/model/params.hpp"
#include "sandwich/model/spec.hpp"

namespace sandwich {

// Everything a forward pass needs besides the input. Dropout masks derive
// from (seed, "<param prefix>/<step>"), so any runner that evaluates the same
// layer at the same step draws the same mask regardless of execution order.
template <typename S>
struct ForwardCtx {
    Graph<S>* g;
    ParamBinding<S>* pb;
    ParamSet<S>* params;
    bool train = false;
    std::int64_t step = 0;

    Rng dropout_rng(const std::string& prefix) const {
        return Rng::stream(params->seed(), "dropout/" + prefix + "/" + std::to_string(step));
    }
};

template <typename S>
Var apply_layers(ForwardCtx<S>& ctx, Var x, const std::vector<LayerDesc>& layers,
                 const std::string& prefix) {
    Graph<S>& g = *ctx.g;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const LayerDesc& l = layers[i];
        const std::string lp = prefix + "/" + std::to_string(i);
        switch (l.kind) {
            case LayerKind::conv: {
                const int ci = g.value(x).dim(1);
                const int fan_in = ci * l.conv.kh * l.conv.kw;
                Var w = ctx.pb->init(lp + "/w", {l.conv.filters, ci, l.conv.kh, l.conv.kw}, fan_in);
                Var b = ctx.pb->init(lp + "/b", {l.conv.filters}, fan_in);
                x = g.conv2d(x, w, b, l.conv.dh, l.conv.dw);
                break;
            }
            case LayerKind::inception: {
                const int ci = g.value(x).dim(1);
                std::vector<Var> outs;
                int min_w = 1 << 30;
                for (std::size_t k = 0; k < l.parallel.size(); ++k) {
                    const ConvDesc& c = l.parallel[k];
                    const std::string cp = lp + "/p" + std::to_string(k);
                    const int fan_in = ci * c.kh * c.kw;
                    Var w = ctx.pb->init(cp + "/w", {c.filters, ci, c.kh, c.kw}, fan_in);
                    Var b = ctx.pb->init(cp + "/b", {c.filters}, fan_in);
                    Var y = g.conv2d(x, w, b, c.dh, c.dw);
                    min_w = std::min(min_w, g.value(y).dim(3));
                    outs.push_back(y);
                }
                for (auto& y : outs) {
                    const int ow = g.value(y).dim(3);
                    if (ow != min_w) y = g.crop_w(y, (ow - min_w) / 2, min_w);
                }
                x = g.concat4(1, outs);
                break;
            }
            case LayerKind::batch_norm: {
                const int c = g.value(x).dim(1);
                Var gamma = ctx.pb->constant(lp + "/gamma", {c}, S(1), true);
                Var beta = ctx.pb->constant(lp + "/beta", {c}, S(0), true);
                ctx.params->get_or_const(lp + "/running_mean", {c}, S(0), false);
                ctx.params->get_or_const(lp + "/running_var", {c}, S(1), false);
                x = g.batch_norm(x, gamma, beta, ctx.params->at(lp + "/running_mean"),
                                 ctx.params->at(lp + "/running_var"), ctx.train);
                break;
            }
            case LayerKind::square:
                x = g.square(x);
                break;
            case LayerKind::log_act:
                x = g.log_eps(x, 1e-6);
                break;
            case LayerKind::elu:
                x = g.elu(x);
                break;
            case LayerKind::avg_pool:
                x = g.avg_pool2d(x, l.kh, l.kw, l.sh, l.sw);
                break;
            case LayerKind::dropout: {
                if (ctx.train && l.rate > 0.0) {
                    Rng rng = ctx.dropout_rng(lp);
                    x = g.dropout(x, l.rate, rng, true);
                }
                break;
            }
        }
    }
    return x;
}

// Branch forward: (B, 1, C, T) trials -> (B, F, 1, f) features.
template <typename S>
Var forward_branch(ForwardCtx<S>& ctx, const BranchSpec& spec, Var x, const std::string& owner) {
    const auto& v = ctx.g->value(x);
    if (v.rank() != 4 || v.dim(1) != 1)
        throw ShapeError("forward_branch: (B,1,C,T) input required, got " + shape_str(v.shape));
    if (v.dim(2) != spec.n_channels)
        throw ShapeError("forward_branch: input has " + std::to_string(v.dim(2)) + " channels, spec wants " +
                         std::to_string(spec.n_channels));
    return apply_layers(ctx, x, spec.layers, owner);
}

// ---- deep-set block ----

// Grouping of a flat batch into equal-sized per-subject sets, ordered by
// first occurrence. perm maps set-major position -> flat index.
struct SetGrouping {
    int n_sets = 0;
    int set_size = 0;
    std::vector<int> perm;
    std::vector<int> inverse;
};

inline SetGrouping group_into_sets(const std::vector<int>& set_index) {
    SetGrouping g;
    std::vector<int> order;  // distinct set ids by first occurrence
    for (int s : set_index)
        if (std::find(order.begin(), order.end(), s) == order.end()) order.push_back(s);
    g.n_sets = static_cast<int>(order.size());
    if (g.n_sets == 0) throw GroupingError("group_into_sets: empty batch");
    for (int sid : order) {
        int count = 0;
        for (std::size_t i = 0; i < set_index.size(); ++i)
            if (set_index[i] == sid) {
                g.perm.push_back(static_cast<int>(i));
                ++count;
            }
        if (g.set_size == 0)
            g.set_size = count;
        else if (count != g.set_size)
            throw GroupingError("group_into_sets: set " + std::to_string(sid) + " has " + std::to_string(count) +
                                " trials, expected " + std::to_string(g.set_size));
    }
    g.inverse.resize(g.perm.size());
    for (std::size_t i = 0; i < g.perm.size(); ++i)
        g.inverse[static_cast<std::size_t>(g.perm[i])] = static_cast<int>(i);
    return g;
}

// (S, T, N, f) -> (S, T, N, f): per-set mean summary, linear N->8, broadcast
// concat, linear (N+8)->N, ELU. Parameters are independent per call site.
template <typename S>
Var deepset_block(ForwardCtx<S>& ctx, Var x, const std::string& prefix) {
    Graph<S>& g = *ctx.g;
    const auto& v = g.value(x);
    if (v.rank() != 4) throw ShapeError("deepset_block: (S,T,N,f) required");
    const int T = v.dim(1), N = v.dim(2);
    constexpr int kSummary = 8;
    Var mu = g.mean_axis1_keep(x);
    Var w1 = ctx.pb->init(prefix + "/w1", {kSummary, N}, N);
    Var b1 = ctx.pb->init(prefix + "/b1", {kSummary}, N);
    Var summary = g.linear_axis2(mu, w1, b1);
    Var rep = g.repeat_axis1(summary, T);
    Var cat = g.concat4(2, {x, rep});
    Var w2 = ctx.pb->init(prefix + "/w2", {N, N + kSummary}, N + kSummary);
    Var b2 = ctx.pb->init(prefix + "/b2", {N}, N + kSummary);
    return g.elu(g.linear_axis2(cat, w2, b2));
}

// Wraps deepset_block for a flat (B, F, 1, f) feature tensor: group by
// set_index, reshape to (S, T, F, f), apply, restore flat order.
template <typename S>
Var deepset_on_flat(ForwardCtx<S>& ctx, Var feat, const std::vector<int>& set_index,
                    const std::string& prefix) {
    Graph<S>& g = *ctx.g;
    const auto& v = g.value(feat);
    if (v.rank() != 4 || static_cast<std::size_t>(v.dim(0)) != set_index.size())
        throw ShapeError("deepset_on_flat: batch/set_index mismatch");
    const int B = v.dim(0), F = v.dim(1), f = v.dim(3);
    const SetGrouping grp = group_into_sets(set_index);
    Var gathered = g.gather_rows(feat, grp.perm);
    Var sets = g.reshape(gathered, {grp.n_sets, grp.set_size, F, f});
    Var out = deepset_block(ctx, sets, prefix);
    Var flat = g.reshape(out, {B, F, 1, f});
    return g.gather_rows(flat, grp.inverse);
}

// ---- trunk ----

struct TrunkTaps {
    Var trunk_out;  // what heads consume (projection output in mmd mode)
};

template <typename S>
Var forward_trunk(ForwardCtx<S>& ctx, const TrunkSpec& spec, Var feat, const std::vector<int>& set_index,
                  const std::string& owner = "trunk") {
    Graph<S>& g = *ctx.g;
    Var x = feat;
    const bool ds = spec.transfer_mode == TransferMode::deepset;
    if (spec.variant == BackboneVariant::shallow_conv) {
        if (ds && spec.deepset_before) x = deepset_on_flat(ctx, x, set_index, owner + "/ds0");
        x = apply_layers(ctx, x, spec.common, owner + "/common");
        if (ds && spec.deepset_middle_after) x = deepset_on_flat(ctx, x, set_index, owner + "/ds1");
    } else {
        x = apply_layers(ctx, x, spec.common, owner + "/common");
        if (ds && spec.deepset_before) x = deepset_on_flat(ctx, x, set_index, owner + "/ds0");
        x = apply_layers(ctx, x, spec.block1, owner + "/b1");
        x = apply_layers(ctx, x, spec.block2, owner + "/b2");
        if (ds && spec.deepset_middle_after) x = deepset_on_flat(ctx, x, set_index, owner + "/ds1");
    }
    if (spec.global_time_pool) {
        const auto& v = g.value(x);
        if (v.rank() == 4 && v.dim(3) > 1) x = g.avg_pool2d(x, 1, v.dim(3), 1, v.dim(3));
    }
    if (spec.transfer_mode == TransferMode::mmd) {
        const int ci = g.value(x).dim(1);
        const int p = spec.mmd_projection_filters;
        Var w0 = ctx.pb->init(owner + "/proj/0/w", {p, ci, 1, 1}, ci);
        Var b0 = ctx.pb->init(owner + "/proj/0/b", {p}, ci);
        x = g.elu(g.conv2d(x, w0, b0));
        Var w1 = ctx.pb->init(owner + "/proj/1/w", {p, p, 1, 1}, p);
        Var b1 = ctx.pb->init(owner + "/proj/1/b", {p}, p);
        x = g.conv2d(x, w1, b1);
    }
    return x;
}

// ---- heads ----

template <typename S>
Var forward_head_unified(ForwardCtx<S>& ctx, const HeadSpec& spec, Var feat) {
    Graph<S>& g = *ctx.g;
    const auto& v = g.value(feat);
    const int B = v.dim(0);
    const int D = static_cast<int>(v.size() / B);
    Var flat = g.reshape(feat, {B, D});
    Var w = ctx.pb->init("head:unified/w", {spec.unified_n_classes, D}, D);
    Var b = ctx.pb->init("head:unified/b", {spec.unified_n_classes}, D);
    return g.linear(flat, w, b);
}

template <typename S>
Var forward_head_local(ForwardCtx<S>& ctx, const std::string& dataset_id, int n_classes, Var feat) {
    Graph<S>& g = *ctx.g;
    const auto& v = g.value(feat);
    const int B = v.dim(0);
    const int D = static_cast<int>(v.size() / B);
    Var flat = g.reshape(feat, {B, D});
    const std::string owner = "head:" + dataset_id;
    Var w = ctx.pb->init(owner + "/w", {n_classes, D}, D);
    Var b = ctx.pb->init(owner + "/b", {n_classes}, D);
    return g.linear(flat, w, b);
}

}  // namespace sandwich
