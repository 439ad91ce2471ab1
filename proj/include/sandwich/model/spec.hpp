#pragma once

#include <string>
#include <vector>

#include "sandwich/core/errors.hpp"

namespace sandwich {

enum class LayerKind {
    conv,       // co filters, kernel (kh, kw), dilation (dh, dw), valid padding
    inception,  // parallel convs, outputs center-cropped to min length, depth-concatenated
    batch_norm,
    square,
    log_act,
    elu,
    avg_pool,  // window (kh, kw), stride (sh, sw)
    dropout,
};

struct ConvDesc {
    int filters = 0;
    int kh = 1, kw = 1;
    int dh = 1, dw = 1;
};

struct LayerDesc {
    LayerKind kind;
    ConvDesc conv;                    // conv
    std::vector<ConvDesc> parallel;   // inception
    int kh = 1, kw = 1, sh = 1, sw = 1;  // avg_pool
    double rate = 0.0;                // dropout

    static LayerDesc Conv(int filters, int kh, int kw, int dh = 1, int dw = 1) {
        LayerDesc l{LayerKind::conv, {filters, kh, kw, dh, dw}, {}, 1, 1, 1, 1, 0.0};
        return l;
    }
    static LayerDesc Inception(std::vector<ConvDesc> parallel) {
        LayerDesc l{LayerKind::inception, {}, std::move(parallel), 1, 1, 1, 1, 0.0};
        return l;
    }
    static LayerDesc BatchNorm() { return {LayerKind::batch_norm, {}, {}, 1, 1, 1, 1, 0.0}; }
    static LayerDesc Square() { return {LayerKind::square, {}, {}, 1, 1, 1, 1, 0.0}; }
    static LayerDesc Log() { return {LayerKind::log_act, {}, {}, 1, 1, 1, 1, 0.0}; }
    static LayerDesc Elu() { return {LayerKind::elu, {}, {}, 1, 1, 1, 1, 0.0}; }
    static LayerDesc AvgPool(int kh, int kw, int sh, int sw) {
        return {LayerKind::avg_pool, {}, {}, kh, kw, sh, sw, 0.0};
    }
    static LayerDesc Dropout(double rate) { return {LayerKind::dropout, {}, {}, 1, 1, 1, 1, rate}; }
};

enum class BackboneVariant { shallow_conv, inception };
enum class TransferMode { none, mmd, deepset };
enum class HeadMode { unified, multi };

// Architecture knobs the paper leaves open; every default here is
// overridable from the experiment config.
struct ShallowHyper {
    int temporal_filters = 40;
    int temporal_kernel = 25;
    int spatial_filters = 40;
    int pool_len = 75;
    int pool_stride = 15;
    double dropout = 0.5;
    int reduced_filters = 50;
    int trunk_filters = 50;
    int trunk_layers = 3;
};

struct InceptionHyper {
    int branch_filters = 4;  // per parallel conv; concat triples this
    int branch_kernel = 21;
    std::vector<int> branch_dilations = {4, 2, 1};
    int spatial_filters = 48;
    int pool_len = 4;
    int pool_stride = 4;
    double dropout = 0.25;
    int trunk_filters = 16;  // per parallel conv in the trunk inception block
    int trunk_kernel = 5;
    std::vector<int> trunk_dilations = {8, 4, 2};
    int cnn_block1_kernel = 9;
    int cnn_block2_kernel = 5;
};

struct BranchSpec {
    BackboneVariant variant;
    int n_channels = 0;
    std::vector<LayerDesc> layers;
    int out_filters = 0;  // depth of the emitted feature tensor
};

struct TrunkSpec {
    BackboneVariant variant;
    TransferMode transfer_mode = TransferMode::none;
    std::vector<LayerDesc> common;     // shared feature extraction
    std::vector<LayerDesc> block1;     // transfer CNN block (inception variant, transfer active)
    std::vector<LayerDesc> block2;
    bool deepset_before = false;  // deep-set insertion points
    bool deepset_middle_after = false;
    // Collapse the time axis at the trunk output. The inception path keeps
    // oscillatory (phase-carrying) features all the way through, so without
    // this the heads see per-trial phase, which does not generalize; the
    // shallow path already extracts phase-free band power in its branch.
    bool global_time_pool = false;
    int mmd_projection_filters = 50;  // mmd mode projection width
};

struct HeadSpec {
    HeadMode mode = HeadMode::unified;
    int unified_n_classes = 6;
};

inline BranchSpec build_shallow_branch(int n_channels, const ShallowHyper& h = {}) {
    if (n_channels < 1) throw ValidationError("build_shallow_branch: n_channels must be >= 1");
    BranchSpec s;
    s.variant = BackboneVariant::shallow_conv;
    s.n_channels = n_channels;
    s.layers = {
        LayerDesc::Conv(h.temporal_filters, 1, h.temporal_kernel),
        LayerDesc::Conv(h.spatial_filters, n_channels, 1),
        LayerDesc::BatchNorm(),
        LayerDesc::Square(),
        LayerDesc::AvgPool(1, h.pool_len, 1, h.pool_stride),
        LayerDesc::Log(),
        LayerDesc::Dropout(h.dropout),
        LayerDesc::Conv(h.reduced_filters, 1, 1),
    };
    s.out_filters = h.reduced_filters;
    return s;
}

inline BranchSpec build_inception_branch(int n_channels, const InceptionHyper& h = {}) {
    if (n_channels < 1) throw ValidationError("build_inception_branch: n_channels must be >= 1");
    BranchSpec s;
    s.variant = BackboneVariant::inception;
    s.n_channels = n_channels;
    std::vector<ConvDesc> parallel;
    for (int d : h.branch_dilations) parallel.push_back({h.branch_filters, 1, h.branch_kernel, 1, d});
    s.layers = {
        LayerDesc::Inception(parallel),
        LayerDesc::Conv(h.spatial_filters, n_channels, 1),
        LayerDesc::BatchNorm(),
        LayerDesc::Elu(),
        LayerDesc::AvgPool(1, h.pool_len, 1, h.pool_stride),
        LayerDesc::Dropout(h.dropout),
    };
    s.out_filters = h.spatial_filters;
    return s;
}

inline TrunkSpec build_shallow_trunk(TransferMode mode, const ShallowHyper& h = {}) {
    TrunkSpec t;
    t.variant = BackboneVariant::shallow_conv;
    t.transfer_mode = mode;
    for (int i = 0; i < h.trunk_layers; ++i) {
        t.common.push_back(LayerDesc::Conv(h.trunk_filters, 1, 1));
        t.common.push_back(LayerDesc::Elu());
    }
    t.deepset_before = (mode == TransferMode::deepset);
    t.deepset_middle_after = (mode == TransferMode::deepset);
    return t;
}

inline TrunkSpec build_inception_trunk(TransferMode mode, const InceptionHyper& h = {}) {
    TrunkSpec t;
    t.variant = BackboneVariant::inception;
    t.transfer_mode = mode;
    std::vector<ConvDesc> parallel;
    for (int d : h.trunk_dilations) parallel.push_back({h.trunk_filters, 1, h.trunk_kernel, 1, d});
    t.common = {LayerDesc::Inception(parallel)};
    const int width = h.trunk_filters * static_cast<int>(h.trunk_dilations.size());
    if (mode != TransferMode::none) {
        t.block1 = {
            LayerDesc::Conv(width, 1, h.cnn_block1_kernel),
            LayerDesc::Conv(width, 1, 1),
            LayerDesc::BatchNorm(),
            LayerDesc::Elu(),
            LayerDesc::Dropout(h.dropout),
        };
        t.block2 = {
            LayerDesc::Conv(width, 1, h.cnn_block2_kernel),
            LayerDesc::Conv(width, 1, 1),
            LayerDesc::BatchNorm(),
            LayerDesc::Elu(),
            LayerDesc::Dropout(h.dropout),
        };
    }
    t.deepset_before = (mode == TransferMode::deepset);
    t.deepset_middle_after = (mode == TransferMode::deepset);
    t.global_time_pool = true;
    return t;
}

// Output spatial size of a layer stack on a (1, H, W) input; depth tracked
// alongside. Used for the shape table and build-time validation.
struct ShapeTrace {
    int depth, h, w;
};

inline ShapeTrace trace_layers(const std::vector<LayerDesc>& layers, ShapeTrace in) {
    ShapeTrace s = in;
    for (const auto& l : layers) {
        switch (l.kind) {
            case LayerKind::conv: {
                const int oh = s.h - (l.conv.kh - 1) * l.conv.dh;
                const int ow = s.w - (l.conv.kw - 1) * l.conv.dw;
                if (oh < 1 || ow < 1) throw ShapeError("trace: conv does not fit");
                s = {l.conv.filters, oh, ow};
                break;
            }
            case LayerKind::inception: {
                int min_w = 1 << 30, total = 0;
                for (const auto& c : l.parallel) {
                    const int ow = s.w - (c.kw - 1) * c.dw;
                    if (ow < 1) throw ShapeError("trace: inception conv does not fit");
                    min_w = std::min(min_w, ow);
                    total += c.filters;
                }
                s = {total, s.h, min_w};
                break;
            }
            case LayerKind::avg_pool: {
                if (l.kh > s.h || l.kw > s.w) throw ShapeError("trace: pool does not fit");
                s.h = (s.h - l.kh) / l.sh + 1;
                s.w = (s.w - l.kw) / l.sw + 1;
                break;
            }
            default:
                break;
        }
    }
    return s;
}

}  // namespace sandwich
