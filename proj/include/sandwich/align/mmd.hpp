#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sandwich/core/graph.hpp"

namespace sandwich {

enum class KernelKind { rbf, linear };
enum class BandwidthRule { mean_sq_l2, fixed };

struct KernelConfig {
    KernelKind kind = KernelKind::rbf;
    BandwidthRule bandwidth_rule = BandwidthRule::mean_sq_l2;
    std::optional<double> fixed_sigma2;

    void validate() const {
        if (kind == KernelKind::rbf && bandwidth_rule == BandwidthRule::fixed) {
            if (!fixed_sigma2 || *fixed_sigma2 <= 0.0)
                throw ConfigError("kernel: fixed bandwidth requires fixed_sigma2 > 0");
        }
    }
};

struct AlignmentConfig {
    double lambda_weight = 1.0;
    std::vector<std::string> aligned_labels = {"left_hand", "right_hand"};
    KernelConfig kernel;

    void validate() const {
        if (lambda_weight < 0.0) throw ConfigError("alignment: lambda must be >= 0");
        kernel.validate();
    }
};

namespace detail {

// Mean squared pairwise L2 distance over the concatenated batch, diagonal
// excluded. Computed on raw values so the bandwidth is a constant of the
// gradient.
template <typename S>
double mean_sq_pairwise(const Tensor<S>& a, const Tensor<S>& b) {
    const int m = a.dim(0), n = b.dim(0), d = a.dim(1);
    const int total = m + n;
    if (total < 2) throw EstimationError("mmd bandwidth: need at least 2 points");
    auto row = [&](int i) { return i < m ? &a.at2(i, 0) : &b.at2(i - m, 0); };
    double acc = 0.0;
    for (int i = 0; i < total; ++i)
        for (int j = i + 1; j < total; ++j) {
            const S* x = row(i);
            const S* y = row(j);
            double sq = 0.0;
            for (int k = 0; k < d; ++k) {
                const double diff = static_cast<double>(x[k]) - static_cast<double>(y[k]);
                sq += diff * diff;
            }
            acc += sq;
        }
    return acc * 2.0 / (static_cast<double>(total) * (total - 1));
}

}  // namespace detail

// Biased V-statistic MMD^2 between src (m, d) and tgt (n, d), differentiable
// through both inputs: mean k(s,s) + mean k(t,t) - 2 mean k(s,t).
template <typename S>
Var mmd_squared(Graph<S>& g, Var src, Var tgt, const KernelConfig& cfg) {
    cfg.validate();
    const auto &a = g.value(src), &b = g.value(tgt);
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("mmd_squared: rank-2 feature matrices required");
    if (a.dim(1) != b.dim(1))
        throw ShapeError("mmd_squared: feature dims differ, " + std::to_string(a.dim(1)) + " vs " +
                         std::to_string(b.dim(1)));
    if (a.dim(0) == 0 || b.dim(0) == 0) throw EstimationError("mmd_squared: empty point set");

    auto kernel = [&](Var x, Var y) {
        if (cfg.kind == KernelKind::linear) return g.gram(x, y);
        double sigma2;
        if (cfg.bandwidth_rule == BandwidthRule::fixed)
            sigma2 = *cfg.fixed_sigma2;
        else
            sigma2 = std::max(detail::mean_sq_pairwise(a, b), 1e-12);
        return g.exp_(g.scale(g.pairwise_sqdist(x, y), -1.0 / (2.0 * sigma2)));
    };
    Var mss = g.mean_all(kernel(src, src));
    Var mtt = g.mean_all(kernel(tgt, tgt));
    Var mst = g.mean_all(kernel(src, tgt));
    return g.sub(g.add(mss, mtt), g.scale(mst, 2.0));
}

// Value-only convenience for diagnostics.
template <typename S>
double mmd_squared_value(const Tensor<S>& src, const Tensor<S>& tgt, const KernelConfig& cfg) {
    Graph<S> g;
    Var a = g.leaf(src, false);
    Var b = g.leaf(tgt, false);
    return static_cast<double>(g.scalar(mmd_squared(g, a, b, cfg)));
}

// One participant in the alignment sum: flattened per-trial features plus a
// per-trial aligned-group id (0 = not aligned, 1.. = position in
// cfg.aligned_labels, 1-based).
struct AlignedFeatures {
    Var features;                 // (n, d)
    std::vector<int> group_ids;   // size n
};

struct MmdTerm {
    std::size_t source = 0;
    int group = 0;
    double value = 0.0;
};

// Sum over sources and aligned groups of label-conditioned MMD^2 terms.
// Groups absent from either side of a pair are skipped.
template <typename S>
Var alignment_penalty(Graph<S>& g, const std::vector<AlignedFeatures>& sources,
                      const AlignedFeatures& target, const AlignmentConfig& cfg,
                      std::vector<MmdTerm>* breakdown = nullptr) {
    cfg.validate();
    const int n_groups = static_cast<int>(cfg.aligned_labels.size());
    auto rows_of = [&](const AlignedFeatures& f, int gid) {
        std::vector<int> idx;
        for (std::size_t i = 0; i < f.group_ids.size(); ++i)
            if (f.group_ids[i] == gid) idx.push_back(static_cast<int>(i));
        return idx;
    };
    Var total = g.zero_scalar();
    for (std::size_t si = 0; si < sources.size(); ++si) {
        for (int gid = 1; gid <= n_groups; ++gid) {
            const auto src_idx = rows_of(sources[si], gid);
            const auto tgt_idx = rows_of(target, gid);
            if (src_idx.empty() || tgt_idx.empty()) continue;
            Var s = g.gather_rows(sources[si].features, src_idx);
            Var t = g.gather_rows(target.features, tgt_idx);
            Var term = mmd_squared(g, s, t, cfg.kernel);
            if (breakdown) breakdown->push_back({si, gid, static_cast<double>(g.scalar(term))});
            total = g.add(total, term);
        }
    }
    return total;
}

// L = L_c + lambda * sum of label-conditioned MMD^2 terms.
template <typename S>
Var sandwich_loss(Graph<S>& g, Var classification_loss, const std::vector<AlignedFeatures>& sources,
                  const AlignedFeatures& target, const AlignmentConfig& cfg,
                  std::vector<MmdTerm>* breakdown = nullptr) {
    cfg.validate();
    if (cfg.lambda_weight == 0.0) return classification_loss;
    Var penalty = alignment_penalty(g, sources, target, cfg, breakdown);
    return g.add(classification_loss, g.scale(penalty, cfg.lambda_weight));
}

// Maps per-trial label names onto aligned-group ids (1-based position in
// cfg.aligned_labels, 0 for labels outside the aligned set).
inline std::vector<int> aligned_group_ids(const std::vector<int>& labels,
                                          const std::vector<std::string>& label_names,
                                          const AlignmentConfig& cfg) {
    std::vector<int> out(labels.size(), 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int l = labels[i];
        if (l < 0 || l >= static_cast<int>(label_names.size()))
            throw ValidationError("aligned_group_ids: label out of range");
        for (std::size_t gidx = 0; gidx < cfg.aligned_labels.size(); ++gidx)
            if (label_names[static_cast<std::size_t>(l)] == cfg.aligned_labels[gidx]) {
                out[i] = static_cast<int>(gidx) + 1;
                break;
            }
    }
    return out;
}

}  // namespace sandwich
