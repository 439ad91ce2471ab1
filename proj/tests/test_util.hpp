#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "sandwich/sandwich.hpp"

namespace sandwich::testutil {

inline Tensord rand_mat(Rng& rng, int n, int d, double lo = -2.0, double hi = 2.0) {
    Tensord m({n, d});
    for (std::int64_t i = 0; i < m.size(); ++i) m[i] = rng.uniform(lo, hi);
    return m;
}

inline Tensorf rand_mat_f(Rng& rng, const std::vector<int>& shape, double lo = -1.0, double hi = 1.0) {
    Tensorf m(shape);
    for (std::int64_t i = 0; i < m.size(); ++i) m[i] = static_cast<float>(rng.uniform(lo, hi));
    return m;
}

// Deliberately naive MMD^2: three explicit kernel-sum loops over raw rows,
// sharing nothing with the library implementation beyond the definition.
inline double oracle_mmd2(const Tensord& x, const Tensord& y, const KernelConfig& cfg) {
    const int m = x.dim(0), n = y.dim(0), d = x.dim(1);
    double sigma2 = 1.0;
    if (cfg.kind == KernelKind::rbf) {
        if (cfg.bandwidth_rule == BandwidthRule::fixed) {
            sigma2 = *cfg.fixed_sigma2;
        } else {
            double acc = 0.0;
            int pairs = 0;
            auto row = [&](int i) { return i < m ? &x.at2(i, 0) : &y.at2(i - m, 0); };
            for (int i = 0; i < m + n; ++i)
                for (int j = 0; j < m + n; ++j) {
                    if (i == j) continue;
                    double sq = 0.0;
                    for (int k = 0; k < d; ++k) {
                        double diff = row(i)[k] - row(j)[k];
                        sq += diff * diff;
                    }
                    acc += sq;
                    ++pairs;
                }
            sigma2 = std::max(acc / pairs, 1e-12);
        }
    }
    auto kern = [&](const double* a, const double* b) {
        if (cfg.kind == KernelKind::linear) {
            double dot = 0.0;
            for (int k = 0; k < d; ++k) dot += a[k] * b[k];
            return dot;
        }
        double sq = 0.0;
        for (int k = 0; k < d; ++k) {
            double diff = a[k] - b[k];
            sq += diff * diff;
        }
        return std::exp(-sq / (2.0 * sigma2));
    };
    double kxx = 0.0, kyy = 0.0, kxy = 0.0;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) kxx += kern(&x.at2(i, 0), &x.at2(j, 0));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) kyy += kern(&y.at2(i, 0), &y.at2(j, 0));
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) kxy += kern(&x.at2(i, 0), &y.at2(j, 0));
    return kxx / (static_cast<double>(m) * m) + kyy / (static_cast<double>(n) * n) -
           2.0 * kxy / (static_cast<double>(m) * n);
}

// Small shallow stack so federation tests run in milliseconds per step.
inline ShallowHyper mini_shallow() {
    ShallowHyper h;
    h.temporal_filters = 8;
    h.temporal_kernel = 13;
    h.spatial_filters = 8;
    h.pool_len = 10;
    h.pool_stride = 5;
    h.dropout = 0.5;
    h.reduced_filters = 12;
    h.trunk_filters = 12;
    h.trunk_layers = 2;
    return h;
}

// Two-site toy corpus: 8 channels, 50 Hz, 1.2 s trials, two motor classes.
inline SynthCorpusSpec tiny_corpus_spec(std::uint64_t seed = 7) {
    SynthCorpusSpec corpus;
    corpus.seed = seed;
    std::vector<std::string> chans;
    for (int c = 0; c < 8; ++c) chans.push_back("c" + std::to_string(c));
    SynthDatasetSpec alpha;
    alpha.dataset_id = "alpha";
    alpha.channel_names = chans;
    alpha.sampling_rate_hz = 50.0;
    alpha.n_subjects = 2;
    alpha.trials_per_subject = 24;
    alpha.trial_seconds = 1.2;
    alpha.classes = class_signals({"left_hand", "right_hand"});
    alpha.noise_std = 0.5;
    SynthDatasetSpec beta = alpha;
    beta.dataset_id = "beta";
    beta.trials_per_subject = 32;
    corpus.datasets = {alpha, beta};
    return corpus;
}

// NodeData straight from the generator (no preprocessing) with a per-subject
// holdout, for tests that exercise the protocol rather than the SNR.
inline std::map<std::string, NodeData> tiny_nodes(std::uint64_t seed = 7, int val_per_subject = 4) {
    auto corpus = generate_corpus(tiny_corpus_spec(seed));
    std::map<std::string, NodeData> nodes;
    for (auto& [id, ds] : corpus) {
        NodeData nd;
        nd.desc = ds.descriptor;
        if (id == "beta") {
            auto [train, val] = split_holdout_per_subject(ds.trials, val_per_subject);
            nd.train = std::move(train);
            nd.val = std::move(val);
        } else {
            nd.train = ds.trials;
            nd.val.dataset_id = id;
        }
        nodes.emplace(id, std::move(nd));
    }
    return nodes;
}

inline FedConfig tiny_fed_config(TransferMode transfer = TransferMode::none,
                                 HeadMode head = HeadMode::unified) {
    FedConfig cfg;
    cfg.variant = BackboneVariant::shallow_conv;
    cfg.transfer = transfer;
    cfg.head = head;
    cfg.shallow = mini_shallow();
    cfg.target_id = "beta";
    cfg.batch_size = 8;
    cfg.set_size = 4;
    cfg.seed = 42;
    return cfg;
}

}  // namespace sandwich::testutil
