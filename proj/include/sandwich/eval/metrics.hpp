#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "sandwich/core/errors.hpp"
#include "sandwich/core/io.hpp"
#include "sandwich/core/rng.hpp"
#include "sandwich/core/tensor.hpp"
#include "sandwich/data/dataset.hpp"

namespace sandwich {

// Maps label names onto merged scoring classes. The benchmark merge keeps
// left hand and right hand separate and folds everything else together.
struct MergeScoringMap {
    std::map<std::string, int> merged_of_name;
    int n_merged = 0;

    static MergeScoringMap motor_lr_other(const std::vector<std::string>& label_names) {
        MergeScoringMap m;
        m.n_merged = 3;
        for (const auto& name : label_names) {
            if (name == "left_hand")
                m.merged_of_name[name] = 0;
            else if (name == "right_hand")
                m.merged_of_name[name] = 1;
            else
                m.merged_of_name[name] = 2;
        }
        return m;
    }

    int merged_of(const std::string& name) const {
        auto it = merged_of_name.find(name);
        if (it == merged_of_name.end()) throw ValidationError("merge map has no entry for label '" + name + "'");
        return it->second;
    }

    std::vector<int> apply(const std::vector<int>& labels, const std::vector<std::string>& label_names) const {
        std::vector<int> out;
        out.reserve(labels.size());
        for (int l : labels) {
            if (l < 0 || l >= static_cast<int>(label_names.size()))
                throw ValidationError("merge map: label id out of range");
            out.push_back(merged_of(label_names[static_cast<std::size_t>(l)]));
        }
        return out;
    }
};

// Mean per-class recall over merged classes (classes without support are
// skipped). With support weighting it degenerates to plain accuracy.
inline double merged_weighted_accuracy(const std::vector<int>& merged_truth,
                                       const std::vector<int>& merged_pred, int n_classes,
                                       bool support_weighted = false) {
    if (merged_truth.size() != merged_pred.size())
        throw ValidationError("merged_weighted_accuracy: size mismatch");
    if (merged_truth.empty()) throw ValidationError("merged_weighted_accuracy: empty input");
    std::vector<std::int64_t> support(static_cast<std::size_t>(n_classes), 0);
    std::vector<std::int64_t> hits(static_cast<std::size_t>(n_classes), 0);
    for (std::size_t i = 0; i < merged_truth.size(); ++i) {
        const int t = merged_truth[i];
        if (t < 0 || t >= n_classes) throw ValidationError("merged_weighted_accuracy: class id out of range");
        ++support[static_cast<std::size_t>(t)];
        if (merged_pred[i] == t) ++hits[static_cast<std::size_t>(t)];
    }
    double acc = 0.0;
    std::int64_t denom = 0;
    for (int c = 0; c < n_classes; ++c) {
        if (support[static_cast<std::size_t>(c)] == 0) continue;
        const double recall = static_cast<double>(hits[static_cast<std::size_t>(c)]) /
                              static_cast<double>(support[static_cast<std::size_t>(c)]);
        if (support_weighted) {
            acc += recall * static_cast<double>(support[static_cast<std::size_t>(c)]);
            denom += support[static_cast<std::size_t>(c)];
        } else {
            acc += recall;
            ++denom;
        }
    }
    if (denom == 0) throw ValidationError("merged_weighted_accuracy: no class has support");
    return acc / static_cast<double>(denom);
}

inline double merged_weighted_accuracy(const std::vector<int>& truth, const std::vector<int>& pred,
                                       const std::vector<std::string>& label_names,
                                       const MergeScoringMap& merge, bool support_weighted = false) {
    return merged_weighted_accuracy(merge.apply(truth, label_names), merge.apply(pred, label_names),
                                    merge.n_merged, support_weighted);
}

namespace detail {

inline void softmax_row(const float* in, double* out, int k) {
    double mx = in[0];
    for (int i = 1; i < k; ++i) mx = std::max(mx, static_cast<double>(in[i]));
    double sum = 0.0;
    for (int i = 0; i < k; ++i) {
        out[i] = std::exp(static_cast<double>(in[i]) - mx);
        sum += out[i];
    }
    for (int i = 0; i < k; ++i) out[i] /= sum;
}

}  // namespace detail

// Channel relevance by perturbation: add seeded Gaussian noise, scaled by the
// channel's own standard deviation, to one channel at a time, and measure the
// mean absolute change of the softmax probability of the true class.
inline std::vector<double> perturbation_relevance(
    const std::function<Tensorf(const TrialTensor&)>& predict_logits, const TrialTensor& trials,
    const std::vector<int>& truth, double noise_scale, std::uint64_t seed) {
    const int n = trials.n_trials(), c = trials.n_channels(), s = trials.n_samples();
    if (static_cast<int>(truth.size()) != n) throw ValidationError("perturbation_relevance: truth size mismatch");
    if (noise_scale <= 0.0) throw ConfigError("perturbation_relevance: noise_scale must be > 0");

    const Tensorf base_logits = predict_logits(trials);
    if (base_logits.dim(0) != n) throw ShapeError("perturbation_relevance: predictor returned wrong row count");
    const int k = base_logits.dim(1);
    std::vector<double> base_prob(static_cast<std::size_t>(n));
    std::vector<double> row(static_cast<std::size_t>(k));
    for (int i = 0; i < n; ++i) {
        const int t = truth[static_cast<std::size_t>(i)];
        if (t < 0 || t >= k) throw ValidationError("perturbation_relevance: truth label out of range");
        detail::softmax_row(&base_logits.at2(i, 0), row.data(), k);
        base_prob[static_cast<std::size_t>(i)] = row[static_cast<std::size_t>(t)];
    }

    std::vector<double> relevance(static_cast<std::size_t>(c), 0.0);
    for (int ch = 0; ch < c; ++ch) {
        double mean = 0.0, sq = 0.0;
        const std::int64_t m = static_cast<std::int64_t>(n) * s;
        for (int i = 0; i < n; ++i) {
            const float* x = &trials.data.at3(i, ch, 0);
            for (int t = 0; t < s; ++t) {
                mean += x[t];
                sq += static_cast<double>(x[t]) * x[t];
            }
        }
        mean /= static_cast<double>(m);
        const double sd = std::sqrt(std::max(0.0, sq / static_cast<double>(m) - mean * mean));

        TrialTensor noisy = trials;
        Rng rng = Rng::stream(seed, "perturb/" + std::to_string(ch));
        for (int i = 0; i < n; ++i) {
            float* x = &noisy.data.at3(i, ch, 0);
            for (int t = 0; t < s; ++t) x[t] += static_cast<float>(noise_scale * sd * rng.normal());
        }
        const Tensorf logits = predict_logits(noisy);
        double acc = 0.0;
        for (int i = 0; i < n; ++i) {
            detail::softmax_row(&logits.at2(i, 0), row.data(), k);
            acc += std::abs(row[static_cast<std::size_t>(truth[static_cast<std::size_t>(i)])] -
                            base_prob[static_cast<std::size_t>(i)]);
        }
        relevance[static_cast<std::size_t>(ch)] = acc / n;
    }
    return relevance;
}

// One row per trial: trial_id, dataset_id, label name, set index, then the
// flattened feature vector.
inline void export_features_csv(const std::filesystem::path& path, const TrialTensor& trials,
                                const std::vector<std::string>& label_names, const Tensorf& features) {
    if (features.rank() != 2 || features.dim(0) != trials.n_trials())
        throw ShapeError("export_features_csv: features must be (n_trials, d)");
    const int d = features.dim(1);
    std::string out = "trial_id,dataset_id,label,set_index";
    for (int j = 0; j < d; ++j) out += ",f" + std::to_string(j);
    out += "\n";
    char buf[64];
    for (int i = 0; i < trials.n_trials(); ++i) {
        const int l = trials.labels[static_cast<std::size_t>(i)];
        if (l < 0 || l >= static_cast<int>(label_names.size()))
            throw ValidationError("export_features_csv: label id out of range");
        out += std::to_string(i) + "," + trials.dataset_id + "," + label_names[static_cast<std::size_t>(l)] +
               "," + std::to_string(trials.subject_index[static_cast<std::size_t>(i)]);
        for (int j = 0; j < d; ++j) {
            std::snprintf(buf, sizeof(buf), ",%.9g", static_cast<double>(features.at2(i, j)));
            out += buf;
        }
        out += "\n";
    }
    write_file_text(path, out);
}

}  // namespace sandwich
