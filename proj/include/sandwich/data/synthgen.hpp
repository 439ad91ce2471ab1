#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "sandwich/core/errors.hpp"
#include "sandwich/core/rng.hpp"
#include "sandwich/data/dataset.hpp"

namespace sandwich {

// Which part of the channel list a class attenuates. Positional, not
// anatomical: "left" is the first half of the list, "right" the second,
// "central" the middle third, "lateral" everything outside the middle third.
enum class ContraRegion { none, left, right, central, lateral };

inline ContraRegion contra_from_string(const std::string& s) {
    if (s == "none") return ContraRegion::none;
    if (s == "left") return ContraRegion::left;
    if (s == "right") return ContraRegion::right;
    if (s == "central") return ContraRegion::central;
    if (s == "lateral") return ContraRegion::lateral;
    throw ConfigError("unknown contra region '" + s + "'");
}

inline std::string contra_to_string(ContraRegion r) {
    switch (r) {
        case ContraRegion::none: return "none";
        case ContraRegion::left: return "left";
        case ContraRegion::right: return "right";
        case ContraRegion::central: return "central";
        case ContraRegion::lateral: return "lateral";
    }
    return "none";
}

inline bool in_contra_region(ContraRegion r, int position, int n_channels) {
    const int lo = n_channels / 3, hi = 2 * n_channels / 3;
    switch (r) {
        case ContraRegion::none: return false;
        case ContraRegion::left: return position < n_channels / 2;
        case ContraRegion::right: return position >= n_channels / 2;
        case ContraRegion::central: return position >= lo && position < hi;
        case ContraRegion::lateral: return position < lo || position >= hi;
    }
    return false;
}

// Spectral template of one class: a band-limited oscillation centered at
// center_hz, with its amplitude scaled by `attenuation` on the contralateral
// channel region. Attenuation 1.0 makes the class spatially flat.
struct ClassSignal {
    std::string label;
    double center_hz = 10.0;
    double bandwidth_hz = 2.0;
    double amp = 2.0;
    double attenuation = 0.5;
    ContraRegion contra = ContraRegion::none;
};

struct SynthDatasetSpec {
    std::string dataset_id;
    std::vector<std::string> channel_names;
    double sampling_rate_hz = 100.0;
    int n_subjects = 2;
    int trials_per_subject = 60;
    double trial_seconds = 3.2;
    std::vector<ClassSignal> classes;
    double noise_std = 1.0;
    // Subject effect: each subject's oscillation amplitude is multiplied by a
    // gain drawn uniformly from [gain_lo, gain_hi]. The gain scales the class
    // signal only, not the noise, so it changes per-channel SNR and survives
    // per-trial normalization.
    double gain_lo = 1.0;
    double gain_hi = 1.0;
    // Montage permutation: the spatial pattern of channel c is generated from
    // position channel_permutation[c]. Channel NAMES stay put, so datasets
    // with different permutations disagree about what lives under a name.
    std::vector<int> channel_permutation;

    void validate() const {
        if (dataset_id.empty()) throw ConfigError("synth: dataset_id required");
        if (channel_names.empty()) throw ConfigError("synth: channel list empty");
        if (classes.empty()) throw ConfigError("synth: class list empty");
        if (sampling_rate_hz <= 0.0) throw ConfigError("synth: sampling rate must be > 0");
        if (n_subjects < 1 || trials_per_subject < 1) throw ConfigError("synth: need subjects and trials");
        if (trial_seconds * sampling_rate_hz < 8.0) throw ConfigError("synth: trial too short");
        if (noise_std < 0.0) throw ConfigError("synth: noise_std must be >= 0");
        if (gain_lo <= 0.0 || gain_hi < gain_lo) throw ConfigError("synth: need 0 < gain_lo <= gain_hi");
        for (const auto& c : classes) {
            const double f_lo = c.center_hz - c.bandwidth_hz / 2.0;
            const double f_hi = c.center_hz + c.bandwidth_hz / 2.0;
            if (f_lo <= 0.0 || f_hi >= sampling_rate_hz / 2.0)
                throw ConfigError("synth: class '" + c.label + "' band outside (0, nyquist)");
            if (c.bandwidth_hz < 0.0) throw ConfigError("synth: bandwidth must be >= 0");
            if (c.amp <= 0.0) throw ConfigError("synth: class amplitude must be > 0");
            if (c.attenuation <= 0.0 || c.attenuation > 1.0)
                throw ConfigError("synth: attenuation must be in (0, 1]");
        }
        if (!channel_permutation.empty()) {
            if (channel_permutation.size() != channel_names.size())
                throw ConfigError("synth: permutation size != channel count");
            std::vector<int> seen(channel_names.size(), 0);
            for (int p : channel_permutation) {
                if (p < 0 || p >= static_cast<int>(channel_names.size()) || seen[static_cast<std::size_t>(p)]++)
                    throw ConfigError("synth: channel_permutation is not a permutation");
            }
        }
    }
};

// Broadband noise plus a per-label band-limited oscillation. Each trial draws
// its oscillation frequency inside the class band, and each channel its own
// phase (scalp oscillations are not phase-locked, and a common phase would be
// cancelled by the across-channel normalization step); the oscillation is
// attenuated on the class's contralateral channels and scaled by the subject
// gain. Labels cycle so every subject sees a balanced class sequence.
// Deterministic in (seed, dataset_id).
inline Dataset generate(const SynthDatasetSpec& spec, std::uint64_t seed) {
    spec.validate();
    const int n_ch = static_cast<int>(spec.channel_names.size());
    const int n_samp = static_cast<int>(std::llround(spec.trial_seconds * spec.sampling_rate_hz));
    const int n_classes = static_cast<int>(spec.classes.size());
    const int n_trials = spec.n_subjects * spec.trials_per_subject;

    Dataset out;
    out.descriptor.dataset_id = spec.dataset_id;
    out.descriptor.channel_names = spec.channel_names;
    out.descriptor.sampling_rate_hz = spec.sampling_rate_hz;
    for (const auto& c : spec.classes) out.descriptor.label_names.push_back(c.label);
    for (int s = 0; s < spec.n_subjects; ++s) out.descriptor.subject_ids.push_back("s" + std::to_string(s));
    out.trials.dataset_id = spec.dataset_id;
    out.trials.data = Tensorf({n_trials, n_ch, n_samp});

    Rng rng = Rng::stream(seed, "synth/" + spec.dataset_id);
    std::vector<double> subject_gain(static_cast<std::size_t>(spec.n_subjects));
    for (auto& g : subject_gain) g = rng.uniform(spec.gain_lo, spec.gain_hi);

    const double two_pi = 2.0 * 3.14159265358979323846;
    const double dt = 1.0 / spec.sampling_rate_hz;
    int row = 0;
    for (int s = 0; s < spec.n_subjects; ++s) {
        for (int k = 0; k < spec.trials_per_subject; ++k, ++row) {
            const int label = k % n_classes;
            const ClassSignal& cls = spec.classes[static_cast<std::size_t>(label)];
            const double freq = cls.center_hz + cls.bandwidth_hz * (rng.uniform() - 0.5);
            const double osc_amp = cls.amp * subject_gain[static_cast<std::size_t>(s)];
            for (int c = 0; c < n_ch; ++c) {
                const int pos = spec.channel_permutation.empty()
                                    ? c
                                    : spec.channel_permutation[static_cast<std::size_t>(c)];
                const double phase = rng.uniform(0.0, two_pi);
                double gain = osc_amp;
                if (in_contra_region(cls.contra, pos, n_ch)) gain *= cls.attenuation;
                float* dst = &out.trials.data.at3(row, c, 0);
                for (int t = 0; t < n_samp; ++t) {
                    double v = spec.noise_std * rng.normal();
                    v += gain * std::sin(two_pi * freq * t * dt + phase);
                    dst[t] = static_cast<float>(v);
                }
            }
            out.trials.labels.push_back(label);
            out.trials.subject_index.push_back(s);
        }
    }
    out.descriptor.validate();
    out.trials.validate(out.descriptor);
    return out;
}

struct SynthCorpusSpec {
    std::uint64_t seed = 42;
    std::vector<SynthDatasetSpec> datasets;
};

inline void to_json(nlohmann::json& j, const ClassSignal& c) {
    j = {{"label", c.label},
         {"center_hz", c.center_hz},
         {"bandwidth_hz", c.bandwidth_hz},
         {"amp", c.amp},
         {"attenuation", c.attenuation},
         {"contra", contra_to_string(c.contra)}};
}

inline void from_json(const nlohmann::json& j, ClassSignal& c) {
    c.label = j.at("label").get<std::string>();
    c.center_hz = j.value("center_hz", 10.0);
    c.bandwidth_hz = j.value("bandwidth_hz", 2.0);
    c.amp = j.value("amp", 2.0);
    c.attenuation = j.value("attenuation", 0.5);
    c.contra = contra_from_string(j.value("contra", "none"));
}

inline void to_json(nlohmann::json& j, const SynthDatasetSpec& s) {
    j = {{"dataset_id", s.dataset_id},
         {"channel_names", s.channel_names},
         {"sampling_rate_hz", s.sampling_rate_hz},
         {"n_subjects", s.n_subjects},
         {"trials_per_subject", s.trials_per_subject},
         {"trial_seconds", s.trial_seconds},
         {"classes", s.classes},
         {"noise_std", s.noise_std},
         {"gain_range", {s.gain_lo, s.gain_hi}}};
    if (!s.channel_permutation.empty()) j["channel_permutation"] = s.channel_permutation;
}

inline void from_json(const nlohmann::json& j, SynthDatasetSpec& s) {
    s.dataset_id = j.at("dataset_id").get<std::string>();
    s.channel_names = j.at("channel_names").get<std::vector<std::string>>();
    s.sampling_rate_hz = j.value("sampling_rate_hz", 100.0);
    s.n_subjects = j.value("n_subjects", 2);
    s.trials_per_subject = j.value("trials_per_subject", 60);
    s.trial_seconds = j.value("trial_seconds", 3.2);
    s.classes = j.at("classes").get<std::vector<ClassSignal>>();
    s.noise_std = j.value("noise_std", 1.0);
    if (j.contains("gain_range")) {
        const auto r = j.at("gain_range").get<std::vector<double>>();
        if (r.size() != 2) throw ConfigError("synth: gain_range must be [lo, hi]");
        s.gain_lo = r[0];
        s.gain_hi = r[1];
    }
    if (j.contains("channel_permutation"))
        s.channel_permutation = j.at("channel_permutation").get<std::vector<int>>();
}

inline void to_json(nlohmann::json& j, const SynthCorpusSpec& s) {
    j = {{"seed", s.seed}, {"datasets", s.datasets}};
}

inline void from_json(const nlohmann::json& j, SynthCorpusSpec& s) {
    s.seed = j.value("seed", std::uint64_t{42});
    s.datasets = j.at("datasets").get<std::vector<SynthDatasetSpec>>();
}

inline std::map<std::string, Dataset> generate_corpus(const SynthCorpusSpec& spec) {
    if (spec.datasets.empty()) throw ConfigError("synth corpus: no datasets");
    std::map<std::string, Dataset> out;
    for (const auto& d : spec.datasets) {
        if (out.count(d.dataset_id)) throw ConfigError("synth corpus: duplicate dataset id '" + d.dataset_id + "'");
        out.emplace(d.dataset_id, generate(d, spec.seed));
    }
    return out;
}

// Shared class table: one spectral template per label, reused across datasets
// so cross-dataset transfer is physically meaningful. Motor classes suppress
// the oscillation over the opposite side of the strip. The two hand classes
// share the mu-like band and differ only in which side is attenuated, so
// telling them apart genuinely requires spatial structure (montage
// permutations then matter); the remaining classes get distinct bands with
// guard gaps.
inline ClassSignal class_signal(const std::string& label) {
    if (label == "rest") return {label, 6.0, 2.0, 2.0, 1.0, ContraRegion::none};
    if (label == "feet") return {label, 9.0, 2.0, 2.0, 0.5, ContraRegion::central};
    if (label == "left_hand") return {label, 12.0, 2.0, 2.0, 0.3, ContraRegion::right};
    if (label == "right_hand") return {label, 12.0, 2.0, 2.0, 0.3, ContraRegion::left};
    if (label == "both_hands") return {label, 16.0, 2.0, 2.0, 0.5, ContraRegion::lateral};
    if (label == "tongue") return {label, 19.0, 2.0, 2.0, 1.0, ContraRegion::none};
    throw ConfigError("no class signal defined for label '" + label + "'");
}

inline std::vector<ClassSignal> class_signals(const std::vector<std::string>& labels) {
    std::vector<ClassSignal> out;
    for (const auto& l : labels) out.push_back(class_signal(l));
    return out;
}

inline const std::vector<std::string>& common_motor_channels() {
    static const std::vector<std::string> names = {"Fz",  "FC1", "FC2", "C5", "C3",  "C1",
                                                   "C2",  "C4",  "C6",  "CP3", "CP1", "CPz",
                                                   "CP2", "CP4", "P1",  "Pz",  "P2"};
    return names;
}

struct BeetlMiniOptions {
    // Widened on sources to create subject-level shift; the target stays tame.
    double source_gain_lo = 0.8;
    double source_gain_hi = 1.3;
    double target_gain_lo = 0.9;
    double target_gain_hi = 1.1;
    // Rotates each source's spatial pattern under unchanged channel names, the
    // shift a per-dataset branch can absorb but channel-matched pooling cannot.
    bool permute_source_montages = false;
};

// Four-dataset benchmark corpus: three source sites with different montages,
// rates, and label sets, plus the target site.
inline SynthCorpusSpec beetl_mini_spec(std::uint64_t seed = 42, const BeetlMiniOptions& opt = {}) {
    auto extend = [](std::vector<std::string> base, const std::vector<std::string>& extra) {
        base.insert(base.end(), extra.begin(), extra.end());
        return base;
    };
    auto rotate_perm = [](int n, int by) {
        std::vector<int> p(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = (i + by) % n;
        return p;
    };
    SynthCorpusSpec corpus;
    corpus.seed = seed;

    SynthDatasetSpec a;
    a.dataset_id = "src_a";
    a.channel_names = extend(common_motor_channels(), {"Cz", "F3", "F4", "P3", "P4"});
    a.sampling_rate_hz = 120.0;
    a.n_subjects = 2;
    a.trials_per_subject = 60;
    a.classes = class_signals({"left_hand", "right_hand"});

    SynthDatasetSpec b;
    b.dataset_id = "src_b";
    b.channel_names = common_motor_channels();
    b.sampling_rate_hz = 100.0;
    b.n_subjects = 2;
    b.trials_per_subject = 60;
    b.classes = class_signals({"left_hand", "right_hand", "feet", "tongue"});

    SynthDatasetSpec c;
    c.dataset_id = "src_c";
    c.channel_names = extend(common_motor_channels(), {"Cz", "F3", "F4", "F7", "F8", "T7", "T8", "P3",
                                                       "P4", "P7", "P8", "O1", "O2"});
    c.sampling_rate_hz = 160.0;
    c.n_subjects = 2;
    c.trials_per_subject = 60;
    c.classes = class_signals({"left_hand", "right_hand", "feet", "rest"});

    SynthDatasetSpec t;
    t.dataset_id = "target";
    t.channel_names = extend(common_motor_channels(), {"Cz", "F3", "F4", "P3", "P4", "O1", "O2"});
    t.sampling_rate_hz = 100.0;
    t.n_subjects = 2;
    t.trials_per_subject = 120;
    t.classes = class_signals({"rest", "left_hand", "right_hand", "feet"});
    t.gain_lo = opt.target_gain_lo;
    t.gain_hi = opt.target_gain_hi;

    int idx = 0;
    for (SynthDatasetSpec* src : {&a, &b, &c}) {
        src->gain_lo = opt.source_gain_lo;
        src->gain_hi = opt.source_gain_hi;
        // Half-length rotations swap which named channels sit over each
        // hemisphere, so name-matched pooling sees contradictory laterality.
        if (opt.permute_source_montages) {
            const int n = static_cast<int>(src->channel_names.size());
            src->channel_permutation = rotate_perm(n, n / 2 + 2 * idx);
        }
        ++idx;
    }

    corpus.datasets = {a, b, c, t};
    return corpus;
}

inline std::map<std::string, Dataset> make_beetl_mini(std::uint64_t seed = 42,
                                                      const BeetlMiniOptions& opt = {}) {
    return generate_corpus(beetl_mini_spec(seed, opt));
}

// Small fast corpus for ablation sweeps: identical montage names everywhere,
// 1 s trials at a common rate, two classes. With permute_montage the spatial
// layout under the shared channel names differs per dataset, which breaks
// channel-matched pooling but not per-dataset branches.
inline SynthCorpusSpec ordering_corpus_spec(std::uint64_t seed, bool permute_montage) {
    static const std::vector<std::string> names = {"c0", "c1", "c2", "c3", "c4", "c5", "c6", "c7"};
    auto rotate_perm = [&](int by) {
        std::vector<int> p(names.size());
        for (std::size_t i = 0; i < p.size(); ++i)
            p[i] = static_cast<int>((i + static_cast<std::size_t>(by)) % p.size());
        return p;
    };
    SynthCorpusSpec corpus;
    corpus.seed = seed;
    for (int i = 0; i < 3; ++i) {
        SynthDatasetSpec d;
        d.dataset_id = i < 2 ? "src" + std::to_string(i) : "tgt";
        d.channel_names = names;
        d.sampling_rate_hz = 100.0;
        d.n_subjects = 2;
        d.trials_per_subject = i < 2 ? 50 : 60;
        d.trial_seconds = 1.0;
        d.classes = class_signals({"left_hand", "right_hand"});
        if (i < 2) {
            d.gain_lo = 0.7;
            d.gain_hi = 1.4;
        }
        if (permute_montage && i < 2) d.channel_permutation = rotate_perm(4 + i);
        corpus.datasets.push_back(std::move(d));
    }
    return corpus;
}

inline std::map<std::string, Dataset> make_ordering_corpus(std::uint64_t seed, bool permute_montage) {
    return generate_corpus(ordering_corpus_spec(seed, permute_montage));
}

}  // namespace sandwich
