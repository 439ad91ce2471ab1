#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sandwich/align/mmd.hpp"
#include "sandwich/data/dataset.hpp"
#include "sandwich/data/preprocess.hpp"
#include "sandwich/eval/metrics.hpp"
#include "sandwich/fed/system.hpp"
#include "sandwich/model/spec.hpp"

namespace sandwich {

struct DatasetRole {
    std::string id;
    std::string role;  // "source" | "target"
};

struct ExperimentConfig {
    std::vector<DatasetRole> datasets;
    PreprocessConfig preprocess;
    int val_trials_per_subject = 20;

    std::string variant = "shallow";   // shallow | inception
    std::string transfer = "none";     // none | mmd | deepset
    std::string head = "unified";      // unified | multi
    ShallowHyper shallow;
    InceptionHyper inception;
    std::vector<std::string> unified_labels = {"left_hand", "right_hand", "feet",
                                               "tongue",    "rest",       "both_hands"};
    AlignmentConfig alignment;

    int batch_size = 10;
    int set_size = 5;
    std::optional<double> learning_rate;  // unset: 1e-3 shallow, 5e-4 inception
    double weight_decay = 5e-4;
    int epochs = 10;
    std::uint64_t seed = 42;
    bool support_weighted_scoring = false;
    bool debug_leak_raw_samples = false;

    void validate() const {
        if (datasets.empty()) throw ConfigError("config: dataset list is empty");
        int targets = 0;
        for (const auto& d : datasets) {
            if (d.id.empty()) throw ConfigError("config: dataset entry without id");
            if (d.role == "target")
                ++targets;
            else if (d.role != "source")
                throw ConfigError("config: dataset '" + d.id + "' has unknown role '" + d.role + "'");
        }
        if (targets != 1)
            throw ConfigError("config: exactly one dataset must have role 'target', found " +
                              std::to_string(targets));
        if (variant != "shallow" && variant != "inception")
            throw ConfigError("config: unknown variant '" + variant + "'");
        if (transfer != "none" && transfer != "mmd" && transfer != "deepset")
            throw ConfigError("config: unknown transfer mode '" + transfer + "'");
        if (head != "unified" && head != "multi")
            throw ConfigError("config: unknown head mode '" + head + "'");
        if (epochs < 1) throw ConfigError("config: epochs must be >= 1");
        if (val_trials_per_subject < 0) throw ConfigError("config: val_trials_per_subject must be >= 0");
        if (learning_rate && *learning_rate <= 0.0) throw ConfigError("config: learning_rate must be > 0");
        preprocess.validate();
        alignment.validate();
    }

    std::string target_id() const {
        for (const auto& d : datasets)
            if (d.role == "target") return d.id;
        throw ConfigError("config: no target dataset");
    }

    std::vector<std::string> source_ids() const {
        std::vector<std::string> out;
        for (const auto& d : datasets)
            if (d.role == "source") out.push_back(d.id);
        return out;
    }

    double resolved_learning_rate() const {
        if (learning_rate) return *learning_rate;
        return variant == "inception" ? 5e-4 : 1e-3;
    }

    FedConfig fed() const {
        validate();
        FedConfig f;
        f.variant = variant == "inception" ? BackboneVariant::inception : BackboneVariant::shallow_conv;
        f.transfer = transfer == "mmd"       ? TransferMode::mmd
                     : transfer == "deepset" ? TransferMode::deepset
                                             : TransferMode::none;
        f.head = head == "multi" ? HeadMode::multi : HeadMode::unified;
        f.shallow = shallow;
        f.inception = inception;
        f.unified_labels = unified_labels;
        f.alignment = alignment;
        f.target_id = target_id();
        f.batch_size = batch_size;
        f.set_size = set_size;
        f.learning_rate = resolved_learning_rate();
        f.weight_decay = weight_decay;
        f.seed = seed;
        return f;
    }
};

inline void to_json(nlohmann::json& j, const DatasetRole& d) { j = {{"id", d.id}, {"role", d.role}}; }
inline void from_json(const nlohmann::json& j, DatasetRole& d) {
    d.id = j.at("id").get<std::string>();
    d.role = j.value("role", "source");
}

inline void to_json(nlohmann::json& j, const PreprocessConfig& p) {
    j = {{"band_lo_hz", p.band_lo_hz},
         {"band_hi_hz", p.band_hi_hz},
         {"filter_order", p.filter_order},
         {"target_rate_hz", p.target_rate_hz},
         {"window_s", p.window_s}};
    if (p.balance_target)
        j["balance_target"] = *p.balance_target;
    else
        j["balance_target"] = nullptr;
}

inline void from_json(const nlohmann::json& j, PreprocessConfig& p) {
    p.band_lo_hz = j.value("band_lo_hz", 4.0);
    p.band_hi_hz = j.value("band_hi_hz", 32.0);
    p.filter_order = j.value("filter_order", 5);
    p.target_rate_hz = j.value("target_rate_hz", 200.0);
    p.window_s = j.value("window_s", 3.0);
    if (j.contains("balance_target") && !j.at("balance_target").is_null())
        p.balance_target = j.at("balance_target").get<int>();
    else
        p.balance_target.reset();
}

inline void to_json(nlohmann::json& j, const KernelConfig& k) {
    j = {{"kind", k.kind == KernelKind::linear ? "linear" : "rbf"},
         {"bandwidth_rule", k.bandwidth_rule == BandwidthRule::fixed ? "fixed" : "mean_sq_l2"}};
    if (k.fixed_sigma2) j["fixed_sigma2"] = *k.fixed_sigma2;
}

inline void from_json(const nlohmann::json& j, KernelConfig& k) {
    const std::string kind = j.value("kind", "rbf");
    if (kind == "linear")
        k.kind = KernelKind::linear;
    else if (kind == "rbf")
        k.kind = KernelKind::rbf;
    else
        throw ConfigError("config: unknown kernel kind '" + kind + "'");
    const std::string rule = j.value("bandwidth_rule", "mean_sq_l2");
    if (rule == "fixed")
        k.bandwidth_rule = BandwidthRule::fixed;
    else if (rule == "mean_sq_l2")
        k.bandwidth_rule = BandwidthRule::mean_sq_l2;
    else
        throw ConfigError("config: unknown bandwidth rule '" + rule + "'");
    if (j.contains("fixed_sigma2") && !j.at("fixed_sigma2").is_null())
        k.fixed_sigma2 = j.at("fixed_sigma2").get<double>();
}

inline void to_json(nlohmann::json& j, const AlignmentConfig& a) {
    j = {{"lambda", a.lambda_weight}, {"aligned_labels", a.aligned_labels}, {"kernel", a.kernel}};
}

inline void from_json(const nlohmann::json& j, AlignmentConfig& a) {
    a.lambda_weight = j.value("lambda", 1.0);
    if (j.contains("aligned_labels")) a.aligned_labels = j.at("aligned_labels").get<std::vector<std::string>>();
    if (j.contains("kernel")) a.kernel = j.at("kernel").get<KernelConfig>();
}

inline void to_json(nlohmann::json& j, const ShallowHyper& h) {
    j = {{"temporal_filters", h.temporal_filters}, {"temporal_kernel", h.temporal_kernel},
         {"spatial_filters", h.spatial_filters},   {"pool_len", h.pool_len},
         {"pool_stride", h.pool_stride},           {"dropout", h.dropout},
         {"reduced_filters", h.reduced_filters},   {"trunk_filters", h.trunk_filters},
         {"trunk_layers", h.trunk_layers}};
}

inline void from_json(const nlohmann::json& j, ShallowHyper& h) {
    h.temporal_filters = j.value("temporal_filters", h.temporal_filters);
    h.temporal_kernel = j.value("temporal_kernel", h.temporal_kernel);
    h.spatial_filters = j.value("spatial_filters", h.spatial_filters);
    h.pool_len = j.value("pool_len", h.pool_len);
    h.pool_stride = j.value("pool_stride", h.pool_stride);
    h.dropout = j.value("dropout", h.dropout);
    h.reduced_filters = j.value("reduced_filters", h.reduced_filters);
    h.trunk_filters = j.value("trunk_filters", h.trunk_filters);
    h.trunk_layers = j.value("trunk_layers", h.trunk_layers);
}

inline void to_json(nlohmann::json& j, const InceptionHyper& h) {
    j = {{"branch_filters", h.branch_filters},
         {"branch_kernel", h.branch_kernel},
         {"branch_dilations", h.branch_dilations},
         {"spatial_filters", h.spatial_filters},
         {"pool_len", h.pool_len},
         {"pool_stride", h.pool_stride},
         {"dropout", h.dropout},
         {"trunk_filters", h.trunk_filters},
         {"trunk_kernel", h.trunk_kernel},
         {"trunk_dilations", h.trunk_dilations},
         {"cnn_block1_kernel", h.cnn_block1_kernel},
         {"cnn_block2_kernel", h.cnn_block2_kernel}};
}

inline void from_json(const nlohmann::json& j, InceptionHyper& h) {
    h.branch_filters = j.value("branch_filters", h.branch_filters);
    h.branch_kernel = j.value("branch_kernel", h.branch_kernel);
    if (j.contains("branch_dilations")) h.branch_dilations = j.at("branch_dilations").get<std::vector<int>>();
    h.spatial_filters = j.value("spatial_filters", h.spatial_filters);
    h.pool_len = j.value("pool_len", h.pool_len);
    h.pool_stride = j.value("pool_stride", h.pool_stride);
    h.dropout = j.value("dropout", h.dropout);
    h.trunk_filters = j.value("trunk_filters", h.trunk_filters);
    h.trunk_kernel = j.value("trunk_kernel", h.trunk_kernel);
    if (j.contains("trunk_dilations")) h.trunk_dilations = j.at("trunk_dilations").get<std::vector<int>>();
    h.cnn_block1_kernel = j.value("cnn_block1_kernel", h.cnn_block1_kernel);
    h.cnn_block2_kernel = j.value("cnn_block2_kernel", h.cnn_block2_kernel);
}

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    j = {{"datasets", c.datasets},
         {"preprocess", c.preprocess},
         {"val_trials_per_subject", c.val_trials_per_subject},
         {"variant", c.variant},
         {"transfer", c.transfer},
         {"head", c.head},
         {"shallow", c.shallow},
         {"inception", c.inception},
         {"unified_labels", c.unified_labels},
         {"alignment", c.alignment},
         {"batch_size", c.batch_size},
         {"set_size", c.set_size},
         {"learning_rate", c.learning_rate ? nlohmann::json(*c.learning_rate) : nlohmann::json(nullptr)},
         {"weight_decay", c.weight_decay},
         {"epochs", c.epochs},
         {"seed", c.seed},
         {"support_weighted_scoring", c.support_weighted_scoring}};
    if (c.debug_leak_raw_samples) j["debug"] = {{"leak_raw_samples", true}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
    c.datasets = j.at("datasets").get<std::vector<DatasetRole>>();
    if (j.contains("preprocess")) c.preprocess = j.at("preprocess").get<PreprocessConfig>();
    c.val_trials_per_subject = j.value("val_trials_per_subject", 20);
    c.variant = j.value("variant", "shallow");
    c.transfer = j.value("transfer", "none");
    c.head = j.value("head", "unified");
    if (j.contains("shallow")) c.shallow = j.at("shallow").get<ShallowHyper>();
    if (j.contains("inception")) c.inception = j.at("inception").get<InceptionHyper>();
    if (j.contains("unified_labels"))
        c.unified_labels = j.at("unified_labels").get<std::vector<std::string>>();
    if (j.contains("alignment")) c.alignment = j.at("alignment").get<AlignmentConfig>();
    c.batch_size = j.value("batch_size", 10);
    c.set_size = j.value("set_size", 5);
    if (j.contains("learning_rate") && !j.at("learning_rate").is_null())
        c.learning_rate = j.at("learning_rate").get<double>();
    c.weight_decay = j.value("weight_decay", 5e-4);
    c.epochs = j.value("epochs", 10);
    c.seed = j.value("seed", std::uint64_t{42});
    c.support_weighted_scoring = j.value("support_weighted_scoring", false);
    if (j.contains("debug")) c.debug_leak_raw_samples = j.at("debug").value("leak_raw_samples", false);
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file_text(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    ExperimentConfig c = j.get<ExperimentConfig>();
    c.validate();
    return c;
}

inline void save_experiment_config(const ExperimentConfig& cfg, const std::filesystem::path& path) {
    write_file_text(path, nlohmann::json(cfg).dump(2) + "\n");
}

// Each dataset lives in its own subdirectory of the corpus dir.
inline std::map<std::string, Dataset> load_corpus(const std::filesystem::path& dir,
                                                  const std::vector<std::string>& ids) {
    std::map<std::string, Dataset> out;
    for (const auto& id : ids) out.emplace(id, read_dataset(dir / id));
    return out;
}

inline void save_corpus(const std::map<std::string, Dataset>& corpus, const std::filesystem::path& dir) {
    for (const auto& [id, ds] : corpus) write_dataset(ds.descriptor, ds.trials, dir / id);
}

// Preprocesses every dataset to the shared rate/window, carves the per-subject
// validation holdout off the target, and balances training trials afterwards
// so duplicates never leak into the holdout.
inline std::map<std::string, NodeData> prepare_nodes(const ExperimentConfig& cfg,
                                                     const std::map<std::string, Dataset>& corpus) {
    cfg.validate();
    std::map<std::string, NodeData> nodes;
    for (const auto& d : cfg.datasets) {
        auto it = corpus.find(d.id);
        if (it == corpus.end()) throw ConfigError("config names dataset '" + d.id + "' absent from corpus");
        const Dataset pre = preprocess_dataset(it->second, cfg.preprocess);
        NodeData nd;
        nd.desc = pre.descriptor;
        if (d.role == "target" && cfg.val_trials_per_subject > 0) {
            auto [fit, held] = split_holdout_per_subject(pre.trials, cfg.val_trials_per_subject);
            nd.train = std::move(fit);
            nd.val = std::move(held);
        } else {
            nd.train = pre.trials;
        }
        if (cfg.preprocess.balance_target) nd.train = balance(nd.train, *cfg.preprocess.balance_target);
        nodes.emplace(d.id, std::move(nd));
    }
    return nodes;
}

template <typename S = float>
FederatedSystem<S> make_system(const ExperimentConfig& cfg, const std::map<std::string, NodeData>& nodes) {
    FederatedSystem<S> sys(cfg.fed(), nodes);
    if (cfg.debug_leak_raw_samples) sys.set_leak_raw_samples(true);
    return sys;
}

struct EvalSummary {
    double accuracy = 0.0;         // in the prediction label space
    double merged_accuracy = 0.0;  // merged motor-imagery scoring
    std::vector<int> truth;        // same space as pred
    std::vector<int> pred;
    std::vector<std::string> space_labels;
};

template <typename S>
EvalSummary evaluate_target(FederatedSystem<S>& sys, const ExperimentConfig& cfg) {
    const std::string target = cfg.target_id();
    const TrialTensor& val = sys.val_trials(target);
    if (val.n_trials() == 0) throw ValidationError("evaluate_target: target has no validation trials");
    const PredictOut out = sys.predict(target, val);

    EvalSummary summary;
    summary.pred = out.pred;
    summary.space_labels =
        out.unified_space ? cfg.unified_labels : sys.descriptor(target).label_names;
    for (int i = 0; i < val.n_trials(); ++i) {
        const int local = val.labels[static_cast<std::size_t>(i)];
        summary.truth.push_back(out.unified_space ? sys.unified_label_of(target, local) : local);
    }
    int hit = 0;
    for (std::size_t i = 0; i < summary.truth.size(); ++i)
        if (summary.truth[i] == summary.pred[i]) ++hit;
    summary.accuracy = static_cast<double>(hit) / static_cast<double>(summary.truth.size());
    const MergeScoringMap merge = MergeScoringMap::motor_lr_other(summary.space_labels);
    summary.merged_accuracy = merged_weighted_accuracy(summary.truth, summary.pred, summary.space_labels,
                                                       merge, cfg.support_weighted_scoring);
    return summary;
}

}  // namespace sandwich
