#include <cstdio>
#include <filesystem>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "sandwich/sandwich.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitPrivacy = 3;
constexpr int kExitIo = 4;

sandwich::ExperimentConfig load_config(const std::string& path, std::uint64_t* seed_override) {
    sandwich::ExperimentConfig cfg = sandwich::load_experiment_config(path);
    if (seed_override) cfg.seed = *seed_override;
    return cfg;
}

json epoch_log(const sandwich::TrainReport& report) {
    json epochs = json::array();
    for (const auto& e : report.epochs)
        epochs.push_back({{"epoch", e.epoch},
                          {"train_loss", e.train_loss},
                          {"classification", e.classification},
                          {"alignment_penalty", e.penalty},
                          {"val_accuracy", e.val_accuracy}});
    return epochs;
}

int run_synth(const std::string& config_path, const std::string& out_dir,
              std::optional<std::uint64_t> seed) {
    sandwich::SynthCorpusSpec spec;
    if (config_path.empty()) {
        spec = sandwich::beetl_mini_spec(seed.value_or(42));
    } else {
        spec = json::parse(sandwich::read_file_text(config_path)).get<sandwich::SynthCorpusSpec>();
        if (seed) spec.seed = *seed;
    }
    const auto corpus = sandwich::generate_corpus(spec);
    sandwich::save_corpus(corpus, out_dir);
    sandwich::write_file_text(fs::path(out_dir) / "corpus.json", json(spec).dump(2) + "\n");
    std::printf("wrote %zu datasets to %s\n", corpus.size(), out_dir.c_str());
    for (const auto& [id, ds] : corpus)
        std::printf("  %-8s %4d trials, %2d channels @ %.0f Hz, %zu labels\n", id.c_str(),
                    ds.trials.n_trials(), ds.descriptor.n_channels(), ds.descriptor.sampling_rate_hz,
                    ds.descriptor.label_names.size());
    return kExitOk;
}

int run_train(const std::string& config_path, const std::string& data_dir, const std::string& out_dir,
              std::optional<std::uint64_t> seed, const std::string& init_checkpoint) {
    std::uint64_t seed_val = seed.value_or(0);
    sandwich::ExperimentConfig cfg = load_config(config_path, seed ? &seed_val : nullptr);
    fs::create_directories(out_dir);
    sandwich::save_experiment_config(cfg, fs::path(out_dir) / "config.resolved.json");

    std::vector<std::string> ids;
    for (const auto& d : cfg.datasets) ids.push_back(d.id);
    const auto corpus = sandwich::load_corpus(data_dir, ids);
    const auto nodes = sandwich::prepare_nodes(cfg, corpus);
    auto sys = sandwich::make_system<float>(cfg, nodes);
    if (!init_checkpoint.empty()) sys.load_checkpoint(init_checkpoint);

    sandwich::TrainReport report;
    int exit_code = kExitOk;
    try {
        report = sys.train(cfg.epochs);
    } catch (const sandwich::PrivacyViolationError& e) {
        std::fprintf(stderr, "privacy violation: %s\n", e.what());
        sys.audit_log().save(fs::path(out_dir) / "audit.log");
        return kExitPrivacy;
    }
    if (!report.audit.clean()) {
        for (const auto& v : report.audit.violations)
            std::fprintf(stderr, "audit violation at step %u: %s\n", v.step, v.message.c_str());
        exit_code = kExitPrivacy;
    }
    sys.save_checkpoint(fs::path(out_dir) / "checkpoint");

    const auto summary = sandwich::evaluate_target(sys, cfg);
    sys.audit_log().save(fs::path(out_dir) / "audit.log");
    json metrics = {{"epochs", epoch_log(report)},
                    {"best_epoch", report.best_epoch},
                    {"best_val_accuracy", report.best_val_accuracy},
                    {"steps", report.steps},
                    {"val_accuracy", summary.accuracy},
                    {"merged_val_accuracy", summary.merged_accuracy},
                    {"audit_messages", sys.audit_log().size()},
                    {"audit_clean", report.audit.clean()}};
    sandwich::write_file_text(fs::path(out_dir) / "metrics.json", metrics.dump(2) + "\n");
    std::printf("trained %d epochs (%d steps); val accuracy %.4f, merged %.4f\n", cfg.epochs,
                report.steps, summary.accuracy, summary.merged_accuracy);
    std::printf("audit: %zu messages, %s\n", sys.audit_log().size(),
                report.audit.clean() ? "clean" : "VIOLATIONS");
    return exit_code;
}

int run_eval(const std::string& config_path, const std::string& data_dir, const std::string& out_dir,
             const std::string& checkpoint, const std::string& predictions,
             std::optional<std::uint64_t> seed) {
    std::uint64_t seed_val = seed.value_or(0);
    fs::create_directories(out_dir);

    json metrics;
    if (!predictions.empty()) {
        // Scoring-only path: predictions supplied externally, no model needed.
        bool support_weighted = false;
        if (!config_path.empty())
            support_weighted = load_config(config_path, nullptr).support_weighted_scoring;
        const json p = json::parse(sandwich::read_file_text(predictions));
        const auto labels = p.at("label_names").get<std::vector<std::string>>();
        const auto truth = p.at("truth").get<std::vector<int>>();
        const auto pred = p.at("pred").get<std::vector<int>>();
        if (truth.size() != pred.size())
            throw sandwich::ValidationError("predictions file: truth/pred size mismatch");
        const auto merge = sandwich::MergeScoringMap::motor_lr_other(labels);
        const double merged = sandwich::merged_weighted_accuracy(truth, pred, labels, merge,
                                                                 support_weighted);
        int hit = 0;
        for (std::size_t i = 0; i < truth.size(); ++i)
            if (truth[i] == pred[i]) ++hit;
        metrics = {{"val_accuracy", static_cast<double>(hit) / static_cast<double>(truth.size())},
                   {"merged_val_accuracy", merged},
                   {"n_trials", truth.size()}};
    } else {
        if (checkpoint.empty())
            throw sandwich::ConfigError("eval needs --checkpoint (or --predictions)");
        if (config_path.empty())
            throw sandwich::ConfigError("eval with --checkpoint needs --config");
        sandwich::ExperimentConfig cfg = load_config(config_path, seed ? &seed_val : nullptr);
        std::vector<std::string> ids;
        for (const auto& d : cfg.datasets) ids.push_back(d.id);
        const auto corpus = sandwich::load_corpus(data_dir, ids);
        const auto nodes = sandwich::prepare_nodes(cfg, corpus);
        auto sys = sandwich::make_system<float>(cfg, nodes);
        sys.load_checkpoint(checkpoint);
        const auto summary = sandwich::evaluate_target(sys, cfg);
        json pred = json::array();
        for (int v : summary.pred) pred.push_back(v);
        json truth = json::array();
        for (int v : summary.truth) truth.push_back(v);
        metrics = {{"val_accuracy", summary.accuracy},
                   {"merged_val_accuracy", summary.merged_accuracy},
                   {"n_trials", summary.truth.size()},
                   {"label_names", summary.space_labels},
                   {"pred", pred},
                   {"truth", truth}};
    }
    sandwich::write_file_text(fs::path(out_dir) / "metrics.json", metrics.dump(2) + "\n");
    std::printf("val accuracy %.4f, merged %.4f (%zu trials)\n",
                metrics.at("val_accuracy").get<double>(), metrics.at("merged_val_accuracy").get<double>(),
                metrics.at("n_trials").get<std::size_t>());
    return kExitOk;
}

int run_export(const std::string& config_path, const std::string& data_dir, const std::string& out_dir,
               const std::string& checkpoint, const std::string& tap_name,
               std::optional<std::uint64_t> seed) {
    std::uint64_t seed_val = seed.value_or(0);
    sandwich::ExperimentConfig cfg = load_config(config_path, seed ? &seed_val : nullptr);
    sandwich::FeatureTap tap;
    if (tap_name == "pre_common")
        tap = sandwich::FeatureTap::pre_common;
    else if (tap_name == "post_transfer")
        tap = sandwich::FeatureTap::post_transfer;
    else
        throw sandwich::ConfigError("unknown tap '" + tap_name + "' (pre_common | post_transfer)");
    fs::create_directories(out_dir);

    std::vector<std::string> ids;
    for (const auto& d : cfg.datasets) ids.push_back(d.id);
    const auto corpus = sandwich::load_corpus(data_dir, ids);
    const auto nodes = sandwich::prepare_nodes(cfg, corpus);
    auto sys = sandwich::make_system<float>(cfg, nodes);
    if (!checkpoint.empty()) sys.load_checkpoint(checkpoint);

    for (const auto& id : ids) {
        const sandwich::TrialTensor& trials = sys.train_trials(id);
        const sandwich::Tensorf feats = sys.features_at(id, trials, tap);
        const fs::path file = fs::path(out_dir) / ("features_" + id + "_" + tap_name + ".csv");
        sandwich::export_features_csv(file, trials, sys.descriptor(id).label_names, feats);
        std::printf("wrote %s (%d rows, %d dims)\n", file.c_str(), feats.dim(0), feats.dim(1));
    }
    return kExitOk;
}

int run_audit(const std::string& config_path, const std::string& log_path) {
    sandwich::ExperimentConfig cfg = sandwich::load_experiment_config(config_path);
    const sandwich::AuditLog log = sandwich::AuditLog::load(log_path);
    sandwich::AuditPolicy policy;
    policy.unified_head = cfg.head == "unified";
    policy.mmd_alignment = cfg.transfer == "mmd";
    policy.n_nodes = static_cast<int>(cfg.datasets.size());
    const sandwich::AuditVerdict verdict = sandwich::audit_check(log, policy);
    std::printf("checked %zu messages against %d-node %s-head policy\n", verdict.messages_checked,
                policy.n_nodes, policy.unified_head ? "unified" : "multi");
    if (verdict.clean()) {
        std::printf("audit clean\n");
        return kExitOk;
    }
    for (const auto& v : verdict.violations)
        std::fprintf(stderr, "violation at step %u: %s\n", v.step, v.message.c_str());
    return kExitPrivacy;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"federated multi-dataset EEG decoding"};
    app.require_subcommand(1);

    std::string config_path, data_dir = "data", out_dir = "out", checkpoint, predictions,
                tap = "post_transfer", log_path;
    std::optional<std::uint64_t> seed;

    auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
    synth->add_option("--config", config_path, "corpus spec JSON (default: built-in benchmark corpus)");
    synth->add_option("--out", out_dir, "output directory")->required();
    synth->add_option("--seed", seed, "seed override");

    auto* train = app.add_subcommand("train", "train a federated model");
    train->add_option("--config", config_path, "experiment config JSON")->required();
    train->add_option("--data", data_dir, "corpus directory")->required();
    train->add_option("--out", out_dir, "run directory")->required();
    train->add_option("--seed", seed, "seed override");
    train->add_option("--checkpoint", checkpoint, "warm-start checkpoint directory");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint or a predictions file");
    eval->add_option("--config", config_path, "experiment config JSON (needed unless --predictions)");
    eval->add_option("--data", data_dir, "corpus directory");
    eval->add_option("--out", out_dir, "output directory")->required();
    eval->add_option("--checkpoint", checkpoint, "checkpoint directory");
    eval->add_option("--predictions", predictions, "score an external predictions JSON instead");
    eval->add_option("--seed", seed, "seed override");

    auto* exp = app.add_subcommand("export", "export per-trial features to CSV");
    exp->add_option("--config", config_path, "experiment config JSON")->required();
    exp->add_option("--data", data_dir, "corpus directory")->required();
    exp->add_option("--out", out_dir, "output directory")->required();
    exp->add_option("--checkpoint", checkpoint, "checkpoint directory");
    exp->add_option("--tap", tap, "pre_common | post_transfer");
    exp->add_option("--seed", seed, "seed override");

    auto* audit = app.add_subcommand("audit", "re-check a saved audit log");
    audit->add_option("--config", config_path, "experiment config JSON")->required();
    audit->add_option("--log", log_path, "audit log file")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) return run_synth(config_path, out_dir, seed);
        if (train->parsed()) return run_train(config_path, data_dir, out_dir, seed, checkpoint);
        if (eval->parsed()) return run_eval(config_path, data_dir, out_dir, checkpoint, predictions, seed);
        if (exp->parsed()) return run_export(config_path, data_dir, out_dir, checkpoint, tap, seed);
        if (audit->parsed()) return run_audit(config_path, log_path);
    } catch (const sandwich::PrivacyViolationError& e) {
        std::fprintf(stderr, "privacy violation: %s\n", e.what());
        return kExitPrivacy;
    } catch (const sandwich::ValidationError& e) {
        std::fprintf(stderr, "invalid input: %s\n", e.what());
        return kExitValidation;
    } catch (const sandwich::IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return kExitIo;
    } catch (const nlohmann::json::exception& e) {
        std::fprintf(stderr, "malformed json: %s\n", e.what());
        return kExitIo;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitValidation;
    }
    return kExitOk;
}
