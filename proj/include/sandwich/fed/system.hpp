#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sandwich/align/mmd.hpp"
#include "sandwich/core/errors.hpp"
#include "sandwich/core/graph.hpp"
#include "sandwich/core/rng.hpp"
#include "sandwich/data/dataset.hpp"
#include "sandwich/fed/messages.hpp"
#include "sandwich/model/forward.hpp"
#include "sandwich/model/optim.hpp"
#include "sandwich/model/params.hpp"
#include "sandwich/model/spec.hpp"

namespace sandwich {

struct FedConfig {
    BackboneVariant variant = BackboneVariant::shallow_conv;
    TransferMode transfer = TransferMode::none;
    HeadMode head = HeadMode::unified;
    ShallowHyper shallow;
    InceptionHyper inception;
    std::vector<std::string> unified_labels = {"left_hand", "right_hand", "feet",
                                               "tongue",    "rest",       "both_hands"};
    AlignmentConfig alignment;
    std::string target_id;
    int batch_size = 10;
    int set_size = 5;
    double learning_rate = 1e-3;
    double weight_decay = 5e-4;
    std::uint64_t seed = 42;

    void validate() const {
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (set_size < 1 || batch_size % set_size != 0)
            throw ConfigError("set_size must be >= 1 and divide batch_size");
        if (learning_rate <= 0.0) throw ConfigError("learning_rate must be > 0");
        if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
        if (target_id.empty()) throw ConfigError("target_id must be set");
        if (head == HeadMode::unified && unified_labels.empty())
            throw ConfigError("unified head requires a unified label list");
        alignment.validate();
    }
};

struct NodeData {
    DatasetDescriptor desc;
    TrialTensor train;
    TrialTensor val;  // may be empty
};

// Draws batches as (batch_size / set_size) subject-homogeneous sets so that
// set grouping downstream always sees equal-sized sets. Works when a node has
// a single subject (the whole batch becomes one set) or at least as many
// subjects as sets per batch.
class BatchSampler {
public:
    BatchSampler() = default;

    BatchSampler(const std::vector<int>& subject_index, int batch_size, int set_size, Rng rng)
        : batch_(batch_size), rng_(rng) {
        for (std::size_t i = 0; i < subject_index.size(); ++i)
            pools_[subject_index[i]].push_back(static_cast<int>(i));
        for (const auto& [sid, rows] : pools_) subjects_.push_back(sid);
        const int n_subjects = static_cast<int>(subjects_.size());
        if (n_subjects == 0) throw ConfigError("sampler: no trials");
        sets_per_batch_ = n_subjects == 1 ? 1 : batch_size / set_size;
        if (n_subjects > 1 && n_subjects < sets_per_batch_)
            throw ConfigError("sampler: " + std::to_string(n_subjects) + " subjects cannot fill " +
                              std::to_string(sets_per_batch_) + " sets per batch; increase set_size");
        if (batch_size % sets_per_batch_ != 0) throw ConfigError("sampler: batch not divisible into sets");
    }

    std::vector<int> next() {
        const int per_set = batch_ / sets_per_batch_;
        std::vector<int> picked_subjects;
        while (static_cast<int>(picked_subjects.size()) < sets_per_batch_) {
            if (order_.empty()) {
                order_ = subjects_;
                rng_.shuffle(order_);
            }
            bool took = false;
            for (std::size_t i = order_.size(); i-- > 0;) {
                if (std::find(picked_subjects.begin(), picked_subjects.end(), order_[i]) ==
                    picked_subjects.end()) {
                    picked_subjects.push_back(order_[i]);
                    order_.erase(order_.begin() + static_cast<std::ptrdiff_t>(i));
                    took = true;
                    break;
                }
            }
            if (!took) order_.clear();  // everything left this round is already in the batch
        }
        std::vector<int> rows;
        rows.reserve(static_cast<std::size_t>(batch_));
        for (int sid : picked_subjects)
            for (int k = 0; k < per_set; ++k) rows.push_back(draw(sid));
        return rows;
    }

private:
    int draw(int subject) {
        auto& q = queues_[subject];
        if (q.empty()) {
            q = pools_[subject];
            rng_.shuffle(q);
        }
        const int row = q.back();
        q.pop_back();
        return row;
    }

    int batch_ = 0;
    int sets_per_batch_ = 0;
    std::map<int, std::vector<int>> pools_;
    std::map<int, std::vector<int>> queues_;
    std::vector<int> subjects_;
    std::vector<int> order_;
    Rng rng_{0};
};

enum class FeatureTap { pre_common, post_transfer };

struct StepStats {
    double loss = 0.0;
    double classification = 0.0;
    double penalty = 0.0;
    std::vector<MmdTerm> mmd_terms;
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double classification = 0.0;
    double penalty = 0.0;
    double val_accuracy = 0.0;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    int best_epoch = -1;
    double best_val_accuracy = 0.0;
    int steps = 0;
    AuditVerdict audit;
};

struct PredictOut {
    Tensorf logits;          // (n, k)
    std::vector<int> pred;   // argmax; unified label ids in unified mode, local ids otherwise
    bool unified_space = false;
};

template <typename S>
class FederatedSystem {
public:
    FederatedSystem(FedConfig cfg, const std::map<std::string, NodeData>& data) : cfg_(std::move(cfg)) {
        cfg_.validate();
        if (data.empty()) throw ConfigError("federated system needs at least one node");
        if (!data.count(cfg_.target_id))
            throw ConfigError("target dataset '" + cfg_.target_id + "' is not among the nodes");
        int window = -1;
        double rate = -1.0;
        for (const auto& [id, nd] : data) {  // std::map iteration fixes lexicographic node order
            nd.desc.validate();
            nd.train.validate(nd.desc);
            if (nd.val.n_trials() > 0) nd.val.validate(nd.desc);
            if (window < 0) {
                window = nd.train.n_samples();
                rate = nd.desc.sampling_rate_hz;
            }
            if (nd.train.n_samples() != window)
                throw ConfigError("node '" + id + "' window length differs; resample/window first");
            if (nd.desc.sampling_rate_hz != rate)
                throw ConfigError("node '" + id + "' sampling rate differs; resample first");
            NodeState n;
            n.id = id;
            n.desc = nd.desc;
            n.train = nd.train;
            n.val = nd.val;
            n.branch = cfg_.variant == BackboneVariant::shallow_conv
                           ? build_shallow_branch(n.desc.n_channels(), cfg_.shallow)
                           : build_inception_branch(n.desc.n_channels(), cfg_.inception);
            n.params = ParamSet<S>(cfg_.seed);
            n.opt = Adam<S>(cfg_.learning_rate, cfg_.weight_decay);
            n.sampler = BatchSampler(nd.train.subject_index, cfg_.batch_size, cfg_.set_size,
                                     Rng::stream(cfg_.seed, "sampler/" + id));
            n.unified_of_local.resize(n.desc.label_names.size());
            for (std::size_t l = 0; l < n.desc.label_names.size(); ++l) {
                const auto it = std::find(cfg_.unified_labels.begin(), cfg_.unified_labels.end(),
                                          n.desc.label_names[l]);
                if (it == cfg_.unified_labels.end())
                    throw ConfigError("label '" + n.desc.label_names[l] + "' of node '" + id +
                                      "' missing from unified label list");
                n.unified_of_local[l] = static_cast<int>(it - cfg_.unified_labels.begin());
            }
            sentinels_.register_node_data(id, nd.train);
            nodes_.push_back(std::move(n));
        }
        server_.trunk = cfg_.variant == BackboneVariant::shallow_conv
                            ? build_shallow_trunk(cfg_.transfer, cfg_.shallow)
                            : build_inception_trunk(cfg_.transfer, cfg_.inception);
        server_.head.mode = cfg_.head;
        server_.head.unified_n_classes = static_cast<int>(cfg_.unified_labels.size());
        server_.params = ParamSet<S>(cfg_.seed);
        server_.opt = Adam<S>(cfg_.learning_rate, cfg_.weight_decay);
        policy_.unified_head = cfg_.head == HeadMode::unified;
        policy_.mmd_alignment = cfg_.transfer == TransferMode::mmd;
        policy_.n_nodes = static_cast<int>(nodes_.size());
    }

    const FedConfig& config() const { return cfg_; }
    const AuditLog& audit_log() const { return audit_; }
    const AuditPolicy& audit_policy() const { return policy_; }
    SentinelRegistry& sentinels() { return sentinels_; }
    std::int64_t step() const { return step_; }
    int n_nodes() const { return static_cast<int>(nodes_.size()); }

    std::vector<std::string> node_ids() const {
        std::vector<std::string> out;
        for (const auto& n : nodes_) out.push_back(n.id);
        return out;
    }

    // Negative control: a node smuggles its raw input window alongside the
    // features. The boundary audit must reject the message.
    void set_leak_raw_samples(bool on) { leak_raw_samples_ = on; }
    // Test hook applied to every outbound message before encoding.
    std::function<void(WireMessage&)> tamper;
    // When set, gradients applied at each optimizer step are kept for inspection.
    bool capture_grads = false;
    std::map<std::string, Tensor<S>> last_grads;

    int steps_per_epoch() const {
        int steps = std::numeric_limits<int>::max();
        for (const auto& n : nodes_) steps = std::min(steps, n.train.n_trials() / cfg_.batch_size);
        if (steps < 1) throw ConfigError("not enough trials for a single batch on some node");
        return steps;
    }

    StepStats train_step() {
        ++step_;
        return cfg_.head == HeadMode::unified ? unified_step() : multi_step();
    }

    TrainReport train(int epochs, bool restore_best = true) {
        if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
        TrainReport report;
        const int spe = steps_per_epoch();
        std::vector<std::map<std::string, typename ParamSet<S>::Entry>> best;
        for (int e = 0; e < epochs; ++e) {
            EpochStats es;
            es.epoch = e;
            for (int s = 0; s < spe; ++s) {
                const StepStats st = train_step();
                es.train_loss += st.loss;
                es.classification += st.classification;
                es.penalty += st.penalty;
                ++report.steps;
            }
            es.train_loss /= spe;
            es.classification /= spe;
            es.penalty /= spe;
            es.val_accuracy = validation_accuracy();
            report.epochs.push_back(es);
            if (report.best_epoch < 0 || es.val_accuracy > report.best_val_accuracy) {
                report.best_epoch = e;
                report.best_val_accuracy = es.val_accuracy;
                if (restore_best) {
                    best.clear();
                    for (const auto& n : nodes_) best.push_back(n.params.entries());
                    best.push_back(server_.params.entries());
                }
            }
        }
        if (restore_best && !best.empty()) {
            for (std::size_t i = 0; i < nodes_.size(); ++i) nodes_[i].params.entries() = best[i];
            server_.params.entries() = best.back();
        }
        report.audit = audit_check(audit_, policy_);
        return report;
    }

    // Accuracy of the target node's held-out split, computed in unified label
    // space for the unified head and local space otherwise.
    double validation_accuracy() {
        NodeState& t = node(cfg_.target_id);
        if (t.val.n_trials() == 0) return 0.0;
        const PredictOut out = predict(cfg_.target_id, t.val);
        int hit = 0;
        for (int i = 0; i < t.val.n_trials(); ++i) {
            const int truth = out.unified_space
                                  ? t.unified_of_local[static_cast<std::size_t>(
                                        t.val.labels[static_cast<std::size_t>(i)])]
                                  : t.val.labels[static_cast<std::size_t>(i)];
            if (out.pred[static_cast<std::size_t>(i)] == truth) ++hit;
        }
        return static_cast<double>(hit) / t.val.n_trials();
    }

    PredictOut predict(const std::string& node_id, const TrialTensor& trials) {
        NodeState& n = node(node_id);
        if (trials.n_channels() != n.desc.n_channels())
            throw ShapeError("predict: trial channel count does not match node '" + node_id + "'");
        PredictOut out;
        out.unified_space = cfg_.head == HeadMode::unified;
        const int k = out.unified_space ? static_cast<int>(cfg_.unified_labels.size())
                                        : n.desc.n_labels();
        out.logits = Tensorf({trials.n_trials(), k});
        out.pred.resize(static_cast<std::size_t>(trials.n_trials()));
        for (const auto& chunk : subject_chunks(trials)) {
            const Tensorf logits = forward_eval_logits(n, trials, chunk);
            for (std::size_t i = 0; i < chunk.size(); ++i) {
                int arg = 0;
                for (int c = 0; c < k; ++c) {
                    out.logits.at2(chunk[i], c) = logits.at2(static_cast<int>(i), c);
                    if (logits.at2(static_cast<int>(i), c) > logits.at2(static_cast<int>(i), arg)) arg = c;
                }
                out.pred[static_cast<std::size_t>(chunk[i])] = arg;
            }
        }
        return out;
    }

    // Flattened per-trial features at a probe point, for export and
    // distribution diagnostics. pre_common taps the branch output on the node;
    // post_transfer taps the trunk output (projection output in mmd mode).
    Tensorf features_at(const std::string& node_id, const TrialTensor& trials, FeatureTap tap) {
        NodeState& n = node(node_id);
        Tensorf out;
        for (const auto& chunk : subject_chunks(trials)) {
            Graph<S> g;
            ParamBinding<S> pb(g, n.params);
            ForwardCtx<S> ctx{&g, &pb, &n.params, false, step_};
            Var x = g.leaf(batch_input(trials, chunk), false);
            Var feat = forward_branch(ctx, n.branch, x, "branch:" + n.id);
            Tensorf flat;
            if (tap == FeatureTap::pre_common) {
                flat = to_f32(g.value(feat));
            } else {
                WireMessage m = feature_message(n, g, feat, chunk_sets(trials, chunk), {}, MsgPhase::eval);
                const WireMessage fwd = deliver(std::move(m));
                Graph<S> sg;
                ParamBinding<S> spb(sg, server_.params);
                ForwardCtx<S> sctx{&sg, &spb, &server_.params, false, step_};
                const MsgField& f = fwd.require("features");
                Var leafv = sg.leaf(to_S(f.f32), false);
                Var trunk_out = forward_trunk(sctx, server_.trunk, leafv, fwd.require("set_index").i32);
                WireMessage back;
                back.type = MsgType::features_back;
                back.direction = MsgDirection::server_to_node;
                back.phase = MsgPhase::eval;
                back.step = static_cast<std::uint32_t>(step_);
                back.branch_id = n.id;
                back.add_f32("features", to_f32(sg.value(trunk_out)));
                flat = deliver(std::move(back)).require("features").f32;
            }
            const int b = flat.dim(0);
            const int d = static_cast<int>(flat.size() / b);
            if (out.size() == 0) out = Tensorf({trials.n_trials(), d});
            for (std::size_t i = 0; i < chunk.size(); ++i)
                for (int j = 0; j < d; ++j)
                    out.at2(chunk[i], j) = flat[static_cast<std::int64_t>(i) * d + j];
        }
        return out;
    }

    int unified_label_of(const std::string& node_id, int local_label) {
        NodeState& n = node(node_id);
        if (local_label < 0 || local_label >= static_cast<int>(n.unified_of_local.size()))
            throw ValidationError("unified_label_of: label out of range");
        return n.unified_of_local[static_cast<std::size_t>(local_label)];
    }

    const DatasetDescriptor& descriptor(const std::string& node_id) { return node(node_id).desc; }
    const TrialTensor& train_trials(const std::string& node_id) { return node(node_id).train; }
    const TrialTensor& val_trials(const std::string& node_id) { return node(node_id).val; }

    // One parameter file per owner plus a manifest tying them together.
    void save_checkpoint(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        nlohmann::json manifest;
        manifest["format"] = "sandwich-checkpoint-v1";
        manifest["head"] = cfg_.head == HeadMode::unified ? "unified" : "multi";
        auto owners = nlohmann::json::object();
        auto save = [&](const ParamSet<S>& params, const std::string& owner) {
            const std::string file = sanitize(owner) + ".params";
            params.save_owner(owner, dir / file);
            owners[owner] = file;
        };
        for (const auto& n : nodes_) {
            save(n.params, "branch:" + n.id);
            if (cfg_.head == HeadMode::multi) save(n.params, "head:" + n.id);
        }
        save(server_.params, "trunk");
        if (cfg_.head == HeadMode::unified) save(server_.params, "head:unified");
        manifest["owners"] = owners;
        write_file_text(dir / "checkpoint.json", manifest.dump(2) + "\n");
    }

    void load_checkpoint(const std::filesystem::path& dir) {
        const auto manifest = nlohmann::json::parse(read_file_text(dir / "checkpoint.json"));
        if (manifest.value("format", "") != "sandwich-checkpoint-v1")
            throw FormatError("unrecognized checkpoint manifest");
        const auto& owners = manifest.at("owners");
        for (auto& n : nodes_) {
            load_owner_into(n.params, owners, dir, "branch:" + n.id);
            if (cfg_.head == HeadMode::multi) load_owner_into(n.params, owners, dir, "head:" + n.id);
        }
        load_owner_into(server_.params, owners, dir, "trunk");
        if (cfg_.head == HeadMode::unified) load_owner_into(server_.params, owners, dir, "head:unified");
    }

private:
    struct NodeState {
        std::string id;
        DatasetDescriptor desc;
        TrialTensor train;
        TrialTensor val;
        BranchSpec branch;
        ParamSet<S> params{42};
        Adam<S> opt;
        BatchSampler sampler;
        std::vector<int> unified_of_local;
    };

    struct ServerState {
        TrunkSpec trunk;
        HeadSpec head;
        ParamSet<S> params{42};
        Adam<S> opt;
    };

    struct NodePass {
        std::unique_ptr<Graph<S>> g;
        std::unique_ptr<ParamBinding<S>> pb;
        Var feat{};
        std::vector<int> rows;
        WireMessage fwd;  // as decoded on the server side
    };

    NodeState& node(const std::string& id) {
        for (auto& n : nodes_)
            if (n.id == id) return n;
        throw RoutingError("unknown node '" + id + "'");
    }

    static std::string sanitize(std::string s) {
        for (char& c : s)
            if (c == ':' || c == '/') c = '_';
        return s;
    }

    static void load_owner_into(ParamSet<S>& params, const nlohmann::json& owners,
                                const std::filesystem::path& dir, const std::string& owner) {
        if (!owners.contains(owner))
            throw RoutingError("checkpoint has no parameters for '" + owner + "'");
        params.load_owner(dir / owners.at(owner).get<std::string>());
    }

    static Tensorf to_f32(const Tensor<S>& t) {
        if constexpr (std::is_same_v<S, float>) return t;
        Tensorf out(t.shape);
        for (std::int64_t i = 0; i < t.size(); ++i) out[i] = static_cast<float>(t[i]);
        return out;
    }

    static Tensor<S> to_S(const Tensorf& t) {
        if constexpr (std::is_same_v<S, float>) return t;
        Tensor<S> out(t.shape);
        for (std::int64_t i = 0; i < t.size(); ++i) out[i] = static_cast<S>(t[i]);
        return out;
    }

    // All message traffic funnels through here: encode to bytes, log + scan,
    // fail closed on any violation, then decode for the receiving side.
    WireMessage deliver(WireMessage&& m) {
        if (tamper) tamper(m);
        const std::vector<std::uint8_t> payload = encode_message(m);
        audit_.append(m, payload, sentinels_);
        const AuditRecord& r = audit_.records().back();
        const auto allowed = policy_.allowed_fields(r.type);
        for (const auto& [name, dtype] : r.fields) {
            (void)dtype;
            if (!allowed.count(name))
                throw PrivacyViolationError("blocked " + std::string(msg_type_name(r.type)) + " from '" +
                                            r.branch_id + "': disallowed field '" + name + "'");
            if (!policy_.unified_head && name == "labels")
                throw PrivacyViolationError("blocked message from '" + r.branch_id +
                                            "': labels must not cross in multi-classifier mode");
        }
        if (!r.sentinel_hit.empty())
            throw PrivacyViolationError("blocked " + std::string(msg_type_name(r.type)) + " from '" +
                                        r.branch_id + "': payload contains raw-sample bytes (sentinel " +
                                        r.sentinel_hit + ")");
        return decode_message(payload);
    }

    Tensorf batch_input(const TrialTensor& trials, const std::vector<int>& rows) const {
        const int c = trials.n_channels(), t = trials.n_samples();
        Tensorf x({static_cast<int>(rows.size()), 1, c, t});
        const std::int64_t sz = static_cast<std::int64_t>(c) * t;
        for (std::size_t i = 0; i < rows.size(); ++i)
            std::copy(&trials.data[rows[i] * sz], &trials.data[rows[i] * sz] + sz,
                      &x.data[static_cast<std::int64_t>(i) * sz]);
        return x;
    }

    static std::vector<int> chunk_sets(const TrialTensor& trials, const std::vector<int>& rows) {
        std::vector<int> out;
        for (int r : rows) out.push_back(trials.subject_index[static_cast<std::size_t>(r)]);
        return out;
    }

    // Evaluation batches hold one subject each so set grouping stays uniform
    // whatever the per-subject trial counts are.
    static std::vector<std::vector<int>> subject_chunks(const TrialTensor& trials, int max_chunk = 64) {
        std::vector<std::vector<int>> chunks;
        std::vector<int> seen;
        for (int t = 0; t < trials.n_trials(); ++t) {
            const int sid = trials.subject_index[static_cast<std::size_t>(t)];
            if (std::find(seen.begin(), seen.end(), sid) != seen.end()) continue;
            seen.push_back(sid);
            std::vector<int> rows;
            for (int u = 0; u < trials.n_trials(); ++u)
                if (trials.subject_index[static_cast<std::size_t>(u)] == sid) {
                    rows.push_back(u);
                    if (static_cast<int>(rows.size()) == max_chunk) {
                        chunks.push_back(rows);
                        rows.clear();
                    }
                }
            if (!rows.empty()) chunks.push_back(std::move(rows));
        }
        return chunks;
    }

    WireMessage feature_message(NodeState& n, Graph<S>& g, Var feat, std::vector<int> set_index,
                                std::vector<int> labels_or_flags, MsgPhase phase) {
        WireMessage m;
        m.type = MsgType::features_fwd;
        m.direction = MsgDirection::node_to_server;
        m.phase = phase;
        m.step = static_cast<std::uint32_t>(step_);
        m.branch_id = n.id;
        m.add_f32("features", to_f32(g.value(feat)));
        m.add_i32("set_index", std::move(set_index));
        if (phase == MsgPhase::train) {
            if (cfg_.head == HeadMode::unified)
                m.add_i32("labels", std::move(labels_or_flags));
            else if (cfg_.transfer == TransferMode::mmd)
                m.add_i32("aligned_flags", std::move(labels_or_flags));
        }
        return m;
    }

    WireMessage grad_message(MsgType type, const std::string& branch_id, const Tensor<S>& grad) {
        WireMessage m;
        m.type = type;
        m.direction =
            type == MsgType::grad_to_node ? MsgDirection::server_to_node : MsgDirection::node_to_server;
        m.phase = MsgPhase::train;
        m.step = static_cast<std::uint32_t>(step_);
        m.branch_id = branch_id;
        m.add_f32("grad", to_f32(grad));
        return m;
    }

    // Phase 1 of every training step: each node runs its branch on a fresh
    // batch and ships the features across the boundary. The node graph stays
    // alive to receive the feature gradient later.
    std::vector<NodePass> branch_forward_all() {
        std::vector<NodePass> passes;
        for (auto& n : nodes_) {
            NodePass p;
            p.rows = n.sampler.next();
            p.g = std::make_unique<Graph<S>>();
            p.pb = std::make_unique<ParamBinding<S>>(*p.g, n.params);
            ForwardCtx<S> ctx{p.g.get(), p.pb.get(), &n.params, true, step_};
            const Tensorf x = batch_input(n.train, p.rows);
            Var xin = p.g->leaf(to_S(x), false);
            p.feat = forward_branch(ctx, n.branch, xin, "branch:" + n.id);

            std::vector<int> ann;
            if (cfg_.head == HeadMode::unified) {
                for (int r : p.rows)
                    ann.push_back(n.unified_of_local[static_cast<std::size_t>(
                        n.train.labels[static_cast<std::size_t>(r)])]);
            } else if (cfg_.transfer == TransferMode::mmd) {
                std::vector<int> local;
                for (int r : p.rows) local.push_back(n.train.labels[static_cast<std::size_t>(r)]);
                ann = aligned_group_ids(local, n.desc.label_names, cfg_.alignment);
            }
            WireMessage m = feature_message(n, *p.g, p.feat, chunk_sets(n.train, p.rows), std::move(ann),
                                            MsgPhase::train);
            if (leak_raw_samples_) {
                Tensorf leak({n.train.n_channels(), n.train.n_samples()});
                std::copy(&n.train.data[0], &n.train.data[0] + leak.size(), &leak.data[0]);
                m.add_f32("raw_samples", std::move(leak));
            }
            p.fwd = deliver(std::move(m));
            passes.push_back(std::move(p));
        }
        return passes;
    }

    // Set ids from different nodes must stay distinct inside the shared batch.
    std::vector<int> global_set_index(const std::vector<NodePass>& passes) const {
        std::vector<int> out;
        std::map<std::pair<int, int>, int> remap;
        for (std::size_t i = 0; i < passes.size(); ++i)
            for (int sid : passes[i].fwd.require("set_index").i32) {
                const auto key = std::make_pair(static_cast<int>(i), sid);
                auto it = remap.find(key);
                if (it == remap.end()) it = remap.emplace(key, static_cast<int>(remap.size())).first;
                out.push_back(it->second);
            }
        return out;
    }

    void finish_node_backward(std::vector<NodePass>& passes, Graph<S>& sg, const std::vector<Var>& leaves,
                              std::vector<std::map<std::string, Tensor<S>>>* extra_grads = nullptr) {
        for (std::size_t i = 0; i < passes.size(); ++i) {
            NodeState& n = nodes_[i];
            const WireMessage back =
                deliver(grad_message(MsgType::grad_to_node, n.id, sg.grad(leaves[i])));
            passes[i].g->backward_seeded({{passes[i].feat, to_S(back.require("grad").f32)}});
            std::map<std::string, Tensor<S>> grads = passes[i].pb->collect_grads();
            if (extra_grads)
                for (auto& [name, gt] : (*extra_grads)[i]) grads.emplace(name, std::move(gt));
            if (capture_grads)
                for (const auto& [name, gt] : grads) last_grads[name] = gt;
            n.opt.step(n.params, grads);
        }
    }

    StepStats unified_step() {
        std::vector<NodePass> passes = branch_forward_all();

        Graph<S> sg;
        ParamBinding<S> spb(sg, server_.params);
        ForwardCtx<S> sctx{&sg, &spb, &server_.params, true, step_};
        std::vector<Var> leaves;
        std::vector<int> labels;
        std::vector<int> bases;
        int base = 0;
        for (auto& p : passes) {
            leaves.push_back(sg.leaf(to_S(p.fwd.require("features").f32), true));
            const auto& l = p.fwd.require("labels").i32;
            labels.insert(labels.end(), l.begin(), l.end());
            bases.push_back(base);
            base += static_cast<int>(l.size());
        }
        Var cat = leaves.size() == 1 ? leaves[0] : sg.concat_axis0(leaves);
        Var trunk_out = forward_trunk(sctx, server_.trunk, cat, global_set_index(passes));
        Var logits = forward_head_unified(sctx, server_.head, trunk_out);
        Var l_c = sg.softmax_cross_entropy(logits, labels);

        StepStats stats;
        stats.classification = static_cast<double>(sg.scalar(l_c));
        Var loss = l_c;
        if (cfg_.transfer == TransferMode::mmd && cfg_.alignment.lambda_weight > 0.0) {
            std::vector<AlignedFeatures> sources;
            AlignedFeatures target;
            const auto& tv = sg.value(trunk_out);
            const int d = static_cast<int>(tv.size() / tv.dim(0));
            for (std::size_t i = 0; i < passes.size(); ++i) {
                const int b = static_cast<int>(passes[i].fwd.require("labels").i32.size());
                std::vector<int> idx(static_cast<std::size_t>(b));
                for (int r = 0; r < b; ++r) idx[static_cast<std::size_t>(r)] = bases[i] + r;
                AlignedFeatures af;
                af.features = sg.reshape(sg.gather_rows(trunk_out, idx), {b, d});
                af.group_ids = aligned_group_ids(
                    std::vector<int>(labels.begin() + bases[i], labels.begin() + bases[i] + b),
                    cfg_.unified_labels, cfg_.alignment);
                if (nodes_[i].id == cfg_.target_id)
                    target = std::move(af);
                else
                    sources.push_back(std::move(af));
            }
            loss = sandwich_loss(sg, l_c, sources, target, cfg_.alignment, &stats.mmd_terms);
            for (const auto& t : stats.mmd_terms) stats.penalty += t.value;
        }
        stats.loss = static_cast<double>(sg.scalar(loss));
        sg.backward(loss);

        std::map<std::string, Tensor<S>> sgrads = spb.collect_grads();
        if (capture_grads)
            for (const auto& [name, gt] : sgrads) last_grads[name] = gt;
        server_.opt.step(server_.params, sgrads);
        finish_node_backward(passes, sg, leaves);
        return stats;
    }

    StepStats multi_step() {
        std::vector<NodePass> passes = branch_forward_all();

        Graph<S> sg;
        ParamBinding<S> spb(sg, server_.params);
        ForwardCtx<S> sctx{&sg, &spb, &server_.params, true, step_};
        std::vector<Var> leaves;
        std::vector<int> bases{0};
        for (auto& p : passes) {
            leaves.push_back(sg.leaf(to_S(p.fwd.require("features").f32), true));
            bases.push_back(bases.back() + sg.value(leaves.back()).dim(0));
        }
        Var cat = leaves.size() == 1 ? leaves[0] : sg.concat_axis0(leaves);
        Var trunk_out = forward_trunk(sctx, server_.trunk, cat, global_set_index(passes));

        const auto& tv = sg.value(trunk_out);
        const int d = static_cast<int>(tv.size() / tv.dim(0));
        std::vector<Var> node_rows;
        for (std::size_t i = 0; i < passes.size(); ++i) {
            const int b = bases[i + 1] - bases[i];
            std::vector<int> idx(static_cast<std::size_t>(b));
            for (int r = 0; r < b; ++r) idx[static_cast<std::size_t>(r)] = bases[i] + r;
            node_rows.push_back(sg.gather_rows(trunk_out, idx));
        }

        StepStats stats;
        std::optional<Var> penalty_scaled;
        if (cfg_.transfer == TransferMode::mmd && cfg_.alignment.lambda_weight > 0.0) {
            std::vector<AlignedFeatures> sources;
            AlignedFeatures target;
            for (std::size_t i = 0; i < passes.size(); ++i) {
                AlignedFeatures af;
                const int b = bases[i + 1] - bases[i];
                af.features = sg.reshape(node_rows[i], {b, d});
                af.group_ids = passes[i].fwd.require("aligned_flags").i32;
                if (nodes_[i].id == cfg_.target_id)
                    target = std::move(af);
                else
                    sources.push_back(std::move(af));
            }
            Var pen = alignment_penalty(sg, sources, target, cfg_.alignment, &stats.mmd_terms);
            for (const auto& t : stats.mmd_terms) stats.penalty += t.value;
            penalty_scaled = sg.scale(pen, static_cast<S>(cfg_.alignment.lambda_weight));
        }

        // Transformed features travel back to the nodes, which train their own
        // heads and return only the gradient w.r.t. those features.
        std::vector<std::pair<Var, Tensor<S>>> seeds;
        std::vector<std::map<std::string, Tensor<S>>> head_grads(passes.size());
        for (std::size_t i = 0; i < passes.size(); ++i) {
            NodeState& n = nodes_[i];
            WireMessage back;
            back.type = MsgType::features_back;
            back.direction = MsgDirection::server_to_node;
            back.phase = MsgPhase::train;
            back.step = static_cast<std::uint32_t>(step_);
            back.branch_id = n.id;
            back.add_f32("features", to_f32(sg.value(node_rows[i])));
            const WireMessage delivered = deliver(std::move(back));

            Graph<S> hg;
            ParamBinding<S> hpb(hg, n.params);
            ForwardCtx<S> hctx{&hg, &hpb, &n.params, true, step_};
            Var feat_in = hg.leaf(to_S(delivered.require("features").f32), true);
            Var logits = forward_head_local(hctx, n.id, n.desc.n_labels(), feat_in);
            std::vector<int> lab;
            for (int r : passes[i].rows) lab.push_back(n.train.labels[static_cast<std::size_t>(r)]);
            Var l_i = hg.softmax_cross_entropy(logits, lab);
            stats.classification += static_cast<double>(hg.scalar(l_i));
            hg.backward(l_i);
            head_grads[i] = hpb.collect_grads();

            const WireMessage up = deliver(grad_message(MsgType::grad_to_server, n.id, hg.grad(feat_in)));
            seeds.emplace_back(node_rows[i], to_S(up.require("grad").f32));
        }
        if (penalty_scaled) {
            Tensor<S> one({1});
            one[0] = S(1);
            seeds.emplace_back(*penalty_scaled, std::move(one));
        }
        sg.backward_seeded(seeds);

        std::map<std::string, Tensor<S>> sgrads = spb.collect_grads();
        if (capture_grads)
            for (const auto& [name, gt] : sgrads) last_grads[name] = gt;
        server_.opt.step(server_.params, sgrads);
        finish_node_backward(passes, sg, leaves, &head_grads);

        stats.loss = stats.classification + cfg_.alignment.lambda_weight * stats.penalty;
        return stats;
    }

    // Shared evaluation path: branch on the node, trunk (and unified head) on
    // the server, local head back on the node in multi mode.
    Tensorf forward_eval_logits(NodeState& n, const TrialTensor& trials, const std::vector<int>& rows) {
        Graph<S> g;
        ParamBinding<S> pb(g, n.params);
        ForwardCtx<S> ctx{&g, &pb, &n.params, false, step_};
        Var x = g.leaf(to_S(batch_input(trials, rows)), false);
        Var feat = forward_branch(ctx, n.branch, x, "branch:" + n.id);
        WireMessage m = feature_message(n, g, feat, chunk_sets(trials, rows), {}, MsgPhase::eval);
        const WireMessage fwd = deliver(std::move(m));

        Graph<S> sg;
        ParamBinding<S> spb(sg, server_.params);
        ForwardCtx<S> sctx{&sg, &spb, &server_.params, false, step_};
        Var leafv = sg.leaf(to_S(fwd.require("features").f32), false);
        Var trunk_out = forward_trunk(sctx, server_.trunk, leafv, fwd.require("set_index").i32);
        Tensorf shipped;
        if (cfg_.head == HeadMode::unified) {
            Var logits = forward_head_unified(sctx, server_.head, trunk_out);
            shipped = to_f32(sg.value(logits));
        } else {
            shipped = to_f32(sg.value(trunk_out));
        }
        WireMessage back;
        back.type = MsgType::features_back;
        back.direction = MsgDirection::server_to_node;
        back.phase = MsgPhase::eval;
        back.step = static_cast<std::uint32_t>(step_);
        back.branch_id = n.id;
        back.add_f32("features", std::move(shipped));
        const WireMessage delivered = deliver(std::move(back));
        const Tensorf& feats = delivered.require("features").f32;
        if (cfg_.head == HeadMode::unified) return feats;

        Graph<S> hg;
        ParamBinding<S> hpb(hg, n.params);
        ForwardCtx<S> hctx{&hg, &hpb, &n.params, false, step_};
        Var fin = hg.leaf(to_S(feats), false);
        Var logits = forward_head_local(hctx, n.id, n.desc.n_labels(), fin);
        return to_f32(hg.value(logits));
    }

    FedConfig cfg_;
    std::vector<NodeState> nodes_;
    ServerState server_;
    AuditLog audit_;
    AuditPolicy policy_;
    SentinelRegistry sentinels_;
    std::int64_t step_ = 0;
    bool leak_raw_samples_ = false;
};

}  // namespace sandwich
