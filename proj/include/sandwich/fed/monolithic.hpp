#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "sandwich/fed/system.hpp"

namespace sandwich {

// Reference runner: the same model trained as one program on one graph, no
// message boundary. Uses the identical samplers, dropout streams, and
// name-keyed initialization, so a federated run over the same config must
// reproduce it numerically.
template <typename S>
class MonolithicSystem {
public:
    MonolithicSystem(FedConfig cfg, const std::map<std::string, NodeData>& data)
        : cfg_(std::move(cfg)), params_(0), opt_(0.0) {
        cfg_.validate();
        params_ = ParamSet<S>(cfg_.seed);
        opt_ = Adam<S>(cfg_.learning_rate, cfg_.weight_decay);
        for (const auto& [id, nd] : data) {
            MNode n;
            n.id = id;
            n.desc = nd.desc;
            n.train = nd.train;
            n.branch = cfg_.variant == BackboneVariant::shallow_conv
                           ? build_shallow_branch(n.desc.n_channels(), cfg_.shallow)
                           : build_inception_branch(n.desc.n_channels(), cfg_.inception);
            n.sampler = BatchSampler(nd.train.subject_index, cfg_.batch_size, cfg_.set_size,
                                     Rng::stream(cfg_.seed, "sampler/" + id));
            n.unified_of_local.resize(n.desc.label_names.size());
            for (std::size_t l = 0; l < n.desc.label_names.size(); ++l) {
                const auto it = std::find(cfg_.unified_labels.begin(), cfg_.unified_labels.end(),
                                          n.desc.label_names[l]);
                if (it == cfg_.unified_labels.end())
                    throw ConfigError("label '" + n.desc.label_names[l] + "' missing from unified label list");
                n.unified_of_local[l] = static_cast<int>(it - cfg_.unified_labels.begin());
            }
            nodes_.push_back(std::move(n));
        }
        trunk_ = cfg_.variant == BackboneVariant::shallow_conv
                     ? build_shallow_trunk(cfg_.transfer, cfg_.shallow)
                     : build_inception_trunk(cfg_.transfer, cfg_.inception);
        head_.mode = cfg_.head;
        head_.unified_n_classes = static_cast<int>(cfg_.unified_labels.size());
    }

    ParamSet<S>& params() { return params_; }
    bool capture_grads = false;
    std::map<std::string, Tensor<S>> last_grads;

    StepStats train_step() {
        ++step_;
        Graph<S> g;
        ParamBinding<S> pb(g, params_);
        ForwardCtx<S> ctx{&g, &pb, &params_, true, step_};

        std::vector<Var> feats;
        std::vector<std::vector<int>> rows;
        std::vector<int> set_index;
        std::map<std::pair<int, int>, int> remap;
        std::vector<int> bases{0};
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            MNode& n = nodes_[i];
            rows.push_back(n.sampler.next());
            Tensorf x({static_cast<int>(rows.back().size()), 1, n.train.n_channels(), n.train.n_samples()});
            const std::int64_t sz = static_cast<std::int64_t>(n.train.n_channels()) * n.train.n_samples();
            for (std::size_t r = 0; r < rows.back().size(); ++r)
                std::copy(&n.train.data[rows.back()[r] * sz], &n.train.data[rows.back()[r] * sz] + sz,
                          &x.data[static_cast<std::int64_t>(r) * sz]);
            Tensor<S> xs(x.shape);
            for (std::int64_t k = 0; k < x.size(); ++k) xs[k] = static_cast<S>(x[k]);
            Var xin = g.leaf(std::move(xs), false);
            feats.push_back(forward_branch(ctx, n.branch, xin, "branch:" + n.id));
            for (int r : rows.back()) {
                const int sid = n.train.subject_index[static_cast<std::size_t>(r)];
                const auto key = std::make_pair(static_cast<int>(i), sid);
                auto it = remap.find(key);
                if (it == remap.end()) it = remap.emplace(key, static_cast<int>(remap.size())).first;
                set_index.push_back(it->second);
            }
            bases.push_back(bases.back() + static_cast<int>(rows.back().size()));
        }
        Var cat = feats.size() == 1 ? feats[0] : g.concat_axis0(feats);
        Var trunk_out = forward_trunk(ctx, trunk_, cat, set_index);
        const auto& tv = g.value(trunk_out);
        const int d = static_cast<int>(tv.size() / tv.dim(0));

        StepStats stats;
        Var loss;
        std::vector<AlignedFeatures> sources;
        AlignedFeatures target;
        const bool mmd_on = cfg_.transfer == TransferMode::mmd && cfg_.alignment.lambda_weight > 0.0;

        if (cfg_.head == HeadMode::unified) {
            std::vector<int> labels;
            for (std::size_t i = 0; i < nodes_.size(); ++i)
                for (int r : rows[i])
                    labels.push_back(nodes_[i].unified_of_local[static_cast<std::size_t>(
                        nodes_[i].train.labels[static_cast<std::size_t>(r)])]);
            Var logits = forward_head_unified(ctx, head_, trunk_out);
            Var l_c = g.softmax_cross_entropy(logits, labels);
            stats.classification = static_cast<double>(g.scalar(l_c));
            loss = l_c;
            if (mmd_on) {
                for (std::size_t i = 0; i < nodes_.size(); ++i) {
                    const int b = bases[i + 1] - bases[i];
                    std::vector<int> idx(static_cast<std::size_t>(b));
                    for (int r = 0; r < b; ++r) idx[static_cast<std::size_t>(r)] = bases[i] + r;
                    AlignedFeatures af;
                    af.features = g.reshape(g.gather_rows(trunk_out, idx), {b, d});
                    af.group_ids = aligned_group_ids(
                        std::vector<int>(labels.begin() + bases[i], labels.begin() + bases[i] + b),
                        cfg_.unified_labels, cfg_.alignment);
                    if (nodes_[i].id == cfg_.target_id)
                        target = std::move(af);
                    else
                        sources.push_back(std::move(af));
                }
                loss = sandwich_loss(g, l_c, sources, target, cfg_.alignment, &stats.mmd_terms);
                for (const auto& t : stats.mmd_terms) stats.penalty += t.value;
            }
            stats.loss = static_cast<double>(g.scalar(loss));
        } else {
            std::vector<Var> node_rows;
            for (std::size_t i = 0; i < nodes_.size(); ++i) {
                const int b = bases[i + 1] - bases[i];
                std::vector<int> idx(static_cast<std::size_t>(b));
                for (int r = 0; r < b; ++r) idx[static_cast<std::size_t>(r)] = bases[i] + r;
                node_rows.push_back(g.gather_rows(trunk_out, idx));
            }
            std::optional<Var> penalty_scaled;
            if (mmd_on) {
                for (std::size_t i = 0; i < nodes_.size(); ++i) {
                    MNode& n = nodes_[i];
                    const int b = bases[i + 1] - bases[i];
                    AlignedFeatures af;
                    af.features = g.reshape(node_rows[i], {b, d});
                    std::vector<int> local;
                    for (int r : rows[i]) local.push_back(n.train.labels[static_cast<std::size_t>(r)]);
                    af.group_ids = aligned_group_ids(local, n.desc.label_names, cfg_.alignment);
                    if (n.id == cfg_.target_id)
                        target = std::move(af);
                    else
                        sources.push_back(std::move(af));
                }
                Var pen = alignment_penalty(g, sources, target, cfg_.alignment, &stats.mmd_terms);
                for (const auto& t : stats.mmd_terms) stats.penalty += t.value;
                penalty_scaled = g.scale(pen, static_cast<S>(cfg_.alignment.lambda_weight));
            }
            std::optional<Var> total;
            for (std::size_t i = 0; i < nodes_.size(); ++i) {
                MNode& n = nodes_[i];
                Var logits = forward_head_local(ctx, n.id, n.desc.n_labels(), node_rows[i]);
                std::vector<int> lab;
                for (int r : rows[i]) lab.push_back(n.train.labels[static_cast<std::size_t>(r)]);
                Var l_i = g.softmax_cross_entropy(logits, lab);
                stats.classification += static_cast<double>(g.scalar(l_i));
                total = total ? g.add(*total, l_i) : l_i;
            }
            if (penalty_scaled) total = g.add(*total, *penalty_scaled);
            loss = *total;
            stats.loss = static_cast<double>(g.scalar(loss));
        }

        g.backward(loss);
        std::map<std::string, Tensor<S>> grads = pb.collect_grads();
        if (capture_grads)
            for (const auto& [name, gt] : grads) last_grads[name] = gt;
        opt_.step(params_, grads);
        return stats;
    }

private:
    struct MNode {
        std::string id;
        DatasetDescriptor desc;
        TrialTensor train;
        BranchSpec branch;
        BatchSampler sampler;
        std::vector<int> unified_of_local;
    };

    FedConfig cfg_;
    std::vector<MNode> nodes_;
    TrunkSpec trunk_;
    HeadSpec head_;
    ParamSet<S> params_;
    Adam<S> opt_;
    std::int64_t step_ = 0;
};

}  // namespace sandwich
