#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "sandwich/core/graph.hpp"
#include "sandwich/core/io.hpp"
#include "sandwich/core/rng.hpp"
#include "sandwich/core/tensor.hpp"

namespace sandwich {

// Named parameter store. Initialization depends only on (seed, name), so the
// same layer materializes the same values no matter which runner touches it
// first or in what order.
template <typename S>
class ParamSet {
public:
    struct Entry {
        Tensor<S> value;
        bool trainable = true;
    };

    explicit ParamSet(std::uint64_t seed = 42) : seed_(seed) {}

    std::uint64_t seed() const { return seed_; }

    bool contains(const std::string& name) const { return entries_.count(name) > 0; }

    // Fan-in-scaled uniform init U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    Tensor<S>& get_or_init(const std::string& name, const std::vector<int>& shape, int fan_in) {
        auto it = entries_.find(name);
        if (it != entries_.end()) {
            if (it->second.value.shape != shape)
                throw ShapeError("param '" + name + "' exists with shape " + shape_str(it->second.value.shape) +
                                 ", requested " + shape_str(shape));
            return it->second.value;
        }
        Tensor<S> t(shape);
        const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(1, fan_in)));
        Rng rng = Rng::stream(seed_, "init/" + name);
        for (auto& v : t.data) v = static_cast<S>(rng.uniform(-bound, bound));
        auto& e = entries_[name];
        e.value = std::move(t);
        e.trainable = true;
        return e.value;
    }

    Tensor<S>& get_or_const(const std::string& name, const std::vector<int>& shape, S fill_value,
                            bool trainable) {
        auto it = entries_.find(name);
        if (it != entries_.end()) {
            if (it->second.value.shape != shape)
                throw ShapeError("param '" + name + "' exists with shape " + shape_str(it->second.value.shape) +
                                 ", requested " + shape_str(shape));
            return it->second.value;
        }
        Tensor<S> t(shape);
        t.fill(fill_value);
        auto& e = entries_[name];
        e.value = std::move(t);
        e.trainable = trainable;
        return e.value;
    }

    Tensor<S>& at(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ValidationError("unknown param '" + name + "'");
        return it->second.value;
    }
    const Tensor<S>& at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ValidationError("unknown param '" + name + "'");
        return it->second.value;
    }
    bool trainable(const std::string& name) const {
        auto it = entries_.find(name);
        return it != entries_.end() && it->second.trainable;
    }

    const std::map<std::string, Entry>& entries() const { return entries_; }
    std::map<std::string, Entry>& entries() { return entries_; }

    // Owner is the first path segment of the parameter name.
    static std::string owner_of(const std::string& name) {
        const auto pos = name.find('/');
        return pos == std::string::npos ? name : name.substr(0, pos);
    }

    std::vector<std::string> owners() const {
        std::vector<std::string> out;
        for (const auto& [name, e] : entries_) {
            const std::string o = owner_of(name);
            if (out.empty() || out.back() != o)
                if (std::find(out.begin(), out.end(), o) == out.end()) out.push_back(o);
        }
        return out;
    }

    std::int64_t count_scalars(const std::string& owner = "") const {
        std::int64_t n = 0;
        for (const auto& [name, e] : entries_)
            if (e.trainable && (owner.empty() || owner_of(name) == owner)) n += e.value.size();
        return n;
    }

    // Checkpoint file for one owner: u32 manifest length, JSON manifest with
    // name/shape/trainable/checksum per tensor, then raw f32 blobs in
    // manifest order.
    void save_owner(const std::string& owner, const std::filesystem::path& path) const {
        nlohmann::json manifest;
        manifest["owner"] = owner;
        manifest["tensors"] = nlohmann::json::array();
        std::vector<std::uint8_t> blob;
        for (const auto& [name, e] : entries_) {
            if (owner_of(name) != owner) continue;
            std::vector<std::uint8_t> bytes;
            bytes.reserve(static_cast<std::size_t>(e.value.size()) * 4);
            for (const S v : e.value.data) le::append(bytes, static_cast<float>(v));
            manifest["tensors"].push_back({{"name", name},
                                           {"shape", e.value.shape},
                                           {"dtype", "f32"},
                                           {"trainable", e.trainable},
                                           {"checksum", fnv1a64_hex(bytes.data(), bytes.size())}});
            blob.insert(blob.end(), bytes.begin(), bytes.end());
        }
        const std::string mtext = manifest.dump();
        std::vector<std::uint8_t> out;
        le::append(out, static_cast<std::uint32_t>(mtext.size()));
        out.insert(out.end(), mtext.begin(), mtext.end());
        out.insert(out.end(), blob.begin(), blob.end());
        write_file_bytes(path, out);
    }

    void load_owner(const std::filesystem::path& path) {
        const auto bytes = read_file_bytes(path);
        if (bytes.size() < 4) throw FormatError("checkpoint too short: " + path.string());
        const std::uint32_t mlen = le::read<std::uint32_t>(bytes.data());
        if (bytes.size() < 4 + static_cast<std::size_t>(mlen))
            throw FormatError("checkpoint manifest truncated: " + path.string());
        nlohmann::json manifest;
        try {
            manifest = nlohmann::json::parse(std::string(bytes.begin() + 4, bytes.begin() + 4 + mlen));
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError("checkpoint manifest malformed: " + std::string(e.what()));
        }
        std::size_t off = 4 + mlen;
        for (const auto& t : manifest.at("tensors")) {
            const std::string name = t.at("name").get<std::string>();
            if (t.at("dtype").get<std::string>() != "f32")
                throw FormatError("checkpoint tensor '" + name + "' has unknown dtype");
            const auto shape = t.at("shape").get<std::vector<int>>();
            Tensor<S> v(shape);
            const std::size_t nbytes = static_cast<std::size_t>(v.size()) * 4;
            if (off + nbytes > bytes.size())
                throw BlobShapeError("checkpoint blob truncated at tensor '" + name + "'");
            const std::string want = t.at("checksum").get<std::string>();
            const std::string got = fnv1a64_hex(bytes.data() + off, nbytes);
            if (want != got) throw ChecksumError("checkpoint tensor '" + name + "' checksum mismatch");
            for (std::int64_t i = 0; i < v.size(); ++i)
                v[i] = static_cast<S>(le::read<float>(bytes.data() + off + static_cast<std::size_t>(i) * 4));
            off += nbytes;
            auto& e = entries_[name];
            e.value = std::move(v);
            e.trainable = t.at("trainable").get<bool>();
        }
    }

private:
    std::uint64_t seed_;
    std::map<std::string, Entry> entries_;
};

// Per-step bridge between a ParamSet and a Graph: parameters become leaves on
// first use; gradients are read back by name after the sweep.
template <typename S>
class ParamBinding {
public:
    ParamBinding(Graph<S>& g, ParamSet<S>& params) : g_(&g), params_(&params) {}

    Var init(const std::string& name, const std::vector<int>& shape, int fan_in) {
        return bind(name, params_->get_or_init(name, shape, fan_in), true);
    }

    Var constant(const std::string& name, const std::vector<int>& shape, S fill, bool trainable) {
        return bind(name, params_->get_or_const(name, shape, fill, trainable), trainable);
    }

    const std::map<std::string, Var>& bound() const { return bound_; }

    // Accumulated gradient for every trainable parameter touched this step.
    std::map<std::string, Tensor<S>> collect_grads() const {
        std::map<std::string, Tensor<S>> out;
        for (const auto& [name, var] : bound_)
            if (params_->trainable(name)) out.emplace(name, g_->grad(var));
        return out;
    }

private:
    Var bind(const std::string& name, const Tensor<S>& value, bool trainable) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        Var v = g_->leaf(value, trainable);
        bound_.emplace(name, v);
        return v;
    }

    Graph<S>* g_;
    ParamSet<S>* params_;
    std::map<std::string, Var> bound_;
};

}  // namespace sandwich
