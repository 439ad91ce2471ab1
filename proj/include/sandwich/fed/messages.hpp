#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "sandwich/core/errors.hpp"
#include "sandwich/core/io.hpp"
#include "sandwich/core/tensor.hpp"
#include "sandwich/data/dataset.hpp"

namespace sandwich {

enum class MsgType : std::uint8_t {
    features_fwd = 1,   // node -> server: branch features
    features_back = 2,  // server -> node: transformed features (or unified logits at predict)
    grad_to_server = 3,  // node -> server: loss gradient w.r.t. transformed features
    grad_to_node = 4,    // server -> node: gradient w.r.t. branch features
};

enum class MsgDirection : std::uint8_t { node_to_server = 0, server_to_node = 1 };
enum class MsgPhase : std::uint8_t { train = 0, eval = 1 };

enum class FieldType : std::uint8_t { f32 = 1, i32 = 2 };

struct MsgField {
    std::string name;
    FieldType dtype = FieldType::f32;
    std::vector<int> dims;
    Tensorf f32;           // valid when dtype == f32
    std::vector<int> i32;  // valid when dtype == i32
};

// The only structure that crosses the node/server boundary. Encoded to bytes
// before delivery; the receiving side decodes from bytes, never from shared
// memory.
struct WireMessage {
    MsgType type = MsgType::features_fwd;
    MsgDirection direction = MsgDirection::node_to_server;
    MsgPhase phase = MsgPhase::train;
    std::uint32_t step = 0;
    std::string branch_id;
    std::vector<MsgField> fields;

    MsgField& add_f32(const std::string& name, Tensorf t) {
        MsgField f;
        f.name = name;
        f.dtype = FieldType::f32;
        f.dims = t.shape;
        f.f32 = std::move(t);
        fields.push_back(std::move(f));
        return fields.back();
    }
    MsgField& add_i32(const std::string& name, std::vector<int> v) {
        MsgField f;
        f.name = name;
        f.dtype = FieldType::i32;
        f.dims = {static_cast<int>(v.size())};
        f.i32 = std::move(v);
        fields.push_back(std::move(f));
        return fields.back();
    }
    const MsgField* find(const std::string& name) const {
        for (const auto& f : fields)
            if (f.name == name) return &f;
        return nullptr;
    }
    const MsgField& require(const std::string& name) const {
        const MsgField* f = find(name);
        if (!f) throw ValidationError("message missing field '" + name + "'");
        return *f;
    }
};

inline const char* msg_type_name(MsgType t) {
    switch (t) {
        case MsgType::features_fwd: return "features_fwd";
        case MsgType::features_back: return "features_back";
        case MsgType::grad_to_server: return "grad_to_server";
        case MsgType::grad_to_node: return "grad_to_node";
    }
    return "unknown";
}

// Frame: u32 length | u8 version | u8 type | u8 direction | u8 phase |
// u32 step | u16 branch_id_len + bytes | u16 n_fields | fields.
// Field: u16 name_len + bytes | u8 dtype | u8 ndim | u32 dims[] | payload.
inline std::vector<std::uint8_t> encode_message(const WireMessage& m) {
    std::vector<std::uint8_t> body;
    body.push_back(1);  // version
    body.push_back(static_cast<std::uint8_t>(m.type));
    body.push_back(static_cast<std::uint8_t>(m.direction));
    body.push_back(static_cast<std::uint8_t>(m.phase));
    le::append(body, m.step);
    le::append(body, static_cast<std::uint16_t>(m.branch_id.size()));
    body.insert(body.end(), m.branch_id.begin(), m.branch_id.end());
    le::append(body, static_cast<std::uint16_t>(m.fields.size()));
    for (const auto& f : m.fields) {
        le::append(body, static_cast<std::uint16_t>(f.name.size()));
        body.insert(body.end(), f.name.begin(), f.name.end());
        body.push_back(static_cast<std::uint8_t>(f.dtype));
        body.push_back(static_cast<std::uint8_t>(f.dims.size()));
        std::int64_t n = 1;
        for (int d : f.dims) {
            le::append(body, static_cast<std::uint32_t>(d));
            n *= d;
        }
        if (f.dtype == FieldType::f32) {
            if (f.f32.size() != n) throw ShapeError("encode: f32 field '" + f.name + "' dims mismatch");
            for (float v : f.f32.data) le::append(body, v);
        } else {
            if (static_cast<std::int64_t>(f.i32.size()) != n)
                throw ShapeError("encode: i32 field '" + f.name + "' dims mismatch");
            for (int v : f.i32) le::append(body, static_cast<std::int32_t>(v));
        }
    }
    std::vector<std::uint8_t> out;
    le::append(out, static_cast<std::uint32_t>(body.size()));
    out.insert(out.end(), body.begin(), body.end());
    return out;
}

inline WireMessage decode_message(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 4) throw FormatError("decode: frame shorter than length prefix");
    const std::uint32_t len = le::read<std::uint32_t>(bytes.data());
    if (bytes.size() != 4 + static_cast<std::size_t>(len)) throw FormatError("decode: frame length mismatch");
    std::size_t off = 4;
    auto need = [&](std::size_t n) {
        if (off + n > bytes.size()) throw FormatError("decode: truncated frame");
    };
    auto u8 = [&] {
        need(1);
        return bytes[off++];
    };
    WireMessage m;
    const std::uint8_t version = u8();
    if (version != 1) throw FormatError("decode: unsupported frame version " + std::to_string(version));
    const std::uint8_t t = u8();
    if (t < 1 || t > 4) throw FormatError("decode: unknown message type " + std::to_string(t));
    m.type = static_cast<MsgType>(t);
    m.direction = static_cast<MsgDirection>(u8());
    m.phase = static_cast<MsgPhase>(u8());
    need(4);
    m.step = le::read<std::uint32_t>(&bytes[off]);
    off += 4;
    need(2);
    const std::uint16_t blen = le::read<std::uint16_t>(&bytes[off]);
    off += 2;
    need(blen);
    m.branch_id.assign(bytes.begin() + static_cast<std::ptrdiff_t>(off),
                       bytes.begin() + static_cast<std::ptrdiff_t>(off + blen));
    off += blen;
    need(2);
    const std::uint16_t nf = le::read<std::uint16_t>(&bytes[off]);
    off += 2;
    for (int i = 0; i < nf; ++i) {
        need(2);
        const std::uint16_t nlen = le::read<std::uint16_t>(&bytes[off]);
        off += 2;
        need(nlen);
        MsgField f;
        f.name.assign(bytes.begin() + static_cast<std::ptrdiff_t>(off),
                      bytes.begin() + static_cast<std::ptrdiff_t>(off + nlen));
        off += nlen;
        const std::uint8_t dt = u8();
        if (dt != 1 && dt != 2) throw FormatError("decode: field '" + f.name + "' has unknown dtype");
        f.dtype = static_cast<FieldType>(dt);
        const std::uint8_t nd = u8();
        std::int64_t n = 1;
        for (int d = 0; d < nd; ++d) {
            need(4);
            f.dims.push_back(static_cast<int>(le::read<std::uint32_t>(&bytes[off])));
            off += 4;
            n *= f.dims.back();
        }
        if (f.dtype == FieldType::f32) {
            need(static_cast<std::size_t>(n) * 4);
            f.f32 = Tensorf(f.dims.empty() ? std::vector<int>{0} : f.dims);
            for (std::int64_t k = 0; k < n; ++k)
                f.f32[k] = le::read<float>(&bytes[off + static_cast<std::size_t>(k) * 4]);
        } else {
            need(static_cast<std::size_t>(n) * 4);
            f.i32.resize(static_cast<std::size_t>(n));
            for (std::int64_t k = 0; k < n; ++k)
                f.i32[static_cast<std::size_t>(k)] =
                    le::read<std::int32_t>(&bytes[off + static_cast<std::size_t>(k) * 4]);
        }
        off += static_cast<std::size_t>(n) * 4;
        m.fields.push_back(std::move(f));
    }
    if (off != bytes.size()) throw FormatError("decode: trailing bytes in frame");
    return m;
}

// Raw-sample byte probes. Each sentinel is a run of consecutive raw float32
// sample bytes from one node's local data; if any such run appears inside a
// cross-boundary payload, raw data leaked.
class SentinelRegistry {
public:
    static constexpr int kRunFloats = 8;  // 32-byte probes

    void register_node_data(const std::string& node_id, const TrialTensor& trials, int probes = 4) {
        const std::int64_t n = trials.data.size();
        if (n < kRunFloats) return;
        for (int p = 0; p < probes; ++p) {
            const std::int64_t start = (n - kRunFloats) * p / std::max(1, probes - 1);
            std::vector<std::uint8_t> bytes;
            bytes.reserve(kRunFloats * 4);
            for (int k = 0; k < kRunFloats; ++k)
                le::append(bytes, trials.data[start + k]);
            sentinels_.push_back({node_id + "#" + std::to_string(p), std::move(bytes)});
        }
    }

    void plant(const std::string& tag, std::vector<std::uint8_t> bytes) {
        sentinels_.push_back({tag, std::move(bytes)});
    }

    // Returns the tag of the first sentinel found in the payload, if any.
    std::string scan(const std::vector<std::uint8_t>& payload) const {
        const std::string_view hay(reinterpret_cast<const char*>(payload.data()), payload.size());
        for (const auto& [tag, bytes] : sentinels_) {
            const std::string_view needle(reinterpret_cast<const char*>(bytes.data()), bytes.size());
            if (!needle.empty() && hay.find(needle) != std::string_view::npos) return tag;
        }
        return {};
    }

    std::size_t size() const { return sentinels_.size(); }

private:
    std::vector<std::pair<std::string, std::vector<std::uint8_t>>> sentinels_;
};

struct AuditRecord {
    MsgType type;
    MsgDirection direction;
    MsgPhase phase;
    std::uint32_t step;
    std::string branch_id;
    std::size_t byte_size;
    std::vector<std::pair<std::string, FieldType>> fields;
    std::string sentinel_hit;  // non-empty if a raw-sample probe matched
};

struct AuditViolation {
    std::uint32_t step;
    std::string message;
};

struct AuditVerdict {
    std::vector<AuditViolation> violations;
    std::size_t messages_checked = 0;
    bool clean() const { return violations.empty(); }
};

// Closed per-type field schemas. `labels` is legal only in unified mode on
// forward feature messages; `aligned_flags` only in multi mode with mmd
// alignment (LH/RH/other, never raw labels).
struct AuditPolicy {
    bool unified_head = true;
    bool mmd_alignment = false;
    int n_nodes = 0;

    std::set<std::string> allowed_fields(MsgType t) const {
        switch (t) {
            case MsgType::features_fwd: {
                std::set<std::string> s{"features", "set_index"};
                if (unified_head) s.insert("labels");
                if (!unified_head && mmd_alignment) s.insert("aligned_flags");
                return s;
            }
            case MsgType::features_back:
                return {"features"};
            case MsgType::grad_to_server:
            case MsgType::grad_to_node:
                return {"grad"};
        }
        return {};
    }

    int expected_train_messages_per_step() const { return (unified_head ? 2 : 4) * n_nodes; }
};

// Append-only message log. Sentinel scans run against the encoded payload at
// append time, before the message is considered delivered.
class AuditLog {
public:
    void append(const WireMessage& m, const std::vector<std::uint8_t>& payload,
                const SentinelRegistry& sentinels) {
        AuditRecord r;
        r.type = m.type;
        r.direction = m.direction;
        r.phase = m.phase;
        r.step = m.step;
        r.branch_id = m.branch_id;
        r.byte_size = payload.size();
        for (const auto& f : m.fields) r.fields.emplace_back(f.name, f.dtype);
        r.sentinel_hit = sentinels.scan(payload);
        records_.push_back(std::move(r));
    }

    const std::vector<AuditRecord>& records() const { return records_; }
    std::size_t size() const { return records_.size(); }

    // One structured text line per message.
    void save(const std::filesystem::path& path) const {
        std::string out;
        for (const auto& r : records_) {
            nlohmann::json j;
            j["type"] = msg_type_name(r.type);
            j["direction"] = r.direction == MsgDirection::node_to_server ? "node_to_server" : "server_to_node";
            j["phase"] = r.phase == MsgPhase::train ? "train" : "eval";
            j["step"] = r.step;
            j["branch_id"] = r.branch_id;
            j["bytes"] = r.byte_size;
            auto fields = nlohmann::json::array();
            for (const auto& [name, dtype] : r.fields)
                fields.push_back({{"name", name}, {"dtype", dtype == FieldType::f32 ? "f32" : "i32"}});
            j["fields"] = fields;
            if (!r.sentinel_hit.empty()) j["sentinel_hit"] = r.sentinel_hit;
            out += j.dump() + "\n";
        }
        write_file_text(path, out);
    }

    static AuditLog load(const std::filesystem::path& path) {
        AuditLog log;
        const std::string text = read_file_text(path);
        std::size_t pos = 0;
        while (pos < text.size()) {
            std::size_t end = text.find('\n', pos);
            if (end == std::string::npos) end = text.size();
            const std::string line = text.substr(pos, end - pos);
            pos = end + 1;
            if (line.empty()) continue;
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::parse_error& e) {
                throw FormatError("audit log line malformed: " + std::string(e.what()));
            }
            AuditRecord r;
            const std::string t = j.at("type").get<std::string>();
            if (t == "features_fwd") r.type = MsgType::features_fwd;
            else if (t == "features_back") r.type = MsgType::features_back;
            else if (t == "grad_to_server") r.type = MsgType::grad_to_server;
            else if (t == "grad_to_node") r.type = MsgType::grad_to_node;
            else throw FormatError("audit log: unknown message type '" + t + "'");
            r.direction = j.at("direction").get<std::string>() == "node_to_server"
                              ? MsgDirection::node_to_server
                              : MsgDirection::server_to_node;
            r.phase = j.at("phase").get<std::string>() == "train" ? MsgPhase::train : MsgPhase::eval;
            r.step = j.at("step").get<std::uint32_t>();
            r.branch_id = j.at("branch_id").get<std::string>();
            r.byte_size = j.at("bytes").get<std::size_t>();
            for (const auto& f : j.at("fields"))
                r.fields.emplace_back(f.at("name").get<std::string>(),
                                      f.at("dtype").get<std::string>() == "f32" ? FieldType::f32
                                                                                : FieldType::i32);
            if (j.contains("sentinel_hit")) r.sentinel_hit = j.at("sentinel_hit").get<std::string>();
            log.records_.push_back(std::move(r));
        }
        return log;
    }

private:
    std::vector<AuditRecord> records_;
};

// Whole-log verdict: closed schemas, no labels in multi mode, no sentinel
// hits, and the exact per-step train message count.
inline AuditVerdict audit_check(const AuditLog& log, const AuditPolicy& policy) {
    AuditVerdict v;
    std::map<std::uint32_t, int> train_counts;
    for (const auto& r : log.records()) {
        ++v.messages_checked;
        const auto allowed = policy.allowed_fields(r.type);
        for (const auto& [name, dtype] : r.fields) {
            if (!allowed.count(name))
                v.violations.push_back({r.step, std::string(msg_type_name(r.type)) + " from '" + r.branch_id +
                                                    "' carries disallowed field '" + name + "'"});
            if (!policy.unified_head && name == "labels")
                v.violations.push_back({r.step, "label-bearing message in multi-classifier mode from '" +
                                                    r.branch_id + "'"});
            if ((name == "features" || name == "grad") && dtype != FieldType::f32)
                v.violations.push_back({r.step, std::string(msg_type_name(r.type)) + " field '" + name +
                                                    "' has non-float payload"});
        }
        if (!r.sentinel_hit.empty())
            v.violations.push_back({r.step, std::string(msg_type_name(r.type)) + " from '" + r.branch_id +
                                                "' contains raw-sample bytes (sentinel " + r.sentinel_hit + ")"});
        if (r.phase == MsgPhase::train) ++train_counts[r.step];
        if (r.phase == MsgPhase::eval && (r.type == MsgType::grad_to_server || r.type == MsgType::grad_to_node))
            v.violations.push_back({r.step, "gradient message during evaluation from '" + r.branch_id + "'"});
    }
    const int expected = policy.expected_train_messages_per_step();
    for (const auto& [step, count] : train_counts)
        if (count != expected)
            v.violations.push_back({step, "step has " + std::to_string(count) + " train messages, protocol requires " +
                                              std::to_string(expected)});
    return v;
}

}  // namespace sandwich
