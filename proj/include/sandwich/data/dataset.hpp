#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "sandwich/core/errors.hpp"
#include "sandwich/core/io.hpp"
#include "sandwich/core/tensor.hpp"

namespace sandwich {

struct DatasetDescriptor {
    std::string dataset_id;
    std::vector<std::string> channel_names;
    double sampling_rate_hz = 0.0;
    std::vector<std::string> label_names;  // label id == position
    std::vector<std::string> subject_ids;  // local opaque identifiers

    int n_channels() const { return static_cast<int>(channel_names.size()); }
    int n_labels() const { return static_cast<int>(label_names.size()); }

    int channel_index(const std::string& name) const {
        auto it = std::find(channel_names.begin(), channel_names.end(), name);
        if (it == channel_names.end())
            throw ChannelLookupError("channel '" + name + "' not present in dataset '" + dataset_id + "'");
        return static_cast<int>(it - channel_names.begin());
    }

    void validate() const {
        if (dataset_id.empty()) throw ValidationError("descriptor: empty dataset_id");
        if (sampling_rate_hz <= 0.0) throw ValidationError("descriptor: sampling_rate_hz must be positive");
        for (std::size_t i = 0; i < channel_names.size(); ++i)
            for (std::size_t j = i + 1; j < channel_names.size(); ++j)
                if (channel_names[i] == channel_names[j])
                    throw ValidationError("descriptor: duplicate channel '" + channel_names[i] + "'");
        if (label_names.empty()) throw ValidationError("descriptor: empty label space");
    }
};

// (n_trials, n_channels, n_samples) float samples with per-trial label and
// local set index. Values are immutable by convention; transforms copy.
struct TrialTensor {
    Tensorf data;  // rank 3
    std::vector<int> labels;
    std::vector<int> subject_index;
    std::string dataset_id;

    int n_trials() const { return data.rank() >= 1 ? data.dim(0) : 0; }
    int n_channels() const { return data.dim(1); }
    int n_samples() const { return data.dim(2); }

    void validate(const DatasetDescriptor& d) const {
        if (data.rank() != 3) throw ValidationError("trials: rank-3 (trials, channels, samples) required");
        if (data.dim(1) != d.n_channels())
            throw ValidationError("trials: channel count " + std::to_string(data.dim(1)) +
                                  " does not match descriptor " + std::to_string(d.n_channels()));
        if (static_cast<int>(labels.size()) != n_trials() ||
            static_cast<int>(subject_index.size()) != n_trials())
            throw ValidationError("trials: labels/subject_index length must equal n_trials");
        const int n_subj = static_cast<int>(d.subject_ids.size());
        for (int i = 0; i < n_trials(); ++i) {
            if (labels[static_cast<std::size_t>(i)] < 0 ||
                labels[static_cast<std::size_t>(i)] >= d.n_labels())
                throw ValidationError("trials: label " + std::to_string(labels[static_cast<std::size_t>(i)]) +
                                      " outside label space of '" + d.dataset_id + "'");
            if (n_subj > 0 && (subject_index[static_cast<std::size_t>(i)] < 0 ||
                               subject_index[static_cast<std::size_t>(i)] >= n_subj))
                throw ValidationError("trials: subject_index out of range");
        }
        if (!data.all_finite()) throw ValidationError("trials: NaN or Inf sample values");
        if (dataset_id != d.dataset_id) throw ValidationError("trials: dataset_id mismatch");
    }
};

struct Dataset {
    DatasetDescriptor descriptor;
    TrialTensor trials;
};

namespace detail {

inline std::vector<std::uint8_t> to_le_bytes_f32(const std::vector<float>& v) {
    std::vector<std::uint8_t> out;
    out.reserve(v.size() * 4);
    for (float f : v) le::append(out, f);
    return out;
}

inline std::vector<std::uint8_t> to_le_bytes_i32(const std::vector<int>& v) {
    std::vector<std::uint8_t> out;
    out.reserve(v.size() * 4);
    for (int i : v) le::append(out, static_cast<std::int32_t>(i));
    return out;
}

}  // namespace detail

inline std::filesystem::path write_dataset(const DatasetDescriptor& descriptor, const TrialTensor& trials,
                                           const std::filesystem::path& root) {
    descriptor.validate();
    trials.validate(descriptor);

    std::error_code ec;
    std::filesystem::create_directories(root, ec);
    if (ec) throw IoError("cannot create dataset directory " + root.string() + ": " + ec.message());

    const auto data_bytes = detail::to_le_bytes_f32(trials.data.data);
    const auto label_bytes = detail::to_le_bytes_i32(trials.labels);
    const auto subject_bytes = detail::to_le_bytes_i32(trials.subject_index);

    nlohmann::json m;
    m["dataset_id"] = descriptor.dataset_id;
    m["channel_names"] = descriptor.channel_names;
    m["sampling_rate_hz"] = descriptor.sampling_rate_hz;
    m["label_names"] = descriptor.label_names;
    m["subject_ids"] = descriptor.subject_ids;
    m["byte_order"] = "little";
    m["shape"] = trials.data.shape;
    m["blobs"] = {
        {"data", {{"file", "data.f32le"}, {"dtype", "f32"}, {"checksum", fnv1a64_hex(data_bytes.data(), data_bytes.size())}}},
        {"labels", {{"file", "labels.i32le"}, {"dtype", "i32"}, {"checksum", fnv1a64_hex(label_bytes.data(), label_bytes.size())}}},
        {"subjects", {{"file", "subjects.i32le"}, {"dtype", "i32"}, {"checksum", fnv1a64_hex(subject_bytes.data(), subject_bytes.size())}}},
    };

    write_file_bytes(root / "data.f32le", data_bytes);
    write_file_bytes(root / "labels.i32le", label_bytes);
    write_file_bytes(root / "subjects.i32le", subject_bytes);
    const auto manifest_path = root / "manifest.json";
    write_file_text(manifest_path, m.dump(2) + "\n");
    return manifest_path;
}

inline Dataset read_dataset(const std::filesystem::path& root) {
    const auto manifest_path = root / "manifest.json";
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(read_file_text(manifest_path));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("malformed manifest " + manifest_path.string() + ": " + e.what());
    }

    Dataset ds;
    try {
        ds.descriptor.dataset_id = m.at("dataset_id").get<std::string>();
        ds.descriptor.channel_names = m.at("channel_names").get<std::vector<std::string>>();
        ds.descriptor.sampling_rate_hz = m.at("sampling_rate_hz").get<double>();
        ds.descriptor.label_names = m.at("label_names").get<std::vector<std::string>>();
        ds.descriptor.subject_ids = m.at("subject_ids").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest missing required field: " + std::string(e.what()));
    }
    if (m.value("byte_order", "little") != "little")
        throw FormatError("manifest declares unsupported byte order");

    const auto shape = m.at("shape").get<std::vector<int>>();
    if (shape.size() != 3) throw FormatError("manifest shape must have 3 dims");

    auto load_blob = [&](const char* key, const char* expect_dtype) {
        const auto& b = m.at("blobs").at(key);
        const std::string dtype = b.at("dtype").get<std::string>();
        if (dtype != expect_dtype)
            throw FormatError(std::string("blob '") + key + "' declares unknown dtype '" + dtype + "'");
        const auto bytes = read_file_bytes(root / b.at("file").get<std::string>());
        const std::string want = b.at("checksum").get<std::string>();
        const std::string got = fnv1a64_hex(bytes.data(), bytes.size());
        if (want != got)
            throw ChecksumError(std::string("blob '") + key + "' checksum mismatch: manifest " + want +
                                " vs content " + got);
        return bytes;
    };

    const auto data_bytes = load_blob("data", "f32");
    const auto label_bytes = load_blob("labels", "i32");
    const auto subject_bytes = load_blob("subjects", "i32");

    const std::int64_t n = static_cast<std::int64_t>(shape[0]) * shape[1] * shape[2];
    if (static_cast<std::int64_t>(data_bytes.size()) != n * 4)
        throw BlobShapeError("data blob holds " + std::to_string(data_bytes.size() / 4) +
                             " values but manifest shape needs " + std::to_string(n));
    if (static_cast<std::int64_t>(label_bytes.size()) != static_cast<std::int64_t>(shape[0]) * 4)
        throw BlobShapeError("labels blob length does not match trial count");
    if (static_cast<std::int64_t>(subject_bytes.size()) != static_cast<std::int64_t>(shape[0]) * 4)
        throw BlobShapeError("subjects blob length does not match trial count");

    ds.trials.data = Tensorf(shape);
    for (std::int64_t i = 0; i < n; ++i) ds.trials.data[i] = le::read<float>(&data_bytes[static_cast<std::size_t>(i * 4)]);
    ds.trials.labels.resize(static_cast<std::size_t>(shape[0]));
    ds.trials.subject_index.resize(static_cast<std::size_t>(shape[0]));
    for (int i = 0; i < shape[0]; ++i) {
        ds.trials.labels[static_cast<std::size_t>(i)] =
            le::read<std::int32_t>(&label_bytes[static_cast<std::size_t>(i) * 4]);
        ds.trials.subject_index[static_cast<std::size_t>(i)] =
            le::read<std::int32_t>(&subject_bytes[static_cast<std::size_t>(i) * 4]);
    }
    ds.trials.dataset_id = ds.descriptor.dataset_id;
    ds.descriptor.validate();
    ds.trials.validate(ds.descriptor);
    return ds;
}

// Reorders/filters channels; output channel order is exactly `wanted`.
inline TrialTensor select_channels(const TrialTensor& trials, const DatasetDescriptor& descriptor,
                                   const std::vector<std::string>& wanted) {
    std::vector<int> idx;
    idx.reserve(wanted.size());
    for (const auto& name : wanted) idx.push_back(descriptor.channel_index(name));
    TrialTensor out;
    out.labels = trials.labels;
    out.subject_index = trials.subject_index;
    out.dataset_id = trials.dataset_id;
    const int n = trials.n_trials(), s = trials.n_samples();
    out.data = Tensorf({n, static_cast<int>(idx.size()), s});
    for (int t = 0; t < n; ++t)
        for (std::size_t c = 0; c < idx.size(); ++c) {
            const float* src = &trials.data.at3(t, idx[c], 0);
            float* dst = &out.data.at3(t, static_cast<int>(c), 0);
            std::copy(src, src + s, dst);
        }
    return out;
}

inline DatasetDescriptor select_channels_descriptor(const DatasetDescriptor& d,
                                                    const std::vector<std::string>& wanted) {
    DatasetDescriptor out = d;
    for (const auto& name : wanted) (void)d.channel_index(name);
    out.channel_names = wanted;
    return out;
}

// Concatenates datasets that have already been reduced to a shared channel
// list and sample rate, remapping labels into the given unified name order
// and keeping subject groups distinct across datasets.
inline Dataset pool_datasets(const std::vector<Dataset>& parts, const std::vector<std::string>& unified_labels,
                             const std::string& pooled_id = "pooled") {
    if (parts.empty()) throw ValidationError("pool_datasets: no inputs");
    const auto& first = parts.front();
    int total_trials = 0;
    for (const auto& p : parts) {
        if (p.descriptor.channel_names != first.descriptor.channel_names)
            throw ValidationError("pool_datasets: channel lists differ ('" + p.descriptor.dataset_id + "')");
        if (p.descriptor.sampling_rate_hz != first.descriptor.sampling_rate_hz)
            throw ValidationError("pool_datasets: sampling rates differ");
        if (p.trials.n_samples() != first.trials.n_samples())
            throw ValidationError("pool_datasets: window lengths differ");
        total_trials += p.trials.n_trials();
    }
    auto unified_index = [&](const std::string& name) {
        auto it = std::find(unified_labels.begin(), unified_labels.end(), name);
        if (it == unified_labels.end())
            throw ValidationError("pool_datasets: label '" + name + "' missing from unified label list");
        return static_cast<int>(it - unified_labels.begin());
    };

    Dataset out;
    out.descriptor.dataset_id = pooled_id;
    out.descriptor.channel_names = first.descriptor.channel_names;
    out.descriptor.sampling_rate_hz = first.descriptor.sampling_rate_hz;
    out.descriptor.label_names = unified_labels;
    out.trials.dataset_id = pooled_id;
    out.trials.data = Tensorf({total_trials, first.trials.n_channels(), first.trials.n_samples()});
    int row = 0, subject_base = 0;
    const std::int64_t trial_sz =
        static_cast<std::int64_t>(first.trials.n_channels()) * first.trials.n_samples();
    for (const auto& p : parts) {
        std::vector<int> remap(p.descriptor.label_names.size());
        for (std::size_t l = 0; l < remap.size(); ++l) remap[l] = unified_index(p.descriptor.label_names[l]);
        for (int t = 0; t < p.trials.n_trials(); ++t) {
            std::copy(&p.trials.data[static_cast<std::int64_t>(t) * trial_sz],
                      &p.trials.data[static_cast<std::int64_t>(t) * trial_sz] + trial_sz,
                      &out.trials.data[static_cast<std::int64_t>(row) * trial_sz]);
            out.trials.labels.push_back(remap[static_cast<std::size_t>(p.trials.labels[static_cast<std::size_t>(t)])]);
            out.trials.subject_index.push_back(subject_base + p.trials.subject_index[static_cast<std::size_t>(t)]);
            ++row;
        }
        for (const auto& sid : p.descriptor.subject_ids)
            out.descriptor.subject_ids.push_back(p.descriptor.dataset_id + "/" + sid);
        subject_base = static_cast<int>(out.descriptor.subject_ids.size());
    }
    return out;
}

inline TrialTensor take_rows(const TrialTensor& trials, const std::vector<int>& rows) {
    TrialTensor out;
    out.dataset_id = trials.dataset_id;
    const int c = trials.n_channels(), s = trials.n_samples();
    out.data = Tensorf({static_cast<int>(rows.size()), c, s});
    const std::int64_t trial_sz = static_cast<std::int64_t>(c) * s;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const int r = rows[i];
        if (r < 0 || r >= trials.n_trials()) throw ValidationError("take_rows: row out of range");
        std::copy(&trials.data[r * trial_sz], &trials.data[r * trial_sz] + trial_sz,
                  &out.data[static_cast<std::int64_t>(i) * trial_sz]);
        out.labels.push_back(trials.labels[static_cast<std::size_t>(r)]);
        out.subject_index.push_back(trials.subject_index[static_cast<std::size_t>(r)]);
    }
    return out;
}

// Chronological per-subject holdout: the last n_last trials of every subject
// (in stored order) become the second split.
inline std::pair<TrialTensor, TrialTensor> split_holdout_per_subject(const TrialTensor& trials, int n_last) {
    if (n_last < 0) throw ValidationError("split_holdout_per_subject: n_last must be >= 0");
    std::map<int, std::vector<int>> by_subject;
    for (int t = 0; t < trials.n_trials(); ++t) by_subject[trials.subject_index[static_cast<std::size_t>(t)]].push_back(t);
    std::vector<int> fit_rows, held_rows;
    for (int t = 0; t < trials.n_trials(); ++t) {
        const auto& rows = by_subject[trials.subject_index[static_cast<std::size_t>(t)]];
        const int pos = static_cast<int>(std::find(rows.begin(), rows.end(), t) - rows.begin());
        if (pos >= static_cast<int>(rows.size()) - n_last)
            held_rows.push_back(t);
        else
            fit_rows.push_back(t);
    }
    return {take_rows(trials, fit_rows), take_rows(trials, held_rows)};
}

}  // namespace sandwich
