#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "test_util.hpp"

using namespace sandwich;
using namespace sandwich::testutil;
namespace fs = std::filesystem;

namespace {

TrialTensor tone_trial(double freq_hz, double rate_hz, int n, const std::string& id = "tone") {
    TrialTensor t;
    t.dataset_id = id;
    t.data = Tensorf({1, 1, n});
    for (int i = 0; i < n; ++i)
        t.data.at3(0, 0, i) = static_cast<float>(std::sin(2.0 * M_PI * freq_hz * i / rate_hz));
    t.labels = {0};
    t.subject_index = {0};
    return t;
}

double rms(const TrialTensor& t, int lo, int hi) {
    double acc = 0.0;
    for (int i = lo; i < hi; ++i) acc += static_cast<double>(t.data.at3(0, 0, i)) * t.data.at3(0, 0, i);
    return std::sqrt(acc / (hi - lo));
}

Dataset small_dataset(std::uint64_t seed = 5) {
    Dataset ds;
    ds.descriptor.dataset_id = "small";
    ds.descriptor.channel_names = {"C3", "Cz", "C4"};
    ds.descriptor.sampling_rate_hz = 100.0;
    ds.descriptor.label_names = {"left_hand", "right_hand"};
    ds.descriptor.subject_ids = {"s0", "s1"};
    Rng rng(seed);
    ds.trials.dataset_id = "small";
    ds.trials.data = Tensorf({10, 3, 50});
    for (std::int64_t i = 0; i < ds.trials.data.size(); ++i)
        ds.trials.data[i] = static_cast<float>(rng.uniform(-1, 1));
    for (int t = 0; t < 10; ++t) {
        ds.trials.labels.push_back(t % 2);
        ds.trials.subject_index.push_back(t < 5 ? 0 : 1);
    }
    return ds;
}

}  // namespace

TEST(Bandpass, Attenuates50HzLineNoise) {
    // 4k+1 samples so the tone has an integer number of cycles at 200 Hz.
    const int n = 801;
    TrialTensor tone = tone_trial(50.0, 200.0, n);
    PreprocessConfig cfg;  // 4-32 Hz, order 5
    TrialTensor out = bandpass(tone, 200.0, cfg);
    const double before = rms(tone, 100, n - 100);
    const double after = rms(out, 100, n - 100);
    EXPECT_LT(after, 0.05 * before) << "before " << before << " after " << after;
}

TEST(Bandpass, PreservesPassbandTone) {
    const int n = 801;
    TrialTensor tone = tone_trial(10.0, 200.0, n);
    PreprocessConfig cfg;
    TrialTensor out = bandpass(tone, 200.0, cfg);
    const double before = rms(tone, 100, n - 100);
    const double after = rms(out, 100, n - 100);
    EXPECT_NEAR(after / before, 1.0, 0.05);
}

TEST(Bandpass, RejectsBandAtNyquist) {
    TrialTensor tone = tone_trial(10.0, 60.0, 120);
    PreprocessConfig cfg;  // band_hi 32 >= 30
    EXPECT_THROW(bandpass(tone, 60.0, cfg), ConfigError);
    EXPECT_THROW(dsp::butter_bandpass(5, 4.0, 30.0, 60.0), ConfigError);
}

TEST(PreprocessConfigValidate, CatchesBadBands) {
    PreprocessConfig cfg;
    cfg.band_lo_hz = 35.0;  // above band_hi
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = PreprocessConfig{};
    cfg.band_hi_hz = 120.0;  // above target Nyquist
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = PreprocessConfig{};
    cfg.filter_order = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = PreprocessConfig{};
    cfg.balance_target = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Resample, DownsamplesToneFaithfully) {
    const int n = 800;
    TrialTensor tone = tone_trial(8.0, 200.0, n);
    TrialTensor out = resample(tone, 200.0, 100.0);
    ASSERT_EQ(out.n_samples(), 400);
    // compare against the analytic tone at the new rate, away from the edges
    double err = 0.0, ref = 0.0;
    for (int i = 40; i < 360; ++i) {
        const double want = std::sin(2.0 * M_PI * 8.0 * i / 100.0);
        const double got = out.data.at3(0, 0, i);
        err += (got - want) * (got - want);
        ref += want * want;
    }
    EXPECT_LT(std::sqrt(err / ref), 0.02);
}

TEST(Resample, RationalRatioWorks) {
    const int n = 960;
    TrialTensor tone = tone_trial(6.0, 160.0, n);
    TrialTensor out = resample(tone, 160.0, 100.0);  // L=5, M=8
    ASSERT_EQ(out.n_samples(), 600);
    double err = 0.0, ref = 0.0;
    for (int i = 60; i < 540; ++i) {
        const double want = std::sin(2.0 * M_PI * 6.0 * i / 100.0);
        const double got = out.data.at3(0, 0, i);
        err += (got - want) * (got - want);
        ref += want * want;
    }
    EXPECT_LT(std::sqrt(err / ref), 0.02);
}

TEST(Resample, SameRatePassesThroughAndUpsamplingThrows) {
    TrialTensor tone = tone_trial(8.0, 100.0, 100);
    TrialTensor same = resample(tone, 100.0, 100.0);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(same.data.at3(0, 0, i), tone.data.at3(0, 0, i));
    EXPECT_THROW(resample(tone, 100.0, 200.0), UnsupportedError);
    EXPECT_THROW(dsp::Resampler(100.5, 50.0), UnsupportedError);
}

TEST(Window, KeepsLeadingSamplesAndValidates) {
    TrialTensor tone = tone_trial(8.0, 100.0, 100);
    TrialTensor cut = window(tone, 0.5, 100.0);
    ASSERT_EQ(cut.n_samples(), 50);
    for (int i = 0; i < 50; ++i) EXPECT_EQ(cut.data.at3(0, 0, i), tone.data.at3(0, 0, i));
    EXPECT_THROW(window(tone, 2.0, 100.0), ValidationError);
    TrialTensor exact = window(tone, 1.0, 100.0);
    EXPECT_EQ(exact.n_samples(), 100);
}

TEST(Normalize, RowsEndUpStandardized) {
    Dataset ds = small_dataset();
    TrialTensor out = normalize(ds.trials);
    for (int t = 0; t < out.n_trials(); ++t)
        for (int c = 0; c < out.n_channels(); ++c) {
            double mean = 0.0, var = 0.0;
            for (int i = 0; i < out.n_samples(); ++i) mean += out.data.at3(t, c, i);
            mean /= out.n_samples();
            for (int i = 0; i < out.n_samples(); ++i) {
                const double d = out.data.at3(t, c, i) - mean;
                var += d * d;
            }
            var /= out.n_samples();
            EXPECT_NEAR(mean, 0.0, 1e-4);
            EXPECT_NEAR(var, 1.0, 1e-2);
        }
}

TEST(Normalize, FlatSignalCollapsesToZero) {
    TrialTensor flat;
    flat.dataset_id = "flat";
    flat.data = Tensorf({1, 2, 10}, 3.5f);
    flat.labels = {0};
    flat.subject_index = {0};
    TrialTensor out = normalize(flat);
    for (std::int64_t i = 0; i < out.data.size(); ++i) EXPECT_EQ(out.data[i], 0.0f);
}

TEST(Balance, PaperSourceSizesAllLandAt2880) {
    for (int n : {2880, 9880, 2399}) {
        TrialTensor t;
        t.dataset_id = "x";
        t.data = Tensorf({n, 1, 2});
        for (int i = 0; i < n; ++i) {
            t.data.at3(i, 0, 0) = static_cast<float>(i);
            t.data.at3(i, 0, 1) = static_cast<float>(i % 7);
            t.labels.push_back(i % 4);
            t.subject_index.push_back(0);
        }
        TrialTensor b = balance(t, 2880);
        ASSERT_EQ(b.n_trials(), 2880);
        for (int i = 0; i < 2880; ++i) {
            const int src = i % n;
            ASSERT_EQ(b.data.at3(i, 0, 0), static_cast<float>(src));
            ASSERT_EQ(b.labels[static_cast<std::size_t>(i)], src % 4);
        }
    }
    TrialTensor t;
    t.dataset_id = "x";
    t.data = Tensorf({3, 1, 1}, 1.0f);
    t.labels = {0, 1, 0};
    t.subject_index = {0, 0, 0};
    EXPECT_THROW(balance(t, 0), ConfigError);
}

TEST(PowerTopomap, CenteredAcrossChannels) {
    Dataset ds = small_dataset();
    const auto topo = power_topomap(ds.trials);
    ASSERT_EQ(topo.size(), 3u);
    double sum = 0.0;
    for (double v : topo) sum += v;
    EXPECT_NEAR(sum, 0.0, 1e-9);
}

TEST(Pipeline, WindowResampleBandpassNormalize) {
    Dataset ds;
    ds.descriptor.dataset_id = "p";
    ds.descriptor.channel_names = {"a", "b"};
    ds.descriptor.sampling_rate_hz = 160.0;
    ds.descriptor.label_names = {"rest"};
    ds.descriptor.subject_ids = {"s0"};
    ds.trials.dataset_id = "p";
    const int n_in = static_cast<int>(3.2 * 160);
    ds.trials.data = Tensorf({4, 2, n_in});
    Rng rng(11);
    for (std::int64_t i = 0; i < ds.trials.data.size(); ++i)
        ds.trials.data[i] = static_cast<float>(rng.uniform(-1, 1));
    ds.trials.labels = {0, 0, 0, 0};
    ds.trials.subject_index = {0, 0, 0, 0};

    PreprocessConfig cfg;
    cfg.target_rate_hz = 100.0;
    cfg.window_s = 3.0;
    cfg.band_lo_hz = 4.0;
    cfg.band_hi_hz = 32.0;
    Dataset out = preprocess_dataset(ds, cfg);
    EXPECT_EQ(out.descriptor.sampling_rate_hz, 100.0);
    EXPECT_EQ(out.trials.n_samples(), 300);
    EXPECT_EQ(out.trials.n_trials(), 4);
    out.trials.validate(out.descriptor);
}

TEST(DatasetIo, RoundTripIsBitwise) {
    Dataset ds = small_dataset();
    const fs::path dir = fs::temp_directory_path() / "sandwich_roundtrip";
    fs::remove_all(dir);
    write_dataset(ds.descriptor, ds.trials, dir);
    Dataset back = read_dataset(dir);
    EXPECT_EQ(back.descriptor.dataset_id, ds.descriptor.dataset_id);
    EXPECT_EQ(back.descriptor.channel_names, ds.descriptor.channel_names);
    EXPECT_EQ(back.descriptor.label_names, ds.descriptor.label_names);
    EXPECT_EQ(back.descriptor.subject_ids, ds.descriptor.subject_ids);
    EXPECT_EQ(back.descriptor.sampling_rate_hz, ds.descriptor.sampling_rate_hz);
    ASSERT_EQ(back.trials.data.size(), ds.trials.data.size());
    for (std::int64_t i = 0; i < ds.trials.data.size(); ++i) {
        // bitwise, not approximate
        ASSERT_EQ(std::memcmp(&back.trials.data[i], &ds.trials.data[i], sizeof(float)), 0);
    }
    EXPECT_EQ(back.trials.labels, ds.trials.labels);
    EXPECT_EQ(back.trials.subject_index, ds.trials.subject_index);
    fs::remove_all(dir);
}

TEST(DatasetIo, CorruptionsRaiseTypedErrors) {
    Dataset ds = small_dataset();
    const fs::path dir = fs::temp_directory_path() / "sandwich_badio";

    fs::remove_all(dir);
    write_dataset(ds.descriptor, ds.trials, dir);
    {
        // flip one payload byte -> checksum mismatch
        std::fstream f(dir / "data.f32le", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(17);
        char byte = 0;
        f.seekg(17);
        f.read(&byte, 1);
        byte = static_cast<char>(byte ^ 0x40);
        f.seekp(17);
        f.write(&byte, 1);
    }
    EXPECT_THROW(read_dataset(dir), ChecksumError);

    fs::remove_all(dir);
    write_dataset(ds.descriptor, ds.trials, dir);
    fs::resize_file(dir / "labels.i32le", 6);  // plain truncation trips the checksum first
    EXPECT_THROW(read_dataset(dir), ChecksumError);

    {
        // truncation with a matching checksum must still fail on shape
        const auto bytes = read_file_bytes(dir / "labels.i32le");
        nlohmann::json manifest = nlohmann::json::parse(read_file_text(dir / "manifest.json"));
        manifest["blobs"]["labels"]["checksum"] = fnv1a64_hex(bytes.data(), bytes.size());
        write_file_text(dir / "manifest.json", manifest.dump());
    }
    EXPECT_THROW(read_dataset(dir), BlobShapeError);

    fs::remove_all(dir);
    write_dataset(ds.descriptor, ds.trials, dir);
    fs::remove(dir / "subjects.i32le");
    EXPECT_THROW(read_dataset(dir), MissingBlobError);

    fs::remove_all(dir);
    write_dataset(ds.descriptor, ds.trials, dir);
    write_file_text(dir / "manifest.json", "{not json");
    EXPECT_THROW(read_dataset(dir), FormatError);

    fs::remove_all(dir);
    write_dataset(ds.descriptor, ds.trials, dir);
    {
        std::string manifest = read_file_text(dir / "manifest.json");
        const auto pos = manifest.find("little");
        ASSERT_NE(pos, std::string::npos);
        manifest.replace(pos, 6, "bigend");
        write_file_text(dir / "manifest.json", manifest);
    }
    EXPECT_THROW(read_dataset(dir), FormatError);

    EXPECT_THROW(read_dataset(dir / "does_not_exist"), IoError);
    fs::remove_all(dir);
}

TEST(Channels, SelectFollowsRequestedOrder) {
    Dataset ds = small_dataset();
    TrialTensor sel = select_channels(ds.trials, ds.descriptor, {"C4", "C3"});
    ASSERT_EQ(sel.n_channels(), 2);
    for (int t = 0; t < ds.trials.n_trials(); ++t)
        for (int i = 0; i < ds.trials.n_samples(); ++i) {
            EXPECT_EQ(sel.data.at3(t, 0, i), ds.trials.data.at3(t, 2, i));
            EXPECT_EQ(sel.data.at3(t, 1, i), ds.trials.data.at3(t, 0, i));
        }
    DatasetDescriptor d2 = select_channels_descriptor(ds.descriptor, {"C4", "C3"});
    EXPECT_EQ(d2.channel_names, (std::vector<std::string>{"C4", "C3"}));
    EXPECT_THROW(select_channels(ds.trials, ds.descriptor, {"Oz"}), ChannelLookupError);
}

TEST(Pooling, RemapsLabelsAndOffsetsSubjects) {
    Dataset a = small_dataset(1);
    Dataset b = small_dataset(2);
    b.descriptor.dataset_id = "other";
    b.trials.dataset_id = "other";
    b.descriptor.label_names = {"right_hand", "feet"};  // different local space
    const std::vector<std::string> unified = {"left_hand", "right_hand", "feet"};
    Dataset pooled = pool_datasets({a, b}, unified);
    EXPECT_EQ(pooled.descriptor.label_names, unified);
    ASSERT_EQ(pooled.trials.n_trials(), 20);
    // a's label 1 ("right_hand") -> unified 1; b's label 1 ("feet") -> unified 2
    EXPECT_EQ(pooled.trials.labels[1], 1);
    EXPECT_EQ(pooled.trials.labels[11], 2);
    // subjects offset: a has 2, so b's subject 0 lands at index 2
    EXPECT_EQ(pooled.trials.subject_index[10], 2);
    EXPECT_EQ(pooled.descriptor.subject_ids.size(), 4u);
    EXPECT_EQ(pooled.descriptor.subject_ids[2], "other/s0");

    Dataset bad = small_dataset(3);
    bad.descriptor.sampling_rate_hz = 128.0;
    EXPECT_THROW(pool_datasets({a, bad}, unified), ValidationError);
}

TEST(Split, HoldoutTakesLastTrialsPerSubject) {
    Dataset ds = small_dataset();
    auto [train, val] = split_holdout_per_subject(ds.trials, 2);
    EXPECT_EQ(train.n_trials(), 6);
    EXPECT_EQ(val.n_trials(), 4);
    // subject 0 occupies rows 0..4; its last two are rows 3, 4
    EXPECT_EQ(val.data.at3(0, 0, 0), ds.trials.data.at3(3, 0, 0));
    EXPECT_EQ(val.data.at3(1, 0, 0), ds.trials.data.at3(4, 0, 0));
    EXPECT_EQ(val.data.at3(2, 0, 0), ds.trials.data.at3(8, 0, 0));
    EXPECT_THROW(split_holdout_per_subject(ds.trials, -1), ValidationError);
}

TEST(Validation, TrialTensorAgainstDescriptor) {
    Dataset ds = small_dataset();
    ds.trials.validate(ds.descriptor);

    TrialTensor bad = ds.trials;
    bad.labels[0] = 9;
    EXPECT_THROW(bad.validate(ds.descriptor), ValidationError);

    bad = ds.trials;
    bad.data.at3(0, 0, 0) = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW(bad.validate(ds.descriptor), ValidationError);

    bad = ds.trials;
    bad.dataset_id = "wrong";
    EXPECT_THROW(bad.validate(ds.descriptor), ValidationError);

    DatasetDescriptor dup = ds.descriptor;
    dup.channel_names = {"C3", "C3", "C4"};
    EXPECT_THROW(dup.validate(), ValidationError);
}
