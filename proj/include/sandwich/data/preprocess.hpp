#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <numeric>
#include <optional>
#include <vector>

#include "sandwich/core/errors.hpp"
#include "sandwich/data/dataset.hpp"

namespace sandwich {

struct PreprocessConfig {
    double band_lo_hz = 4.0;
    double band_hi_hz = 32.0;
    int filter_order = 5;
    double target_rate_hz = 200.0;
    double window_s = 3.0;
    std::optional<int> balance_target = 2880;

    void validate() const {
        if (filter_order < 1) throw ConfigError("preprocess: filter_order must be >= 1");
        if (window_s <= 0.0) throw ConfigError("preprocess: window_s must be positive");
        if (!(0.0 < band_lo_hz && band_lo_hz < band_hi_hz))
            throw ConfigError("preprocess: need 0 < band_lo < band_hi");
        if (band_hi_hz >= target_rate_hz / 2.0)
            throw ConfigError("preprocess: band_hi " + std::to_string(band_hi_hz) +
                              " Hz reaches Nyquist at rate " + std::to_string(target_rate_hz));
        if (balance_target && *balance_target <= 0)
            throw ConfigError("preprocess: balance_target must be positive");
    }
};

namespace dsp {

struct Sos {
    // b0 + b1 z^-1 + b2 z^-2 over 1 + a1 z^-1 + a2 z^-2
    double b0, b1, b2, a1, a2;
};

// Butterworth bandpass as second-order sections: analog lowpass prototype,
// prewarped band edges, lowpass-to-bandpass mapping, bilinear transform.
// Each section carries one zero at z=1 and one at z=-1; the first section is
// scaled so the cascade has unit gain at the geometric center frequency.
inline std::vector<Sos> butter_bandpass(int order, double lo_hz, double hi_hz, double fs) {
    if (hi_hz >= fs / 2.0) throw ConfigError("butter_bandpass: band edge at or above Nyquist");
    using cd = std::complex<double>;
    const double fs2 = 2.0 * fs;
    const double w1 = fs2 * std::tan(M_PI * lo_hz / fs);
    const double w2 = fs2 * std::tan(M_PI * hi_hz / fs);
    const double bw = w2 - w1;
    const double w0 = std::sqrt(w1 * w2);

    std::vector<cd> zpoles;
    zpoles.reserve(static_cast<std::size_t>(2 * order));
    for (int k = 0; k < order; ++k) {
        const double theta = M_PI * (2.0 * k + order + 1.0) / (2.0 * order);
        const cd p(std::cos(theta), std::sin(theta));
        const cd pb = p * bw;
        const cd disc = std::sqrt(pb * pb - 4.0 * w0 * w0);
        for (const cd s : {(pb + disc) / 2.0, (pb - disc) / 2.0})
            zpoles.push_back((fs2 + s) / (fs2 - s));
    }
    // Pair each complex pole with its conjugate and real poles with each
    // other; the sort keeps section order deterministic.
    constexpr double kImagTol = 1e-9;
    std::vector<cd> upper;
    std::vector<double> reals;
    for (const cd& p : zpoles) {
        if (p.imag() > kImagTol)
            upper.push_back(p);
        else if (p.imag() >= -kImagTol)
            reals.push_back(p.real());
    }
    std::sort(upper.begin(), upper.end(), [](const cd& a, const cd& b) {
        return a.real() != b.real() ? a.real() < b.real() : a.imag() < b.imag();
    });
    std::sort(reals.begin(), reals.end());
    if (upper.size() * 2 + reals.size() != zpoles.size() || reals.size() % 2 != 0)
        throw EstimationError("butter_bandpass: inconsistent pole set");
    std::vector<Sos> sos;
    for (const cd& p : upper)
        sos.push_back({1.0, 0.0, -1.0, -2.0 * p.real(), std::norm(p)});
    for (std::size_t i = 0; i + 1 < reals.size(); i += 2)
        sos.push_back({1.0, 0.0, -1.0, -(reals[i] + reals[i + 1]), reals[i] * reals[i + 1]});
    // Normalize to unit gain where the analog center frequency lands digitally.
    const double wc = 2.0 * std::atan(w0 / fs2);
    const cd z = std::polar(1.0, wc);
    const cd zi = 1.0 / z;
    cd h(1.0, 0.0);
    for (const auto& s : sos)
        h *= (s.b0 + s.b1 * zi + s.b2 * zi * zi) / (1.0 + s.a1 * zi + s.a2 * zi * zi);
    const double g = std::abs(h);
    if (g < 1e-30) throw EstimationError("butter_bandpass: degenerate center-frequency gain");
    sos.front().b0 /= g;
    sos.front().b1 /= g;
    sos.front().b2 /= g;
    return sos;
}

// Transposed direct form II cascade. Each section starts in the steady state
// it would have reached under a constant input equal to the first sample.
inline void sos_filter_inplace(const std::vector<Sos>& sos, std::vector<double>& x) {
    if (x.empty()) return;
    double level = x.front();
    for (const auto& s : sos) {
        const double dc = (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
        double z1 = (s.b1 + s.b2) * level - (s.a1 + s.a2) * dc * level;
        double z2 = s.b2 * level - s.a2 * dc * level;
        for (double& v : x) {
            const double in = v;
            const double out = s.b0 * in + z1;
            z1 = s.b1 * in - s.a1 * out + z2;
            z2 = s.b2 * in - s.a2 * out;
            v = out;
        }
        level *= dc;
    }
}

inline std::size_t settle_samples(const std::vector<Sos>& sos) {
    double pmax = 0.0;
    for (const auto& s : sos) {
        // section pole radius from the characteristic polynomial
        const double d = s.a1 * s.a1 - 4.0 * s.a2;
        if (d >= 0.0) {
            pmax = std::max({pmax, std::abs((-s.a1 + std::sqrt(d)) / 2.0),
                             std::abs((-s.a1 - std::sqrt(d)) / 2.0)});
        } else {
            pmax = std::max(pmax, std::sqrt(s.a2));
        }
    }
    if (pmax >= 1.0) throw EstimationError("filtfilt: unstable section");
    if (pmax <= 0.0) return 8;
    return static_cast<std::size_t>(std::ceil(std::log(1e-6) / std::log(pmax))) + 1;
}

// Zero-phase filtering: odd-reflection padding sized to the slowest pole's
// decay, forward pass, reversed pass, padding stripped.
inline std::vector<double> filtfilt(const std::vector<Sos>& sos, const std::vector<double>& x) {
    const std::size_t n = x.size();
    if (n == 0) return {};
    const std::size_t pad = std::min(n > 1 ? n - 1 : 0,
                                     std::max(static_cast<std::size_t>(3 * (2 * sos.size() + 1)),
                                              settle_samples(sos)));
    std::vector<double> ext;
    ext.reserve(n + 2 * pad);
    for (std::size_t i = 0; i < pad; ++i) ext.push_back(2.0 * x.front() - x[pad - i]);
    ext.insert(ext.end(), x.begin(), x.end());
    for (std::size_t i = 0; i < pad; ++i) ext.push_back(2.0 * x.back() - x[n - 2 - i]);
    sos_filter_inplace(sos, ext);
    std::reverse(ext.begin(), ext.end());
    sos_filter_inplace(sos, ext);
    std::reverse(ext.begin(), ext.end());
    return std::vector<double>(ext.begin() + static_cast<std::ptrdiff_t>(pad),
                               ext.begin() + static_cast<std::ptrdiff_t>(pad + n));
}

inline double kaiser_i0(double x) {
    // modified Bessel I0 by series; converges fast for the beta range used here
    double sum = 1.0, term = 1.0;
    for (int k = 1; k < 64; ++k) {
        term *= (x / (2.0 * k)) * (x / (2.0 * k));
        sum += term;
        if (term < 1e-16 * sum) break;
    }
    return sum;
}

// Polyphase rational resampler, downsampling only. Kaiser-windowed sinc,
// each polyphase branch normalized to unit DC gain.
struct Resampler {
    int L, M;
    std::vector<double> h;  // length taps, gain L folded in
    int delay;

    Resampler(double from_hz, double to_hz) {
        auto as_int = [](double v) {
            const double r = std::round(v);
            if (std::abs(v - r) > 1e-9 || r <= 0.0)
                throw UnsupportedError("resample: rates must be positive integers, got " + std::to_string(v));
            return static_cast<int>(r);
        };
        const int from = as_int(from_hz), to = as_int(to_hz);
        if (to > from) throw UnsupportedError("resample: upsampling not supported (" + std::to_string(from) +
                                              " -> " + std::to_string(to) + " Hz)");
        const int g = std::gcd(from, to);
        L = to / g;
        M = from / g;
        const int half = 10 * std::max(L, M);
        const int taps = 2 * half + 1;
        delay = half;
        h.resize(static_cast<std::size_t>(taps));
        const double beta = 5.0;
        const double cutoff = 1.0 / std::max(L, M);  // fraction of Nyquist at rate from*L
        const double i0b = kaiser_i0(beta);
        for (int i = 0; i < taps; ++i) {
            const int k = i - half;
            const double t = M_PI * cutoff * k;
            const double sinc = (k == 0) ? 1.0 : std::sin(t) / t;
            const double r = static_cast<double>(k) / half;
            const double w = kaiser_i0(beta * std::sqrt(std::max(0.0, 1.0 - r * r))) / i0b;
            h[static_cast<std::size_t>(i)] = cutoff * sinc * w;
        }
        for (int phase = 0; phase < L; ++phase) {
            double s = 0.0;
            for (int i = phase; i < taps; i += L) s += h[static_cast<std::size_t>(i)];
            if (std::abs(s) < 1e-12) throw EstimationError("resample: degenerate polyphase branch");
            for (int i = phase; i < taps; i += L) h[static_cast<std::size_t>(i)] /= s;
        }
    }

    std::vector<double> apply(const std::vector<double>& x) const {
        const std::int64_t n = static_cast<std::int64_t>(x.size());
        const std::int64_t out_n = n * L / M;
        std::vector<double> y(static_cast<std::size_t>(out_n), 0.0);
        const int taps = static_cast<int>(h.size());
        for (std::int64_t j = 0; j < out_n; ++j) {
            const std::int64_t center = j * M + delay;  // position on the upsampled grid
            double acc = 0.0;
            for (int i = static_cast<int>(center % L); i < taps; i += L) {
                const std::int64_t xi = (center - i) / L;
                if (xi < 0) break;
                if (xi < n) acc += h[static_cast<std::size_t>(i)] * x[static_cast<std::size_t>(xi)];
            }
            y[static_cast<std::size_t>(j)] = acc;
        }
        return y;
    }
};

}  // namespace dsp

namespace detail {

template <typename Fn>
TrialTensor map_channels(const TrialTensor& trials, int out_samples, Fn&& fn) {
    TrialTensor out;
    out.labels = trials.labels;
    out.subject_index = trials.subject_index;
    out.dataset_id = trials.dataset_id;
    out.data = Tensorf({trials.n_trials(), trials.n_channels(), out_samples});
    std::vector<double> buf(static_cast<std::size_t>(trials.n_samples()));
    for (int t = 0; t < trials.n_trials(); ++t)
        for (int c = 0; c < trials.n_channels(); ++c) {
            const float* src = &trials.data.at3(t, c, 0);
            for (int i = 0; i < trials.n_samples(); ++i) buf[static_cast<std::size_t>(i)] = src[i];
            const std::vector<double> res = fn(buf);
            if (static_cast<int>(res.size()) != out_samples)
                throw ShapeError("preprocess: channel transform length mismatch");
            float* dst = &out.data.at3(t, c, 0);
            for (int i = 0; i < out_samples; ++i) dst[i] = static_cast<float>(res[static_cast<std::size_t>(i)]);
        }
    return out;
}

}  // namespace detail

inline TrialTensor bandpass(const TrialTensor& trials, double rate_hz, const PreprocessConfig& cfg) {
    cfg.validate();
    if (cfg.band_hi_hz >= rate_hz / 2.0)
        throw ConfigError("bandpass: band_hi " + std::to_string(cfg.band_hi_hz) +
                          " Hz reaches Nyquist at rate " + std::to_string(rate_hz));
    const auto sos = dsp::butter_bandpass(cfg.filter_order, cfg.band_lo_hz, cfg.band_hi_hz, rate_hz);
    return detail::map_channels(trials, trials.n_samples(),
                                [&](const std::vector<double>& x) { return dsp::filtfilt(sos, x); });
}

inline TrialTensor resample(const TrialTensor& trials, double from_hz, double to_hz) {
    if (from_hz == to_hz) return trials;
    if (to_hz > from_hz) throw UnsupportedError("resample: upsampling not supported");
    const dsp::Resampler rs(from_hz, to_hz);
    const int out_n = static_cast<int>(static_cast<std::int64_t>(trials.n_samples()) * rs.L / rs.M);
    return detail::map_channels(trials, out_n,
                                [&](const std::vector<double>& x) { return rs.apply(x); });
}

inline TrialTensor window(const TrialTensor& trials, double window_s, double rate_hz) {
    const int want = static_cast<int>(std::floor(window_s * rate_hz));
    if (want < 1) throw ValidationError("window: empty window");
    if (trials.n_samples() < want)
        throw ValidationError("window: trials of " + std::to_string(trials.n_samples()) +
                              " samples shorter than " + std::to_string(want) + "-sample window");
    if (trials.n_samples() == want) return trials;
    TrialTensor out;
    out.labels = trials.labels;
    out.subject_index = trials.subject_index;
    out.dataset_id = trials.dataset_id;
    out.data = Tensorf({trials.n_trials(), trials.n_channels(), want});
    for (int t = 0; t < trials.n_trials(); ++t)
        for (int c = 0; c < trials.n_channels(); ++c) {
            const float* src = &trials.data.at3(t, c, 0);
            std::copy(src, src + want, &out.data.at3(t, c, 0));
        }
    return out;
}

// Standardizes each trial across the channel axis (per time step), then
// across the time axis (per channel). Zero-variance axes collapse to zero via
// the epsilon guard instead of dividing by zero.
inline TrialTensor normalize(const TrialTensor& trials) {
    constexpr double kEps = 1e-8;
    TrialTensor out = trials;
    const int C = trials.n_channels(), S = trials.n_samples();
    for (int t = 0; t < trials.n_trials(); ++t) {
        for (int i = 0; i < S; ++i) {
            double mean = 0.0;
            for (int c = 0; c < C; ++c) mean += out.data.at3(t, c, i);
            mean /= C;
            double var = 0.0;
            for (int c = 0; c < C; ++c) {
                const double d = out.data.at3(t, c, i) - mean;
                var += d * d;
            }
            const double inv = 1.0 / (std::sqrt(var / C) + kEps);
            for (int c = 0; c < C; ++c)
                out.data.at3(t, c, i) = static_cast<float>((out.data.at3(t, c, i) - mean) * inv);
        }
        for (int c = 0; c < C; ++c) {
            float* row = &out.data.at3(t, c, 0);
            double mean = 0.0;
            for (int i = 0; i < S; ++i) mean += row[i];
            mean /= S;
            double var = 0.0;
            for (int i = 0; i < S; ++i) {
                const double d = row[i] - mean;
                var += d * d;
            }
            const double inv = 1.0 / (std::sqrt(var / S) + kEps);
            for (int i = 0; i < S; ++i) row[i] = static_cast<float>((row[i] - mean) * inv);
        }
    }
    return out;
}

// Cyclic duplication up to `target` (preserving order and subject_index), or
// truncation to the first `target` trials.
inline TrialTensor balance(const TrialTensor& trials, int target) {
    if (target <= 0) throw ConfigError("balance: target must be positive");
    const int n = trials.n_trials();
    if (n < 1) throw ValidationError("balance: no trials");
    if (n == target) return trials;
    TrialTensor out;
    out.dataset_id = trials.dataset_id;
    out.data = Tensorf({target, trials.n_channels(), trials.n_samples()});
    const std::int64_t sz = static_cast<std::int64_t>(trials.n_channels()) * trials.n_samples();
    out.labels.resize(static_cast<std::size_t>(target));
    out.subject_index.resize(static_cast<std::size_t>(target));
    for (int i = 0; i < target; ++i) {
        const int src = i % n;
        std::copy(&trials.data[src * sz], &trials.data[src * sz] + sz, &out.data[i * sz]);
        out.labels[static_cast<std::size_t>(i)] = trials.labels[static_cast<std::size_t>(src)];
        out.subject_index[static_cast<std::size_t>(i)] = trials.subject_index[static_cast<std::size_t>(src)];
    }
    return out;
}

// Mean squared amplitude per channel minus the cross-channel mean; sums to 0.
inline std::vector<double> power_topomap(const TrialTensor& trials) {
    if (trials.n_trials() < 1) throw ValidationError("power_topomap: no trials");
    const int C = trials.n_channels(), S = trials.n_samples();
    std::vector<double> power(static_cast<std::size_t>(C), 0.0);
    for (int t = 0; t < trials.n_trials(); ++t)
        for (int c = 0; c < C; ++c) {
            const float* row = &trials.data.at3(t, c, 0);
            double acc = 0.0;
            for (int i = 0; i < S; ++i) acc += static_cast<double>(row[i]) * row[i];
            power[static_cast<std::size_t>(c)] += acc;
        }
    const double denom = static_cast<double>(trials.n_trials()) * S;
    for (auto& p : power) p /= denom;
    const double mean = std::accumulate(power.begin(), power.end(), 0.0) / C;
    for (auto& p : power) p -= mean;
    return power;
}

// Full conditioning pipeline: window on the native rate, resample to the
// target rate, bandpass, normalize. Balancing is a training-set concern and
// is applied separately after any validation split.
inline Dataset preprocess_dataset(const Dataset& ds, const PreprocessConfig& cfg) {
    cfg.validate();
    Dataset out;
    out.descriptor = ds.descriptor;
    TrialTensor t = window(ds.trials, cfg.window_s, ds.descriptor.sampling_rate_hz);
    t = resample(t, ds.descriptor.sampling_rate_hz, cfg.target_rate_hz);
    PreprocessConfig at_rate = cfg;
    t = bandpass(t, cfg.target_rate_hz, at_rate);
    t = normalize(t);
    out.descriptor.sampling_rate_hz = cfg.target_rate_hz;
    out.trials = std::move(t);
    return out;
}

}  // namespace sandwich
