#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "photondfa/rng.hpp"
#include "photondfa/stats.hpp"
#include "photondfa/tensor.hpp"

namespace photondfa {

class degenerate_anchor_error : public std::runtime_error {
public:
    explicit degenerate_anchor_error(const std::string& what) : std::runtime_error(what) {}
};

// Complex Gaussian scattering matrix. Real and imaginary parts are i.i.d.
// N(0, 1/2) so each complex entry has unit variance; everything is
// reproducible from (rows, cols, seed).
struct TransmissionMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::uint64_t seed = 0;
    Tensor real_part;  // rows x cols
    Tensor imag_part;  // rows x cols
};

namespace detail {
constexpr std::uint64_t kTagTmReal = 0x746d5265ULL;
constexpr std::uint64_t kTagTmImag = 0x746d496dULL;
constexpr std::uint64_t kTagAnchor = 0x616e6368ULL;
constexpr std::uint64_t kTagTmNoise = 0x746d4e6fULL;
constexpr std::uint64_t kTagDrift = 0x64726674ULL;
constexpr std::uint64_t kTagFrame = 0x6672616dULL;
}  // namespace detail

inline TransmissionMatrix sample_transmission_matrix(std::size_t rows, std::size_t cols,
                                                     std::uint64_t seed) {
    if (rows == 0 || cols == 0) {
        throw shape_error("sample_transmission_matrix: zero dimension (" + std::to_string(rows) +
                          " x " + std::to_string(cols) + ")");
    }
    TransmissionMatrix tm;
    tm.rows = rows;
    tm.cols = cols;
    tm.seed = seed;
    tm.real_part = Tensor::matrix(rows, cols);
    tm.imag_part = Tensor::matrix(rows, cols);
    const double stddev = std::sqrt(0.5);
    fill_gaussian(tm.real_part.values(), mix_seed(seed, detail::kTagTmReal), 0.0, stddev);
    fill_gaussian(tm.imag_part.values(), mix_seed(seed, detail::kTagTmImag), 0.0, stddev);
    return tm;
}

// Fixed binary reference input, ~50% ones.
struct AnchorVector {
    Tensor r;  // length cols, entries 0/1
    std::uint64_t seed = 0;
};

inline AnchorVector make_anchor(std::size_t cols, std::uint64_t seed) {
    AnchorVector a;
    a.seed = seed;
    a.r = Tensor({cols});
    for (std::uint64_t attempt = 0;; ++attempt) {
        auto engine = make_engine(mix_seed(seed, detail::kTagAnchor, attempt));
        std::uniform_real_distribution<double> u(0.0, 1.0);
        std::size_t ones = 0;
        for (std::size_t j = 0; j < cols; ++j) {
            a.r[j] = u(engine) < 0.5 ? 1.0 : 0.0;
            ones += a.r[j] > 0.0 ? 1 : 0;
        }
        if (ones > 0) return a;
    }
}

// Camera intensities |T x|^2, noiseless. Session-level measurements add the
// configured camera noise on top (see OpuSession::measure_frame).
inline Tensor intensity_measure(const TransmissionMatrix& tm, const Tensor& x) {
    if (x.rank() != 1 || x.size() != tm.cols) {
        throw shape_error("intensity_measure: input " + x.shape_string() + " vs matrix cols " +
                          std::to_string(tm.cols));
    }
    Tensor out({tm.rows});
    for (std::size_t i = 0; i < tm.rows; ++i) {
        const double* re = tm.real_part.data() + i * tm.cols;
        const double* im = tm.imag_part.data() + i * tm.cols;
        double acc_re = 0.0, acc_im = 0.0;
        for (std::size_t j = 0; j < tm.cols; ++j) {
            acc_re += re[j] * x[j];
            acc_im += im[j] * x[j];
        }
        out[i] = acc_re * acc_re + acc_im * acc_im;
    }
    return out;
}

enum class NoiseKind { none, tm_noise, measurement_noise, drift };

inline const char* to_string(NoiseKind k) {
    switch (k) {
        case NoiseKind::none: return "none";
        case NoiseKind::tm_noise: return "tm_noise";
        case NoiseKind::measurement_noise: return "measurement_noise";
        case NoiseKind::drift: return "drift";
    }
    return "?";
}

inline NoiseKind noise_kind_from_string(const std::string& s) {
    if (s == "none") return NoiseKind::none;
    if (s == "tm_noise") return NoiseKind::tm_noise;
    if (s == "measurement_noise") return NoiseKind::measurement_noise;
    if (s == "drift") return NoiseKind::drift;
    throw std::invalid_argument("unknown noise kind: " + s);
}

// sigma == 0 must behave bit-identically to kind none: no generator is ever
// advanced in that case.
struct NoiseSpec {
    NoiseKind kind = NoiseKind::none;
    double sigma = 0.0;
    std::uint64_t seed = 0;

    bool active() const { return kind != NoiseKind::none && sigma > 0.0; }
};

struct LatencyModel {
    double seconds_per_projection = 1.0 / 340.0;  // one camera frame at 340 Hz
    std::uint32_t projections_per_signal = 4;     // two linear recoveries, two fresh frames each
};

// Ternary DMD encoding of an error vector: e is normalized by max|e_i|
// (scale, re-applied after projection) and split into disjoint binary
// supports around the threshold.
struct TernaryCode {
    Tensor e_plus;
    Tensor e_minus;
    double threshold = 0.0;
    double scale = 1.0;
};

inline TernaryCode ternarize(const Tensor& e, double threshold) {
    TernaryCode code;
    code.threshold = threshold;
    code.scale = max_abs(e);
    if (code.scale == 0.0) code.scale = 1.0;
    code.e_plus = Tensor({e.size()});
    code.e_minus = Tensor({e.size()});
    for (std::size_t i = 0; i < e.size(); ++i) {
        const double v = e[i] / code.scale;
        if (threshold > 0.0) {
            if (v >= threshold) code.e_plus[i] = 1.0;
            else if (v <= -threshold) code.e_minus[i] = 1.0;
        } else {
            // t = 0 keeps exact zeros out of both supports
            if (v > 0.0) code.e_plus[i] = 1.0;
            else if (v < 0.0) code.e_minus[i] = 1.0;
        }
    }
    return code;
}

// Simulated optical processor session: scattering matrix, anchor, noise
// state, threshold, and the latency ledger. Exclusively owned while
// projecting feedback.
class OpuSession {
public:
    OpuSession(std::size_t rows, std::size_t cols, std::uint64_t tm_seed,
               std::uint64_t anchor_seed, NoiseSpec noise = {}, LatencyModel latency = {})
        : tm_(sample_transmission_matrix(rows, cols, tm_seed)),
          noise_(noise),
          latency_(latency) {
        // Re-draw automatically until no anchor pixel is degenerate.
        for (std::uint64_t k = 0;; ++k) {
            anchor_ = make_anchor(cols, anchor_seed + k);
            anchor_intensity_ = intensity_measure(tm_, anchor_.r);
            if (min_anchor_intensity() >= kDegenerateIntensity) break;
        }
    }

    const TransmissionMatrix& tm() const { return tm_; }
    const AnchorVector& anchor() const { return anchor_; }
    const Tensor& anchor_intensity() const { return anchor_intensity_; }
    const NoiseSpec& noise() const { return noise_; }
    const LatencyModel& latency() const { return latency_; }
    std::size_t rows() const { return tm_.rows; }
    std::size_t cols() const { return tm_.cols; }

    double threshold() const { return threshold_; }
    bool has_threshold() const { return threshold_ >= 0.0; }
    void set_threshold(double t) {
        if (t < 0.0) throw std::invalid_argument("threshold must be non-negative");
        threshold_ = t;
    }

    std::uint64_t step_counter() const { return step_counter_; }

    // Simulated optical time is exact ledger arithmetic, never a float
    // accumulation: frames = steps * projections_per_signal.
    double optical_seconds() const {
        return static_cast<double>(step_counter_) *
               static_cast<double>(latency_.projections_per_signal) *
               latency_.seconds_per_projection;
    }

    // T(0) plus a fresh perturbation, resampled every training step; the
    // stored matrix is never mutated by this kind of noise.
    TransmissionMatrix noisy_tm_view() const {
        if (noise_.kind != NoiseKind::tm_noise) {
            throw std::logic_error("noisy_tm_view requires tm_noise");
        }
        TransmissionMatrix view = tm_;
        if (noise_.sigma > 0.0) {
            add_scaled_gaussian(view.real_part,
                                mix_seed(noise_.seed, detail::kTagTmNoise, step_counter_ * 2));
            add_scaled_gaussian(view.imag_part,
                                mix_seed(noise_.seed, detail::kTagTmNoise, step_counter_ * 2 + 1));
        }
        return view;
    }

    // Permanent drift T(t) = T(t-1) + Sigma(t); the anchor cache is rebuilt
    // against the drifted matrix.
    void drift_step() {
        if (noise_.kind != NoiseKind::drift) {
            throw std::logic_error("drift_step requires drift noise");
        }
        if (noise_.sigma == 0.0) return;
        add_scaled_gaussian(tm_.real_part, mix_seed(noise_.seed, detail::kTagDrift, drift_counter_ * 2));
        add_scaled_gaussian(tm_.imag_part,
                            mix_seed(noise_.seed, detail::kTagDrift, drift_counter_ * 2 + 1));
        drift_counter_ += 1;
        anchor_intensity_ = intensity_measure(tm_, anchor_.r);
    }

    // Linear random projection recovered from three intensity patterns
    // (anchor cached, input and anchor-minus-input fresh):
    //   s_i = (I_r + I_e - I_{r-e}) / (2 sqrt(I_r))
    // Accepts raw real inputs (validation mode) as well as binary/ternary
    // encoder vectors. Does not touch the step counter or the ledger.
    Tensor linear_project(const Tensor& e) { return project_linear_internal(e); }

    // One ternarized feedback signal: two linear recoveries (e+, e-)
    // combined as s = s(e+) - s(e-). By default the normalization removed in
    // ternarize is NOT restored: the feedback is direction-only, which is
    // what makes the direction-based threshold objective meaningful. Setting
    // rescale_feedback re-applies the stored scale.
    // Advances the step counter and accrues simulated optical time.
    Tensor project_feedback(const Tensor& e) {
        if (!has_threshold()) {
            throw std::logic_error("project_feedback: threshold not selected");
        }
        if (noise_.kind == NoiseKind::drift && noise_.sigma > 0.0) drift_step();
        const TernaryCode code = ternarize(e, threshold_);
        Tensor s_plus = project_linear_internal(code.e_plus);
        Tensor s_minus = project_linear_internal(code.e_minus);
        const double factor = rescale_feedback_ ? code.scale : 1.0;
        Tensor s({rows()});
        for (std::size_t i = 0; i < s.size(); ++i) {
            s[i] = (s_plus[i] - s_minus[i]) * factor;
        }
        step_counter_ += 1;
        return s;
    }

    bool rescale_feedback() const { return rescale_feedback_; }
    void set_rescale_feedback(bool v) { rescale_feedback_ = v; }

    double min_anchor_intensity() const {
        double m = anchor_intensity_[0];
        for (std::size_t i = 0; i < anchor_intensity_.size(); ++i) {
            m = std::min(m, anchor_intensity_[i]);
        }
        return m;
    }

    static constexpr double kDegenerateIntensity = 1e-12;

private:
    // sigma * standard normal, so a fixed seed gives perturbations exactly
    // proportional to sigma (drift calibration bisects over sigma).
    void add_scaled_gaussian(Tensor& t, std::uint64_t seed) const {
        auto engine = make_engine(seed);
        std::normal_distribution<double> dist(0.0, 1.0);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] += noise_.sigma * dist(engine);
    }

    // Every camera frame consumes one slot of the session-wide frame
    // counter, so measurement noise is fresh per frame yet the whole call
    // sequence replays bit-identically.
    Tensor measure_frame(const TransmissionMatrix& view, const Tensor& x) {
        Tensor intensity = intensity_measure(view, x);
        frame_counter_ += 1;
        if (noise_.kind == NoiseKind::measurement_noise && noise_.sigma > 0.0) {
            auto engine = make_engine(mix_seed(noise_.seed, detail::kTagFrame, frame_counter_));
            std::normal_distribution<double> dist(0.0, 1.0);
            for (std::size_t i = 0; i < intensity.size(); ++i) {
                intensity[i] = std::max(0.0, intensity[i] + noise_.sigma * dist(engine));
            }
        }
        return intensity;
    }

    Tensor project_linear_internal(const Tensor& e) {
        if (e.rank() != 1 || e.size() != cols()) {
            throw shape_error("linear_project: input " + e.shape_string() + " vs cols " +
                              std::to_string(cols()));
        }
        if (min_anchor_intensity() < kDegenerateIntensity) {
            throw degenerate_anchor_error(
                "anchor intensity below 1e-12; re-seed the session anchor");
        }
        const bool noisy_view = noise_.kind == NoiseKind::tm_noise && noise_.sigma > 0.0;
        const TransmissionMatrix view = noisy_view ? noisy_tm_view() : TransmissionMatrix{};
        const TransmissionMatrix& m = noisy_view ? view : tm_;

        Tensor diff({cols()});
        for (std::size_t j = 0; j < cols(); ++j) diff[j] = anchor_.r[j] - e[j];
        Tensor intensity_e = measure_frame(m, e);
        Tensor intensity_diff = measure_frame(m, diff);

        Tensor s({rows()});
        for (std::size_t i = 0; i < s.size(); ++i) {
            const double ir = anchor_intensity_[i];
            s[i] = (ir + intensity_e[i] - intensity_diff[i]) / (2.0 * std::sqrt(ir));
        }
        return s;
    }

    TransmissionMatrix tm_;
    AnchorVector anchor_;
    Tensor anchor_intensity_;
    NoiseSpec noise_;
    LatencyModel latency_;
    double threshold_ = -1.0;
    bool rescale_feedback_ = false;
    std::uint64_t step_counter_ = 0;
    std::uint64_t drift_counter_ = 0;
    std::uint64_t frame_counter_ = 0;

    friend struct OpuSessionAccess;
};

// Restore hook used by checkpoint loading: rebuilds a session around an
// already-drifted matrix and its counters.
struct OpuSessionAccess {
    static std::uint64_t drift_counter(const OpuSession& s) { return s.drift_counter_; }
    static std::uint64_t frame_counter(const OpuSession& s) { return s.frame_counter_; }

    static void restore(OpuSession& s, TransmissionMatrix tm, double threshold,
                        std::uint64_t step_counter, std::uint64_t drift_counter,
                        std::uint64_t frame_counter) {
        s.tm_ = std::move(tm);
        s.anchor_intensity_ = intensity_measure(s.tm_, s.anchor_.r);
        s.threshold_ = threshold;
        s.step_counter_ = step_counter;
        s.drift_counter_ = drift_counter;
        s.frame_counter_ = frame_counter;
    }
};

// Threshold grid search shared by the optical and the digital paths: the
// projector is any linear map of the error vector.
inline double select_threshold(const Tensor& e0,
                               const std::function<Tensor(const Tensor&)>& projector,
                               double* best_similarity = nullptr) {
    const double scale = max_abs(e0);
    if (scale == 0.0) {
        throw std::invalid_argument("select_threshold: zero first-step error");
    }
    Tensor e0_normalized = e0;
    scale_inplace(e0_normalized, 1.0 / scale);
    const Tensor s_dfa = projector(e0_normalized);

    double best_t = 0.0;
    double best_cos = -2.0;
    for (int k = 0; k <= 100; ++k) {
        const double t = static_cast<double>(k) / 100.0;
        const TernaryCode code = ternarize(e0, t);
        Tensor ternary({e0.size()});
        bool any = false;
        for (std::size_t i = 0; i < ternary.size(); ++i) {
            ternary[i] = code.e_plus[i] - code.e_minus[i];
            any = any || ternary[i] != 0.0;
        }
        if (!any) continue;
        const Tensor s_t = projector(ternary);
        double c;
        try {
            c = cosine_similarity(s_dfa, s_t);
        } catch (const std::domain_error&) {
            continue;
        }
        if (c > best_cos) {  // ties keep the smaller t
            best_cos = c;
            best_t = t;
        }
    }
    if (best_cos < -1.5) {
        throw std::runtime_error("select_threshold: no grid point produced a usable code");
    }
    if (best_similarity) *best_similarity = best_cos;
    return best_t;
}

// Optical variant: DFA reference and TDFA candidates are both projected
// through the session in validation mode, then the winner is stored on the
// session.
inline double select_threshold(const Tensor& e0, OpuSession& session,
                               double* best_similarity = nullptr) {
    const double t = select_threshold(
        e0, [&session](const Tensor& v) { return session.linear_project(v); }, best_similarity);
    session.set_threshold(t);
    return t;
}

// Column-by-column onehot probes of the effective real projection matrix
// T_eff with T_eff[i][j] = Re(conj(u_i) T~_ij); only used by oracles and
// diagnostics, never by the training path.
inline Tensor probe_effective_matrix(OpuSession& session) {
    Tensor t_eff = Tensor::matrix(session.rows(), session.cols());
    Tensor onehot({session.cols()});
    for (std::size_t j = 0; j < session.cols(); ++j) {
        onehot.fill(0.0);
        onehot[j] = 1.0;
        const Tensor col = session.linear_project(onehot);
        for (std::size_t i = 0; i < session.rows(); ++i) t_eff(i, j) = col[i];
    }
    return t_eff;
}

struct StabilityPoint {
    std::uint64_t step;
    double pcc;
};

// Drift-stability protocol: repeatedly drift the matrix and correlate the
// projected probe against its t=0 projection.
inline std::vector<StabilityPoint> stability_trace(OpuSession& session, const Tensor& probe,
                                                   std::uint64_t steps, std::uint64_t stride) {
    if (max_abs(probe) == 0.0) {
        throw std::invalid_argument("stability_trace: zero probe");
    }
    if (stride == 0) stride = 1;
    const Tensor s0 = session.linear_project(probe);
    std::vector<StabilityPoint> out;
    for (std::uint64_t step = 1; step <= steps; ++step) {
        session.drift_step();
        if (step % stride == 0) {
            const Tensor st = session.linear_project(probe);
            double pcc;
            try {
                pcc = pearson_correlation(st, s0);
            } catch (const undefined_correlation&) {
                pcc = 1.0;  // sigma = 0 keeps s(t) == s(0) even for constant probes
            }
            out.push_back({step, pcc});
        }
    }
    return out;
}

// Final-PCC value of the drift protocol for a given sigma, with everything
// else (seeds, probe, step budget) held fixed.
inline double drift_final_pcc(std::size_t rows, std::size_t cols, std::uint64_t tm_seed,
                              std::uint64_t anchor_seed, std::uint64_t noise_seed, double sigma,
                              const Tensor& probe, std::uint64_t steps) {
    NoiseSpec spec{NoiseKind::drift, sigma, noise_seed};
    OpuSession session(rows, cols, tm_seed, anchor_seed, spec);
    const Tensor s0 = session.linear_project(probe);
    for (std::uint64_t i = 0; i < steps; ++i) session.drift_step();
    const Tensor st = session.linear_project(probe);
    return pearson_correlation(st, s0);
}

// Bisection on sigma against the drift protocol above. The perturbations are
// sigma times fixed standard normals, so the final PCC is continuous and
// decreasing in sigma and the bracket [0, hi] always contains the target.
inline double calibrate_drift_sigma(std::size_t rows, std::size_t cols, std::uint64_t tm_seed,
                                    std::uint64_t anchor_seed, std::uint64_t noise_seed,
                                    const Tensor& probe, std::uint64_t steps, double target_pcc,
                                    double tolerance = 0.01) {
    double lo = 0.0;
    double hi = 1.0;
    auto pcc_at = [&](double sigma) {
        return drift_final_pcc(rows, cols, tm_seed, anchor_seed, noise_seed, sigma, probe, steps);
    };
    while (pcc_at(hi) > target_pcc) {
        hi *= 2.0;
        if (hi > 1e6) throw std::runtime_error("calibrate_drift_sigma: target unreachable");
    }
    for (int iter = 0; iter < 60; ++iter) {
        const double mid = 0.5 * (lo + hi);
        const double pcc = pcc_at(mid);
        if (std::fabs(pcc - target_pcc) < tolerance) return mid;
        if (pcc > target_pcc) lo = mid;
        else hi = mid;
    }
    return 0.5 * (lo + hi);
}

}  // namespace photondfa
