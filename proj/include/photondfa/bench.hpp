#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "photondfa/loss.hpp"
#include "photondfa/mlp.hpp"
#include "photondfa/optimizer.hpp"
#include "photondfa/opu.hpp"
#include "photondfa/train.hpp"

namespace photondfa {

class bench_resume_error : public std::runtime_error {
public:
    explicit bench_resume_error(const std::string& what) : std::runtime_error(what) {}
};

struct ScalingPoint {
    std::size_t width = 0;
    std::size_t depth = 0;
    std::string algorithm;  // bp | dfa | odfa
    double seconds_per_sample = 0.0;
    double forward_seconds = 0.0;
    double feedback_seconds = 0.0;
    double update_seconds = 0.0;
    double optical_seconds = 0.0;
};

struct FitResult {
    std::string model;  // quadratic_in_width | linear_in_depth
    std::vector<double> coefficients;
    double r_squared = 0.0;
};

namespace detail {

// Ordinary least squares through the normal equations; k is small (<= 3).
inline std::vector<double> solve_least_squares(const std::vector<std::vector<double>>& rows,
                                               const std::vector<double>& y) {
    const std::size_t n = rows.size(), k = rows.front().size();
    std::vector<std::vector<double>> ata(k, std::vector<double>(k + 1, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t a = 0; a < k; ++a) {
            for (std::size_t b = 0; b < k; ++b) ata[a][b] += rows[i][a] * rows[i][b];
            ata[a][k] += rows[i][a] * y[i];
        }
    }
    for (std::size_t col = 0; col < k; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < k; ++r) {
            if (std::fabs(ata[r][col]) > std::fabs(ata[pivot][col])) pivot = r;
        }
        if (std::fabs(ata[pivot][col]) < 1e-30) {
            throw std::domain_error("degenerate design matrix in least squares fit");
        }
        std::swap(ata[col], ata[pivot]);
        for (std::size_t r = 0; r < k; ++r) {
            if (r == col) continue;
            const double f = ata[r][col] / ata[col][col];
            for (std::size_t c = col; c <= k; ++c) ata[r][c] -= f * ata[col][c];
        }
    }
    std::vector<double> beta(k);
    for (std::size_t i = 0; i < k; ++i) beta[i] = ata[i][k] / ata[i][i];
    return beta;
}

inline double r_squared(const std::vector<std::vector<double>>& rows,
                        const std::vector<double>& y, const std::vector<double>& beta) {
    double mean_y = 0.0;
    for (double v : y) mean_y += v;
    mean_y /= static_cast<double>(y.size());
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        double pred = 0.0;
        for (std::size_t a = 0; a < beta.size(); ++a) pred += beta[a] * rows[i][a];
        ss_res += (y[i] - pred) * (y[i] - pred);
        ss_tot += (y[i] - mean_y) * (y[i] - mean_y);
    }
    if (ss_tot == 0.0) return ss_res == 0.0 ? 1.0 : 0.0;
    return std::max(0.0, std::min(1.0, 1.0 - ss_res / ss_tot));
}

}  // namespace detail

// Runs the full per-sample training pipeline (forward, error, feedback or
// gradient, update) for a synthetic task of the given geometry and reports
// median-of-3 stage timings. For ODFA the optical stage is the latency-model
// ledger, never wall time; the simulation cost of the projection is kept off
// the clock entirely.
inline ScalingPoint time_training(std::size_t width, std::size_t depth,
                                  const std::string& algorithm, const LatencyModel& latency,
                                  std::size_t samples, std::uint64_t seed = 1) {
    using clock = std::chrono::steady_clock;
    if (width == 0 || depth == 0 || samples == 0) {
        throw std::invalid_argument("time_training: width, depth, samples must be >= 1");
    }
    if (algorithm != "bp" && algorithm != "dfa" && algorithm != "odfa") {
        throw std::invalid_argument("time_training: unknown algorithm " + algorithm);
    }
    constexpr std::size_t kClasses = 10;
    std::vector<std::size_t> dims;
    dims.push_back(width);
    for (std::size_t d = 0; d < depth; ++d) dims.push_back(width);
    dims.push_back(kClasses);

    std::vector<Tensor> inputs;
    std::vector<std::size_t> labels;
    inputs.reserve(samples);
    for (std::size_t i = 0; i < samples; ++i) {
        Tensor x({width});
        fill_gaussian(x.values(), mix_seed(seed, 0xda7aULL, i));
        inputs.push_back(std::move(x));
        labels.push_back(i % kClasses);
    }

    const std::size_t hidden_rows = FeedbackMatrixSet::hidden_rows(dims);

    struct StageTimes {
        double forward = 0, feedback = 0, update = 0, optical = 0;
        double per_sample_total(std::size_t n) const {
            return (forward + feedback + update + optical) / static_cast<double>(n);
        }
    };

    auto run_once = [&](bool warmup) {
        MlpModel model = make_mlp(dims, ActivationKind::tanh, mix_seed(seed, 0x30deULL));
        OptimizerState optimizer(
            OptimizerConfig{OptimizerKind::sgd_momentum, 0.01, 0.9, 0.9, 0.999, 1e-8});
        std::optional<FeedbackMatrixSet> fb;
        std::optional<OpuSession> session;
        if (algorithm == "dfa") {
            fb = FeedbackMatrixSet::gaussian(dims, mix_seed(seed, 0xfbULL));
        } else if (algorithm == "odfa") {
            session.emplace(hidden_rows, kClasses, mix_seed(seed, 0x0974ULL),
                            mix_seed(seed, 0xa9c4ULL), NoiseSpec{}, latency);
            session->set_threshold(0.1);
        }
        const double optical_before = session ? session->optical_seconds() : 0.0;
        StageTimes times;
        const std::size_t n = warmup ? std::min<std::size_t>(samples, 16) : samples;
        for (std::size_t i = 0; i < n; ++i) {
            auto t0 = clock::now();
            const MlpCache cache = forward_mlp(model, inputs[i]);
            auto t1 = clock::now();
            const auto sce = softmax_cross_entropy(cache.activations.back(), labels[i]);
            MlpGradients grads = MlpGradients::zeros_like(model);
            if (algorithm == "bp") {
                grads = backward_bp(model, cache, sce.error);
            } else if (algorithm == "dfa") {
                grads = backward_dfa(model, cache, sce.error, *fb);
            } else {
                // The projection itself stands in for free-running optics;
                // its simulation cost is excluded from the walltime budget
                // and replaced by the latency ledger.
                auto t_mid = clock::now();
                const Tensor s = session->project_feedback(sce.error);
                auto t_after_projection = clock::now();
                grads = backward_dfa_signal(model, cache, sce.error, split_bands(s, dims));
                times.feedback -= std::chrono::duration<double>(t_after_projection - t_mid).count();
            }
            auto t2 = clock::now();
            std::vector<const Tensor*> grad_ptrs;
            for (std::size_t l = 0; l < model.layer_count(); ++l) {
                grad_ptrs.push_back(&grads.weight_grads[l]);
                grad_ptrs.push_back(&grads.bias_grads[l]);
            }
            optimizer.apply_update(model.parameters(), grad_ptrs);
            auto t3 = clock::now();
            times.forward += std::chrono::duration<double>(t1 - t0).count();
            times.feedback += std::chrono::duration<double>(t2 - t1).count();
            times.update += std::chrono::duration<double>(t3 - t2).count();
        }
        times.optical = (session ? session->optical_seconds() : 0.0) - optical_before;
        return times;
    };

    run_once(true);  // warm-up pass
    std::vector<StageTimes> reps;
    for (int rep = 0; rep < 3; ++rep) reps.push_back(run_once(false));
    std::sort(reps.begin(), reps.end(), [&](const StageTimes& a, const StageTimes& b) {
        return a.per_sample_total(samples) < b.per_sample_total(samples);
    });
    const StageTimes& median = reps[1];

    ScalingPoint point;
    point.width = width;
    point.depth = depth;
    point.algorithm = algorithm;
    const double n = static_cast<double>(samples);
    point.forward_seconds = median.forward / n;
    point.feedback_seconds = std::max(0.0, median.feedback) / n;
    point.update_seconds = median.update / n;
    point.optical_seconds = median.optical / n;
    point.seconds_per_sample = point.forward_seconds + point.feedback_seconds +
                               point.update_seconds + point.optical_seconds;
    return point;
}

inline FitResult fit_scaling(const std::vector<ScalingPoint>& points, const std::string& model) {
    if (points.size() < 4) {
        throw std::invalid_argument("fit_scaling: need at least 4 points, got " +
                                    std::to_string(points.size()));
    }
    std::vector<std::vector<double>> rows;
    std::vector<double> y;
    for (const auto& p : points) {
        const double w = static_cast<double>(p.width);
        const double d = static_cast<double>(p.depth);
        if (model == "quadratic_in_width") rows.push_back({w * w, w, 1.0});
        else if (model == "linear_in_depth") rows.push_back({d, 1.0});
        else throw std::invalid_argument("fit_scaling: unknown model " + model);
        y.push_back(p.seconds_per_sample);
    }
    FitResult fit;
    fit.model = model;
    fit.coefficients = detail::solve_least_squares(rows, y);
    fit.r_squared = detail::r_squared(rows, y, fit.coefficients);
    return fit;
}

// Smallest grid point (depth-major, then width) at which ODFA time drops
// below BP; nullopt when it never does.
inline std::optional<std::pair<std::size_t, std::size_t>> find_crossover(
    const std::vector<ScalingPoint>& points_bp, const std::vector<ScalingPoint>& points_odfa) {
    using Key = std::pair<std::size_t, std::size_t>;  // (depth, width)
    std::map<Key, double> bp, odfa;
    for (const auto& p : points_bp) bp[{p.depth, p.width}] = p.seconds_per_sample;
    for (const auto& p : points_odfa) odfa[{p.depth, p.width}] = p.seconds_per_sample;
    if (bp.size() != odfa.size()) {
        throw shape_error("find_crossover: grids differ in size");
    }
    for (const auto& [key, t_bp] : bp) {
        const auto it = odfa.find(key);
        if (it == odfa.end()) throw shape_error("find_crossover: grids do not match");
        if (it->second < t_bp) return std::make_pair(it->first.second, it->first.first);
    }
    return std::nullopt;
}

// --- scan CSV with resume --------------------------------------------------

namespace detail {

inline const char* kScanHeader =
    "width,depth,algorithm,seconds_per_sample,forward_seconds,feedback_seconds,update_seconds,"
    "optical_seconds";

inline std::string format_point(const ScalingPoint& p) {
    char buf[320];
    std::snprintf(buf, sizeof buf, "%zu,%zu,%s,%.17g,%.17g,%.17g,%.17g,%.17g", p.width, p.depth,
                  p.algorithm.c_str(), p.seconds_per_sample, p.forward_seconds,
                  p.feedback_seconds, p.update_seconds, p.optical_seconds);
    return buf;
}

inline ScalingPoint parse_point(const std::string& line, const std::string& path) {
    std::istringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 8) {
        throw bench_resume_error("corrupt scan row in " + path + ": " + line);
    }
    try {
        ScalingPoint p;
        p.width = std::stoul(cells[0]);
        p.depth = std::stoul(cells[1]);
        p.algorithm = cells[2];
        p.seconds_per_sample = std::stod(cells[3]);
        p.forward_seconds = std::stod(cells[4]);
        p.feedback_seconds = std::stod(cells[5]);
        p.update_seconds = std::stod(cells[6]);
        p.optical_seconds = std::stod(cells[7]);
        return p;
    } catch (const std::exception&) {
        throw bench_resume_error("corrupt scan row in " + path + ": " + line);
    }
}

}  // namespace detail

// Full cross product over (depth, width, algorithm) in a fixed order.
// Points already present in the output file are kept verbatim and never
// recomputed, so an interrupted scan resumes and a completed scan is a
// byte-identical no-op.
inline std::vector<ScalingPoint> scan_widths(const std::vector<std::size_t>& depths,
                                             const std::vector<std::size_t>& widths,
                                             const std::vector<std::string>& algorithms,
                                             const LatencyModel& latency, std::size_t samples,
                                             std::uint64_t seed, const std::string& csv_path) {
    if (depths.empty() || widths.empty() || algorithms.empty()) {
        throw std::invalid_argument("scan_widths: empty grid");
    }
    using Key = std::tuple<std::size_t, std::size_t, std::string>;
    std::map<Key, std::string> existing;
    if (!csv_path.empty()) {
        std::ifstream in(csv_path);
        if (in) {
            std::string line;
            if (!std::getline(in, line) || line != detail::kScanHeader) {
                throw bench_resume_error("corrupt scan header in " + csv_path);
            }
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                const ScalingPoint p = detail::parse_point(line, csv_path);
                existing[{p.depth, p.width, p.algorithm}] = line;
            }
        }
    }

    std::vector<ScalingPoint> points;
    std::vector<std::string> lines;
    for (std::size_t depth : depths) {
        for (std::size_t width : widths) {
            for (const std::string& algorithm : algorithms) {
                const Key key{depth, width, algorithm};
                const auto it = existing.find(key);
                if (it != existing.end()) {
                    points.push_back(detail::parse_point(it->second, csv_path));
                    lines.push_back(it->second);
                } else {
                    const ScalingPoint p =
                        time_training(width, depth, algorithm, latency, samples, seed);
                    points.push_back(p);
                    lines.push_back(detail::format_point(p));
                }
            }
        }
    }

    if (!csv_path.empty()) {
        std::ofstream out(csv_path, std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write scan output: " + csv_path);
        out << detail::kScanHeader << "\n";
        for (const auto& line : lines) out << line << "\n";
    }
    return points;
}

// --- star-point latency calibration ----------------------------------------

// Time surface t(w, d) = a d w^2 + b d w + c fitted to measured points.
struct TimeSurface {
    std::vector<double> coefficients;  // {a, b, c}

    double at(double width, double depth) const {
        return coefficients[0] * depth * width * width + coefficients[1] * depth * width +
               coefficients[2];
    }
};

inline TimeSurface fit_time_surface(const std::vector<ScalingPoint>& points) {
    if (points.size() < 4) {
        throw std::invalid_argument("fit_time_surface: need at least 4 points");
    }
    std::vector<std::vector<double>> rows;
    std::vector<double> y;
    for (const auto& p : points) {
        const double w = static_cast<double>(p.width), d = static_cast<double>(p.depth);
        rows.push_back({d * w * w, d * w, 1.0});
        y.push_back(p.seconds_per_sample - p.optical_seconds);
    }
    TimeSurface surface;
    surface.coefficients = detail::solve_least_squares(rows, y);
    return surface;
}

struct StarPoint {
    std::size_t width = 3080;
    std::size_t depth = 96;
    double bp_ms = 13.39;
    double odfa_ms = 13.09;
};

struct StarCalibration {
    TimeSurface bp_surface;
    TimeSurface odfa_surface;          // digital stages of the odfa pipeline
    double bp_at_star = 0.0;           // extrapolated seconds per sample
    double odfa_target_at_star = 0.0;  // bp_at_star * (odfa_ms / bp_ms)
    double optical_per_sample = 0.0;
    LatencyModel latency;
};

// Chooses seconds_per_projection so that the fitted, extrapolated curves
// reproduce the published ratio at the star point (absolute milliseconds are
// machine-specific and serve only as calibration targets).
inline StarCalibration calibrate_star_latency(const std::vector<ScalingPoint>& bp_points,
                                              const std::vector<ScalingPoint>& odfa_points,
                                              const StarPoint& star = {},
                                              std::uint32_t projections_per_signal = 4) {
    StarCalibration cal;
    cal.bp_surface = fit_time_surface(bp_points);
    cal.odfa_surface = fit_time_surface(odfa_points);
    const double w = static_cast<double>(star.width), d = static_cast<double>(star.depth);
    cal.bp_at_star = cal.bp_surface.at(w, d);
    cal.odfa_target_at_star = cal.bp_at_star * (star.odfa_ms / star.bp_ms);
    cal.optical_per_sample = cal.odfa_target_at_star - cal.odfa_surface.at(w, d);
    if (cal.optical_per_sample <= 0.0) {
        throw std::domain_error(
            "calibrate_star_latency: digital stages already exceed the star target");
    }
    cal.latency.projections_per_signal = projections_per_signal;
    cal.latency.seconds_per_projection =
        cal.optical_per_sample / static_cast<double>(projections_per_signal);
    return cal;
}

// Evaluates both fitted curves on a width grid at fixed depth, producing
// synthetic matched grids for crossover detection.
inline std::pair<std::vector<ScalingPoint>, std::vector<ScalingPoint>> synthesize_star_curves(
    const StarCalibration& cal, const std::vector<std::size_t>& widths, std::size_t depth) {
    std::vector<ScalingPoint> bp, odfa;
    for (std::size_t w : widths) {
        ScalingPoint pb;
        pb.width = w;
        pb.depth = depth;
        pb.algorithm = "bp";
        pb.seconds_per_sample =
            cal.bp_surface.at(static_cast<double>(w), static_cast<double>(depth));
        bp.push_back(pb);
        ScalingPoint po;
        po.width = w;
        po.depth = depth;
        po.algorithm = "odfa";
        po.optical_seconds = cal.optical_per_sample;
        po.seconds_per_sample =
            cal.odfa_surface.at(static_cast<double>(w), static_cast<double>(depth)) +
            cal.optical_per_sample;
        odfa.push_back(po);
    }
    return {std::move(bp), std::move(odfa)};
}

}  // namespace photondfa
