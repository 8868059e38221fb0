#pragma once

#include <functional>

#include <json.hpp>

#include "vx/data.hpp"
#include "vx/model.hpp"
#include "vx/optim.hpp"
#include "vx/spline.hpp"

// Anomaly scoring and group statistics: per-subject masked MSE, ROC AUC by
// pair counting, pooled-variance t-tests with an incomplete-beta CDF,
// Benjamini-Hochberg FDR, regional error tables, and motion controls.

namespace vx {

// ---------------------------------------------------------------------------
// t distribution via the regularized incomplete beta function

namespace detail {

inline double log_gamma(double x) { return std::lgamma(x); }

// Continued-fraction evaluation (Lentz) of I_x(a,b).
inline double beta_cf(double a, double b, double x) {
    const int max_iter = 500;
    const double tiny = 1e-300, eps = 1e-15;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= max_iter; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < eps) break;
    }
    return h;
}

inline double reg_inc_beta(double a, double b, double x) {
    if (x < 0.0 || x > 1.0) throw std::invalid_argument("reg_inc_beta: x outside [0,1]");
    if (x == 0.0 || x == 1.0) return x;
    const double ln_front = log_gamma(a + b) - log_gamma(a) - log_gamma(b) +
                            a * std::log(x) + b * std::log(1.0 - x);
    if (x < (a + 1.0) / (a + b + 2.0)) return std::exp(ln_front) * beta_cf(a, b, x) / a;
    return 1.0 - std::exp(log_gamma(a + b) - log_gamma(a) - log_gamma(b) +
                          b * std::log(1.0 - x) + a * std::log(x)) *
                     beta_cf(b, a, 1.0 - x) / b;
}

}  // namespace detail

// P(T <= t) for Student's t with df degrees of freedom.
inline double student_t_cdf(double t, double df) {
    if (df <= 0.0) throw std::invalid_argument("student_t_cdf: df must be positive");
    const double x = df / (df + t * t);
    const double tail = 0.5 * detail::reg_inc_beta(df / 2.0, 0.5, x);
    return t >= 0.0 ? 1.0 - tail : tail;
}

inline double two_sided_t_pvalue(double t, double df) {
    const double x = df / (df + t * t);
    return detail::reg_inc_beta(df / 2.0, 0.5, x);
}

struct TTestResult {
    double t;
    double df;
    double p;
};

// Two-sample t-test; pooled variance (Student) by default, Welch optional.
inline TTestResult ttest_unpaired(const std::vector<double>& a, const std::vector<double>& b,
                                  bool welch = false) {
    if (a.size() < 2 || b.size() < 2)
        throw std::invalid_argument("ttest_unpaired: need >= 2 samples per group");
    const double n1 = (double)a.size(), n2 = (double)b.size();
    double m1 = 0.0, m2 = 0.0;
    for (double x : a) m1 += x;
    for (double x : b) m2 += x;
    m1 /= n1;
    m2 /= n2;
    double s1 = 0.0, s2 = 0.0;
    for (double x : a) s1 += (x - m1) * (x - m1);
    for (double x : b) s2 += (x - m2) * (x - m2);
    s1 /= n1 - 1.0;
    s2 /= n2 - 1.0;

    double t, df;
    if (welch) {
        const double se2 = s1 / n1 + s2 / n2;
        if (se2 == 0.0) throw std::invalid_argument("ttest_unpaired: zero variance");
        t = (m1 - m2) / std::sqrt(se2);
        df = se2 * se2 /
             (s1 * s1 / (n1 * n1 * (n1 - 1.0)) + s2 * s2 / (n2 * n2 * (n2 - 1.0)));
    } else {
        const double sp2 = ((n1 - 1.0) * s1 + (n2 - 1.0) * s2) / (n1 + n2 - 2.0);
        if (sp2 == 0.0) throw std::invalid_argument("ttest_unpaired: zero pooled variance");
        t = (m1 - m2) / std::sqrt(sp2 * (1.0 / n1 + 1.0 / n2));
        df = n1 + n2 - 2.0;
    }
    return {t, df, t == 0.0 ? 1.0 : two_sided_t_pvalue(t, df)};
}

// Pearson correlation with its two-sided p-value via t = r sqrt((n-2)/(1-r^2)).
struct CorrResult {
    double r;
    double p;
    std::size_t n;
};

inline CorrResult pearson_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() < 3) throw std::invalid_argument("pearson_test: need n >= 3");
    const double r = pearson(a, b);
    const double n = (double)a.size();
    if (std::abs(r) >= 1.0) return {r, 0.0, a.size()};
    const double t = r * std::sqrt((n - 2.0) / (1.0 - r * r));
    return {r, two_sided_t_pvalue(t, n - 2.0), a.size()};
}

// ---------------------------------------------------------------------------
// ROC AUC by exact pair counting: P(patient > control) + 1/2 P(tie).

inline double roc_auc(const std::vector<std::pair<Group, double>>& scores) {
    std::size_t np = 0, nc = 0;
    for (const auto& [g, v] : scores) (g == Group::patient ? np : nc)++;
    if (np == 0 || nc == 0)
        throw std::invalid_argument("roc_auc: both groups must be non-empty");
    double wins = 0.0;
    for (const auto& [g1, v1] : scores) {
        if (g1 != Group::patient) continue;
        for (const auto& [g2, v2] : scores) {
            if (g2 != Group::control) continue;
            if (v1 > v2)
                wins += 1.0;
            else if (v1 == v2)
                wins += 0.5;
        }
    }
    return wins / ((double)np * (double)nc);
}

// ---------------------------------------------------------------------------
// Benjamini-Hochberg: largest k with p(k) <= k q / m rejects hypotheses 1..k.

inline std::vector<bool> bh_fdr(const std::vector<double>& p_values, double q = 0.05) {
    const std::size_t m = p_values.size();
    for (double p : p_values)
        if (!(p > 0.0) || p > 1.0)
            throw std::invalid_argument("bh_fdr: p-values must lie in (0,1]");
    std::vector<std::size_t> idx(m);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return p_values[a] < p_values[b]; });
    std::size_t k = 0;
    for (std::size_t i = 0; i < m; ++i)
        if (p_values[idx[i]] <= (double)(i + 1) * q / (double)m) k = i + 1;
    std::vector<bool> reject(m, false);
    for (std::size_t i = 0; i < k; ++i) reject[idx[i]] = true;
    return reject;
}

// ---------------------------------------------------------------------------
// Subject scoring

struct SubjectScore {
    std::string subject_id;
    Group group = Group::control;
    double mean_error = 0.0;
    // (frame index, masked mean squared error) per scored frame
    std::vector<std::pair<std::size_t, double>> per_frame_error;
    Tensor per_voxel_error;  // (X,Y,Z), time-averaged squared error
    std::size_t masked_voxels = 0;
};

enum class ScoreMode { next_frame, reconstruction };

// predict: clip input (1,H,W,T) -> (1,H,W) for next_frame or (1,H,W,T) for
// reconstruction. Errors are accumulated per voxel within the mask across all
// windows and slices, then averaged.
inline SubjectScore score_subject(
    const std::function<Tensor(const Tensor&)>& predict, ScoreMode mode,
    const VolumeSequence& vol, std::size_t T, std::size_t divisor) {
    vol.validate();
    const auto windows = segment_windows(vol.frames(), T);
    if (windows.empty())
        throw std::invalid_argument("score_subject: no valid windows (N=" +
                                    std::to_string(vol.frames()) + ", T=" + std::to_string(T) +
                                    ")");
    const auto clips = extract_axial_clips(vol, windows, T, divisor);
    if (clips.empty()) throw std::invalid_argument("score_subject: no non-empty slices");

    const std::size_t X = vol.data.dims[0], Y = vol.data.dims[1], Z = vol.data.dims[2];
    SubjectScore sc;
    sc.subject_id = vol.subject_id;
    sc.group = vol.group;
    sc.per_voxel_error = Tensor({X, Y, Z});
    Tensor per_voxel_count({X, Y, Z});

    const std::size_t H = clips[0].frames.dims[1], W = clips[0].frames.dims[2];
    const std::size_t oy = (H - X) / 2, ox = (W - Y) / 2;
    std::map<std::size_t, std::pair<double, std::size_t>> frame_err;  // frame -> (sum, count)

    for (const auto& clip : clips) {
        Tensor in({1, H, W, T});
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x)
                for (std::size_t t = 0; t < T; ++t) in.at(0, y, x, t) = clip.frames.at(0, y, x, t);
        const Tensor pred = predict(in);
        const std::size_t F = mode == ScoreMode::reconstruction ? T : 1;
        if (mode == ScoreMode::next_frame &&
            (pred.rank() != 3 || pred.dims[1] != H || pred.dims[2] != W))
            throw std::invalid_argument("score_subject: predictor output " + pred.shape_str() +
                                        " does not match frame shape");
        if (mode == ScoreMode::reconstruction &&
            (pred.rank() != 4 || pred.dims[3] != T))
            throw std::invalid_argument("score_subject: reconstruction output " +
                                        pred.shape_str() + " does not match clip shape");

        const WindowRange& win = windows[clip.window_index];
        for (std::size_t f = 0; f < F; ++f) {
            // absolute frame index being scored
            const std::size_t frame_idx =
                mode == ScoreMode::next_frame ? win.begin + T : win.begin + f;
            auto& fe = frame_err[frame_idx];
            for (std::size_t xv = 0; xv < X; ++xv)
                for (std::size_t yv = 0; yv < Y; ++yv) {
                    if (vol.mask.at(xv, yv, clip.z_index) == 0.0) continue;
                    const double target = vol.data.at(xv, yv, clip.z_index, frame_idx);
                    const double p = mode == ScoreMode::next_frame
                                         ? pred.at(0, xv + oy, yv + ox)
                                         : pred.at(0, xv + oy, yv + ox, f);
                    const double d = p - target;
                    sc.per_voxel_error.at(xv, yv, clip.z_index) += d * d;
                    per_voxel_count.at(xv, yv, clip.z_index) += 1.0;
                    fe.first += d * d;
                    fe.second += 1;
                }
        }
    }

    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < sc.per_voxel_error.numel(); ++i) {
        if (per_voxel_count.v[i] == 0.0) continue;
        total += sc.per_voxel_error.v[i];
        n += (std::size_t)per_voxel_count.v[i];
        sc.per_voxel_error.v[i] /= per_voxel_count.v[i];
        ++sc.masked_voxels;
    }
    sc.mean_error = total / (double)n;
    for (const auto& [f, e] : frame_err)
        sc.per_frame_error.push_back({f, e.first / (double)e.second});
    return sc;
}

// Model-backed predictor closure for score_subject.
inline std::function<Tensor(const Tensor&)> model_predictor(const ModelSpec& s,
                                                            const ModelWeights& w) {
    return [&s, &w](const Tensor& in) {
        if (s.kind == ModelKind::unet2d) {
            const std::size_t H = in.dims[1], W = in.dims[2], T = in.dims[3];
            Tensor chans({T, H, W});
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t y = 0; y < H; ++y)
                    for (std::size_t x = 0; x < W; ++x) chans.at(t, y, x) = in.at(0, y, x, t);
            return unet2d_forward(s, w, chans);
        }
        return model_forward(s, w, in);
    };
}

enum class BaselineMethod { copy, extrapolate, interpolate };

inline BaselineMethod baseline_from_string(const std::string& s) {
    if (s == "copy") return BaselineMethod::copy;
    if (s == "extrapolate") return BaselineMethod::extrapolate;
    if (s == "interpolate") return BaselineMethod::interpolate;
    throw std::invalid_argument("unknown baseline method: " + s);
}

// Baseline scorer. Interpolation needs the frame after the target, so it is
// evaluated directly against the volume rather than through the clip closure.
inline SubjectScore score_subject_baseline(BaselineMethod m, const VolumeSequence& vol,
                                           std::size_t T, std::size_t divisor) {
    if (m != BaselineMethod::interpolate) {
        auto predict = [m](const Tensor& in) {
            return m == BaselineMethod::copy ? last_frame_copy(in) : spline_extrapolate_next(in);
        };
        return score_subject(predict, ScoreMode::next_frame, vol, T, divisor);
    }
    // interpolate: per window, fit on frames [begin..begin+T-1] + frame
    // begin+T+1 and evaluate at begin+T; windows needing a frame past N are
    // skipped on the "after" side by reusing segment_windows over N-1 frames.
    const auto windows = segment_windows(vol.frames(), T);
    std::vector<WindowRange> usable;
    for (const auto& w : windows)
        if (w.begin + T + 1 < vol.frames()) usable.push_back(w);
    if (usable.empty())
        throw std::invalid_argument("score_subject: no window has a frame after the target");

    SubjectScore sc;
    sc.subject_id = vol.subject_id;
    sc.group = vol.group;
    const std::size_t X = vol.data.dims[0], Y = vol.data.dims[1], Z = vol.data.dims[2];
    sc.per_voxel_error = Tensor({X, Y, Z});
    Tensor per_voxel_count({X, Y, Z});
    double total = 0.0;
    std::size_t n = 0;
    std::map<std::size_t, std::pair<double, std::size_t>> frame_err;

    std::vector<double> knots = integer_knots(T);
    knots.push_back((double)T + 1.0);
    std::vector<double> series(T + 1);
    for (const auto& win : usable) {
        const std::size_t target = win.begin + T;
        auto& fe = frame_err[target];
        for (std::size_t x = 0; x < X; ++x)
            for (std::size_t y = 0; y < Y; ++y)
                for (std::size_t z = 0; z < Z; ++z) {
                    if (vol.mask.at(x, y, z) == 0.0) continue;
                    for (std::size_t t = 0; t < T; ++t)
                        series[t] = vol.data.at(x, y, z, win.begin + t);
                    series[T] = vol.data.at(x, y, z, target + 1);
                    const double p = std::clamp(
                        spline_fit_natural(knots, series).eval((double)T), 0.0, 1.0);
                    const double d = p - vol.data.at(x, y, z, target);
                    sc.per_voxel_error.at(x, y, z) += d * d;
                    per_voxel_count.at(x, y, z) += 1.0;
                    fe.first += d * d;
                    fe.second += 1;
                    total += d * d;
                    ++n;
                }
    }
    for (std::size_t i = 0; i < sc.per_voxel_error.numel(); ++i) {
        if (per_voxel_count.v[i] == 0.0) continue;
        sc.per_voxel_error.v[i] /= per_voxel_count.v[i];
        ++sc.masked_voxels;
    }
    sc.mean_error = total / (double)n;
    for (const auto& [f, e] : frame_err)
        sc.per_frame_error.push_back({f, e.first / (double)e.second});
    return sc;
}

// ---------------------------------------------------------------------------
// Group-level report

struct RegionalRow {
    std::size_t region_id;
    double mean_err_control;
    double mean_err_patient;
    double t;
    double p;
    bool fdr_pass;
    double neg_log10_p;
};

struct GroupReport {
    double auc = 0.0;
    double t_stat = 0.0;
    double p_value = 1.0;
    std::size_t n_control = 0, n_patient = 0;
    std::vector<RegionalRow> regional;
    std::vector<std::size_t> excluded_regions;  // regions with no masked voxels
};

inline GroupReport group_compare(const std::vector<SubjectScore>& scores, bool welch = false) {
    GroupReport rep;
    std::vector<std::pair<Group, double>> pairs;
    std::vector<double> ctl, pat;
    for (const auto& s : scores) {
        pairs.push_back({s.group, s.mean_error});
        (s.group == Group::control ? ctl : pat).push_back(s.mean_error);
    }
    rep.n_control = ctl.size();
    rep.n_patient = pat.size();
    rep.auc = roc_auc(pairs);
    const TTestResult t = ttest_unpaired(pat, ctl, welch);
    rep.t_stat = t.t;
    rep.p_value = t.p;
    return rep;
}

// Per-region mean of per-voxel error inside (atlas == region) & mask per
// subject, then an unpaired t-test across groups and BH-FDR across regions.
inline std::vector<RegionalRow> regional_analysis(const std::vector<SubjectScore>& scores,
                                                  const Tensor& atlas, const Tensor& mask,
                                                  double q = 0.05, bool welch = false,
                                                  std::vector<std::size_t>* excluded = nullptr) {
    if (scores.empty()) throw std::invalid_argument("regional_analysis: no scores");
    check_same_shape(atlas, mask, "regional_analysis atlas/mask");

    std::vector<std::size_t> regions;
    for (std::size_t i = 0; i < atlas.numel(); ++i) {
        if (mask.v[i] == 0.0) continue;
        const std::size_t r = (std::size_t)atlas.v[i];
        if (std::find(regions.begin(), regions.end(), r) == regions.end()) regions.push_back(r);
    }
    std::sort(regions.begin(), regions.end());

    // All labelled regions with zero masked voxels get reported as excluded.
    if (excluded) {
        excluded->clear();
        std::vector<std::size_t> all;
        for (double a : atlas.v) {
            const std::size_t r = (std::size_t)a;
            if (r > 0 && std::find(all.begin(), all.end(), r) == all.end()) all.push_back(r);
        }
        std::sort(all.begin(), all.end());
        for (std::size_t r : all)
            if (std::find(regions.begin(), regions.end(), r) == regions.end())
                excluded->push_back(r);
    }

    std::vector<RegionalRow> rows;
    std::vector<double> pvals;
    for (std::size_t r : regions) {
        std::vector<double> ctl, pat;
        for (const auto& s : scores) {
            check_same_shape(s.per_voxel_error, atlas, "regional_analysis scores/atlas");
            double sum = 0.0;
            std::size_t n = 0;
            for (std::size_t i = 0; i < atlas.numel(); ++i) {
                if (mask.v[i] == 0.0 || (std::size_t)atlas.v[i] != r) continue;
                sum += s.per_voxel_error.v[i];
                ++n;
            }
            (s.group == Group::control ? ctl : pat).push_back(sum / (double)n);
        }
        if (ctl.size() < 2 || pat.size() < 2)
            throw std::invalid_argument("regional_analysis: need >= 2 subjects per group");
        double mc = 0.0, mp = 0.0;
        for (double x : ctl) mc += x;
        for (double x : pat) mp += x;
        const TTestResult t = ttest_unpaired(pat, ctl, welch);
        rows.push_back({r, mc / (double)ctl.size(), mp / (double)pat.size(), t.t, t.p, false,
                        -std::log10(t.p)});
        pvals.push_back(t.p);
    }
    const std::vector<bool> rej = bh_fdr(pvals, q);
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i].fdr_pass = rej[i];
    return rows;
}

// ---------------------------------------------------------------------------
// Motion control: correlation of error with frame-wise displacement at frame
// and subject level. Frame-level pairs exclude scrubbed frames.

struct MotionReport {
    CorrResult frame_level;
    CorrResult subject_level;
};

inline MotionReport motion_correlation(const std::vector<SubjectScore>& scores,
                                       const std::vector<VolumeSequence>& volumes) {
    if (scores.size() != volumes.size())
        throw std::invalid_argument("motion_correlation: scores and volumes must align");
    std::vector<double> frame_err, frame_fd, subj_err, subj_fd;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const auto& vol = volumes[i];
        if (!vol.fd) throw std::invalid_argument("motion_correlation: missing fd for subject " +
                                                 vol.subject_id);
        double fd_sum = 0.0;
        for (double x : *vol.fd) fd_sum += x;
        subj_err.push_back(scores[i].mean_error);
        subj_fd.push_back(fd_sum / (double)vol.fd->size());
        for (const auto& [frame, err] : scores[i].per_frame_error) {
            if (vol.scrubbed && (*vol.scrubbed)[frame]) continue;
            frame_err.push_back(err);
            frame_fd.push_back((*vol.fd)[frame]);
        }
    }
    return {pearson_test(frame_err, frame_fd), pearson_test(subj_err, subj_fd)};
}

// ---------------------------------------------------------------------------
// CSV / JSON emission

inline void write_scores_csv(const std::vector<SubjectScore>& scores, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path);
    os << "subject_id,group,mean_error\n";
    os.precision(17);
    for (const auto& s : scores)
        os << s.subject_id << "," << to_string(s.group) << "," << s.mean_error << "\n";
}

inline std::vector<std::pair<Group, double>> load_scores_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path);
    std::vector<std::pair<Group, double>> out;
    std::string line;
    bool header = true;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (header) {
            header = false;
            continue;
        }
        std::stringstream ss(line);
        std::string id, grp, val;
        std::getline(ss, id, ',');
        std::getline(ss, grp, ',');
        std::getline(ss, val, ',');
        out.push_back({group_from_string(grp), std::stod(val)});
    }
    return out;
}

inline void write_regional_csv(const std::vector<RegionalRow>& rows, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path);
    os << "region_id,mean_err_control,mean_err_patient,t,p,fdr_pass,neg_log10_p\n";
    os.precision(17);
    for (const auto& r : rows)
        os << r.region_id << "," << r.mean_err_control << "," << r.mean_err_patient << ","
           << r.t << "," << r.p << "," << (r.fdr_pass ? 1 : 0) << "," << r.neg_log10_p << "\n";
}

inline nlohmann::json report_to_json(const GroupReport& rep) {
    nlohmann::json j{{"auc", rep.auc},
                     {"t", rep.t_stat},
                     {"p", rep.p_value},
                     {"n_control", rep.n_control},
                     {"n_patient", rep.n_patient}};
    if (!rep.regional.empty()) {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& r : rep.regional)
            rows.push_back({{"region_id", r.region_id},
                            {"mean_err_control", r.mean_err_control},
                            {"mean_err_patient", r.mean_err_patient},
                            {"t", r.t},
                            {"p", r.p},
                            {"fdr_pass", r.fdr_pass},
                            {"neg_log10_p", r.neg_log10_p}});
        j["regional"] = rows;
    }
    return j;
}

}  // namespace vx
