#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "vx/stats.hpp"

using namespace vx;
namespace fs = std::filesystem;

TEST_CASE("student t CDF matches an independent numerical oracle") {
    // Reference values from scipy.stats.t.cdf (frozen).
    CHECK(student_t_cdf(1.0, 4.0) == doctest::Approx(0.8130495168499705).epsilon(1e-9));
    CHECK(student_t_cdf(2.5, 4.0) == doctest::Approx(0.966616727594006).epsilon(1e-9));
    CHECK(student_t_cdf(-1.8, 10.0) == doctest::Approx(0.051026121567339516).epsilon(1e-9));
    CHECK(student_t_cdf(0.5, 1.0) == doctest::Approx(0.6475836176504333).epsilon(1e-9));

    // Symmetry: cdf(0) = 1/2 and cdf(-t) = 1 - cdf(t).
    for (double df : {1.0, 4.0, 30.0}) {
        CHECK(student_t_cdf(0.0, df) == doctest::Approx(0.5).epsilon(1e-12));
        for (double t : {0.3, 1.7, 5.0})
            CHECK(student_t_cdf(-t, df) ==
                  doctest::Approx(1.0 - student_t_cdf(t, df)).epsilon(1e-12));
    }
    CHECK_THROWS_AS(student_t_cdf(1.0, 0.0), std::invalid_argument);
}

TEST_CASE("unpaired t-test examples") {
    TTestResult same = ttest_unpaired({1, 2, 3}, {1, 2, 3});
    CHECK(same.t == 0.0);
    CHECK(same.p == 1.0);

    // a=[1,2,3], b=[4,5,6]: t = -3.674, df = 4, p ~ 0.0213 (scipy frozen:
    // t = -3.6742346141747673, p = 0.021311641128756727).
    TTestResult r = ttest_unpaired({1, 2, 3}, {4, 5, 6});
    CHECK(r.t == doctest::Approx(-3.6742346141747673).epsilon(1e-12));
    CHECK(r.df == 4.0);
    CHECK(r.p == doctest::Approx(0.021311641128756727).epsilon(1e-9));
    CHECK(std::abs(r.p - 0.0213) < 1e-3);

    // Scale invariance.
    TTestResult s = ttest_unpaired({10, 20, 30}, {40, 50, 60});
    CHECK(s.t == doctest::Approx(r.t).epsilon(1e-12));
    CHECK(s.p == doctest::Approx(r.p).epsilon(1e-12));

    CHECK_THROWS_AS(ttest_unpaired({1.0}, {2.0, 3.0}), std::invalid_argument);
    CHECK_THROWS_AS(ttest_unpaired({1, 1, 1}, {1, 1, 1}), std::invalid_argument);
}

TEST_CASE("welch variant matches scipy on unequal variances") {
    // a=[1..4], b=[10,20,30]: welch t=-3.0123203803835468, df=2.050098948026247,
    // p=0.09198930883630205; pooled t=-3.5783904271027347, p=0.015901899470499692.
    TTestResult w = ttest_unpaired({1, 2, 3, 4}, {10, 20, 30}, true);
    CHECK(w.t == doctest::Approx(-3.0123203803835468).epsilon(1e-12));
    CHECK(w.df == doctest::Approx(2.050098948026247).epsilon(1e-12));
    CHECK(w.p == doctest::Approx(0.09198930883630205).epsilon(1e-9));

    TTestResult p = ttest_unpaired({1, 2, 3, 4}, {10, 20, 30}, false);
    CHECK(p.t == doctest::Approx(-3.5783904271027347).epsilon(1e-12));
    CHECK(p.p == doctest::Approx(0.015901899470499692).epsilon(1e-9));
}

TEST_CASE("t-test p-values are uniform-ish under the null") {
    std::mt19937_64 rng(31);
    std::normal_distribution<double> N(0.0, 1.0);
    int below = 0;
    const int trials = 1000;
    for (int i = 0; i < trials; ++i) {
        std::vector<double> a(10), b(10);
        for (double& x : a) x = N(rng);
        for (double& x : b) x = N(rng);
        if (ttest_unpaired(a, b).p < 0.05) ++below;
    }
    const double frac = (double)below / trials;
    CHECK(frac >= 0.03);
    CHECK(frac <= 0.07);
}

TEST_CASE("ROC AUC examples") {
    using P = std::pair<Group, double>;
    std::vector<P> perfect = {{Group::patient, 0.9}, {Group::patient, 0.8},
                              {Group::control, 0.1}, {Group::control, 0.2}};
    CHECK(roc_auc(perfect) == 1.0);

    std::vector<P> tied = {{Group::patient, 0.3}, {Group::patient, 0.6},
                           {Group::control, 0.3}, {Group::control, 0.6}};
    CHECK(roc_auc(tied) == 0.5);

    // patients [3,1], controls [2,0]: 3 of 4 ordered pairs favour patients.
    std::vector<P> mixed = {{Group::patient, 3}, {Group::patient, 1},
                            {Group::control, 2}, {Group::control, 0}};
    CHECK(roc_auc(mixed) == 0.75);

    CHECK_THROWS_AS(roc_auc({{Group::patient, 1.0}}), std::invalid_argument);
}

TEST_CASE("ROC AUC properties on random score sets") {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<std::pair<Group, double>> scores;
        const std::size_t np = 2 + (std::size_t)(U(rng) * 6), nc = 2 + (std::size_t)(U(rng) * 6);
        for (std::size_t i = 0; i < np; ++i) scores.push_back({Group::patient, U(rng)});
        for (std::size_t i = 0; i < nc; ++i)
            // inject occasional exact ties
            scores.push_back({Group::control, U(rng) < 0.3 ? scores[i % np].second : U(rng)});
        const double auc = roc_auc(scores);

        // Independent oracle: Mann-Whitney U from midranks.
        std::vector<double> all;
        for (const auto& [g, v] : scores) all.push_back(v);
        std::sort(all.begin(), all.end());
        double rank_sum = 0.0;
        for (const auto& [g, v] : scores) {
            if (g != Group::patient) continue;
            const auto lo = std::lower_bound(all.begin(), all.end(), v) - all.begin();
            const auto hi = std::upper_bound(all.begin(), all.end(), v) - all.begin();
            rank_sum += ((double)lo + 1.0 + (double)hi) / 2.0;  // midrank
        }
        const double u = rank_sum - (double)np * ((double)np + 1.0) / 2.0;
        CHECK(auc == doctest::Approx(u / ((double)np * (double)nc)).epsilon(1e-12));

        // Monotone-transform invariance.
        std::vector<std::pair<Group, double>> expd = scores;
        for (auto& [g, v] : expd) v = std::exp(3.0 * v);
        CHECK(roc_auc(expd) == doctest::Approx(auc).epsilon(1e-12));

        // Label-swap complement.
        std::vector<std::pair<Group, double>> swapped = scores;
        for (auto& [g, v] : swapped)
            g = g == Group::patient ? Group::control : Group::patient;
        CHECK(roc_auc(swapped) == doctest::Approx(1.0 - auc).epsilon(1e-12));
    }
}

TEST_CASE("Benjamini-Hochberg examples and properties") {
    // 0.04 > 3*0.05/4 = 0.0375, so only the first two reject.
    CHECK(bh_fdr({0.01, 0.02, 0.04, 0.2}, 0.05) ==
          std::vector<bool>{true, true, false, false});
    CHECK(bh_fdr({1.0, 1.0, 1.0}, 0.05) == std::vector<bool>{false, false, false});
    CHECK(bh_fdr({0.04}, 0.05) == std::vector<bool>{true});
    CHECK_THROWS_AS(bh_fdr({0.0, 0.5}, 0.05), std::invalid_argument);
    CHECK_THROWS_AS(bh_fdr({1.5}, 0.05), std::invalid_argument);

    // Against a direct enumeration of the BH rule, and superset-of-Bonferroni.
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> U(1e-6, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> p(8);
        for (double& x : p) x = U(rng);
        const double q = 0.05;
        auto rej = bh_fdr(p, q);

        std::vector<double> sorted = p;
        std::sort(sorted.begin(), sorted.end());
        double thresh = 0.0;
        for (std::size_t k = sorted.size(); k >= 1; --k)
            if (sorted[k - 1] <= (double)k * q / (double)sorted.size()) {
                thresh = sorted[k - 1];
                break;
            }
        for (std::size_t i = 0; i < p.size(); ++i) {
            CHECK(rej[i] == (thresh > 0.0 && p[i] <= thresh));
            if (p[i] <= q / (double)p.size()) CHECK(rej[i]);  // Bonferroni subset
        }
    }
}

// ---------------------------------------------------------------------------
// Subject scoring

namespace {

VolumeSequence constant_volume(double value, std::size_t N = 9) {
    VolumeSequence vol;
    vol.subject_id = "c";
    vol.group = Group::control;
    vol.data = Tensor({4, 4, 2, N});
    for (double& x : vol.data.v) x = value;
    vol.mask = Tensor({4, 4, 2});
    for (double& m : vol.mask.v) m = 1.0;
    return vol;
}

}  // namespace

TEST_CASE("score_subject oracle models") {
    VolumeSequence vol = constant_volume(0.5);
    const std::size_t T = 2;

    auto truth = [](const Tensor& in) {
        Tensor out({1, in.dims[1], in.dims[2]});
        for (double& x : out.v) x = 0.5;
        return out;
    };
    SubjectScore s = score_subject(truth, ScoreMode::next_frame, vol, T, 4);
    CHECK(s.mean_error == 0.0);
    CHECK(s.masked_voxels == 32);

    auto zeros = [](const Tensor& in) { return Tensor({1, in.dims[1], in.dims[2]}); };
    SubjectScore z = score_subject(zeros, ScoreMode::next_frame, vol, T, 4);
    CHECK(z.mean_error == doctest::Approx(0.25).epsilon(1e-15));
    for (std::size_t i = 0; i < z.per_voxel_error.numel(); ++i)
        CHECK(z.per_voxel_error.v[i] == doctest::Approx(0.25).epsilon(1e-15));

    // Reconstruction mode scores all T frames of every window.
    auto rec_zeros = [T](const Tensor& in) { return Tensor({1, in.dims[1], in.dims[2], T}); };
    SubjectScore rz = score_subject(rec_zeros, ScoreMode::reconstruction, vol, T, 4);
    CHECK(rz.mean_error == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(rz.per_frame_error.size() == 6);  // 3 windows x T frames

    VolumeSequence short_vol = constant_volume(0.5, 2);
    CHECK_THROWS_AS(score_subject(truth, ScoreMode::next_frame, short_vol, T, 4),
                    std::invalid_argument);
}

TEST_CASE("mean_error equals the masked recomputation from per-frame errors") {
    VolumeSequence vol = constant_volume(0.0, 13);
    std::mt19937_64 rng(41);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    for (double& x : vol.data.v) x = U(rng);
    for (std::size_t p = 0; p < vol.mask.numel(); ++p) vol.mask.v[p] = (double)(p % 3 != 0);

    const std::size_t T = 3;
    auto pred = [](const Tensor& in) {
        Tensor out({1, in.dims[1], in.dims[2]});
        for (std::size_t i = 0; i < out.numel(); ++i)
            out.v[i] = in.v[i * in.dims[3] + in.dims[3] - 1];  // last input frame
        return out;
    };
    SubjectScore s = score_subject(pred, ScoreMode::next_frame, vol, T, 4);

    // Every scored frame touches the same masked voxel set, so the plain mean
    // of per-frame errors is the masked-weighted mean.
    double frame_mean = 0.0;
    for (const auto& [f, e] : s.per_frame_error) frame_mean += e;
    frame_mean /= (double)s.per_frame_error.size();
    CHECK(s.mean_error == doctest::Approx(frame_mean).epsilon(1e-12));

    // And equals the masked average of per_voxel_error.
    double vox_sum = 0.0;
    std::size_t vox_n = 0;
    for (std::size_t i = 0; i < s.per_voxel_error.numel(); ++i) {
        if (vol.mask.v[i] == 0.0) continue;
        vox_sum += s.per_voxel_error.v[i];
        ++vox_n;
    }
    CHECK(s.mean_error == doctest::Approx(vox_sum / (double)vox_n).epsilon(1e-12));
    CHECK(s.masked_voxels == vox_n);
}

TEST_CASE("baseline scorers") {
    VolumeSequence vol = constant_volume(0.4, 9);
    const std::size_t T = 2;
    SubjectScore copy = score_subject_baseline(BaselineMethod::copy, vol, T, 4);
    CHECK(copy.mean_error == 0.0);
    SubjectScore ext = score_subject_baseline(BaselineMethod::extrapolate, vol, T, 4);
    CHECK(ext.mean_error < 1e-20);

    // Interpolation skips windows without a frame after the target:
    // N=9, T=2 -> windows at 0,3,6; target frames 2,5,8; frame 9 missing, so
    // the last window is dropped.
    SubjectScore itp = score_subject_baseline(BaselineMethod::interpolate, vol, T, 4);
    CHECK(itp.per_frame_error.size() == 2);
    CHECK(itp.per_frame_error[0].first == 2);
    CHECK(itp.per_frame_error[1].first == 5);
    CHECK(itp.mean_error < 1e-20);

    VolumeSequence vshort = constant_volume(0.4, 3);
    CHECK_THROWS_AS(score_subject_baseline(BaselineMethod::interpolate, vshort, T, 4),
                    std::invalid_argument);

    CHECK(baseline_from_string("copy") == BaselineMethod::copy);
    CHECK_THROWS_AS(baseline_from_string("nearest"), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Group-level analysis

namespace {

SubjectScore fake_score(const std::string& id, Group g, const Tensor& per_voxel,
                        double mean_err) {
    SubjectScore s;
    s.subject_id = id;
    s.group = g;
    s.per_voxel_error = per_voxel;
    s.mean_error = mean_err;
    return s;
}

}  // namespace

TEST_CASE("group_compare direction: higher patient error gives positive t and high auc") {
    std::vector<SubjectScore> scores;
    std::mt19937_64 rng(3);
    std::normal_distribution<double> N(0.0, 0.01);
    Tensor pv({2, 2, 1});
    for (int i = 0; i < 6; ++i)
        scores.push_back(fake_score("c" + std::to_string(i), Group::control, pv, 0.1 + N(rng)));
    for (int i = 0; i < 6; ++i)
        scores.push_back(fake_score("p" + std::to_string(i), Group::patient, pv, 0.2 + N(rng)));
    GroupReport rep = group_compare(scores);
    CHECK(rep.auc > 0.9);
    CHECK(rep.t_stat > 0.0);
    CHECK(rep.p_value < 0.01);
    CHECK(rep.n_control == 6);
    CHECK(rep.n_patient == 6);
}

TEST_CASE("regional analysis: planted anomaly, recomputation, exclusions") {
    // 4x4x1 volume split into 4 regions of 4 voxels; region 5 is unmasked.
    Tensor atlas({4, 4, 1});
    Tensor mask({4, 4, 1});
    for (std::size_t x = 0; x < 4; ++x)
        for (std::size_t y = 0; y < 4; ++y) {
            atlas.at(x, y, 0) = (double)(1 + (x / 2) * 2 + y / 2);
            mask.at(x, y, 0) = 1.0;
        }
    atlas.at(0, 0, 0) = 5.0;
    mask.at(0, 0, 0) = 0.0;  // region 5 has no masked voxels

    std::mt19937_64 rng(7);
    std::normal_distribution<double> N(0.1, 0.005);
    std::vector<SubjectScore> scores;
    for (int i = 0; i < 6; ++i) {
        Tensor pv({4, 4, 1});
        for (double& v : pv.v) v = std::abs(N(rng));
        scores.push_back(fake_score("c" + std::to_string(i), Group::control, pv, 0.1));
    }
    for (int i = 0; i < 6; ++i) {
        Tensor pv({4, 4, 1});
        for (double& v : pv.v) v = std::abs(N(rng));
        for (std::size_t x = 0; x < 2; ++x)
            for (std::size_t y = 2; y < 4; ++y) pv.at(x, y, 0) *= 10.0;  // region 2
        scores.push_back(fake_score("p" + std::to_string(i), Group::patient, pv, 0.1));
    }

    std::vector<std::size_t> excluded;
    auto rows = regional_analysis(scores, atlas, mask, 0.05, false, &excluded);
    REQUIRE(rows.size() == 4);
    CHECK(excluded == std::vector<std::size_t>{5});

    const RegionalRow* planted = nullptr;
    double best = -1.0;
    for (const auto& r : rows)
        if (r.neg_log10_p > best) {
            best = r.neg_log10_p;
            planted = &r;
        }
    REQUIRE(planted != nullptr);
    CHECK(planted->region_id == 2);
    CHECK(planted->fdr_pass);
    CHECK(planted->mean_err_patient > planted->mean_err_control * 5.0);

    // Recompute a region mean independently.
    for (const auto& r : rows) {
        double sum = 0.0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < atlas.numel(); ++i)
            if (mask.v[i] != 0.0 && (std::size_t)atlas.v[i] == r.region_id) {
                sum += scores[0].per_voxel_error.v[i];
                ++n;
            }
        double mc = 0.0;
        for (int s = 0; s < 6; ++s) {
            double subj = 0.0;
            std::size_t sn = 0;
            for (std::size_t i = 0; i < atlas.numel(); ++i)
                if (mask.v[i] != 0.0 && (std::size_t)atlas.v[i] == r.region_id) {
                    subj += scores[(std::size_t)s].per_voxel_error.v[i];
                    ++sn;
                }
            mc += subj / (double)sn;
        }
        CHECK(r.mean_err_control == doctest::Approx(mc / 6.0).epsilon(1e-12));
        (void)sum;
        (void)n;
    }
}

TEST_CASE("regional analysis: statistically identical groups pass nothing") {
    Tensor atlas({4, 4, 1}), mask({4, 4, 1});
    for (std::size_t x = 0; x < 4; ++x)
        for (std::size_t y = 0; y < 4; ++y) {
            atlas.at(x, y, 0) = (double)(1 + (x / 2) * 2 + y / 2);
            mask.at(x, y, 0) = 1.0;
        }
    std::mt19937_64 rng(14);
    std::normal_distribution<double> N(0.1, 0.01);
    std::vector<SubjectScore> scores;
    for (int i = 0; i < 8; ++i) {
        Tensor pv({4, 4, 1});
        for (double& v : pv.v) v = std::abs(N(rng));
        scores.push_back(fake_score(std::to_string(i), i < 4 ? Group::control : Group::patient,
                                    pv, 0.1));
    }
    for (const auto& r : regional_analysis(scores, atlas, mask))
        CHECK_FALSE(r.fdr_pass);
}

TEST_CASE("motion correlation") {
    // Two subjects, 8 frames each; per-frame error mirrors fd exactly.
    std::vector<VolumeSequence> vols;
    std::vector<SubjectScore> scores;
    std::mt19937_64 rng(19);
    std::uniform_real_distribution<double> U(0.05, 0.3);
    for (int sidx = 0; sidx < 3; ++sidx) {
        VolumeSequence v = constant_volume(0.5, 8);
        v.subject_id = std::to_string(sidx);
        std::vector<double> fd(8);
        for (double& f : fd) f = U(rng);
        v.fd = fd;
        SubjectScore s;
        s.subject_id = v.subject_id;
        s.group = Group::control;
        double sum = 0.0;
        for (std::size_t t = 0; t < 8; ++t) {
            s.per_frame_error.push_back({t, fd[t]});
            sum += fd[t];
        }
        s.mean_error = sum / 8.0;
        vols.push_back(std::move(v));
        scores.push_back(std::move(s));
    }
    MotionReport rep = motion_correlation(scores, vols);
    CHECK(rep.frame_level.r == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rep.subject_level.r == doctest::Approx(1.0).epsilon(1e-12));

    // Scrubbed frames are excluded from the frame-level pairs: corrupt one
    // frame's error wildly, mark it scrubbed, and r stays 1.
    scores[0].per_frame_error[3].second = 99.0;
    vols[0].scrubbed = std::vector<bool>(8, false);
    (*vols[0].scrubbed)[3] = true;
    rep = motion_correlation(scores, vols);
    CHECK(rep.frame_level.r == doctest::Approx(1.0).epsilon(1e-12));

    // Constant fd has zero variance.
    for (auto& v : vols) v.fd = std::vector<double>(8, 0.1);
    CHECK_THROWS_AS(motion_correlation(scores, vols), std::invalid_argument);

    vols[0].fd.reset();
    CHECK_THROWS_AS(motion_correlation(scores, vols), std::invalid_argument);
}

TEST_CASE("null motion correlation stays small") {
    // Independent fd and errors, 500 frame-level pairs: |r| < 0.1 and p > 0.01
    // in at least 95% of seeds.
    int ok = 0;
    const int trials = 40;
    for (int trial = 0; trial < trials; ++trial) {
        std::mt19937_64 rng(500 + (std::uint64_t)trial);
        std::uniform_real_distribution<double> U(0.0, 1.0);
        std::vector<double> err(500), fd(500);
        for (double& x : err) x = U(rng);
        for (double& x : fd) x = U(rng);
        CorrResult r = pearson_test(err, fd);
        if (std::abs(r.r) < 0.1 && r.p > 0.01) ++ok;
    }
    CHECK(ok >= (int)(0.95 * trials));
}

TEST_CASE("pearson_test matches a frozen oracle") {
    // r=0.8, n=10 -> t = 3.7712361663282543, p = 0.0054559999999999895 (scipy).
    // Construct vectors with that exact correlation is fiddly; instead check
    // the p-value mapping through a direct t computation.
    const double r = 0.8, n = 10;
    const double t = r * std::sqrt((n - 2.0) / (1.0 - r * r));
    CHECK(t == doctest::Approx(3.7712361663282543).epsilon(1e-12));
    CHECK(two_sided_t_pvalue(t, n - 2.0) ==
          doctest::Approx(0.0054559999999999895).epsilon(1e-9));

    CHECK_THROWS_AS(pearson_test({1.0, 2.0}, {1.0, 2.0}), std::invalid_argument);
    CorrResult exact = pearson_test({1, 2, 3, 4}, {2, 4, 6, 8});
    CHECK(exact.r == doctest::Approx(1.0));
    CHECK(exact.p == 0.0);
}

TEST_CASE("scores CSV round trip and report JSON") {
    const std::string path = (fs::temp_directory_path() / "vx_test_scores.csv").string();
    std::vector<SubjectScore> scores;
    scores.push_back(fake_score("a", Group::control, Tensor({1, 1, 1}), 0.125));
    scores.push_back(fake_score("b", Group::patient, Tensor({1, 1, 1}), 0.5));
    write_scores_csv(scores, path);
    auto loaded = load_scores_csv(path);
    REQUIRE(loaded.size() == 2);
    CHECK(loaded[0].first == Group::control);
    CHECK(loaded[0].second == 0.125);
    CHECK(loaded[1].first == Group::patient);
    CHECK(loaded[1].second == 0.5);
    fs::remove(path);

    GroupReport rep;
    rep.auc = 0.75;
    rep.t_stat = 2.0;
    rep.p_value = 0.04;
    rep.n_control = 3;
    rep.n_patient = 4;
    rep.regional.push_back({2, 0.1, 0.3, 2.5, 0.02, true, 1.7});
    nlohmann::json j = report_to_json(rep);
    CHECK(j["auc"] == 0.75);
    CHECK(j["n_patient"] == 4);
    CHECK(j["regional"][0]["region_id"] == 2);
    CHECK(j["regional"][0]["fdr_pass"] == true);

    const std::string rpath = (fs::temp_directory_path() / "vx_test_regional.csv").string();
    write_regional_csv(rep.regional, rpath);
    std::ifstream is(rpath);
    std::string header;
    std::getline(is, header);
    CHECK(header == "region_id,mean_err_control,mean_err_patient,t,p,fdr_pass,neg_log10_p");
    fs::remove(rpath);
}
