#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "vx/spline.hpp"

using namespace vx;

namespace {

// Clip (H,W,T) with per-pixel values f(pixel, t).
template <typename F>
Tensor make_clip(std::size_t H, std::size_t W, std::size_t T, F f) {
    Tensor c({H, W, T});
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (std::size_t t = 0; t < T; ++t) c.at(y, x, t) = f(y * W + x, t);
    return c;
}

}  // namespace

TEST_CASE("last_frame_copy returns the final frame unchanged") {
    Tensor c = make_clip(2, 3, 4, [](std::size_t p, std::size_t t) {
        return 0.01 * (double)p + 0.1 * (double)t;
    });
    Tensor out = last_frame_copy(c);
    REQUIRE(out.dims == std::vector<std::size_t>{2, 3});
    for (std::size_t p = 0; p < 6; ++p)
        CHECK(out.v[p] == doctest::Approx(0.01 * (double)p + 0.3).epsilon(1e-15));

    Tensor constant = make_clip(2, 2, 3, [](std::size_t, std::size_t) { return 0.3; });
    for (double v : last_frame_copy(constant).v) CHECK(v == 0.3);

    // Linear ramp with slope s: copying the last frame misses by exactly |s|.
    const double s = 0.04;
    Tensor ramp = make_clip(2, 2, 5, [&](std::size_t, std::size_t t) { return s * (double)t; });
    Tensor pred = last_frame_copy(ramp);
    for (double v : pred.v) CHECK(std::abs((s * 5.0) - v) == doctest::Approx(s).epsilon(1e-12));

    CHECK_THROWS_AS(last_frame_copy(Tensor({3})), std::invalid_argument);
}

TEST_CASE("natural spline reproduces linear and constant data") {
    const std::vector<double> knots = integer_knots(6);
    std::vector<double> lin(6);
    for (std::size_t i = 0; i < 6; ++i) lin[i] = 2.0 * (double)i;
    CubicSpline s = spline_fit_natural(knots, lin);
    for (double m : s.m) CHECK(std::abs(m) < 1e-10);
    for (double t = 0.0; t <= 7.0; t += 0.25) CHECK(s.eval(t) == doctest::Approx(2.0 * t).epsilon(1e-12));

    CubicSpline c = spline_fit_natural(knots, std::vector<double>(6, 0.7));
    for (double t = -1.0; t <= 7.0; t += 0.5) CHECK(c.eval(t) == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("4-point spline matches hand-solved tridiagonal system") {
    // y=[0,1,0,1], h=1: 4*m1 + m2 = -12, m1 + 4*m2 = 12 -> m1=-4, m2=4.
    CubicSpline s = spline_fit_natural(integer_knots(4), {0.0, 1.0, 0.0, 1.0});
    CHECK(s.m[0] == 0.0);
    CHECK(s.m[3] == 0.0);
    CHECK(s.m[1] == doctest::Approx(-4.0).epsilon(1e-12));
    CHECK(s.m[2] == doctest::Approx(4.0).epsilon(1e-12));
    // Interpolation property at the knots.
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(s.eval((double)i) == doctest::Approx(s.y[i]).epsilon(1e-12));
}

TEST_CASE("spline_fit_natural input validation") {
    CHECK_THROWS_AS(spline_fit_natural({0.0}, {1.0}), std::invalid_argument);
    CHECK_THROWS_AS(spline_fit_natural({0.0, 1.0}, {1.0}), std::invalid_argument);
    CHECK_THROWS_AS(spline_fit_natural({0.0, 0.0, 1.0}, {1.0, 2.0, 3.0}), std::invalid_argument);

    // Two points degrade to a line.
    CubicSpline s = spline_fit_natural({0.0, 2.0}, {1.0, 3.0});
    CHECK(s.eval(1.0) == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(s.eval(3.0) == doctest::Approx(4.0).epsilon(1e-14));
}

TEST_CASE("spline extrapolation: linear ramp and constants are exact") {
    const double s = 0.03;
    Tensor ramp = make_clip(2, 2, 6, [&](std::size_t, std::size_t t) { return s * (double)t; });
    Tensor pred = spline_extrapolate_next(ramp);
    for (double v : pred.v) CHECK(std::abs(v - s * 6.0) < 1e-10);

    Tensor constant = make_clip(3, 2, 5, [](std::size_t, std::size_t) { return 0.42; });
    for (double v : spline_extrapolate_next(constant).v) CHECK(std::abs(v - 0.42) < 1e-10);

    Tensor one_frame({2, 2, 1});
    CHECK_THROWS_AS(spline_extrapolate_next(one_frame), std::invalid_argument);
}

TEST_CASE("spline extrapolation matches an independent implementation on a sine series") {
    // f(t) = 0.5 + 0.4*sin(0.3t), T=20; last-piece evaluation at t=20 equals
    // 0.36855736094428504 (scipy CubicSpline, bc_type='natural', frozen).
    Tensor clip = make_clip(1, 1, 20, [](std::size_t, std::size_t t) {
        return 0.5 + 0.4 * std::sin(0.3 * (double)t);
    });
    Tensor pred = spline_extrapolate_next(clip);
    CHECK(pred.v[0] == doctest::Approx(0.36855736094428504).epsilon(1e-9));
}

TEST_CASE("spline outputs are clamped to [0,1]") {
    // Steep upward ramp overshoots 1 at the next step.
    Tensor up = make_clip(1, 1, 4, [](std::size_t, std::size_t t) { return 0.3 * (double)t; });
    CHECK(spline_extrapolate_next(up).v[0] == 1.0);
    Tensor down = make_clip(1, 1, 4, [](std::size_t, std::size_t t) { return 0.9 - 0.3 * (double)t; });
    CHECK(spline_extrapolate_next(down).v[0] == 0.0);
}

TEST_CASE("spline interpolation: linear recovery and zero series") {
    const double s = 0.05;
    Tensor before = make_clip(2, 2, 5, [&](std::size_t, std::size_t t) { return s * (double)t; });
    Tensor after({2, 2});
    for (double& v : after.v) v = s * 6.0;  // frame at t = T+1
    Tensor pred = spline_interpolate_missing(before, after);
    for (double v : pred.v) CHECK(std::abs(v - s * 5.0) < 1e-10);

    Tensor zb({2, 2, 5}), za({2, 2});
    for (double v : spline_interpolate_missing(zb, za).v) CHECK(v == 0.0);

    Tensor bad_after({3, 2});
    CHECK_THROWS_AS(spline_interpolate_missing(before, bad_after), std::invalid_argument);
}

TEST_CASE("interpolation beats extrapolation on a sine series") {
    // Same frozen scipy oracle: interpolating t=20 from knots {0..19, 21}
    // gives 0.388226190841334 vs true 0.3882338007204297.
    auto f = [](double t) { return 0.5 + 0.4 * std::sin(0.3 * t); };
    Tensor before = make_clip(1, 1, 20, [&](std::size_t, std::size_t t) { return f((double)t); });
    Tensor after({1, 1});
    after.v[0] = f(21.0);

    Tensor itp = spline_interpolate_missing(before, after);
    CHECK(itp.v[0] == doctest::Approx(0.388226190841334).epsilon(1e-9));

    Tensor ext = spline_extrapolate_next(before);
    const double truth = f(20.0);
    CHECK(std::abs(itp.v[0] - truth) < std::abs(ext.v[0] - truth));
}

TEST_CASE("interpolation MSE <= extrapolation MSE on band-limited clips") {
    // Smooth per-pixel sinusoids with random phase/period (period >= 8).
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> Uphase(0.0, 6.28318530717958648);
    std::uniform_real_distribution<double> Uperiod(8.0, 16.0);
    const std::size_t T = 20;
    double ext_se = 0.0, itp_se = 0.0;
    std::size_t n = 0;
    for (int pix = 0; pix < 64; ++pix) {
        const double w = 6.28318530717958648 / Uperiod(rng), ph = Uphase(rng);
        auto f = [&](double t) { return 0.5 + 0.4 * std::sin(w * t + ph); };
        Tensor before = make_clip(1, 1, T, [&](std::size_t, std::size_t t) { return f((double)t); });
        Tensor after({1, 1});
        after.v[0] = f((double)T + 1.0);
        const double truth = f((double)T);
        const double de = spline_extrapolate_next(before).v[0] - truth;
        const double di = spline_interpolate_missing(before, after).v[0] - truth;
        ext_se += de * de;
        itp_se += di * di;
        ++n;
    }
    CHECK(itp_se / (double)n <= ext_se / (double)n);
    CHECK(itp_se < ext_se * 0.1);  // interpolation is far more accurate, not just tied
}
