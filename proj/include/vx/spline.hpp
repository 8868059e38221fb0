#pragma once

#include <vector>

#include "vx/tensor.hpp"

// Non-learning next-frame estimators: last-observation copy and per-pixel
// natural cubic splines (extrapolation one step past the data, and
// interpolation of a missing interior frame).

namespace vx {

struct CubicSpline {
    std::vector<double> knots;  // strictly increasing
    std::vector<double> y;
    std::vector<double> m;  // second derivatives at knots; natural: m.front()=m.back()=0

    // Evaluates the cubic piece containing t; outside the knot range the
    // nearest end piece is extended (polynomial extrapolation).
    double eval(double t) const {
        const std::size_t n = knots.size();
        std::size_t j = 0;
        if (t >= knots[n - 2])
            j = n - 2;
        else
            while (j + 2 < n && t >= knots[j + 1]) ++j;
        const double h = knots[j + 1] - knots[j];
        const double a = (knots[j + 1] - t) / h, b = (t - knots[j]) / h;
        return a * y[j] + b * y[j + 1] +
               ((a * a * a - a) * m[j] + (b * b * b - b) * m[j + 1]) * (h * h) / 6.0;
    }
};

// Natural cubic spline through (knots[i], values[i]); second derivative zero
// at both ends. Two points degrade to a straight line. Interior second
// derivatives solve the standard tridiagonal system (Thomas algorithm).
inline CubicSpline spline_fit_natural(const std::vector<double>& knots,
                                      const std::vector<double>& values) {
    const std::size_t n = knots.size();
    if (n < 2 || values.size() != n)
        throw std::invalid_argument("spline_fit_natural: need >= 2 points, got " +
                                    std::to_string(n) + " knots / " +
                                    std::to_string(values.size()) + " values");
    for (std::size_t i = 1; i < n; ++i)
        if (knots[i] <= knots[i - 1])
            throw std::invalid_argument("spline_fit_natural: knots must be strictly increasing");

    CubicSpline s{knots, values, std::vector<double>(n, 0.0)};
    if (n == 2) return s;

    // System: for i=1..n-2,
    //   h[i-1] m[i-1] + 2(h[i-1]+h[i]) m[i] + h[i] m[i+1] = 6(d[i] - d[i-1])
    // where h[i] = x[i+1]-x[i], d[i] = (y[i+1]-y[i])/h[i].
    const std::size_t k = n - 2;
    std::vector<double> diag(k), rhs(k), upper(k);
    for (std::size_t i = 0; i < k; ++i) {
        const double h0 = knots[i + 1] - knots[i], h1 = knots[i + 2] - knots[i + 1];
        diag[i] = 2.0 * (h0 + h1);
        upper[i] = h1;
        rhs[i] = 6.0 * ((values[i + 2] - values[i + 1]) / h1 -
                        (values[i + 1] - values[i]) / h0);
    }
    for (std::size_t i = 1; i < k; ++i) {
        const double lower = knots[i + 1] - knots[i];  // h[i]
        const double w = lower / diag[i - 1];
        diag[i] -= w * upper[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    s.m[k] = rhs[k - 1] / diag[k - 1];
    for (std::size_t i = k - 1; i-- > 0;) s.m[i + 1] = (rhs[i] - upper[i] * s.m[i + 1 + 1]) / diag[i];
    return s;
}

inline std::vector<double> integer_knots(std::size_t n) {
    std::vector<double> k(n);
    for (std::size_t i = 0; i < n; ++i) k[i] = (double)i;
    return k;
}

namespace detail {
inline double clamp01(double x) { return x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x); }

// Extracts the length-T pixel series of a clip whose last axis is time.
inline void pixel_series(const Tensor& clip, std::size_t pixel, std::size_t T,
                         std::vector<double>& out) {
    const std::size_t stride = clip.dims.back();
    out.resize(T);
    for (std::size_t t = 0; t < T; ++t) out[t] = clip.v[pixel * stride + t];
}
}  // namespace detail

// Returns frame T-1 of a clip (..., T) as a (...) tensor.
inline Tensor last_frame_copy(const Tensor& clip) {
    if (clip.rank() < 2) throw std::invalid_argument("last_frame_copy: need a time axis");
    const std::size_t T = clip.dims.back();
    std::vector<std::size_t> odims(clip.dims.begin(), clip.dims.end() - 1);
    Tensor out(odims);
    for (std::size_t i = 0; i < out.numel(); ++i) out.v[i] = clip.v[i * T + (T - 1)];
    return out;
}

// Per pixel: natural spline on t=0..T-1, evaluated at t=T; clamped to [0,1].
inline Tensor spline_extrapolate_next(const Tensor& clip) {
    if (clip.rank() < 2 || clip.dims.back() < 2)
        throw std::invalid_argument("spline_extrapolate_next: need >= 2 frames, got " +
                                    clip.shape_str());
    const std::size_t T = clip.dims.back();
    std::vector<std::size_t> odims(clip.dims.begin(), clip.dims.end() - 1);
    Tensor out(odims);
    const std::vector<double> knots = integer_knots(T);
    std::vector<double> series;
    for (std::size_t i = 0; i < out.numel(); ++i) {
        detail::pixel_series(clip, i, T, series);
        out.v[i] = detail::clamp01(spline_fit_natural(knots, series).eval((double)T));
    }
    return out;
}

// Per pixel: natural spline on knots {0..T-1, T+1}, evaluated at the missing
// t=T; clamped to [0,1]. `after` holds the frame at t=T+1.
inline Tensor spline_interpolate_missing(const Tensor& before, const Tensor& after) {
    if (before.rank() < 2)
        throw std::invalid_argument("spline_interpolate_missing: need a time axis");
    const std::size_t T = before.dims.back();
    std::vector<std::size_t> odims(before.dims.begin(), before.dims.end() - 1);
    if (after.dims != odims)
        throw std::invalid_argument("spline_interpolate_missing: after frame " +
                                    after.shape_str() + " does not match clip " +
                                    before.shape_str());
    Tensor out(odims);
    std::vector<double> knots = integer_knots(T);
    knots.push_back((double)T + 1.0);
    std::vector<double> series;
    for (std::size_t i = 0; i < out.numel(); ++i) {
        detail::pixel_series(before, i, T, series);
        series.push_back(after.v[i]);
        out.v[i] = detail::clamp01(spline_fit_natural(knots, series).eval((double)T));
    }
    return out;
}

}  // namespace vx
