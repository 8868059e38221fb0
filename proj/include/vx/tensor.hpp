#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vx {

// Dense row-major (C order, last index fastest) double tensor.
struct Tensor {
    std::vector<std::size_t> dims;
    std::vector<double> v;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> d) : dims(std::move(d)) {
        v.assign(numel_of(dims), 0.0);
    }

    Tensor(std::vector<std::size_t> d, std::vector<double> data)
        : dims(std::move(d)), v(std::move(data)) {
        if (v.size() != numel_of(dims))
            throw std::invalid_argument("Tensor: data size " + std::to_string(v.size()) +
                                        " does not match dims " + shape_str());
    }

    static std::size_t numel_of(const std::vector<std::size_t>& d) {
        std::size_t n = 1;
        for (std::size_t x : d) {
            if (x == 0) throw std::invalid_argument("Tensor: zero-length axis");
            n *= x;
        }
        return n;
    }

    std::size_t numel() const { return v.size(); }
    std::size_t rank() const { return dims.size(); }

    double& operator[](std::size_t i) { return v[i]; }
    double operator[](std::size_t i) const { return v[i]; }

    // 3-axis indexing
    double& at(std::size_t a, std::size_t b, std::size_t c) {
        return v[(a * dims[1] + b) * dims[2] + c];
    }
    double at(std::size_t a, std::size_t b, std::size_t c) const {
        return v[(a * dims[1] + b) * dims[2] + c];
    }
    // 4-axis indexing
    double& at(std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
        return v[((a * dims[1] + b) * dims[2] + c) * dims[3] + d];
    }
    double at(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
        return v[((a * dims[1] + b) * dims[2] + c) * dims[3] + d];
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "(";
        for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
        os << ")";
        return os.str();
    }

    bool same_shape(const Tensor& o) const { return dims == o.dims; }

    bool all_finite() const {
        return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
    }

    void fill(double x) { std::fill(v.begin(), v.end(), x); }
};

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.dims); }

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape_str() +
                                    " vs " + b.shape_str());
}

// Seeded uniform fill in [-bound, bound]; used for weight init.
inline void fill_uniform(Tensor& t, std::mt19937_64& rng, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& x : t.v) x = dist(rng);
}

inline double dot(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "dot");
    return std::inner_product(a.v.begin(), a.v.end(), b.v.begin(), 0.0);
}

}  // namespace vx
