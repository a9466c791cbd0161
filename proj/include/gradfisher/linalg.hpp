#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "gradfisher/errors.hpp"

namespace gradfisher {

using Vector = std::vector<double>;

constexpr double kInf = std::numeric_limits<double>::infinity();

// Dense row-major matrix of 64-bit scalars. 64-bit everywhere: the
// suppression residuals this library asserts live near 1e-6 and below.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const {
        return {data.data() + r * cols, cols};
    }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

inline Matrix identity_matrix(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

inline Vector matvec(const Matrix& m, const Vector& v) {
    if (m.cols != v.size())
        throw ShapeError("matvec: " + std::to_string(m.rows) + "x" +
                         std::to_string(m.cols) + " times vector of length " +
                         std::to_string(v.size()));
    Vector out(m.rows, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r) {
        double acc = 0.0;
        const double* row = m.data.data() + r * m.cols;
        for (std::size_t c = 0; c < m.cols; ++c) acc += row[c] * v[c];
        out[r] = acc;
    }
    return out;
}

// out[c] = sum_r M[r][c] * v[r]
inline Vector matvec_transposed(const Matrix& m, const Vector& v) {
    if (m.rows != v.size())
        throw ShapeError("matvec_transposed: " + std::to_string(m.rows) + "x" +
                         std::to_string(m.cols) + " transposed times vector of length " +
                         std::to_string(v.size()));
    Vector out(m.cols, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r) {
        const double* row = m.data.data() + r * m.cols;
        const double vr = v[r];
        for (std::size_t c = 0; c < m.cols; ++c) out[c] += row[c] * vr;
    }
    return out;
}

inline Matrix outer(const Vector& a, const Vector& b) {
    Matrix m(a.size(), b.size());
    for (std::size_t r = 0; r < a.size(); ++r)
        for (std::size_t c = 0; c < b.size(); ++c) m.at(r, c) = a[r] * b[c];
    return m;
}

inline double dot(const Vector& a, const Vector& b) {
    if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

inline double norm2(const Vector& v) { return std::sqrt(dot(v, v)); }

inline double linf_norm(const Vector& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

inline bool all_finite(const Vector& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

// Pairwise (tree) summation: the reduction every batch mean in this library
// uses, so results do not depend on the order contributions arrive in.
inline double pairwise_sum(std::span<const double> xs) {
    if (xs.empty()) return 0.0;
    if (xs.size() <= 8) {
        double acc = 0.0;
        for (double x : xs) acc += x;
        return acc;
    }
    const std::size_t half = xs.size() / 2;
    return pairwise_sum(xs.subspan(0, half)) + pairwise_sum(xs.subspan(half));
}

inline double mean(std::span<const double> xs) {
    if (xs.empty()) throw ParamError("mean of empty sample");
    return pairwise_sum(xs) / static_cast<double>(xs.size());
}

namespace detail {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

inline std::uint64_t mix64(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
}

} // namespace detail

// Counter-based random stream keyed by (master_seed, stream_id). The n-th
// draw is a pure function of the key and n, so per-user data is identical
// no matter which thread produces it or in what order streams are consumed.
class RandomSource {
public:
    RandomSource(std::uint64_t master_seed, std::uint64_t stream_id)
        : key_(detail::mix64(detail::mix64(master_seed + detail::kGolden) ^
                             detail::mix64(stream_id + 0x6A09E667F3BCC909ULL))) {}

    // Derive an independent child stream; hierarchical, deterministic.
    RandomSource stream(std::uint64_t substream) const {
        return RandomSource(key_, substream);
    }

    std::uint64_t next_u64() {
        ++counter_;
        return detail::mix64(key_ + counter_ * detail::kGolden);
    }

    // [0, 1)
    double next_uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Marsaglia polar method; only sqrt/log so the sequence is stable.
    double next_gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * next_uniform() - 1.0;
            v = 2.0 * next_uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double mult = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * mult;
        has_spare_ = true;
        return u * mult;
    }

    // Unbiased integer in [0, bound) by rejection.
    std::uint64_t next_below(std::uint64_t bound) {
        if (bound == 0) throw ParamError("next_below: zero bound");
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % bound;
    }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

inline Vector gaussian_sample(RandomSource& src, double mean, double std, std::size_t n) {
    if (std < 0.0 || !std::isfinite(std))
        throw ParamError("gaussian_sample: std must be finite and >= 0");
    Vector out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = mean + std * src.next_gaussian();
    return out;
}

template <typename T>
void shuffle(std::vector<T>& xs, RandomSource& src) {
    for (std::size_t i = xs.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(src.next_below(i));
        std::swap(xs[i - 1], xs[j]);
    }
}

// Static partition over [0, n); each index is handled exactly once by a pure
// body, so results are identical for every thread count.
template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& body) {
    if (threads <= 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    const unsigned workers = static_cast<unsigned>(
        std::min<std::size_t>(threads, n));
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) body(i);
        });
    }
    for (auto& t : pool) t.join();
}

} // namespace gradfisher
