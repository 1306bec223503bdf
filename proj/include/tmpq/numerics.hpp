#pragma once

// Dense row-major tensors, a portable seeded RNG and the small-matrix linear
// algebra (Jacobi eigensolver, PSD square root, Gaussian fits) the rest of
// the library is built on. Everything is double precision.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tmpq {

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (element_count(shape_) != data_.size())
            throw std::invalid_argument("Tensor: shape does not match data length");
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
        return Tensor({rows, cols}, std::vector<double>(values));
    }

    static Tensor identity(std::size_t n) {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
        return t;
    }

    const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
    std::size_t cols() const { return shape_.size() < 2 ? 1 : data_.size() / std::max<std::size_t>(shape_[0], 1); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    std::vector<double>& storage() noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

    Tensor reshaped(std::vector<std::size_t> shape) const { return Tensor(std::move(shape), data_); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    static std::size_t element_count(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

inline void require_matrix(const Tensor& t, const char* what) {
    if (t.rank() != 2) throw std::invalid_argument(std::string(what) + ": expected a rank-2 tensor");
}

/// a[m×k] · b[k×n], via Eigen.
namespace detail {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<const RowMajor> view(const Tensor& t) {
    return {t.storage().data(), static_cast<Eigen::Index>(t.shape()[0]), static_cast<Eigen::Index>(t.shape()[1])};
}

inline Eigen::Map<RowMajor> view(Tensor& t) {
    return {t.storage().data(), static_cast<Eigen::Index>(t.shape()[0]), static_cast<Eigen::Index>(t.shape()[1])};
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    if (b.shape()[0] != a.shape()[1]) throw std::invalid_argument("matmul: inner extents differ");
    Tensor out({a.shape()[0], b.shape()[1]});
    if (out.size() != 0) detail::view(out).noalias() = detail::view(a) * detail::view(b);
    return out;
}

inline Tensor transpose(const Tensor& a) {
    require_matrix(a, "transpose");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(j, i) = a(i, j);
    return out;
}

/// aᵀ · b without materialising the transpose; used for weight gradients.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_tn");
    require_matrix(b, "matmul_tn");
    if (b.shape()[0] != a.shape()[0]) throw std::invalid_argument("matmul_tn: row counts differ");
    Tensor out({a.shape()[1], b.shape()[1]});
    if (out.size() != 0) detail::view(out).noalias() = detail::view(a).transpose() * detail::view(b);
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("add: shape mismatch");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

inline Tensor subtract(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("subtract: shape mismatch");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

inline Tensor scaled(const Tensor& a, double c) {
    Tensor out = a;
    for (auto& v : out.storage()) v *= c;
    return out;
}

inline double mean_squared_error(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("mean_squared_error: shape mismatch");
    if (a.empty()) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

inline double frobenius_norm(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.values()) acc += v * v;
    return std::sqrt(acc);
}

inline double trace(const Tensor& a) {
    require_matrix(a, "trace");
    double acc = 0.0;
    for (std::size_t i = 0; i < std::min(a.shape()[0], a.shape()[1]); ++i) acc += a(i, i);
    return acc;
}

// ---------------------------------------------------------------------------
// RNG

/// splitmix64 finaliser; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
    return mix64(seed ^ mix64(stream + 0x632be59bd9b4e019ULL));
}

/// Seeded generator with a fully specified output stream. The engine is
/// mt19937_64 (bit-exact by the standard); the distributions are written
/// out here because the std:: ones are implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n).
    std::size_t below(std::size_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below: empty range");
        const std::uint64_t bound = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        std::uint64_t r;
        do r = engine_();
        while (r >= limit);
        return static_cast<std::size_t>(r % bound);
    }

    /// Standard normal via Box-Muller; the second variate is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do u1 = uniform();
        while (u1 <= 0.0);
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * 3.14159265358979323846 * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    Tensor normal_tensor(std::vector<std::size_t> shape) {
        Tensor t(std::move(shape));
        for (auto& v : t.storage()) v = normal();
        return t;
    }

    Rng split(std::uint64_t stream) const { return Rng(derive_seed(seed_, stream)); }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Symmetric eigenproblems

struct SymmetricEigen {
    std::vector<double> values;
    Tensor vectors;  // columns are eigenvectors
};

inline double max_asymmetry(const Tensor& m) {
    double worst = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = i + 1; j < m.rows(); ++j) worst = std::max(worst, std::abs(m(i, j) - m(j, i)));
    return worst;
}

inline void require_square(const Tensor& m, const char* what) {
    require_matrix(m, what);
    if (m.shape()[0] != m.shape()[1]) throw std::invalid_argument(std::string(what) + ": matrix is not square");
}

/// Cyclic Jacobi rotations until every off-diagonal entry is below 1e-12
/// (relative to the matrix scale). Input is symmetrised first.
inline SymmetricEigen jacobi_eigen(const Tensor& m, int max_sweeps = 100) {
    require_square(m, "jacobi_eigen");
    const std::size_t n = m.rows();
    Tensor a = m;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (m(i, j) + m(j, i));
    Tensor v = Tensor::identity(n);

    const double scale = std::max(1.0, frobenius_norm(a));
    const double tol = 1e-12 * scale;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off = std::max(off, std::abs(a(p, q)));
        if (off < tol) break;

        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    SymmetricEigen out;
    out.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.values[i] = a(i, i);
    out.vectors = std::move(v);
    return out;
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// (round-off) are clamped to zero.
inline Tensor psd_sqrt(const Tensor& m) {
    require_square(m, "psd_sqrt");
    double scale = 1.0;
    for (double x : m.values()) scale = std::max(scale, std::abs(x));
    if (max_asymmetry(m) > 1e-8 * scale) throw std::invalid_argument("psd_sqrt: matrix is not symmetric");

    const auto eig = jacobi_eigen(m);
    const std::size_t n = m.rows();
    Tensor out({n, n});
    for (std::size_t k = 0; k < n; ++k) {
        const double root = std::sqrt(std::max(0.0, eig.values[k]));
        if (root == 0.0) continue;
        for (std::size_t i = 0; i < n; ++i) {
            const double vik = eig.vectors(i, k) * root;
            for (std::size_t j = 0; j < n; ++j) out(i, j) += vik * eig.vectors(j, k);
        }
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) out(i, j) = out(j, i) = 0.5 * (out(i, j) + out(j, i));
    return out;
}

// ---------------------------------------------------------------------------
// Gaussian fits

struct GaussianStats {
    std::vector<double> mean;
    Tensor cov;

    std::size_t dim() const noexcept { return mean.size(); }
};

/// Sample mean and unbiased (1/(n-1)) covariance of the rows of `samples`.
inline GaussianStats gaussian_stats(const Tensor& samples) {
    require_matrix(samples, "gaussian_stats");
    const std::size_t n = samples.shape()[0], d = samples.shape()[1];
    if (n < 2) throw std::invalid_argument("gaussian_stats: need at least two samples");

    GaussianStats out;
    out.mean.assign(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out.mean[j] += samples(i, j);
    for (auto& m : out.mean) m /= static_cast<double>(n);

    out.cov = Tensor({d, d});
    std::vector<double> centered(d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) centered[j] = samples(i, j) - out.mean[j];
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t b = a; b < d; ++b) out.cov(a, b) += centered[a] * centered[b];
    }
    const double norm = 1.0 / static_cast<double>(n - 1);
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = a; b < d; ++b) out.cov(b, a) = out.cov(a, b) = out.cov(a, b) * norm;
    return out;
}

}  // namespace tmpq
