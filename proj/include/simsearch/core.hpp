#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "simsearch/error.hpp"

namespace simsearch {

/// Dense feature vector. Storage-facing code (index, files) keeps f32; the
/// math below is templated and always accumulates in double.
using Vector = std::vector<double>;

enum class Metric { SquaredEuclidean, Euclidean, Cosine };

inline constexpr double kZeroNormEpsilon = 1e-12;

inline std::string to_string(Metric m) {
  switch (m) {
    case Metric::SquaredEuclidean: return "squared_euclidean";
    case Metric::Euclidean: return "euclidean";
    case Metric::Cosine: return "cosine";
  }
  return "unknown";
}

inline Metric parse_metric(const std::string& s) {
  if (s == "cosine") return Metric::Cosine;
  if (s == "euclidean" || s == "l2") return Metric::Euclidean;
  if (s == "squared_euclidean" || s == "sqeuclidean" || s == "l2sq") return Metric::SquaredEuclidean;
  throw Error(ErrorCode::InvalidArgument, "unknown metric '" + s + "'");
}

template <std::floating_point T>
void check_finite(std::span<const T> v) {
  for (T x : v) {
    if (!std::isfinite(x)) throw Error(ErrorCode::NonFinite, "vector contains NaN or Inf");
  }
}

template <std::floating_point T>
double squared_norm(std::span<const T> v) {
  double s = 0.0;
  for (T x : v) s += static_cast<double>(x) * static_cast<double>(x);
  return s;
}

template <std::floating_point T>
double dot(std::span<const T> a, std::span<const T> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

/// Scales `v` to unit L2 norm. Throws NonFinite / ZeroVector.
template <std::floating_point T>
std::vector<T> normalize(std::span<const T> v) {
  if (v.empty()) throw Error(ErrorCode::DimMismatch, "cannot normalize an empty vector");
  check_finite(v);
  const double norm = std::sqrt(squared_norm(v));
  if (norm < kZeroNormEpsilon) throw Error(ErrorCode::ZeroVector, "vector norm is zero");
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<T>(static_cast<double>(v[i]) / norm);
  return out;
}

template <std::floating_point T>
std::vector<T> normalize(const std::vector<T>& v) {
  return normalize(std::span<const T>(v));
}

template <std::floating_point T>
double distance(std::span<const T> a, std::span<const T> b, Metric metric) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::DimMismatch,
                "dims " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  switch (metric) {
    case Metric::SquaredEuclidean:
    case Metric::Euclidean: {
      double s = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
      }
      return metric == Metric::Euclidean ? std::sqrt(s) : s;
    }
    case Metric::Cosine: {
      double ab = 0.0, aa = 0.0, bb = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a[i], y = b[i];
        ab += x * y;
        aa += x * x;
        bb += y * y;
      }
      const double na = std::sqrt(aa), nb = std::sqrt(bb);
      if (na < kZeroNormEpsilon || nb < kZeroNormEpsilon) {
        throw Error(ErrorCode::ZeroVector, "cosine distance of a zero vector");
      }
      // Rounding can push a·b/(|a||b|) a hair past 1.
      return std::max(0.0, 1.0 - ab / (na * nb));
    }
  }
  return 0.0;
}

template <std::floating_point T>
double distance(const std::vector<T>& a, const std::vector<T>& b, Metric metric) {
  return distance(std::span<const T>(a), std::span<const T>(b), metric);
}

// ---------------------------------------------------------------------------
// Binary codes
// ---------------------------------------------------------------------------

inline constexpr std::size_t kDefaultSubcodeWidth = 64;

/// Fixed-width bit string stored in 64-bit words. The logical width is the
/// source embedding dim; it is padded up to a multiple of `subcode_width`
/// and every padding bit stays zero.
class BinaryCode {
 public:
  BinaryCode() = default;

  explicit BinaryCode(std::size_t width, std::size_t subcode_width = kDefaultSubcodeWidth)
      : width_(width), subcode_width_(subcode_width) {
    if (width == 0) throw Error(ErrorCode::InvalidArgument, "code width must be positive");
    if (subcode_width == 0 || subcode_width > 64 || 64 % subcode_width != 0) {
      throw Error(ErrorCode::InvalidArgument, "subcode width must divide 64");
    }
    words_.assign(word_count(width), 0);
  }

  static std::size_t word_count(std::size_t width) { return (width + 63) / 64; }

  static BinaryCode from_words(std::size_t width, std::span<const std::uint64_t> words,
                               std::size_t subcode_width = kDefaultSubcodeWidth) {
    BinaryCode code(width, subcode_width);
    if (words.size() != code.words_.size()) {
      throw Error(ErrorCode::WidthMismatch, "word count does not match width");
    }
    std::copy(words.begin(), words.end(), code.words_.begin());
    code.clear_padding();
    return code;
  }

  std::size_t width() const noexcept { return width_; }
  std::size_t subcode_width() const noexcept { return subcode_width_; }
  std::size_t padded_width() const noexcept {
    return (width_ + subcode_width_ - 1) / subcode_width_ * subcode_width_;
  }
  std::size_t subcode_count() const noexcept { return padded_width() / subcode_width_; }

  /// The i-th `subcode_width`-bit slice, low bits first.
  std::uint64_t subcode(std::size_t i) const {
    const std::size_t bit = i * subcode_width_;
    const std::uint64_t word = words_[bit / 64] >> (bit % 64);
    return subcode_width_ == 64 ? word : word & ((std::uint64_t{1} << subcode_width_) - 1);
  }

  bool test(std::size_t i) const { return (words_[i / 64] >> (i % 64)) & 1U; }
  void set(std::size_t i, bool value = true) {
    const std::uint64_t mask = std::uint64_t{1} << (i % 64);
    if (value) {
      words_[i / 64] |= mask;
    } else {
      words_[i / 64] &= ~mask;
    }
  }

  std::span<const std::uint64_t> words() const noexcept { return words_; }

  std::string to_bit_string() const {
    std::string s(width_, '0');
    for (std::size_t i = 0; i < width_; ++i) s[i] = test(i) ? '1' : '0';
    return s;
  }

  friend bool operator==(const BinaryCode&, const BinaryCode&) = default;

 private:
  void clear_padding() {
    if (width_ % 64 != 0) words_.back() &= (std::uint64_t{1} << (width_ % 64)) - 1;
  }

  std::size_t width_ = 0;
  std::size_t subcode_width_ = kDefaultSubcodeWidth;
  std::vector<std::uint64_t> words_;
};

/// Bit i is set iff v[i] > thresholds[i] (strict).
template <std::floating_point T, std::floating_point U>
void binarize_into(std::span<const T> v, std::span<const U> thresholds, std::span<std::uint64_t> words) {
  std::fill(words.begin(), words.end(), 0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (static_cast<double>(v[i]) > static_cast<double>(thresholds[i])) {
      words[i / 64] |= std::uint64_t{1} << (i % 64);
    }
  }
}

template <std::floating_point T, std::floating_point U>
BinaryCode binarize(std::span<const T> v, std::span<const U> thresholds,
                    std::size_t subcode_width = kDefaultSubcodeWidth) {
  if (v.size() != thresholds.size()) {
    throw Error(ErrorCode::DimMismatch, "thresholds dim does not match vector dim");
  }
  BinaryCode code(v.size(), subcode_width);
  std::vector<std::uint64_t> words(code.words().size());
  binarize_into(v, thresholds, std::span<std::uint64_t>(words));
  return BinaryCode::from_words(v.size(), words, subcode_width);
}

template <std::floating_point T, std::floating_point U>
BinaryCode binarize(const std::vector<T>& v, const std::vector<U>& thresholds,
                    std::size_t subcode_width = kDefaultSubcodeWidth) {
  return binarize(std::span<const T>(v), std::span<const U>(thresholds), subcode_width);
}

inline std::uint32_t hamming_words(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) noexcept {
  std::uint32_t d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += static_cast<std::uint32_t>(std::popcount(a[i] ^ b[i]));
  return d;
}

inline std::uint32_t hamming(const BinaryCode& a, const BinaryCode& b) {
  if (a.width() != b.width() || a.subcode_width() != b.subcode_width()) {
    throw Error(ErrorCode::WidthMismatch, "codes have different widths");
  }
  return hamming_words(a.words(), b.words());
}

/// Per-dimension median of a row-major corpus (n rows of `dim` values).
/// Even counts take the mean of the two middle values.
template <std::floating_point T>
std::vector<float> column_medians(std::span<const T> rows, std::size_t dim) {
  std::vector<float> med(dim, 0.0f);
  if (dim == 0) return med;
  const std::size_t n = rows.size() / dim;
  if (n == 0) return med;
  std::vector<double> col(n);
  for (std::size_t j = 0; j < dim; ++j) {
    for (std::size_t i = 0; i < n; ++i) col[i] = rows[i * dim + j];
    const auto mid = col.begin() + static_cast<std::ptrdiff_t>(n / 2);
    std::nth_element(col.begin(), mid, col.end());
    double m = *mid;
    if (n % 2 == 0) m = 0.5 * (m + *std::max_element(col.begin(), mid));
    med[j] = static_cast<float>(m);
  }
  return med;
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

struct PcaBasis {
  Vector mean;
  std::vector<Vector> components;
  std::vector<double> explained_variance;
  /// Set when fewer than the requested k eigenvalues were nonzero; only the
  /// nonzero ones are returned.
  bool rank_deficient = false;

  std::size_t dim() const noexcept { return mean.size(); }
  std::size_t k() const noexcept { return components.size(); }
};

namespace detail {

/// Cyclic Jacobi eigendecomposition of a symmetric row-major matrix.
/// On return `a` holds the eigenvalues on its diagonal and `v` the
/// eigenvectors as columns.
inline void jacobi_eigen(std::vector<double>& a, std::vector<double>& v, std::size_t n) {
  v.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  auto at = [n](std::vector<double>& m, std::size_t r, std::size_t c) -> double& { return m[r * n + c]; };

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0, total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        const double x = at(a, r, c) * at(a, r, c);
        total += x;
        if (r != c) off += x;
      }
    }
    if (off <= 1e-30 * std::max(total, 1e-300)) break;

    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = at(a, p, q);
        if (apq == 0.0) continue;
        const double theta = (at(a, q, q) - at(a, p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = at(a, k, p), akq = at(a, k, q);
          at(a, k, p) = c * akp - s * akq;
          at(a, k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = at(a, p, k), aqk = at(a, q, k);
          at(a, p, k) = c * apk - s * aqk;
          at(a, q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = at(v, k, p), vkq = at(v, k, q);
          at(v, k, p) = c * vkp - s * vkq;
          at(v, k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
}

}  // namespace detail

/// Principal components of `data` via eigendecomposition of the covariance
/// matrix (population divisor n). Components are ordered by eigenvalue and
/// each is oriented so its largest-magnitude coordinate is positive.
template <std::floating_point T>
PcaBasis pca_fit(const std::vector<std::vector<T>>& data, std::size_t k) {
  if (data.size() < 2) throw Error(ErrorCode::InsufficientData, "PCA needs at least 2 vectors");
  const std::size_t d = data.front().size();
  if (d == 0) throw Error(ErrorCode::InsufficientData, "PCA on zero-dim vectors");
  if (k == 0 || k > d) throw Error(ErrorCode::InvalidArgument, "PCA k must be in [1, dim]");
  for (const auto& row : data) {
    if (row.size() != d) throw Error(ErrorCode::DimMismatch, "PCA rows have differing dims");
    check_finite(std::span<const T>(row));
  }

  const double n = static_cast<double>(data.size());
  PcaBasis basis;
  basis.mean.assign(d, 0.0);
  for (const auto& row : data) {
    for (std::size_t j = 0; j < d; ++j) basis.mean[j] += row[j];
  }
  for (double& m : basis.mean) m /= n;

  std::vector<double> cov(d * d, 0.0);
  std::vector<double> centered(d);
  for (const auto& row : data) {
    for (std::size_t j = 0; j < d; ++j) centered[j] = row[j] - basis.mean[j];
    for (std::size_t r = 0; r < d; ++r) {
      for (std::size_t c = r; c < d; ++c) cov[r * d + c] += centered[r] * centered[c];
    }
  }
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t c = r; c < d; ++c) {
      cov[r * d + c] /= n;
      cov[c * d + r] = cov[r * d + c];
    }
  }

  std::vector<double> vecs;
  detail::jacobi_eigen(cov, vecs, d);

  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return cov[x * d + x] > cov[y * d + y]; });

  const double top = std::max(0.0, cov[order[0] * d + order[0]]);
  const double cutoff = std::max(1e-14, 1e-10 * top);
  for (std::size_t idx = 0; idx < k; ++idx) {
    const std::size_t col = order[idx];
    const double lambda = cov[col * d + col];
    if (lambda <= cutoff) {
      basis.rank_deficient = true;
      break;
    }
    Vector comp(d);
    for (std::size_t r = 0; r < d; ++r) comp[r] = vecs[r * d + col];
    std::size_t argmax = 0;
    for (std::size_t r = 1; r < d; ++r) {
      if (std::abs(comp[r]) > std::abs(comp[argmax])) argmax = r;
    }
    if (comp[argmax] < 0) {
      for (double& x : comp) x = -x;
    }
    basis.components.push_back(std::move(comp));
    basis.explained_variance.push_back(lambda);
  }
  return basis;
}

/// Coordinates of `v` in the basis: components_j · (v − mean).
template <std::floating_point T>
Vector pca_project(const PcaBasis& basis, std::span<const T> v) {
  if (v.size() != basis.dim()) throw Error(ErrorCode::DimMismatch, "vector dim does not match PCA basis");
  Vector out(basis.k(), 0.0);
  for (std::size_t j = 0; j < basis.k(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) s += basis.components[j][i] * (static_cast<double>(v[i]) - basis.mean[i]);
    out[j] = s;
  }
  return out;
}

template <std::floating_point T>
Vector pca_project(const PcaBasis& basis, const std::vector<T>& v) {
  return pca_project(basis, std::span<const T>(v));
}

}  // namespace simsearch
