#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <span>
#include <vector>

#include "simsearch/error.hpp"
#include "simsearch/model.hpp"

namespace simsearch {

/// Negative chosen for one ordered anchor-positive pair. `semi_hard` is
/// false when no negative was farther than the positive and the farthest
/// negative was used instead.
struct MinedTriplet {
  std::size_t anchor = 0;
  std::size_t positive = 0;
  std::size_t negative = 0;
  bool semi_hard = false;

  friend bool operator==(const MinedTriplet&, const MinedTriplet&) = default;
};

struct TripletBatchState {
  Matrix embeddings;
  std::vector<std::int32_t> labels;
  Matrix pdist2;
  std::vector<MinedTriplet> triplets;
};

/// Squared Euclidean distances by explicit differences (not the Gram
/// expansion), so the diagonal is exactly zero and the matrix symmetric.
inline Matrix pairwise_sq_distances(const Matrix& e) {
  const Eigen::Index n = e.rows();
  Matrix d = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = (e.row(i) - e.row(j)).squaredNorm();
      d(i, j) = v;
      d(j, i) = v;
    }
  }
  return d;
}

/// Semi-hard negative mining over every ordered anchor-positive pair: the
/// closest negative strictly farther than the positive, else the farthest
/// negative. Ties go to the lower index.
inline TripletBatchState mine_semi_hard(const Matrix& embeddings, std::span<const std::int32_t> labels) {
  const auto n = static_cast<std::size_t>(embeddings.rows());
  if (labels.size() != n) throw Error(ErrorCode::ShapeMismatch, "labels size != embedding rows");
  if (!embeddings.allFinite()) throw Error(ErrorCode::NonFinite, "embeddings contain NaN or Inf");

  bool has_pair = false;
  for (std::size_t i = 0; i < n && !has_pair; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (labels[i] == labels[j]) {
        has_pair = true;
        break;
      }
    }
  }
  if (!has_pair) throw Error(ErrorCode::NoValidPairs, "batch has no anchor-positive pair");
  if (std::set<std::int32_t>(labels.begin(), labels.end()).size() < 2) {
    throw Error(ErrorCode::NoNegatives, "batch has a single class");
  }

  TripletBatchState st;
  st.embeddings = embeddings;
  st.labels.assign(labels.begin(), labels.end());
  st.pdist2 = pairwise_sq_distances(embeddings);

  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t p = 0; p < n; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      const double dap = st.pdist2(a, p);
      std::size_t best_semi = n, farthest = n;
      for (std::size_t c = 0; c < n; ++c) {
        if (labels[c] == labels[a]) continue;
        const double dan = st.pdist2(a, c);
        if (dan > dap && (best_semi == n || dan < st.pdist2(a, best_semi))) best_semi = c;
        if (farthest == n || dan > st.pdist2(a, farthest)) farthest = c;
      }
      if (best_semi != n) {
        st.triplets.push_back({a, p, best_semi, true});
      } else {
        st.triplets.push_back({a, p, farthest, false});
      }
    }
  }
  return st;
}

inline TripletBatchState mine_semi_hard(const Matrix& embeddings, const std::vector<std::int32_t>& labels) {
  return mine_semi_hard(embeddings, std::span<const std::int32_t>(labels));
}

/// Mean over mined pairs of max(0, d²(a,p) − d²(a,n) + margin).
inline double triplet_semi_hard_loss(const TripletBatchState& st, double margin) {
  if (st.triplets.empty()) throw Error(ErrorCode::NoValidPairs, "no mined triplets");
  double sum = 0.0;
  for (const auto& t : st.triplets) {
    sum += std::max(0.0, st.pdist2(t.anchor, t.positive) - st.pdist2(t.anchor, t.negative) + margin);
  }
  return sum / static_cast<double>(st.triplets.size());
}

struct LossAndGradient {
  double loss = 0.0;
  /// Same layout as EmbeddingModel::parameters().
  std::vector<double> gradient;
  TripletBatchState state;
};

/// Loss of forward(model, features) and its gradient w.r.t. every model
/// parameter, holding the mined triplets fixed. Inactive hinges (value
/// <= 0) and non-positive ReLU inputs contribute zero.
inline LossAndGradient loss_gradient(const EmbeddingModel& model, const Matrix& features,
                                     std::span<const std::int32_t> labels, double margin) {
  const ForwardPass fp = forward_pass(model, features);
  LossAndGradient out;
  out.state = mine_semi_hard(fp.embeddings, labels);
  const auto& st = out.state;
  const auto& e = fp.embeddings;
  const double scale = 1.0 / static_cast<double>(st.triplets.size());

  // dL/dE, one row per sample.
  Matrix grad = Matrix::Zero(e.rows(), e.cols());
  double sum = 0.0;
  for (const auto& t : st.triplets) {
    const double hinge = st.pdist2(t.anchor, t.positive) - st.pdist2(t.anchor, t.negative) + margin;
    if (hinge <= 0.0) continue;
    sum += hinge;
    const auto a = static_cast<Eigen::Index>(t.anchor);
    const auto p = static_cast<Eigen::Index>(t.positive);
    const auto ng = static_cast<Eigen::Index>(t.negative);
    grad.row(a) += 2.0 * scale * (e.row(ng) - e.row(p));
    grad.row(p) += -2.0 * scale * (e.row(a) - e.row(p));
    grad.row(ng) += 2.0 * scale * (e.row(a) - e.row(ng));
  }
  out.loss = sum * scale;

  // Through the L2 normalization: dz = (g − e (e·g)) / |z|.
  const ColVector eg = (e.array() * grad.array()).rowwise().sum();
  Matrix dz = (grad - (e.array().colwise() * eg.array()).matrix());
  dz = dz.array().colwise() / fp.norms.array();

  const auto& layers = model.layers();
  std::vector<Matrix> dw(layers.size());
  std::vector<ColVector> db(layers.size());
  for (std::size_t l = layers.size(); l-- > 0;) {
    dw[l] = dz.transpose() * fp.inputs[l];
    db[l] = dz.colwise().sum().transpose();
    if (l == 0) break;
    Matrix dh = dz * layers[l].weights;
    dz = (fp.preacts[l - 1].array() > 0.0).select(dh, 0.0);
  }

  out.gradient.reserve(model.parameter_count());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    out.gradient.insert(out.gradient.end(), dw[l].data(), dw[l].data() + dw[l].size());
    out.gradient.insert(out.gradient.end(), db[l].data(), db[l].data() + db[l].size());
  }
  return out;
}

inline LossAndGradient loss_gradient(const EmbeddingModel& model, const Matrix& features,
                                     const std::vector<std::int32_t>& labels, double margin) {
  return loss_gradient(model, features, std::span<const std::int32_t>(labels), margin);
}

}  // namespace simsearch
