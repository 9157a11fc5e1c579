#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "simsearch/binary_io.hpp"
#include "simsearch/error.hpp"

namespace simsearch {

/// Row-major so each sample (row) is contiguous; convenient for exporting
/// embeddings and for the per-row normalization.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ColVector = Eigen::VectorXd;

/// Affine map y = W x + b. `weights` is out_dim x in_dim.
struct DenseLayer {
  Matrix weights;
  ColVector bias;

  std::size_t in_dim() const { return static_cast<std::size_t>(weights.cols()); }
  std::size_t out_dim() const { return static_cast<std::size_t>(weights.rows()); }
};

/// Feed-forward embedding head: affine layers with ReLU between them and an
/// L2-normalized output.
class EmbeddingModel {
 public:
  EmbeddingModel() = default;
  explicit EmbeddingModel(std::vector<DenseLayer> layers) : layers_(std::move(layers)) { validate(); }

  /// Glorot-uniform weights, zero biases. `sizes` = {in, hidden..., out}.
  static EmbeddingModel glorot(const std::vector<std::size_t>& sizes, std::uint64_t seed) {
    if (sizes.size() < 2) throw Error(ErrorCode::InvalidArgument, "model needs at least in and out sizes");
    std::mt19937_64 rng(seed);
    std::vector<DenseLayer> layers;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      const auto fan_in = sizes[l], fan_out = sizes[l + 1];
      if (fan_in == 0 || fan_out == 0) throw Error(ErrorCode::InvalidArgument, "layer sizes must be positive");
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      std::uniform_real_distribution<double> dist(-limit, limit);
      DenseLayer layer;
      layer.weights.resize(static_cast<Eigen::Index>(fan_out), static_cast<Eigen::Index>(fan_in));
      for (Eigen::Index r = 0; r < layer.weights.rows(); ++r) {
        for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) layer.weights(r, c) = dist(rng);
      }
      layer.bias = ColVector::Zero(static_cast<Eigen::Index>(fan_out));
      layers.push_back(std::move(layer));
    }
    return EmbeddingModel(std::move(layers));
  }

  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
  std::vector<DenseLayer>& layers() noexcept { return layers_; }

  std::size_t in_dim() const { return layers_.empty() ? 0 : layers_.front().in_dim(); }
  std::size_t out_dim() const { return layers_.empty() ? 0 : layers_.back().out_dim(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += static_cast<std::size_t>(l.weights.size() + l.bias.size());
    return n;
  }

  /// Flat parameter view: per layer, weights row-major then bias.
  std::vector<double> parameters() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    for (const auto& l : layers_) {
      out.insert(out.end(), l.weights.data(), l.weights.data() + l.weights.size());
      out.insert(out.end(), l.bias.data(), l.bias.data() + l.bias.size());
    }
    return out;
  }

  void set_parameters(std::span<const double> flat) {
    if (flat.size() != parameter_count()) throw Error(ErrorCode::ShapeMismatch, "parameter count mismatch");
    std::size_t off = 0;
    for (auto& l : layers_) {
      std::copy_n(flat.data() + off, l.weights.size(), l.weights.data());
      off += static_cast<std::size_t>(l.weights.size());
      std::copy_n(flat.data() + off, l.bias.size(), l.bias.data());
      off += static_cast<std::size_t>(l.bias.size());
    }
  }

  friend bool operator==(const EmbeddingModel& a, const EmbeddingModel& b) {
    if (a.layers_.size() != b.layers_.size()) return false;
    for (std::size_t i = 0; i < a.layers_.size(); ++i) {
      const auto& x = a.layers_[i];
      const auto& y = b.layers_[i];
      if (x.weights.rows() != y.weights.rows() || x.weights.cols() != y.weights.cols()) return false;
      if (x.weights != y.weights || x.bias != y.bias) return false;
    }
    return true;
  }

 private:
  void validate() const {
    if (layers_.empty()) throw Error(ErrorCode::InvalidArgument, "model has no layers");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      if (l.bias.size() != l.weights.rows()) throw Error(ErrorCode::ShapeMismatch, "bias size != weight rows");
      if (i > 0 && l.in_dim() != layers_[i - 1].out_dim()) {
        throw Error(ErrorCode::ShapeMismatch, "layer input dim does not match previous output");
      }
      if (!l.weights.allFinite() || !l.bias.allFinite()) throw Error(ErrorCode::NonFinite, "non-finite parameter");
    }
  }

  std::vector<DenseLayer> layers_;
};

/// Intermediate values kept for backpropagation. inputs[l] feeds layer l;
/// preacts[l] is its affine output.
struct ForwardPass {
  std::vector<Matrix> inputs;
  std::vector<Matrix> preacts;
  ColVector norms;
  Matrix embeddings;
};

inline ForwardPass forward_pass(const EmbeddingModel& model, const Matrix& features) {
  if (model.layers().empty()) throw Error(ErrorCode::InvalidArgument, "empty model");
  if (static_cast<std::size_t>(features.cols()) != model.in_dim()) {
    throw Error(ErrorCode::DimMismatch, "feature dim " + std::to_string(features.cols()) + ", model in_dim " +
                                            std::to_string(model.in_dim()));
  }
  if (!features.allFinite()) throw Error(ErrorCode::NonFinite, "features contain NaN or Inf");

  ForwardPass fp;
  Matrix h = features;
  const auto& layers = model.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    fp.inputs.push_back(h);
    Matrix z = h * layers[l].weights.transpose();
    z.rowwise() += layers[l].bias.transpose();
    fp.preacts.push_back(z);
    h = (l + 1 < layers.size()) ? Matrix(z.cwiseMax(0.0)) : z;
  }
  fp.norms = h.rowwise().norm();
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    if (!(fp.norms(i) >= 1e-12)) {
      if (!std::isfinite(fp.norms(i))) throw Error(ErrorCode::NonFinite, "non-finite activation");
      throw Error(ErrorCode::DegenerateActivation, "sample " + std::to_string(i) + " has zero output activation");
    }
  }
  fp.embeddings = h.array().colwise() / fp.norms.array();
  return fp;
}

/// Unit-norm embeddings, one row per input row.
inline Matrix forward(const EmbeddingModel& model, const Matrix& features) {
  return forward_pass(model, features).embeddings;
}

// ---------------------------------------------------------------------------
// `*.simmodel` checkpoints
// ---------------------------------------------------------------------------

namespace smdl {
inline constexpr char kMagic[4] = {'S', 'M', 'D', 'L'};
inline constexpr std::uint8_t kVersion = 1;
}  // namespace smdl

inline std::vector<std::uint8_t> encode_model(const EmbeddingModel& model) {
  io::ByteWriter w;
  w.put_bytes(std::string_view(smdl::kMagic, 4));
  w.put<std::uint8_t>(smdl::kVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.layers().size()));
  for (const auto& l : model.layers()) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(l.weights.rows()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(l.weights.cols()));
    w.put_span(std::span<const double>(l.weights.data(), static_cast<std::size_t>(l.weights.size())));
    w.put_span(std::span<const double>(l.bias.data(), static_cast<std::size_t>(l.bias.size())));
  }
  const std::uint32_t crc = io::crc32(w.bytes());
  w.put<std::uint32_t>(crc);
  return std::move(w.bytes());
}

inline EmbeddingModel decode_model(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 + 1 + 4 + 4) throw Error(ErrorCode::CorruptSnapshot, "model file truncated");
  if (std::memcmp(bytes.data(), smdl::kMagic, 4) != 0) throw Error(ErrorCode::CorruptSnapshot, "bad model magic");
  const auto body = bytes.first(bytes.size() - 4);
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), 4);
  if (io::crc32(body) != stored) throw Error(ErrorCode::CorruptSnapshot, "model checksum mismatch");
  io::ByteReader r(body, ErrorCode::CorruptSnapshot);
  (void)r.get_string(4);
  if (const auto v = r.get<std::uint8_t>(); v != smdl::kVersion) {
    throw Error(ErrorCode::VersionUnsupported, "model version " + std::to_string(v));
  }
  const auto n_layers = r.get<std::uint32_t>();
  std::vector<DenseLayer> layers;
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    const auto rows = r.get<std::uint32_t>();
    const auto cols = r.get<std::uint32_t>();
    const std::uint64_t needed = (std::uint64_t{rows} * cols + rows) * sizeof(double);
    if (rows == 0 || cols == 0 || needed > r.remaining()) throw Error(ErrorCode::CorruptSnapshot, "bad layer shape");
    DenseLayer l;
    l.weights.resize(rows, cols);
    l.bias.resize(rows);
    r.get_into(std::span<double>(l.weights.data(), static_cast<std::size_t>(l.weights.size())));
    r.get_into(std::span<double>(l.bias.data(), static_cast<std::size_t>(l.bias.size())));
    layers.push_back(std::move(l));
  }
  if (r.remaining() != 0) throw Error(ErrorCode::CorruptSnapshot, "trailing bytes in model file");
  return EmbeddingModel(std::move(layers));
}

inline void save_model(const std::string& path, const EmbeddingModel& model) {
  io::write_file(path, encode_model(model));
}

inline EmbeddingModel load_model(const std::string& path) { return decode_model(io::read_file(path)); }

}  // namespace simsearch
