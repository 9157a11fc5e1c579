#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "simsearch/data.hpp"
#include "simsearch/emb1.hpp"
#include "simsearch/model.hpp"
#include "simsearch/optimizer.hpp"
#include "simsearch/triplet.hpp"

namespace simsearch {

struct TrainLogRow {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
  double wall_seconds = 0.0;
};

enum class StopReason { MaxEpochs, EarlyStopped };

inline const char* to_string(StopReason r) { return r == StopReason::EarlyStopped ? "EarlyStopped" : "MaxEpochs"; }

struct DataSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Seeded shuffle, first round(n·fraction) rows train, the rest validate.
inline DataSplit split_rows(std::size_t n, double fraction, std::uint64_t seed) {
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(rows.begin(), rows.end(), rng);
  auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * fraction));
  if (n >= 2) n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
  DataSplit s;
  s.train.assign(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(std::min(n_train, n)));
  s.val.assign(rows.begin() + static_cast<std::ptrdiff_t>(std::min(n_train, n)), rows.end());
  return s;
}

/// P-classes-by-K-samples batches. Each class keeps its own shuffled queue
/// that is refilled when exhausted, so every batch holds at least two
/// classes and at least one class twice.
class BalancedBatchSampler {
 public:
  BalancedBatchSampler(const std::vector<std::int32_t>& labels, std::size_t batch_size, std::uint64_t seed)
      : rng_(seed) {
    for (std::size_t i = 0; i < labels.size(); ++i) by_class_[labels[i]].push_back(i);
    for (const auto& [label, rows] : by_class_) {
      classes_.push_back(label);
      if (rows.size() >= 2) repeatable_.push_back(label);
    }
    if (classes_.size() < 2 || repeatable_.empty()) {
      throw Error(ErrorCode::InsufficientClasses,
                  "training data needs >= 2 classes and one class with >= 2 samples");
    }
    per_batch_classes_ = std::min(classes_.size(), std::max<std::size_t>(2, batch_size / 2));
    per_class_ = std::max<std::size_t>(2, batch_size / per_batch_classes_);
  }

  std::vector<std::size_t> next() {
    std::vector<std::int32_t> chosen;
    std::uniform_int_distribution<std::size_t> pick_rep(0, repeatable_.size() - 1);
    chosen.push_back(repeatable_[pick_rep(rng_)]);
    std::vector<std::int32_t> rest;
    for (auto c : classes_) {
      if (c != chosen.front()) rest.push_back(c);
    }
    std::shuffle(rest.begin(), rest.end(), rng_);
    rest.resize(per_batch_classes_ - 1);
    chosen.insert(chosen.end(), rest.begin(), rest.end());

    std::vector<std::size_t> batch;
    for (auto c : chosen) {
      const std::size_t take = std::min(per_class_, by_class_[c].size());
      for (std::size_t i = 0; i < take; ++i) batch.push_back(draw(c));
    }
    return batch;
  }

 private:
  std::size_t draw(std::int32_t label) {
    auto& queue = queues_[label];
    if (queue.empty()) {
      queue = by_class_[label];
      std::shuffle(queue.begin(), queue.end(), rng_);
    }
    const std::size_t row = queue.back();
    queue.pop_back();
    return row;
  }

  std::mt19937_64 rng_;
  std::map<std::int32_t, std::vector<std::size_t>> by_class_;
  std::map<std::int32_t, std::vector<std::size_t>> queues_;
  std::vector<std::int32_t> classes_;
  std::vector<std::int32_t> repeatable_;
  std::size_t per_batch_classes_ = 2;
  std::size_t per_class_ = 2;
};

inline double batch_loss(const EmbeddingModel& model, const Dataset& data, double margin) {
  const auto st = mine_semi_hard(forward(model, data.features), data.labels);
  return triplet_semi_hard_loss(st, margin);
}

struct TrainResult {
  EmbeddingModel model;
  std::vector<TrainLogRow> log;
  StopReason stop_reason = StopReason::MaxEpochs;
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  DataSplit split;
};

using EpochCallback = std::function<void(const TrainLogRow&)>;

/// Minibatch momentum SGD on the semi-hard triplet loss. Validation loss is
/// the same loss over the whole held-out split. Training stops after
/// `patience` epochs without a strict val-loss improvement or at
/// max_epochs; either way the best-validation weights are returned.
inline TrainResult train(const Dataset& dataset, const TrainerConfig& config, const EpochCallback& on_epoch = {}) {
  config.validate();
  if (dataset.size() != static_cast<std::size_t>(dataset.features.rows())) {
    throw Error(ErrorCode::ShapeMismatch, "labels and feature rows differ");
  }
  if (std::set<std::int32_t>(dataset.labels.begin(), dataset.labels.end()).size() < 2) {
    throw Error(ErrorCode::InsufficientClasses, "training needs at least 2 classes");
  }

  TrainResult result;
  result.split = split_rows(dataset.size(), config.split_fraction, config.seed);
  const Dataset train_set = dataset.subset(result.split.train);
  const Dataset val_set = dataset.subset(result.split.val);
  try {
    (void)mine_semi_hard(Matrix::Zero(static_cast<Eigen::Index>(val_set.size()), 1), val_set.labels);
  } catch (const Error& e) {
    throw Error(ErrorCode::InsufficientClasses, std::string("validation split unusable: ") + e.what());
  }

  std::vector<std::size_t> sizes{dataset.dim()};
  sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
  sizes.push_back(config.out_dim);
  EmbeddingModel model = EmbeddingModel::glorot(sizes, config.seed);

  BalancedBatchSampler sampler(train_set.labels, config.batch_size, config.seed + 1);
  const std::size_t batches = (train_set.size() + config.batch_size - 1) / config.batch_size;
  std::vector<double> params = model.parameters();
  std::vector<double> velocity(params.size(), 0.0);

  EmbeddingModel best = model;
  std::size_t since_best = 0;
  const auto t0 = std::chrono::steady_clock::now();

  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    const double lr = lr_at(config, epoch);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const Dataset batch = train_set.subset(sampler.next());
      const auto lg = loss_gradient(model, batch.features, batch.labels, config.margin);
      loss_sum += lg.loss;
      sgd_momentum_step(params, lg.gradient, velocity, lr, config.momentum);
      model.set_parameters(params);
    }

    TrainLogRow row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(batches);
    row.val_loss = batch_loss(model, val_set, config.margin);
    row.lr = lr;
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(row);
    if (on_epoch) on_epoch(row);

    if (row.val_loss < result.best_val_loss) {
      result.best_val_loss = row.val_loss;
      result.best_epoch = epoch;
      best = model;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      result.stop_reason = StopReason::EarlyStopped;
      break;
    }
  }
  result.model = std::move(best);
  return result;
}

// ---------------------------------------------------------------------------
// Outputs
// ---------------------------------------------------------------------------

inline std::string format_log_row(const TrainLogRow& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.6f", r.epoch, r.train_loss, r.val_loss, r.lr, r.wall_seconds);
  return buf;
}

inline constexpr const char* kTrainLogHeader = "epoch,train_loss,val_loss,lr,wall_seconds";

inline void write_train_log(const std::string& path, const std::vector<TrainLogRow>& rows) {
  std::string text = std::string(kTrainLogHeader) + "\n";
  for (const auto& r : rows) text += format_log_row(r) + "\n";
  io::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

/// One record per dataset row: id = ordinal, the row's label, unit-norm
/// embedding.
inline std::vector<EmbeddingRecord> embed_dataset(const EmbeddingModel& model, const Dataset& data,
                                                  std::uint64_t timestamp) {
  std::vector<EmbeddingRecord> out;
  if (data.size() == 0) return out;
  const Matrix e = forward(model, data.features);
  out.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    EmbeddingRecord r;
    r.id = i;
    r.label = data.labels[i];
    r.timestamp = timestamp;
    const auto row = e.row(static_cast<Eigen::Index>(i));
    r.vec.assign(row.begin(), row.end());
    out.push_back(std::move(r));
  }
  return out;
}

inline std::size_t export_embeddings(const EmbeddingModel& model, const Dataset& data, const std::string& path,
                                     std::uint64_t timestamp = unix_now()) {
  const auto records = embed_dataset(model, data, timestamp);
  const auto bytes = emb1::encode(records, static_cast<std::uint32_t>(model.out_dim()));
  io::write_file(path, bytes);
  return records.size();
}

}  // namespace simsearch
