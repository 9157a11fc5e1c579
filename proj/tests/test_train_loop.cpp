#include <cmath>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "simsearch/eval.hpp"
#include "simsearch/train.hpp"
#include "test_util.hpp"

using namespace simsearch;
using testutil::code_of;

namespace {

TrainerConfig quick_config() {
  TrainerConfig c;
  c.max_epochs = 12;
  return c;
}

Dataset clusters(std::size_t n = 500, std::uint64_t seed = 1) {
  SyntheticSpec s;
  s.n = n;
  s.seed = seed;
  return make_clusters(s);
}

bool same_except_wall_clock(const std::vector<TrainLogRow>& a, const std::vector<TrainLogRow>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].epoch != b[i].epoch || a[i].train_loss != b[i].train_loss || a[i].val_loss != b[i].val_loss ||
        a[i].lr != b[i].lr) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST(Synthetic, ClustersHaveRequestedGeometry) {
  SyntheticSpec s;
  s.classes = 4;
  s.n = 4000;
  s.dim = 8;
  s.separation = 6;
  s.sigma = 0.5;
  const auto ds = make_clusters(s);
  ASSERT_EQ(ds.size(), 4000u);
  ASSERT_EQ(ds.dim(), 8u);
  std::vector<Eigen::RowVectorXd> mean(4, Eigen::RowVectorXd::Zero(8));
  std::vector<int> count(4, 0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(ds.labels[i], static_cast<std::int32_t>(i % 4));
    mean[static_cast<std::size_t>(ds.labels[i])] += ds.features.row(static_cast<Eigen::Index>(i));
    ++count[static_cast<std::size_t>(ds.labels[i])];
  }
  for (int c = 0; c < 4; ++c) mean[static_cast<std::size_t>(c)] /= count[static_cast<std::size_t>(c)];
  // Centers sit `separation` sigmas apart.
  for (int a = 0; a < 4; ++a) {
    for (int b = a + 1; b < 4; ++b) EXPECT_NEAR((mean[a] - mean[b]).norm(), 3.0, 0.1);
  }
}

TEST(Synthetic, SpecParsing) {
  const auto s = parse_synthetic_spec("synthetic:classes=3,n=90,dim=7,sep=4.5,seed=11,sigma=2");
  EXPECT_EQ(s.classes, 3u);
  EXPECT_EQ(s.n, 90u);
  EXPECT_EQ(s.dim, 7u);
  EXPECT_EQ(s.separation, 4.5);
  EXPECT_EQ(s.seed, 11u);
  EXPECT_EQ(s.sigma, 2.0);
  EXPECT_EQ(code_of([] { parse_synthetic_spec("synthetic:bogus=1"); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([] { parse_synthetic_spec("synthetic:n=abc"); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([] { parse_synthetic_spec("file.csv"); }), ErrorCode::InvalidArgument);
}

TEST(CsvData, LoadsWithOptionalHeader) {
  testutil::TempDir dir;
  {
    std::ofstream out(dir.file("d.csv"));
    out << "label,f0,f1\n0,1.5,2\n1,-3,4e-1\r\n\n2,0,0\n";
  }
  const auto ds = load_dataset(dir.file("d.csv"));
  ASSERT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.labels, (std::vector<std::int32_t>{0, 1, 2}));
  EXPECT_EQ(ds.features(1, 1), 0.4);
  {
    std::ofstream out(dir.file("bad.csv"));
    out << "0,1,2\n1,2\n";
  }
  EXPECT_EQ(code_of([&] { load_dataset(dir.file("bad.csv")); }), ErrorCode::DimMismatch);
  EXPECT_EQ(code_of([&] { load_dataset(dir.file("none.csv")); }), ErrorCode::IoError);
}

TEST(Split, SeededAndDisjoint) {
  const auto a = split_rows(500, 0.85, 3);
  EXPECT_EQ(a.train.size(), 425u);
  EXPECT_EQ(a.val.size(), 75u);
  std::set<std::size_t> all(a.train.begin(), a.train.end());
  all.insert(a.val.begin(), a.val.end());
  EXPECT_EQ(all.size(), 500u);
  EXPECT_EQ(split_rows(500, 0.85, 3).val, a.val);
  EXPECT_NE(split_rows(500, 0.85, 4).val, a.val);
}

TEST(Sampler, BatchesMixClassesWithARepeat) {
  std::vector<std::int32_t> labels;
  for (int i = 0; i < 100; ++i) labels.push_back(i % 7 == 0 ? 5 : i % 3);
  BalancedBatchSampler sampler(labels, 16, 1);
  for (int b = 0; b < 200; ++b) {
    const auto batch = sampler.next();
    std::map<std::int32_t, int> count;
    for (auto i : batch) ++count[labels[i]];
    EXPECT_GE(count.size(), 2u);
    int most = 0;
    for (const auto& [l, c] : count) most = std::max(most, c);
    EXPECT_GE(most, 2);
  }
  EXPECT_EQ(code_of([] { BalancedBatchSampler(std::vector<std::int32_t>{1, 1, 1}, 8, 1); }),
            ErrorCode::InsufficientClasses);
  EXPECT_EQ(code_of([] { BalancedBatchSampler(std::vector<std::int32_t>{1, 2, 3}, 8, 1); }),
            ErrorCode::InsufficientClasses);
}

TEST(Train, ReducesLossAndSeparatesHoldout) {
  const auto ds = clusters();
  const auto result = train(ds, TrainerConfig{});
  ASSERT_FALSE(result.log.empty());
  EXPECT_LT(result.log.back().train_loss, 0.5 * result.log.front().train_loss);

  const auto holdout = ds.subset(result.split.val);
  const auto records = embed_dataset(result.model, holdout, 0);
  const auto index = Index::build(records);
  const auto report = recall_precision_at_k(*index, records, {1});
  EXPECT_GE(report.recall_at_k.at(1), 0.95);
}

TEST(Train, LogRowsAndBestEpoch) {
  const auto result = train(clusters(300), quick_config());
  ASSERT_FALSE(result.log.empty());
  double best = result.log.front().val_loss;
  for (std::size_t i = 0; i < result.log.size(); ++i) {
    EXPECT_EQ(result.log[i].epoch, i);
    EXPECT_GE(result.log[i].train_loss, 0.0);
    if (i > 0) {
      EXPECT_GE(result.log[i].wall_seconds, result.log[i - 1].wall_seconds);
    }
    best = std::min(best, result.log[i].val_loss);
  }
  EXPECT_EQ(result.best_val_loss, best);
  EXPECT_EQ(result.log[result.best_epoch].val_loss, best);
}

TEST(Train, ReturnsBestValidationWeights) {
  const auto ds = clusters(300);
  const auto result = train(ds, quick_config());
  const auto val = ds.subset(result.split.val);
  EXPECT_NEAR(batch_loss(result.model, val, 1.0), result.best_val_loss, 1e-12);
}

TEST(Train, PlateauTriggersEarlyStop) {
  // Every sample has the same features, so every embedding coincides, the
  // loss sits at the margin and the gradient is exactly zero.
  Dataset ds;
  ds.features = Matrix::Constant(60, 4, 0.5);
  for (int i = 0; i < 60; ++i) ds.labels.push_back(i % 3);
  TrainerConfig c;
  c.max_epochs = 30;
  c.patience = 5;
  const auto result = train(ds, c);
  EXPECT_EQ(result.stop_reason, StopReason::EarlyStopped);
  EXPECT_EQ(result.log.size(), 6u);
  EXPECT_EQ(result.best_epoch, 0u);
  for (const auto& row : result.log) EXPECT_DOUBLE_EQ(row.val_loss, 1.0);
}

TEST(Train, SameSeedIsBitIdentical) {
  const auto ds = clusters(300);
  const auto a = train(ds, quick_config());
  const auto b = train(ds, quick_config());
  EXPECT_TRUE(same_except_wall_clock(a.log, b.log));
  EXPECT_EQ(a.model, b.model);
  auto other = quick_config();
  other.seed = 43;
  EXPECT_FALSE(same_except_wall_clock(a.log, train(ds, other).log));
}

TEST(Train, RejectsSingleClass) {
  Dataset ds;
  ds.features = Matrix::Random(20, 3);
  ds.labels.assign(20, 1);
  EXPECT_EQ(code_of([&] { train(ds, TrainerConfig{}); }), ErrorCode::InsufficientClasses);
}

TEST(TrainLog, CsvFormat) {
  testutil::TempDir dir;
  write_train_log(dir.file("log.csv"), {{0, 0.94, 0.91, 0.003, 1.5}, {1, 0.2345678, 0.3, 0.0003, 2.25}});
  std::ifstream in(dir.file("log.csv"));
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(text,
            "epoch,train_loss,val_loss,lr,wall_seconds\n"
            "0,0.940000,0.910000,0.003000,1.500000\n"
            "1,0.234568,0.300000,0.000300,2.250000\n");
}

TEST(Export, ValidationSetRecordsAreUnitNorm) {
  testutil::TempDir dir;
  const auto ds = clusters(550, 2);
  const auto model = EmbeddingModel::glorot({32, 64, 32}, 1);
  EXPECT_EQ(export_embeddings(model, ds, dir.file("v.emb1"), 77), 550u);
  const auto rs = read_embeddings(dir.file("v.emb1"));
  ASSERT_EQ(rs.size(), 550u);
  for (std::size_t i = 0; i < rs.size(); ++i) {
    EXPECT_EQ(rs[i].id, i);
    EXPECT_EQ(rs[i].label, ds.labels[i]);
    EXPECT_EQ(rs[i].timestamp, 77u);
    EXPECT_NEAR(std::sqrt(squared_norm(std::span<const float>(rs[i].vec))), 1.0, 1e-6);
  }
}

TEST(Export, EmptyDatasetWritesValidFile) {
  testutil::TempDir dir;
  Dataset empty;
  empty.features.resize(0, 32);
  const auto model = EmbeddingModel::glorot({32, 8}, 1);
  EXPECT_EQ(export_embeddings(model, empty, dir.file("e.emb1")), 0u);
  const auto bytes = io::read_file(dir.file("e.emb1"));
  EXPECT_EQ(bytes.size(), emb1::kHeaderSize);
  EXPECT_TRUE(emb1::decode(bytes).empty());
  EXPECT_EQ(bytes[8], 8);
}

TEST(Export, ReingestFindsEachSampleAtDistanceZero) {
  testutil::TempDir dir;
  const auto ds = clusters(200, 3);
  const auto model = EmbeddingModel::glorot({32, 64, 32}, 2);
  export_embeddings(model, ds, dir.file("x.emb1"));
  const auto rs = read_embeddings(dir.file("x.emb1"));
  const auto index = Index::build(rs);
  for (const auto& r : rs) {
    const auto hit = index->query_exact(r.vec, 1, Metric::SquaredEuclidean);
    EXPECT_EQ(hit.at(0).id, r.id);
    EXPECT_EQ(hit.at(0).distance, 0.0);
  }
}
