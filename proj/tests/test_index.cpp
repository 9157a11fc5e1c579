#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <set>
#include <thread>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "simsearch/index.hpp"
#include "test_util.hpp"

using namespace simsearch;
using testutil::code_of;

namespace {

EmbeddingRecord rec(std::uint64_t id, std::vector<float> v, std::uint64_t ts = 1, std::optional<std::int32_t> label = {}) {
  EmbeddingRecord r;
  r.id = id;
  r.vec = std::move(v);
  r.timestamp = ts;
  r.label = label;
  return r;
}

std::vector<HammingHit> oracle_hamming(const Index& index, const std::vector<float>& q, std::size_t r) {
  const auto qn = normalize(q);
  const auto th = index.thresholds();
  std::vector<HammingHit> all;
  for (const auto& e : index.entries()) {
    std::uint32_t d = 0;
    for (std::size_t i = 0; i < qn.size(); ++i) d += (qn[i] > th[i]) != e.code.test(i);
    all.push_back({e.id, d});
  }
  std::sort(all.begin(), all.end(), [](const HammingHit& a, const HammingHit& b) {
    return a.distance != b.distance ? a.distance < b.distance : a.id < b.id;
  });
  all.resize(std::min(r, all.size()));
  return all;
}

std::vector<std::uint64_t> ids_of(const std::vector<QueryResult>& rs) {
  std::vector<std::uint64_t> out;
  for (const auto& r : rs) out.push_back(r.id);
  return out;
}

}  // namespace

TEST(IndexInsert, FirstInsertFixesDim) {
  Index index;
  std::mt19937_64 rng(1);
  index.insert(rec(1, testutil::gaussian_f(rng, 128)));
  EXPECT_EQ(index.dim(), 128u);
  EXPECT_EQ(code_of([&] { index.insert(rec(2, testutil::gaussian_f(rng, 64))); }), ErrorCode::DimMismatch);
}

TEST(IndexInsert, DuplicateAndUpsert) {
  Index index;
  index.insert(rec(7, {1, 0}, 5));
  EXPECT_EQ(code_of([&] { index.insert(rec(7, {0, 1})); }), ErrorCode::DuplicateId);
  index.insert(rec(7, {0, 3}, 9), /*upsert=*/true);
  EXPECT_EQ(index.size(), 1u);
  const auto e = index.get(7);
  ASSERT_TRUE(e);
  EXPECT_EQ(e->embedding, (std::vector<float>{0, 1}));
  EXPECT_EQ(e->timestamp, 9u);
}

TEST(IndexInsert, RejectsZeroAndNonFinite) {
  Index index;
  EXPECT_EQ(code_of([&] { index.insert(rec(1, {0, 0})); }), ErrorCode::ZeroVector);
  EXPECT_EQ(code_of([&] { index.insert(rec(1, {NAN, 1})); }), ErrorCode::NonFinite);
  EXPECT_EQ(index.size(), 0u);
  EXPECT_EQ(index.dim(), 0u);
}

TEST(IndexInsert, StoredVectorsAreUnitNormAndCodesMatchThresholds) {
  Index index;
  std::mt19937_64 rng(2);
  for (const auto& r : testutil::random_records(rng, 200, 33)) index.insert(r);
  index.refresh_thresholds();
  const auto th = index.thresholds();
  for (const auto& e : index.entries()) {
    EXPECT_NEAR(std::sqrt(squared_norm(std::span<const float>(e.embedding))), 1.0, 1e-6);
    EXPECT_EQ(e.code, binarize(e.embedding, th));
    EXPECT_EQ(e.code.width(), 33u);
  }
}

TEST(IndexInsert, BatchIsAtomic) {
  Index index;
  index.insert(rec(1, {1, 0, 0}));
  const std::vector<EmbeddingRecord> bad{rec(2, {0, 1, 0}), rec(3, {0, 1})};
  EXPECT_EQ(code_of([&] { index.insert_batch(bad); }), ErrorCode::DimMismatch);
  EXPECT_EQ(index.size(), 1u);
  const std::vector<EmbeddingRecord> dup{rec(4, {0, 1, 0}), rec(4, {0, 0, 1})};
  EXPECT_EQ(code_of([&] { index.insert_batch(dup); }), ErrorCode::DuplicateId);
  EXPECT_EQ(index.size(), 1u);
  EXPECT_EQ(index.insert_batch(std::vector<EmbeddingRecord>{rec(2, {0, 1, 0}), rec(3, {0, 0, 1})}), 2u);
  EXPECT_EQ(index.size(), 3u);
}

TEST(IndexRemove, Examples) {
  Index empty;
  EXPECT_FALSE(empty.remove(3));
  Index index;
  index.insert(rec(1, {1, 0}));
  index.insert(rec(2, {0, 1}));
  EXPECT_TRUE(index.remove(1));
  EXPECT_FALSE(index.remove(1));
  EXPECT_EQ(index.stats().count, 1u);
  EXPECT_EQ(ids_of(index.query_exact(std::vector<float>{1, 0}, 5, Metric::Cosine)), (std::vector<std::uint64_t>{2}));
}

TEST(IndexQuery, ExactExamples) {
  Index index;
  index.insert(rec(10, {1, 0}));
  index.insert(rec(20, {0, 1}));
  index.insert(rec(30, {-1, 0}));
  const std::vector<float> q{0.9f, 0.1f};
  EXPECT_EQ(ids_of(index.query_exact(q, 1, Metric::Cosine)), (std::vector<std::uint64_t>{10}));
  const auto all = index.query_exact(q, 10, Metric::SquaredEuclidean);
  EXPECT_EQ(ids_of(all), (std::vector<std::uint64_t>{10, 20, 30}));
  for (std::size_t i = 1; i < all.size(); ++i) {
    EXPECT_LE(all[i - 1].distance, all[i].distance);
    EXPECT_GE(all[i - 1].similarity, all[i].similarity);
  }
  EXPECT_EQ(code_of([&] { index.query_exact(q, 0, Metric::Cosine); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([&] { index.query_exact(std::vector<float>{1, 0, 0}, 1, Metric::Cosine); }),
            ErrorCode::DimMismatch);
}

TEST(IndexQuery, SelfQueryAtDistanceZero) {
  Index index;
  std::mt19937_64 rng(3);
  const auto rs = testutil::random_records(rng, 50, 16);
  for (const auto& r : rs) index.insert(r);
  for (const auto& r : rs) {
    const auto hit = index.query_exact(r.vec, 1, Metric::SquaredEuclidean);
    ASSERT_EQ(hit.size(), 1u);
    EXPECT_EQ(hit[0].id, r.id);
    EXPECT_EQ(hit[0].distance, 0.0);
    EXPECT_EQ(hit[0].similarity, 1.0);
  }
}

TEST(IndexQuery, EmptyIndexReturnsNothing) {
  Index index;
  EXPECT_TRUE(index.query_exact(std::vector<float>{1, 0}, 3, Metric::Cosine).empty());
  EXPECT_TRUE(index.query_hamming(std::vector<float>{1, 0}, 3).empty());
  EXPECT_TRUE(index.query_two_stage(std::vector<float>{1, 0}, 3, 0, Metric::Cosine).empty());
}

TEST(IndexQuery, TiesBrokenByAscendingId) {
  Index index;
  for (std::uint64_t id : {9u, 3u, 5u, 1u}) index.insert(rec(id, {1, 1}));
  index.insert(rec(0, {-1, 0}));
  EXPECT_EQ(ids_of(index.query_exact(std::vector<float>{2, 2}, 4, Metric::Cosine)),
            (std::vector<std::uint64_t>{1, 3, 5, 9}));
  const auto h = index.query_hamming(std::vector<float>{2, 2}, 4);
  ASSERT_EQ(h.size(), 4u);
  EXPECT_EQ(h[0].id, 1u);
  EXPECT_EQ(h[3].id, 9u);
}

TEST(IndexQuery, ExactMatchesFullSortOracle) {
  std::mt19937_64 rng(4);
  for (std::size_t n : {1u, 2u, 17u, 550u, 2000u}) {
    const std::size_t d = n == 550 ? 128 : 1 + n % 97;
    Index index;
    for (const auto& r : testutil::random_records(rng, n, d)) index.insert(r);
    for (int t = 0; t < 10; ++t) {
      const auto q = testutil::gaussian_f(rng, d);
      for (auto m : {Metric::Cosine, Metric::SquaredEuclidean, Metric::Euclidean}) {
        for (std::size_t k : {1u, 10u, 3000u}) {
          EXPECT_EQ(ids_of(index.query_exact(q, k, m)), oracle::knn(index, q, k, m)) << "n=" << n << " k=" << k;
        }
      }
    }
  }
}

TEST(IndexQuery, ResultsAreDeterministic) {
  std::mt19937_64 rng(5);
  Index index;
  for (const auto& r : testutil::random_records(rng, 300, 8)) index.insert(r);
  const auto q = testutil::gaussian_f(rng, 8);
  const auto first = index.query_two_stage(q, 10, 40, Metric::Cosine);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(index.query_two_stage(q, 10, 40, Metric::Cosine), first);
}

TEST(IndexHamming, Examples) {
  std::mt19937_64 rng(6);
  Index index;
  const auto rs = testutil::random_records(rng, 40, 70);
  for (const auto& r : rs) index.insert(r);
  index.refresh_thresholds();
  const auto h = index.query_hamming(rs[17].vec, 1);
  ASSERT_EQ(h.size(), 1u);
  EXPECT_EQ(h[0].distance, 0u);
  EXPECT_EQ(index.query_hamming(rs[0].vec, 100).size(), 40u);
  EXPECT_EQ(code_of([&] { index.query_hamming(rs[0].vec, 0); }), ErrorCode::InvalidArgument);
}

TEST(IndexHamming, MatchesNaivePopcountOracleOnClusters) {
  std::mt19937_64 rng(7);
  Index index;
  for (const auto& r : testutil::clustered_records(rng, 600, 96, 5, 0.3f)) index.insert(r);
  index.refresh_thresholds();
  for (int t = 0; t < 30; ++t) {
    const auto q = testutil::gaussian_f(rng, 96);
    for (std::size_t r : {1u, 25u, 600u}) EXPECT_EQ(index.query_hamming(q, r), oracle_hamming(index, q, r));
  }
}

TEST(IndexTwoStage, FullShortlistEqualsExact) {
  std::mt19937_64 rng(8);
  Index index;
  for (const auto& r : testutil::random_records(rng, 400, 24)) index.insert(r);
  index.refresh_thresholds();
  for (int t = 0; t < 20; ++t) {
    const auto q = testutil::gaussian_f(rng, 24);
    for (auto m : {Metric::Cosine, Metric::SquaredEuclidean}) {
      EXPECT_EQ(index.query_two_stage(q, 10, index.size(), m), index.query_exact(q, 10, m));
    }
  }
}

TEST(IndexTwoStage, ExamplesAndErrors) {
  std::mt19937_64 rng(9);
  Index index;
  const auto rs = testutil::random_records(rng, 100, 32);
  for (const auto& r : rs) index.insert(r);
  index.refresh_thresholds();
  EXPECT_EQ(index.query_two_stage(rs[42].vec, 1, 0, Metric::Cosine).at(0).id, 42u);
  EXPECT_EQ(code_of([&] { index.query_two_stage(rs[0].vec, 10, 9, Metric::Cosine); }), ErrorCode::ShortlistTooSmall);
}

TEST(IndexTwoStage, RecallGrowsWithShortlistAndReachesOne) {
  std::mt19937_64 rng(10);
  Index index;
  for (const auto& r : testutil::clustered_records(rng, 1000, 64, 5, 0.5f)) index.insert(r);
  index.refresh_thresholds();
  const auto entries = index.entries();
  for (int t = 0; t < 50; ++t) {
    const auto& q = entries[static_cast<std::size_t>(t) * 13].embedding;
    const auto exact = ids_of(index.query_exact(q, 10, Metric::Cosine));
    const std::set<std::uint64_t> truth(exact.begin(), exact.end());
    std::size_t prev = 0;
    for (std::size_t r : {10u, 20u, 50u, 100u, 200u, 500u, 1000u}) {
      std::size_t hit = 0;
      for (auto id : ids_of(index.query_two_stage(q, 10, r, Metric::Cosine))) hit += truth.count(id);
      EXPECT_GE(hit, prev) << "R=" << r;
      prev = hit;
    }
    EXPECT_EQ(prev, 10u);
  }
}

TEST(IndexEvict, Examples) {
  Index index;
  for (std::uint64_t i = 0; i < 10; ++i) index.insert(rec(i, {1, float(i)}, 100 + i));
  EXPECT_EQ(index.evict_older_than(100), 0u);
  EXPECT_EQ(index.evict_older_than(std::numeric_limits<std::uint64_t>::max()), 10u);
  EXPECT_EQ(index.size(), 0u);
}

TEST(IndexEvict, MatchesFilterOracleAndNoStaleResults) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::uint64_t> ts(0, 1000);
  for (int t = 0; t < 20; ++t) {
    Index index;
    auto rs = testutil::random_records(rng, 300, 12);
    for (auto& r : rs) r.timestamp = ts(rng);
    for (const auto& r : rs) index.insert(r);
    const std::uint64_t cutoff = ts(rng);
    std::set<std::uint64_t> survivors;
    for (const auto& r : rs) {
      if (r.timestamp >= cutoff) survivors.insert(r.id);
    }
    EXPECT_EQ(index.evict_older_than(cutoff), rs.size() - survivors.size());
    std::set<std::uint64_t> kept;
    for (const auto& e : index.entries()) kept.insert(e.id);
    EXPECT_EQ(kept, survivors);
    for (const auto& h : index.query_exact(testutil::gaussian_f(rng, 12), 300, Metric::Cosine)) {
      EXPECT_GE(h.timestamp, cutoff);
    }
  }
}

TEST(IndexStatsTest, TracksCountAndTimestamps) {
  Index index;
  EXPECT_EQ(index.stats().count, 0u);
  EXPECT_FALSE(index.stats().oldest_timestamp);
  for (std::uint64_t i = 0; i < 5; ++i) index.insert(rec(i, {1, 2}, 50 - i));
  const auto st = index.stats();
  EXPECT_EQ(st.count, 5u);
  EXPECT_EQ(st.dim, 2u);
  EXPECT_EQ(st.oldest_timestamp, 46u);
  EXPECT_EQ(st.newest_timestamp, 50u);
}

TEST(IndexSnapshot, RoundTripIsExact) {
  testutil::TempDir dir;
  std::mt19937_64 rng(12);
  Index index;
  auto rs = testutil::random_records(rng, 250, 70);
  rs[4].label.reset();
  for (const auto& r : rs) index.insert(r);
  index.refresh_thresholds();
  const auto path = dir.file("a.simidx");
  const std::size_t written = index.snapshot(path);
  EXPECT_EQ(written, std::filesystem::file_size(path));

  Index back;
  const auto st = back.restore(path);
  EXPECT_EQ(st.count, 250u);
  EXPECT_EQ(st.dim, 70u);
  EXPECT_EQ(back.thresholds(), index.thresholds());
  const auto a = index.entries(), b = back.entries();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].id, b[i].id);
    EXPECT_EQ(a[i].label, b[i].label);
    EXPECT_EQ(a[i].timestamp, b[i].timestamp);
    EXPECT_EQ(a[i].embedding, b[i].embedding);
    EXPECT_EQ(a[i].code, b[i].code);
  }
  for (int t = 0; t < 20; ++t) {
    const auto q = testutil::gaussian_f(rng, 70);
    EXPECT_EQ(back.query_exact(q, 10, Metric::Cosine), index.query_exact(q, 10, Metric::Cosine));
    EXPECT_EQ(back.query_two_stage(q, 10, 0, Metric::Cosine), index.query_two_stage(q, 10, 0, Metric::Cosine));
  }
  EXPECT_EQ(back.serialize(), index.serialize());
}

TEST(IndexSnapshot, LayoutMatchesFormat) {
  Index index;
  index.insert(rec(3, {3, 4}, 77, 2));
  const auto bytes = index.serialize();
  // magic, version, dim, count, subcode width, thresholds, one record, crc
  const std::size_t words = 1;
  EXPECT_EQ(bytes.size(), 4 + 1 + 4 + 8 + 2 + 2 * 4 + (8 + 4 + 8 + 2 * 4 + 8 * words) + 4);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "SIDX");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 2);
  EXPECT_EQ(bytes[9], 1);
  EXPECT_EQ(bytes[17], 64);
  std::uint32_t crc = 0;
  std::memcpy(&crc, bytes.data() + bytes.size() - 4, 4);
  EXPECT_EQ(crc, io::crc32(std::span(bytes).first(bytes.size() - 4)));
}

TEST(IndexSnapshot, EmptyIndexRoundTrips) {
  Index index;
  Index back;
  back.insert(rec(1, {1, 0}));
  const auto st = back.restore_bytes(index.serialize());
  EXPECT_EQ(st.count, 0u);
  EXPECT_EQ(back.size(), 0u);
  EXPECT_EQ(back.serialize(), index.serialize());
}

TEST(IndexSnapshot, CorruptionIsDetected) {
  std::mt19937_64 rng(13);
  Index index;
  for (const auto& r : testutil::random_records(rng, 30, 10)) index.insert(r);
  const auto bytes = index.serialize();
  Index back;
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{20}, bytes.size() - 1}) {
    EXPECT_EQ(code_of([&] { back.restore_bytes(std::span(bytes).first(cut)); }), ErrorCode::CorruptSnapshot) << cut;
  }
  std::uniform_int_distribution<std::size_t> pos(0, bytes.size() - 1);
  std::uniform_int_distribution<int> bit(0, 7);
  for (int t = 0; t < 300; ++t) {
    auto copy = bytes;
    copy[pos(rng)] ^= static_cast<std::uint8_t>(1u << bit(rng));
    EXPECT_EQ(code_of([&] { back.restore_bytes(copy); }), ErrorCode::CorruptSnapshot);
  }
  EXPECT_EQ(back.size(), 0u);
}

TEST(IndexSnapshot, UnsupportedVersionWithValidChecksum) {
  Index index;
  index.insert(rec(1, {1, 0}));
  auto bytes = index.serialize();
  bytes[4] = 9;
  const std::uint32_t crc = io::crc32(std::span(bytes).first(bytes.size() - 4));
  std::memcpy(bytes.data() + bytes.size() - 4, &crc, 4);
  Index back;
  EXPECT_EQ(code_of([&] { back.restore_bytes(bytes); }), ErrorCode::VersionUnsupported);
}

TEST(IndexSnapshot, MissingFileIsIoError) {
  Index index;
  EXPECT_EQ(code_of([&] { index.restore("/nonexistent/dir/x.simidx"); }), ErrorCode::IoError);
  EXPECT_EQ(code_of([&] { index.snapshot("/nonexistent/dir/x.simidx"); }), ErrorCode::IoError);
}

TEST(IndexConcurrency, ReadersNeverSeePartialEntries) {
  Index index;
  const std::size_t d = 64;
  // Every vector is a constant row, so any torn read would be visible.
  auto constant = [&](std::uint64_t id) { return rec(id, std::vector<float>(d, float(id + 1)), id); };
  for (std::uint64_t i = 0; i < 50; ++i) index.insert(constant(i));
  std::atomic<bool> done{false};
  std::atomic<std::size_t> bad{0};
  std::vector<std::jthread> threads;
  for (int w = 0; w < 2; ++w) {
    threads.emplace_back([&, w] {
      for (std::uint64_t i = 0; i < 2000; ++i) {
        const std::uint64_t id = 50 + static_cast<std::uint64_t>(w) * 10000 + i;
        index.insert(constant(id));
        if (i % 3 == 0) index.remove(id - 1);
      }
    });
  }
  for (int r = 0; r < 4; ++r) {
    threads.emplace_back([&] {
      std::mt19937_64 rng(static_cast<std::uint64_t>(r));
      while (!done.load()) {
        const auto hits = index.query_exact(testutil::gaussian_f(rng, d), 20, Metric::Cosine);
        for (std::size_t i = 1; i < hits.size(); ++i) bad += hits[i - 1].distance > hits[i].distance;
        for (const auto& e : index.entries()) {
          for (float x : e.embedding) bad += x != e.embedding[0];
        }
      }
    });
  }
  threads[0].join();
  threads[1].join();
  done = true;
  threads.clear();
  EXPECT_EQ(bad.load(), 0u);
}
