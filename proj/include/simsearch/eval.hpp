#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "simsearch/core.hpp"
#include "simsearch/emb1.hpp"
#include "simsearch/index.hpp"

namespace simsearch {

enum class SearchMode { Exact, Hamming, TwoStage };

inline std::string to_string(SearchMode m) {
  switch (m) {
    case SearchMode::Exact: return "exact";
    case SearchMode::Hamming: return "hamming";
    case SearchMode::TwoStage: return "two_stage";
  }
  return "unknown";
}

inline SearchMode parse_mode(const std::string& s) {
  if (s == "exact") return SearchMode::Exact;
  if (s == "hamming") return SearchMode::Hamming;
  if (s == "two_stage" || s == "two-stage") return SearchMode::TwoStage;
  throw Error(ErrorCode::InvalidArgument, "unknown mode '" + s + "'");
}

/// One search in any mode, reported uniformly. Hamming hits carry the bit
/// distance and similarity 1 − d/width.
inline std::vector<QueryResult> search(const Index& index, std::span<const float> q, std::size_t k, SearchMode mode,
                                       Metric metric, std::size_t shortlist = 0,
                                       std::optional<std::uint64_t> exclude = std::nullopt) {
  switch (mode) {
    case SearchMode::Exact: return index.query_exact(q, k, metric, exclude);
    case SearchMode::TwoStage: return index.query_two_stage(q, k, shortlist, metric, exclude);
    case SearchMode::Hamming: {
      const auto hits = index.query_hamming(q, k, exclude);
      const double width = static_cast<double>(std::max<std::size_t>(index.dim(), 1));
      std::vector<QueryResult> out;
      out.reserve(hits.size());
      for (const auto& h : hits) {
        QueryResult r;
        r.id = h.id;
        r.distance = h.distance;
        r.similarity = 1.0 - h.distance / width;
        if (auto e = index.get(h.id)) {
          r.label = e->label;
          r.timestamp = e->timestamp;
        }
        out.push_back(r);
      }
      return out;
    }
  }
  return {};
}

// ---------------------------------------------------------------------------
// Retrieval quality
// ---------------------------------------------------------------------------

struct RetrievalReport {
  std::map<std::size_t, double> recall_at_k;
  std::map<std::size_t, double> precision_at_k;
  std::size_t n_queries = 0;
  std::vector<std::size_t> k_values;
};

/// Leave-one-out retrieval quality: each query searches the index with its
/// own id excluded; relevant means same label.
///   precision@k = matches in top-k / k
///   recall@k    = matches in top-k / min(k, relevant entries in index)
/// Queries whose class has no other member in the index are left out of
/// the recall average.
inline RetrievalReport recall_precision_at_k(const Index& index, std::span<const EmbeddingRecord> queries,
                                             std::vector<std::size_t> k_values, Metric metric = Metric::Cosine,
                                             SearchMode mode = SearchMode::Exact) {
  if (k_values.empty()) throw Error(ErrorCode::InvalidArgument, "no k values");
  std::sort(k_values.begin(), k_values.end());
  k_values.erase(std::unique(k_values.begin(), k_values.end()), k_values.end());
  if (k_values.front() == 0) throw Error(ErrorCode::InvalidArgument, "k must be >= 1");

  std::unordered_map<std::int32_t, std::size_t> class_size;
  std::unordered_map<std::uint64_t, std::int32_t> label_of;
  for (const auto& e : index.entries()) {
    if (!e.label) throw Error(ErrorCode::UnlabeledData, "index entry " + std::to_string(e.id) + " has no label");
    ++class_size[*e.label];
    label_of[e.id] = *e.label;
  }
  for (const auto& q : queries) {
    if (!q.label) throw Error(ErrorCode::UnlabeledData, "query " + std::to_string(q.id) + " has no label");
  }

  const std::size_t k_max = k_values.back();
  std::map<std::size_t, double> recall_sum, precision_sum;
  std::size_t recall_count = 0;
  for (const auto& q : queries) {
    const auto hits = search(index, q.vec, k_max, mode, metric, 0, q.id);
    std::size_t relevant = class_size.contains(*q.label) ? class_size[*q.label] : 0;
    if (auto it = label_of.find(q.id); it != label_of.end() && it->second == *q.label) --relevant;

    std::vector<std::size_t> matches_at(hits.size() + 1, 0);
    for (std::size_t i = 0; i < hits.size(); ++i) matches_at[i + 1] = matches_at[i] + (hits[i].label == q.label ? 1 : 0);
    for (std::size_t k : k_values) {
      const std::size_t m = matches_at[std::min(k, hits.size())];
      precision_sum[k] += static_cast<double>(m) / static_cast<double>(k);
      if (relevant > 0) recall_sum[k] += static_cast<double>(m) / static_cast<double>(std::min(k, relevant));
    }
    if (relevant > 0) ++recall_count;
  }

  RetrievalReport rep;
  rep.n_queries = queries.size();
  rep.k_values = k_values;
  for (std::size_t k : k_values) {
    rep.precision_at_k[k] = queries.empty() ? 0.0 : precision_sum[k] / static_cast<double>(queries.size());
    rep.recall_at_k[k] = recall_count == 0 ? 0.0 : recall_sum[k] / static_cast<double>(recall_count);
  }
  return rep;
}

inline nlohmann::json to_json(const RetrievalReport& r) {
  nlohmann::json recall = nlohmann::json::object(), precision = nlohmann::json::object();
  for (const auto& [k, v] : r.recall_at_k) recall[std::to_string(k)] = v;
  for (const auto& [k, v] : r.precision_at_k) precision[std::to_string(k)] = v;
  return {{"recall_at_k", recall}, {"precision_at_k", precision}, {"n_queries", r.n_queries}, {"k_values", r.k_values}};
}

inline std::string to_text(const RetrievalReport& r) {
  std::ostringstream os;
  os << "queries: " << r.n_queries << "\n";
  for (std::size_t k : r.k_values) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "k=%-4zu recall=%.4f precision=%.4f\n", k, r.recall_at_k.at(k), r.precision_at_k.at(k));
    os << buf;
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Latency
// ---------------------------------------------------------------------------

struct LatencyReport {
  std::size_t n_items = 0;
  std::size_t dim = 0;
  std::size_t n_queries = 0;
  std::size_t k = 0;
  SearchMode mode = SearchMode::Exact;
  std::vector<double> latencies_s;
  double median_s = 0.0;
  double p99_s = 0.0;
  double mean_s = 0.0;
};

struct BenchOptions {
  std::size_t n_queries = 100;
  std::size_t k = 10;
  SearchMode mode = SearchMode::Exact;
  Metric metric = Metric::Cosine;
  std::size_t shortlist = 0;
  std::size_t warmup = 10;
  std::uint64_t seed = 7;
};

/// Seeded Gaussian query vectors of the given dim.
inline std::vector<std::vector<float>> random_queries(std::size_t n, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> gauss(0.0f, 1.0f);
  std::vector<std::vector<float>> out(n, std::vector<float>(dim));
  for (auto& q : out) {
    for (auto& x : q) x = gauss(rng);
  }
  return out;
}

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Wall-clock latency per query on a monotonic clock, single-threaded.
/// Warm-up queries run first and are not recorded.
inline LatencyReport latency_bench(const Index& index, const BenchOptions& opt) {
  if (index.size() == 0) throw Error(ErrorCode::EmptyIndex, "cannot benchmark an empty index");
  if (opt.n_queries == 0) throw Error(ErrorCode::InvalidArgument, "n_queries must be >= 1");
  const auto queries = random_queries(opt.n_queries + opt.warmup, index.dim(), opt.seed);

  LatencyReport rep;
  rep.n_items = index.size();
  rep.dim = index.dim();
  rep.n_queries = opt.n_queries;
  rep.k = opt.k;
  rep.mode = opt.mode;
  std::size_t sink = 0;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto hits = search(index, queries[i], opt.k, opt.mode, opt.metric, opt.shortlist);
    const auto t1 = std::chrono::steady_clock::now();
    sink += hits.size();
    if (i < opt.warmup) continue;
    rep.latencies_s.push_back(std::max(std::chrono::duration<double>(t1 - t0).count(), 1e-9));
  }
  if (sink == 0) throw Error(ErrorCode::EmptyIndex, "benchmark queries returned nothing");

  rep.median_s = median_of(rep.latencies_s);
  auto sorted = rep.latencies_s;
  std::sort(sorted.begin(), sorted.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.99 * static_cast<double>(sorted.size())));
  rep.p99_s = sorted[std::max<std::size_t>(rank, 1) - 1];
  rep.mean_s = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<double>(sorted.size());
  return rep;
}

inline nlohmann::json to_json(const LatencyReport& r, bool include_samples = false) {
  nlohmann::json j = {{"n_items", r.n_items}, {"dim", r.dim},       {"n_queries", r.n_queries},
                      {"k", r.k},             {"mode", to_string(r.mode)},
                      {"median_s", r.median_s}, {"p99_s", r.p99_s}, {"mean_s", r.mean_s}};
  if (include_samples) j["latencies_s"] = r.latencies_s;
  return j;
}

// ---------------------------------------------------------------------------
// Scatter export
// ---------------------------------------------------------------------------

struct ScatterPoint {
  std::uint64_t id = 0;
  std::optional<std::int32_t> label;
  double x = 0.0;
  double y = 0.0;
};

/// Projects the embeddings onto their own top-2 principal components.
/// Rank-1 input yields y = 0 for every point.
inline std::vector<ScatterPoint> scatter_points(std::span<const EmbeddingRecord> embeddings) {
  if (embeddings.size() < 2) throw Error(ErrorCode::InsufficientData, "scatter export needs >= 2 points");
  std::vector<std::vector<float>> data;
  data.reserve(embeddings.size());
  for (const auto& e : embeddings) data.push_back(e.vec);
  const PcaBasis basis = pca_fit(data, std::min<std::size_t>(2, data.front().size()));
  std::vector<ScatterPoint> out;
  out.reserve(embeddings.size());
  for (const auto& e : embeddings) {
    const Vector p = pca_project(basis, e.vec);
    out.push_back({e.id, e.label, p.size() > 0 ? p[0] : 0.0, p.size() > 1 ? p[1] : 0.0});
  }
  return out;
}

inline std::string scatter_csv(const std::vector<ScatterPoint>& points) {
  std::string text = "id,label,x,y\n";
  char buf[128];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof buf, "%llu,%d,%.10g,%.10g\n", static_cast<unsigned long long>(p.id),
                  p.label.value_or(emb1::kNoLabel), p.x, p.y);
    text += buf;
  }
  return text;
}

inline std::size_t scatter_export(std::span<const EmbeddingRecord> embeddings, const std::string& path) {
  const auto points = scatter_points(embeddings);
  const auto text = scatter_csv(points);
  io::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  return points.size();
}

}  // namespace simsearch
