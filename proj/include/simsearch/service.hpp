#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <httplib.h>
#undef _res  // glibc resolv.h macro; collides with Eigen parameter names
#include <json.hpp>

#include "simsearch/emb1.hpp"
#include "simsearch/eval.hpp"
#include "simsearch/index.hpp"

namespace simsearch {

struct ServiceConfig {
  std::string host = "0.0.0.0";
  int port = 8080;
  /// Relative snapshot/restore paths resolve against this directory.
  std::string snapshot_dir;
  /// JSON-lines feedback log; empty keeps feedback in memory only.
  std::string feedback_log;
  std::uint64_t retention_s = 90ull * 24 * 3600;
  /// 0 disables the periodic eviction timer.
  std::uint64_t evict_interval_s = 0;
  std::size_t query_cache_size = 1000;
  /// Strict ingestion rejects a whole batch on any bad record.
  bool strict_ingest = true;

  /// Overrides from SIMSEARCH_PORT, SIMSEARCH_SNAPSHOT_DIR and
  /// SIMSEARCH_RETENTION_S when set.
  void apply_env() {
    if (const char* p = std::getenv("SIMSEARCH_PORT")) port = std::stoi(p);
    if (const char* d = std::getenv("SIMSEARCH_SNAPSHOT_DIR")) snapshot_dir = d;
    if (const char* r = std::getenv("SIMSEARCH_RETENTION_S")) retention_s = std::stoull(r);
  }
};

namespace detail {

struct HttpError {
  int status;
  std::string message;
};

inline nlohmann::json hit_json(const QueryResult& r) {
  return {{"id", r.id},
          {"label", r.label ? nlohmann::json(*r.label) : nlohmann::json(nullptr)},
          {"distance", r.distance},
          {"similarity", r.similarity}};
}

}  // namespace detail

/// HTTP front end over an Index.
///
///   POST /v1/items     [{id, vec, label?, ts?}...]        -> {ingested, skipped}
///   POST /v1/search    {vector | item_id, k, mode, metric, shortlist?}
///                                                        -> {hits, took_s, query_ref}
///   POST /v1/feedback  [{query_ref, result_id, relevant}]  -> {stored}
///   POST /v1/evict     {older_than}                        -> {evicted}
///   POST /v1/snapshot  {path}    POST /v1/restore {path}
///   GET  /v1/stats     GET /healthz
class SearchService {
 public:
  SearchService(Index& index, ServiceConfig config) : index_(index), config_(std::move(config)), rng_(std::random_device{}()) {
    routes();
  }

  ~SearchService() { stop(); }

  SearchService(const SearchService&) = delete;
  SearchService& operator=(const SearchService&) = delete;

  /// Binds (port 0 picks a free one), starts serving on a background
  /// thread and returns the bound port.
  int start() {
    const int port = config_.port == 0 ? server_.bind_to_any_port(config_.host)
                                       : (server_.bind_to_port(config_.host, config_.port) ? config_.port : -1);
    if (port < 0) throw Error(ErrorCode::IoError, "cannot bind " + config_.host + ":" + std::to_string(config_.port));
    bound_port_ = port;
    listener_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    if (config_.evict_interval_s > 0) {
      evictor_ = std::jthread([this](std::stop_token st) { eviction_loop(st); });
    }
    return port;
  }

  void stop() {
    if (evictor_.joinable()) {
      evictor_.request_stop();
      evictor_.join();
    }
    if (listener_.joinable()) {
      server_.stop();
      listener_.join();
    }
  }

  int port() const noexcept { return bound_port_; }
  httplib::Server& server() noexcept { return server_; }

 private:
  using Json = nlohmann::json;

  void routes() {
    server_.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                 {"Access-Control-Allow-Headers", "Content-Type"},
                                 {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    server_.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server_.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) {
      const bool ok = index_.lock_available();
      res.status = ok ? 200 : 503;
      res.set_content(ok ? R"({"status":"ok"})" : R"({"status":"busy"})", "application/json");
    });
    server_.Get("/v1/stats", wrap([this](const Json&) { return stats_json(); }, /*needs_body=*/false));
    server_.Post("/v1/items", [this](const httplib::Request& req, httplib::Response& res) { handle_items(req, res); });
    server_.Post("/v1/search", wrap([this](const Json& body) { return handle_search(body); }));
    server_.Post("/v1/feedback", wrap([this](const Json& body) { return handle_feedback(body); }));
    server_.Post("/v1/evict", wrap([this](const Json& body) {
      const auto cutoff = body.is_object() && body.contains("older_than") ? jsonl::as_unsigned(body["older_than"])
                                                                         : std::nullopt;
      if (!cutoff) throw detail::HttpError{400, "older_than must be a non-negative integer"};
      return Json{{"evicted", index_.evict_older_than(*cutoff)}};
    }));
    server_.Post("/v1/snapshot", wrap([this](const Json& body) {
      const auto path = resolve_path(body);
      if (!body.is_object() || body.value("refresh_thresholds", true)) index_.refresh_thresholds();
      const auto bytes = index_.snapshot(path);
      return Json{{"bytes", bytes}, {"path", path}, {"count", index_.size()}};
    }));
    server_.Post("/v1/restore", wrap([this](const Json& body) {
      const auto path = resolve_path(body);
      const auto bytes = io::read_file(path);
      const auto incoming = Index::peek(bytes);
      const auto live = index_.stats();
      if (live.count > 0 && incoming.dim != 0 && incoming.dim != live.dim) {
        throw detail::HttpError{409, "snapshot dim " + std::to_string(incoming.dim) + " conflicts with live dim " +
                                         std::to_string(live.dim)};
      }
      index_.restore_bytes(bytes);
      return stats_json();
    }));
  }

  template <typename F>
  httplib::Server::Handler wrap(F f, bool needs_body = true) {
    return [this, f, needs_body](const httplib::Request& req, httplib::Response& res) {
      try {
        Json body;
        if (needs_body) {
          try {
            body = Json::parse(req.body);
          } catch (const Json::exception& e) {
            throw detail::HttpError{400, std::string("malformed JSON: ") + e.what()};
          }
        }
        reply(res, 200, f(body));
      } catch (const detail::HttpError& e) {
        reply(res, e.status, Json{{"error", e.message}});
      } catch (const Error& e) {
        reply(res, status_for(e.code()), Json{{"error", e.what()}, {"code", std::string(to_string(e.code()))}});
      } catch (const Json::exception& e) {
        reply(res, 400, Json{{"error", e.what()}});
      }
    };
  }

  static int status_for(ErrorCode code) {
    switch (code) {
      case ErrorCode::IoError: return 500;
      case ErrorCode::DimMismatch: return 409;
      case ErrorCode::CorruptSnapshot:
      case ErrorCode::VersionUnsupported: return 422;
      default: return 400;
    }
  }

  static void reply(httplib::Response& res, int status, const Json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  Json stats_json() const {
    const auto st = index_.stats();
    Json j = {{"count", st.count}, {"dim", st.dim}, {"snapshot_version", st.snapshot_version}};
    j["oldest_timestamp"] = st.oldest_timestamp ? Json(*st.oldest_timestamp) : Json(nullptr);
    j["newest_timestamp"] = st.newest_timestamp ? Json(*st.newest_timestamp) : Json(nullptr);
    return j;
  }

  std::string resolve_path(const Json& body) const {
    if (!body.is_object() || !body.contains("path") || !body["path"].is_string() ||
        body["path"].get<std::string>().empty()) {
      throw detail::HttpError{400, "body needs a non-empty string path"};
    }
    std::filesystem::path p = body["path"].get<std::string>();
    if (p.is_relative() && !config_.snapshot_dir.empty()) p = std::filesystem::path(config_.snapshot_dir) / p;
    return p.string();
  }

  void handle_items(const httplib::Request& req, httplib::Response& res) {
    Json body;
    try {
      body = Json::parse(req.body);
    } catch (const Json::exception& e) {
      return reply(res, 400, Json{{"error", std::string("malformed JSON: ") + e.what()}});
    }
    if (!body.is_array()) return reply(res, 400, Json{{"error", "body must be an array of records"}});
    bool strict = config_.strict_ingest;
    if (req.has_param("strict")) {
      const auto v = req.get_param_value("strict");
      strict = !(v == "0" || v == "false");
    }

    const std::uint64_t now = unix_now();
    if (strict) {
      std::vector<EmbeddingRecord> records;
      records.reserve(body.size());
      try {
        for (const auto& item : body) records.push_back(jsonl::parse_record(item, now));
        index_.insert_batch(records, /*upsert=*/true);
      } catch (const Error& e) {
        const int status = e.code() == ErrorCode::DimMismatch ? 409 : 400;
        return reply(res, status, Json{{"error", e.what()}, {"code", std::string(to_string(e.code()))}});
      }
      return reply(res, 200, Json{{"ingested", records.size()}, {"skipped", 0}});
    }

    std::size_t ingested = 0, skipped = 0;
    for (const auto& item : body) {
      try {
        index_.insert(jsonl::parse_record(item, now), /*upsert=*/true);
        ++ingested;
      } catch (const Error&) {
        ++skipped;
      }
    }
    reply(res, 200, Json{{"ingested", ingested}, {"skipped", skipped}});
  }

  Json handle_search(const Json& body) {
    if (!body.is_object()) throw detail::HttpError{400, "body must be an object"};
    const bool has_vec = body.contains("vector") && !body["vector"].is_null();
    const bool has_item = body.contains("item_id") && !body["item_id"].is_null();
    if (has_vec == has_item) throw detail::HttpError{400, "exactly one of vector or item_id is required"};

    std::size_t k = 10;
    if (body.contains("k")) {
      if (!body["k"].is_number_integer()) throw detail::HttpError{400, "k must be an integer"};
      const auto kk = body["k"].get<std::int64_t>();
      if (kk < 1) throw detail::HttpError{422, "k must be >= 1"};
      k = static_cast<std::size_t>(kk);
    }
    SearchMode mode = SearchMode::Exact;
    Metric metric = Metric::Cosine;
    std::size_t shortlist = 0;
    try {
      if (body.contains("mode")) mode = parse_mode(body["mode"].get<std::string>());
      if (body.contains("metric")) metric = parse_metric(body["metric"].get<std::string>());
    } catch (const Error& e) {
      throw detail::HttpError{400, e.what()};
    }
    if (body.contains("shortlist")) {
      const auto r = jsonl::as_unsigned(body["shortlist"]);
      if (!r) throw detail::HttpError{400, "shortlist must be a non-negative integer"};
      shortlist = static_cast<std::size_t>(*r);
    }

    std::vector<float> q;
    std::optional<std::uint64_t> exclude;
    if (has_item) {
      const auto id = jsonl::as_unsigned(body["item_id"]);
      if (!id) throw detail::HttpError{400, "item_id must be a non-negative integer"};
      const auto entry = index_.get(*id);
      if (!entry) throw detail::HttpError{404, "unknown item_id " + std::to_string(*id)};
      q = entry->embedding;
      exclude = *id;
    } else {
      if (!body["vector"].is_array() || body["vector"].empty()) throw detail::HttpError{400, "vector must be a non-empty array"};
      for (const auto& x : body["vector"]) {
        if (!x.is_number()) throw detail::HttpError{400, "vector entries must be numbers"};
        q.push_back(x.get<float>());
      }
    }

    std::vector<QueryResult> hits;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      hits = search(index_, q, k, mode, metric, shortlist, exclude);
    } catch (const Error& e) {
      throw detail::HttpError{e.code() == ErrorCode::IoError ? 500 : 400, e.what()};
    }
    const double took = std::max(1e-9, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());

    Json out_hits = Json::array();
    std::vector<std::uint64_t> ids;
    for (const auto& h : hits) {
      out_hits.push_back(detail::hit_json(h));
      ids.push_back(h.id);
    }
    const std::string ref = remember(std::move(ids));
    return Json{{"hits", out_hits}, {"took_s", took}, {"query_ref", ref}, {"mode", to_string(mode)},
                {"metric", to_string(metric)}};
  }

  std::string remember(std::vector<std::uint64_t> ids) {
    std::lock_guard lock(refs_mu_);
    char buf[48];
    std::snprintf(buf, sizeof buf, "q%llu-%08llx", static_cast<unsigned long long>(++ref_counter_),
                  static_cast<unsigned long long>(rng_() & 0xffffffffULL));
    std::string ref = buf;
    served_[ref] = std::unordered_set<std::uint64_t>(ids.begin(), ids.end());
    ref_order_.push_back(ref);
    while (ref_order_.size() > config_.query_cache_size) {
      served_.erase(ref_order_.front());
      ref_order_.pop_front();
    }
    return ref;
  }

  Json handle_feedback(const Json& body) {
    const Json items = body.is_array() ? body : Json::array({body});
    struct Item {
      std::string ref;
      std::uint64_t result_id;
      bool relevant;
    };
    std::vector<Item> parsed;
    for (const auto& it : items) {
      if (!it.is_object() || !it.contains("query_ref") || !it["query_ref"].is_string() || !it.contains("result_id") ||
          !jsonl::as_unsigned(it["result_id"]) || !it.contains("relevant") || !it["relevant"].is_boolean()) {
        throw detail::HttpError{400, "feedback records need query_ref, result_id and boolean relevant"};
      }
      parsed.push_back({it["query_ref"].get<std::string>(), *jsonl::as_unsigned(it["result_id"]),
                        it["relevant"].get<bool>()});
    }

    std::lock_guard lock(refs_mu_);
    for (const auto& p : parsed) {
      const auto s = served_.find(p.ref);
      if (s == served_.end()) throw detail::HttpError{404, "unknown or expired query_ref " + p.ref};
      if (!s->second.contains(p.result_id)) {
        throw detail::HttpError{400, "result " + std::to_string(p.result_id) + " was not served for " + p.ref};
      }
    }
    std::size_t stored = 0;
    std::string lines;
    const auto now = unix_now();
    for (const auto& p : parsed) {
      if (!feedback_seen_.insert({p.ref, p.result_id}).second) continue;
      ++stored;
      lines += Json{{"query_ref", p.ref}, {"result_id", p.result_id}, {"relevant", p.relevant}, {"ts", now}}.dump();
      lines += "\n";
    }
    if (!config_.feedback_log.empty() && !lines.empty()) {
      std::ofstream out(config_.feedback_log, std::ios::app);
      out << lines;
      out.flush();
      if (!out) throw Error(ErrorCode::IoError, "cannot append to feedback log " + config_.feedback_log);
    }
    return Json{{"stored", stored}};
  }

  void eviction_loop(std::stop_token st) {
    std::mutex m;
    std::condition_variable_any cv;
    while (!st.stop_requested()) {
      std::unique_lock lock(m);
      if (cv.wait_for(lock, st, std::chrono::seconds(config_.evict_interval_s), [] { return false; })) break;
      if (st.stop_requested()) break;
      const auto now = unix_now();
      if (now > config_.retention_s) index_.evict_older_than(now - config_.retention_s);
    }
  }

  Index& index_;
  ServiceConfig config_;
  httplib::Server server_;
  std::thread listener_;
  std::jthread evictor_;
  int bound_port_ = -1;

  std::mutex refs_mu_;
  std::mt19937_64 rng_;
  std::uint64_t ref_counter_ = 0;
  std::unordered_map<std::string, std::unordered_set<std::uint64_t>> served_;
  std::deque<std::string> ref_order_;
  std::set<std::pair<std::string, std::uint64_t>> feedback_seen_;
};

}  // namespace simsearch
