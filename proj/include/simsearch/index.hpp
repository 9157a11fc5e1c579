#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "simsearch/binary_io.hpp"
#include "simsearch/core.hpp"
#include "simsearch/emb1.hpp"
#include "simsearch/error.hpp"

namespace simsearch {

struct IndexEntry {
  std::uint64_t id = 0;
  std::vector<float> embedding;
  BinaryCode code;
  std::optional<std::int32_t> label;
  std::uint64_t timestamp = 0;
};

struct QueryResult {
  std::uint64_t id = 0;
  double distance = 0.0;
  double similarity = 0.0;
  std::optional<std::int32_t> label;
  std::uint64_t timestamp = 0;

  friend bool operator==(const QueryResult&, const QueryResult&) = default;
};

struct HammingHit {
  std::uint64_t id = 0;
  std::uint32_t distance = 0;

  friend bool operator==(const HammingHit&, const HammingHit&) = default;
};

struct IndexStats {
  std::size_t count = 0;
  std::size_t dim = 0;
  std::optional<std::uint64_t> oldest_timestamp;
  std::optional<std::uint64_t> newest_timestamp;
  std::uint64_t snapshot_version = 0;

  friend bool operator==(const IndexStats&, const IndexStats&) = default;
};

/// Maps a metric distance onto [0,1], larger meaning more similar.
inline double similarity_from_distance(double d, Metric metric) {
  if (metric == Metric::Cosine) return std::clamp(1.0 - d / 2.0, 0.0, 1.0);
  return std::exp(-d);
}

namespace sidx {
inline constexpr char kMagic[4] = {'S', 'I', 'D', 'X'};
inline constexpr std::uint8_t kVersion = 1;
}  // namespace sidx

struct IndexConfig {
  std::size_t subcode_width = kDefaultSubcodeWidth;
  /// Hamming shortlist size as a multiple of k when the caller passes none.
  std::size_t default_shortlist_factor = 10;
};

/// In-memory embedding index with exact, Hamming, and two-stage retrieval.
///
/// Entries live in flat slot arrays (vectors and codes contiguous) so the
/// scans stay cache friendly; removal swaps the last slot into the hole.
/// Thread safety: any number of concurrent readers or one writer.
class Index {
 public:
  explicit Index(IndexConfig config = {}) : config_(config) {
    if (config_.subcode_width == 0 || config_.subcode_width > 64 || 64 % config_.subcode_width != 0) {
      throw Error(ErrorCode::InvalidArgument, "subcode width must divide 64");
    }
  }

  Index(const Index&) = delete;
  Index& operator=(const Index&) = delete;

  /// Builds an index from records and freezes binarization thresholds at
  /// the per-dimension corpus medians.
  static std::unique_ptr<Index> build(std::span<const EmbeddingRecord> records, IndexConfig config = {}) {
    auto index = std::make_unique<Index>(config);
    index->insert_batch(records, /*upsert=*/true);
    index->refresh_thresholds();
    return index;
  }

  IndexEntry insert(const EmbeddingRecord& record, bool upsert = false) {
    std::unique_lock lock(mu_);
    auto prepared = prepare(record);
    if (!upsert && slot_of_.contains(record.id)) {
      throw Error(ErrorCode::DuplicateId, "id " + std::to_string(record.id) + " already indexed");
    }
    if (dim_ == 0) set_dim(record.vec.size());
    const std::size_t slot = upsert_slot(record, prepared);
    return entry_at(slot);
  }

  /// All-or-nothing insert: every record is validated (dim, finiteness,
  /// nonzero norm, duplicates) before any is applied. Returns the count.
  std::size_t insert_batch(std::span<const EmbeddingRecord> records, bool upsert = false) {
    std::unique_lock lock(mu_);
    std::size_t dim = dim_;
    std::vector<std::vector<float>> prepared;
    prepared.reserve(records.size());
    std::unordered_set<std::uint64_t> batch_ids;
    for (const auto& r : records) {
      if (dim == 0) dim = r.vec.size();
      if (r.vec.size() != dim) {
        throw Error(ErrorCode::DimMismatch, "record " + std::to_string(r.id) + " has dim " +
                                                std::to_string(r.vec.size()) + ", index dim " + std::to_string(dim));
      }
      prepared.push_back(normalize(std::span<const float>(r.vec)));
      if (!upsert && (slot_of_.contains(r.id) || !batch_ids.insert(r.id).second)) {
        throw Error(ErrorCode::DuplicateId, "id " + std::to_string(r.id) + " already indexed");
      }
    }
    if (records.empty()) return 0;
    if (dim_ == 0) set_dim(dim);
    for (std::size_t i = 0; i < records.size(); ++i) upsert_slot(records[i], prepared[i]);
    return records.size();
  }

  bool remove(std::uint64_t id) {
    std::unique_lock lock(mu_);
    return remove_locked(id);
  }

  std::optional<IndexEntry> get(std::uint64_t id) const {
    std::shared_lock lock(mu_);
    const auto it = slot_of_.find(id);
    if (it == slot_of_.end()) return std::nullopt;
    return entry_at(it->second);
  }

  bool contains(std::uint64_t id) const {
    std::shared_lock lock(mu_);
    return slot_of_.contains(id);
  }

  /// The k nearest entries by `metric`, ascending distance, ties by id.
  /// The query is normalized first, like stored embeddings.
  std::vector<QueryResult> query_exact(std::span<const float> q, std::size_t k, Metric metric,
                                       std::optional<std::uint64_t> exclude = std::nullopt) const {
    if (k == 0) throw Error(ErrorCode::InvalidArgument, "k must be >= 1");
    std::shared_lock lock(mu_);
    if (ids_.empty()) return {};
    const auto qn = prepare_query(q);
    std::vector<std::pair<double, std::uint64_t>> scored;
    scored.reserve(ids_.size());
    for (std::size_t s = 0; s < ids_.size(); ++s) {
      if (exclude && ids_[s] == *exclude) continue;
      scored.emplace_back(distance(std::span<const float>(qn), vector_at(s), metric), ids_[s]);
    }
    return finish(scored, k, metric);
  }

  /// The r entries whose codes are nearest in Hamming distance to
  /// binarize(q), ties by id.
  std::vector<HammingHit> query_hamming(std::span<const float> q, std::size_t r,
                                        std::optional<std::uint64_t> exclude = std::nullopt) const {
    if (r == 0) throw Error(ErrorCode::InvalidArgument, "r must be >= 1");
    std::shared_lock lock(mu_);
    if (ids_.empty()) return {};
    const auto scored = hamming_shortlist(prepare_query(q), r, exclude);
    std::vector<HammingHit> out;
    out.reserve(scored.size());
    for (const auto& [d, id] : scored) out.push_back({id, d});
    return out;
  }

  /// Hamming shortlist of `shortlist` candidates, reranked by `metric`.
  /// `shortlist == 0` selects default_shortlist_factor * k.
  std::vector<QueryResult> query_two_stage(std::span<const float> q, std::size_t k, std::size_t shortlist,
                                           Metric metric,
                                           std::optional<std::uint64_t> exclude = std::nullopt) const {
    if (k == 0) throw Error(ErrorCode::InvalidArgument, "k must be >= 1");
    if (shortlist == 0) shortlist = config_.default_shortlist_factor * k;
    if (shortlist < k) throw Error(ErrorCode::ShortlistTooSmall, "shortlist size must be >= k");
    std::shared_lock lock(mu_);
    if (ids_.empty()) return {};
    const auto qn = prepare_query(q);
    const auto candidates = hamming_shortlist(qn, shortlist, exclude);
    std::vector<std::pair<double, std::uint64_t>> scored;
    scored.reserve(candidates.size());
    for (const auto& [hd, id] : candidates) {
      scored.emplace_back(distance(std::span<const float>(qn), vector_at(slot_of_.at(id)), metric), id);
    }
    return finish(scored, k, metric);
  }

  /// Removes every entry with timestamp < cutoff.
  std::size_t evict_older_than(std::uint64_t cutoff) {
    std::unique_lock lock(mu_);
    std::vector<std::uint64_t> doomed;
    for (std::size_t s = 0; s < ids_.size(); ++s) {
      if (timestamps_[s] < cutoff) doomed.push_back(ids_[s]);
    }
    for (auto id : doomed) remove_locked(id);
    return doomed.size();
  }

  /// Recomputes thresholds as per-dimension medians of the stored corpus
  /// and re-encodes every entry.
  void refresh_thresholds() {
    std::unique_lock lock(mu_);
    if (ids_.empty()) return;
    thresholds_ = column_medians(std::span<const float>(vectors_), dim_);
    for (std::size_t s = 0; s < ids_.size(); ++s) encode_slot(s);
  }

  void set_thresholds(std::vector<float> thresholds) {
    std::unique_lock lock(mu_);
    if (dim_ != 0 && thresholds.size() != dim_) throw Error(ErrorCode::DimMismatch, "thresholds dim");
    check_finite(std::span<const float>(thresholds));
    if (dim_ == 0) set_dim(thresholds.size());
    thresholds_ = std::move(thresholds);
    for (std::size_t s = 0; s < ids_.size(); ++s) encode_slot(s);
  }

  std::vector<float> thresholds() const {
    std::shared_lock lock(mu_);
    return thresholds_;
  }

  IndexStats stats() const {
    std::shared_lock lock(mu_);
    IndexStats st;
    st.count = ids_.size();
    st.dim = dim_;
    st.snapshot_version = snapshot_version_.load();
    if (!timestamps_.empty()) {
      const auto [lo, hi] = std::minmax_element(timestamps_.begin(), timestamps_.end());
      st.oldest_timestamp = *lo;
      st.newest_timestamp = *hi;
    }
    return st;
  }

  std::size_t size() const {
    std::shared_lock lock(mu_);
    return ids_.size();
  }

  std::size_t dim() const {
    std::shared_lock lock(mu_);
    return dim_;
  }

  std::size_t subcode_width() const {
    std::shared_lock lock(mu_);
    return config_.subcode_width;
  }

  /// Every entry, ordered by id.
  std::vector<IndexEntry> entries() const {
    std::shared_lock lock(mu_);
    std::vector<IndexEntry> out;
    out.reserve(ids_.size());
    for (std::size_t s : sorted_slots()) out.push_back(entry_at(s));
    return out;
  }

  /// True iff a shared lock could be taken right now.
  bool lock_available() const {
    if (!mu_.try_lock_shared()) return false;
    mu_.unlock_shared();
    return true;
  }

  /// `*.simidx` bytes: header, thresholds, records ordered by id, CRC32.
  std::vector<std::uint8_t> serialize() const {
    std::shared_lock lock(mu_);
    io::ByteWriter w;
    w.put_bytes(std::string_view(sidx::kMagic, 4));
    w.put<std::uint8_t>(sidx::kVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(dim_));
    w.put<std::uint64_t>(ids_.size());
    w.put<std::uint16_t>(static_cast<std::uint16_t>(config_.subcode_width));
    w.put_span(std::span<const float>(thresholds_));
    for (std::size_t s : sorted_slots()) {
      w.put<std::uint64_t>(ids_[s]);
      w.put<std::int32_t>(labels_[s]);
      w.put<std::uint64_t>(timestamps_[s]);
      w.put_span(vector_at(s));
      w.put_span(code_at(s));
    }
    const std::uint32_t crc = io::crc32(w.bytes());
    w.put<std::uint32_t>(crc);
    return std::move(w.bytes());
  }

  std::size_t snapshot(const std::string& path) const {
    const auto bytes = serialize();
    io::write_file(path, bytes);
    ++snapshot_version_;
    return bytes.size();
  }

  /// Replaces the contents with a parsed snapshot. The current state is
  /// untouched when parsing fails.
  IndexStats restore_bytes(std::span<const std::uint8_t> bytes) {
    Parsed parsed = parse(bytes);
    {
      std::unique_lock lock(mu_);
      config_.subcode_width = parsed.subcode_width;
      dim_ = parsed.dim;
      words_per_code_ = BinaryCode::word_count(std::max<std::size_t>(dim_, 1));
      thresholds_ = std::move(parsed.thresholds);
      ids_ = std::move(parsed.ids);
      labels_ = std::move(parsed.labels);
      timestamps_ = std::move(parsed.timestamps);
      vectors_ = std::move(parsed.vectors);
      codes_ = std::move(parsed.codes);
      slot_of_.clear();
      for (std::size_t s = 0; s < ids_.size(); ++s) slot_of_[ids_[s]] = s;
      ++snapshot_version_;
    }
    return stats();
  }

  IndexStats restore(const std::string& path) { return restore_bytes(io::read_file(path)); }

  /// Parses snapshot bytes without touching any index; used to validate a
  /// file (e.g. its dim) before swapping it in.
  static IndexStats peek(std::span<const std::uint8_t> bytes) {
    const Parsed p = parse(bytes);
    IndexStats st;
    st.count = p.ids.size();
    st.dim = p.dim;
    return st;
  }

 private:
  struct Parsed {
    std::size_t dim = 0;
    std::size_t subcode_width = kDefaultSubcodeWidth;
    std::vector<float> thresholds;
    std::vector<std::uint64_t> ids;
    std::vector<std::int32_t> labels;
    std::vector<std::uint64_t> timestamps;
    std::vector<float> vectors;
    std::vector<std::uint64_t> codes;
  };

  static Parsed parse(std::span<const std::uint8_t> bytes) {
    constexpr std::size_t kFixed = 4 + 1 + 4 + 8 + 2;
    if (bytes.size() < kFixed + 4) throw Error(ErrorCode::CorruptSnapshot, "snapshot truncated");
    if (std::memcmp(bytes.data(), sidx::kMagic, 4) != 0) throw Error(ErrorCode::CorruptSnapshot, "bad magic");
    const auto body = bytes.first(bytes.size() - 4);
    std::uint32_t stored_crc;
    std::memcpy(&stored_crc, bytes.data() + body.size(), 4);
    if (io::crc32(body) != stored_crc) throw Error(ErrorCode::CorruptSnapshot, "checksum mismatch");

    io::ByteReader r(body, ErrorCode::CorruptSnapshot);
    (void)r.get_string(4);
    const auto version = r.get<std::uint8_t>();
    if (version != sidx::kVersion) {
      throw Error(ErrorCode::VersionUnsupported, "snapshot version " + std::to_string(version));
    }
    Parsed p;
    p.dim = r.get<std::uint32_t>();
    const auto count = r.get<std::uint64_t>();
    p.subcode_width = r.get<std::uint16_t>();
    if (p.subcode_width == 0 || p.subcode_width > 64 || 64 % p.subcode_width != 0) {
      throw Error(ErrorCode::CorruptSnapshot, "bad subcode width");
    }
    const std::size_t words = p.dim == 0 ? 0 : BinaryCode::word_count(p.dim);
    const std::size_t record = 8 + 4 + 8 + 4 * p.dim + 8 * words;
    if (r.remaining() < 4 * p.dim || (r.remaining() - 4 * p.dim) / record < count ||
        r.remaining() - 4 * p.dim != count * record || (p.dim == 0 && count > 0)) {
      throw Error(ErrorCode::CorruptSnapshot, "record section size mismatch");
    }
    p.thresholds.resize(p.dim);
    r.get_into(std::span<float>(p.thresholds));
    check_snapshot_finite(p.thresholds);
    p.ids.resize(count);
    p.labels.resize(count);
    p.timestamps.resize(count);
    p.vectors.resize(count * p.dim);
    p.codes.resize(count * words);
    std::unordered_set<std::uint64_t> seen;
    std::vector<std::uint64_t> expect(words);
    for (std::size_t s = 0; s < count; ++s) {
      p.ids[s] = r.get<std::uint64_t>();
      if (!seen.insert(p.ids[s]).second) throw Error(ErrorCode::CorruptSnapshot, "duplicate id");
      p.labels[s] = r.get<std::int32_t>();
      p.timestamps[s] = r.get<std::uint64_t>();
      auto vec = std::span<float>(p.vectors).subspan(s * p.dim, p.dim);
      r.get_into(vec);
      auto code = std::span<std::uint64_t>(p.codes).subspan(s * words, words);
      r.get_into(code);
      check_snapshot_finite(vec);
      const double n2 = squared_norm(std::span<const float>(vec));
      if (std::abs(n2 - 1.0) > 1e-5) throw Error(ErrorCode::CorruptSnapshot, "stored vector not unit norm");
      binarize_into(std::span<const float>(vec), std::span<const float>(p.thresholds), std::span(expect));
      if (!std::equal(expect.begin(), expect.end(), code.begin())) {
        throw Error(ErrorCode::CorruptSnapshot, "stored code disagrees with vector");
      }
    }
    return p;
  }

  static void check_snapshot_finite(std::span<const float> v) {
    for (float x : v) {
      if (!std::isfinite(x)) throw Error(ErrorCode::CorruptSnapshot, "non-finite value");
    }
  }

  std::vector<float> prepare(const EmbeddingRecord& record) const {
    if (dim_ != 0 && record.vec.size() != dim_) {
      throw Error(ErrorCode::DimMismatch,
                  "vector dim " + std::to_string(record.vec.size()) + ", index dim " + std::to_string(dim_));
    }
    return normalize(std::span<const float>(record.vec));
  }

  std::vector<float> prepare_query(std::span<const float> q) const {
    if (q.size() != dim_) {
      throw Error(ErrorCode::DimMismatch,
                  "query dim " + std::to_string(q.size()) + ", index dim " + std::to_string(dim_));
    }
    return normalize(q);
  }

  void set_dim(std::size_t dim) {
    dim_ = dim;
    words_per_code_ = BinaryCode::word_count(dim);
    if (thresholds_.size() != dim) thresholds_.assign(dim, 0.0f);
  }

  std::size_t upsert_slot(const EmbeddingRecord& record, const std::vector<float>& normalized) {
    remove_locked(record.id);
    const std::size_t slot = ids_.size();
    ids_.push_back(record.id);
    labels_.push_back(record.label.value_or(emb1::kNoLabel));
    timestamps_.push_back(record.timestamp);
    vectors_.insert(vectors_.end(), normalized.begin(), normalized.end());
    codes_.resize(codes_.size() + words_per_code_);
    slot_of_[record.id] = slot;
    encode_slot(slot);
    return slot;
  }

  bool remove_locked(std::uint64_t id) {
    const auto it = slot_of_.find(id);
    if (it == slot_of_.end()) return false;
    const std::size_t slot = it->second;
    const std::size_t last = ids_.size() - 1;
    if (slot != last) {
      ids_[slot] = ids_[last];
      labels_[slot] = labels_[last];
      timestamps_[slot] = timestamps_[last];
      std::copy_n(vectors_.begin() + static_cast<std::ptrdiff_t>(last * dim_), dim_,
                  vectors_.begin() + static_cast<std::ptrdiff_t>(slot * dim_));
      std::copy_n(codes_.begin() + static_cast<std::ptrdiff_t>(last * words_per_code_), words_per_code_,
                  codes_.begin() + static_cast<std::ptrdiff_t>(slot * words_per_code_));
      slot_of_[ids_[slot]] = slot;
    }
    ids_.pop_back();
    labels_.pop_back();
    timestamps_.pop_back();
    vectors_.resize(last * dim_);
    codes_.resize(last * words_per_code_);
    slot_of_.erase(it);
    return true;
  }

  void encode_slot(std::size_t s) {
    binarize_into(vector_at(s), std::span<const float>(thresholds_),
                  std::span<std::uint64_t>(codes_).subspan(s * words_per_code_, words_per_code_));
  }

  std::span<const float> vector_at(std::size_t s) const {
    return std::span<const float>(vectors_).subspan(s * dim_, dim_);
  }

  std::span<const std::uint64_t> code_at(std::size_t s) const {
    return std::span<const std::uint64_t>(codes_).subspan(s * words_per_code_, words_per_code_);
  }

  IndexEntry entry_at(std::size_t s) const {
    IndexEntry e;
    e.id = ids_[s];
    const auto v = vector_at(s);
    e.embedding.assign(v.begin(), v.end());
    e.code = BinaryCode::from_words(dim_, code_at(s), config_.subcode_width);
    if (labels_[s] != emb1::kNoLabel) e.label = labels_[s];
    e.timestamp = timestamps_[s];
    return e;
  }

  std::vector<std::size_t> sorted_slots() const {
    std::vector<std::size_t> slots(ids_.size());
    for (std::size_t s = 0; s < slots.size(); ++s) slots[s] = s;
    std::sort(slots.begin(), slots.end(), [&](std::size_t a, std::size_t b) { return ids_[a] < ids_[b]; });
    return slots;
  }

  std::vector<std::pair<std::uint32_t, std::uint64_t>> hamming_shortlist(const std::vector<float>& qn,
                                                                         std::size_t r,
                                                                         std::optional<std::uint64_t> exclude) const {
    std::vector<std::uint64_t> qcode(words_per_code_);
    binarize_into(std::span<const float>(qn), std::span<const float>(thresholds_), std::span(qcode));
    std::vector<std::pair<std::uint32_t, std::uint64_t>> scored;
    scored.reserve(ids_.size());
    const std::uint64_t* codes = codes_.data();
    for (std::size_t s = 0; s < ids_.size(); ++s, codes += words_per_code_) {
      if (exclude && ids_[s] == *exclude) continue;
      scored.emplace_back(hamming_words(qcode, std::span<const std::uint64_t>(codes, words_per_code_)), ids_[s]);
    }
    const std::size_t keep = std::min(r, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end());
    scored.resize(keep);
    return scored;
  }

  std::vector<QueryResult> finish(std::vector<std::pair<double, std::uint64_t>>& scored, std::size_t k,
                                  Metric metric) const {
    const std::size_t keep = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end());
    std::vector<QueryResult> out;
    out.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) {
      const auto& [d, id] = scored[i];
      const std::size_t s = slot_of_.at(id);
      QueryResult r;
      r.id = id;
      r.distance = d;
      r.similarity = similarity_from_distance(d, metric);
      if (labels_[s] != emb1::kNoLabel) r.label = labels_[s];
      r.timestamp = timestamps_[s];
      out.push_back(r);
    }
    return out;
  }

  IndexConfig config_;
  mutable std::shared_mutex mu_;
  mutable std::atomic<std::uint64_t> snapshot_version_{0};
  std::size_t dim_ = 0;
  std::size_t words_per_code_ = 0;
  std::vector<float> thresholds_;
  std::vector<std::uint64_t> ids_;
  std::vector<std::int32_t> labels_;
  std::vector<std::uint64_t> timestamps_;
  std::vector<float> vectors_;
  std::vector<std::uint64_t> codes_;
  std::unordered_map<std::uint64_t, std::size_t> slot_of_;
};

}  // namespace simsearch
