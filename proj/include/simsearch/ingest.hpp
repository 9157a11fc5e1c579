#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <fstream>
#include <mutex>
#include <optional>
#include <stop_token>
#include <string>
#include <thread>
#include <vector>

#include "simsearch/emb1.hpp"
#include "simsearch/index.hpp"

namespace simsearch {

struct IngestConfig {
  std::chrono::milliseconds poll_interval{100};
};

/// Tails an append-only embedding file (EMB1 binary or JSON lines, chosen
/// by the first four bytes) and upserts every complete record into an
/// index. Bad records are counted and skipped. The header count of a
/// streamed EMB1 file is ignored; records are read as they become whole.
class StreamIngestor {
 public:
  StreamIngestor(Index& index, std::string path, IngestConfig config = {})
      : index_(index), path_(std::move(path)), config_(config) {}

  StreamIngestor(const StreamIngestor&) = delete;
  StreamIngestor& operator=(const StreamIngestor&) = delete;

  ~StreamIngestor() { stop(); }

  void start() {
    if (worker_.joinable()) return;
    worker_ = std::jthread([this](std::stop_token st) {
      while (!st.stop_requested()) {
        poll_once();
        std::unique_lock lock(sleep_mu_);
        wake_.wait_for(lock, st, config_.poll_interval, [] { return false; });
      }
    });
  }

  void stop() {
    if (!worker_.joinable()) return;
    worker_.request_stop();
    worker_.join();
  }

  /// Reads whatever was appended since the last poll. Returns the number of
  /// records ingested by this call.
  std::size_t poll_once() {
    std::lock_guard guard(poll_mu_);
    std::ifstream in(path_, std::ios::binary);
    if (!in) return 0;
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::uint64_t>(in.tellg());
    if (size < offset_) reset();  // truncated or replaced
    if (size == offset_) return 0;
    in.seekg(static_cast<std::streamoff>(offset_));
    std::vector<char> chunk(size - offset_);
    in.read(chunk.data(), static_cast<std::streamsize>(chunk.size()));
    chunk.resize(static_cast<std::size_t>(in.gcount()));
    offset_ += chunk.size();
    pending_.insert(pending_.end(), chunk.begin(), chunk.end());

    if (format_ == Format::Unknown) {
      if (pending_.size() < 4) return 0;
      format_ = std::equal(pending_.begin(), pending_.begin() + 4, emb1::kMagic) ? Format::Binary : Format::JsonLines;
    }
    return format_ == Format::Binary ? drain_binary() : drain_lines();
  }

  std::uint64_t ingested() const noexcept { return ingested_.load(); }
  std::uint64_t skipped() const noexcept { return skipped_.load(); }

  /// Set when the stream header itself was unreadable; the stream is then
  /// abandoned until the file is truncated or replaced.
  std::optional<std::string> error() const {
    std::lock_guard guard(poll_mu_);
    return error_;
  }

 private:
  enum class Format { Unknown, Binary, JsonLines };

  void reset() {
    offset_ = 0;
    pending_.clear();
    format_ = Format::Unknown;
    binary_dim_.reset();
    error_.reset();
  }

  bool apply(const EmbeddingRecord& rec) {
    try {
      index_.insert(rec, /*upsert=*/true);
      ++ingested_;
      return true;
    } catch (const Error&) {
      ++skipped_;
      return false;
    }
  }

  std::size_t drain_lines() {
    std::size_t n = 0;
    std::size_t start = 0;
    for (std::size_t i = 0; i < pending_.size(); ++i) {
      if (pending_[i] != '\n') continue;
      std::string line(pending_.begin() + static_cast<std::ptrdiff_t>(start),
                       pending_.begin() + static_cast<std::ptrdiff_t>(i));
      start = i + 1;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        if (apply(jsonl::parse_line(line, unix_now()))) ++n;
      } catch (const Error&) {
        ++skipped_;
      }
    }
    pending_.erase(pending_.begin(), pending_.begin() + static_cast<std::ptrdiff_t>(start));
    return n;
  }

  std::size_t drain_binary() {
    if (error_) {
      pending_.clear();
      return 0;
    }
    std::size_t pos = 0;
    if (!binary_dim_) {
      if (pending_.size() < emb1::kHeaderSize) return 0;
      try {
        io::ByteReader r(std::span(reinterpret_cast<const std::uint8_t*>(pending_.data()), emb1::kHeaderSize),
                         ErrorCode::MalformedRecord);
        binary_dim_ = emb1::parse_header(r).dim;
      } catch (const Error& e) {
        error_ = e.what();
        pending_.clear();
        return 0;
      }
      pos = emb1::kHeaderSize;
    }
    const std::size_t rec_size = emb1::record_size(*binary_dim_);
    std::size_t n = 0;
    while (pending_.size() - pos >= rec_size) {
      io::ByteReader r(std::span(reinterpret_cast<const std::uint8_t*>(pending_.data() + pos), rec_size),
                       ErrorCode::MalformedRecord);
      if (apply(emb1::parse_record(r, *binary_dim_))) ++n;
      pos += rec_size;
    }
    pending_.erase(pending_.begin(), pending_.begin() + static_cast<std::ptrdiff_t>(pos));
    return n;
  }

  Index& index_;
  std::string path_;
  IngestConfig config_;

  mutable std::mutex poll_mu_;
  std::uint64_t offset_ = 0;
  std::vector<char> pending_;
  Format format_ = Format::Unknown;
  std::optional<std::uint32_t> binary_dim_;
  std::optional<std::string> error_;

  std::atomic<std::uint64_t> ingested_{0};
  std::atomic<std::uint64_t> skipped_{0};

  std::mutex sleep_mu_;
  std::condition_variable_any wake_;
  std::jthread worker_;
};

}  // namespace simsearch
