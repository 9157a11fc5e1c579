#pragma once

#include <chrono>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "simsearch/binary_io.hpp"
#include "simsearch/error.hpp"

namespace simsearch {

/// One embedding as it travels between trainer, files, HTTP and index.
struct EmbeddingRecord {
  std::uint64_t id = 0;
  std::optional<std::int32_t> label;
  std::uint64_t timestamp = 0;
  std::vector<float> vec;

  friend bool operator==(const EmbeddingRecord&, const EmbeddingRecord&) = default;
};

inline std::uint64_t unix_now() {
  return static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch())
          .count());
}

namespace emb1 {

inline constexpr char kMagic[4] = {'E', 'M', 'B', '1'};
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;
inline constexpr std::size_t kHeaderSize = 20;
inline constexpr std::int32_t kNoLabel = -1;

inline std::size_t record_size(std::uint32_t dim) { return 8 + 4 + 8 + std::size_t{4} * dim; }

struct Header {
  std::uint32_t dim = 0;
  std::uint64_t count = 0;
};

inline void put_header(io::ByteWriter& w, std::uint32_t dim, std::uint64_t count) {
  w.put_bytes(std::string_view(kMagic, 4));
  w.put<std::uint8_t>(kVersion);
  w.put<std::uint8_t>(kDtypeF32);
  w.put<std::uint16_t>(0);
  w.put<std::uint32_t>(dim);
  w.put<std::uint64_t>(count);
}

inline void put_record(io::ByteWriter& w, const EmbeddingRecord& r) {
  w.put<std::uint64_t>(r.id);
  w.put<std::int32_t>(r.label.value_or(kNoLabel));
  w.put<std::uint64_t>(r.timestamp);
  w.put_span(std::span<const float>(r.vec));
}

inline Header parse_header(io::ByteReader& r) {
  if (r.get_string(4) != std::string_view(kMagic, 4)) throw Error(ErrorCode::MalformedRecord, "bad EMB1 magic");
  const auto version = r.get<std::uint8_t>();
  if (version != kVersion) throw Error(ErrorCode::VersionUnsupported, "EMB1 version " + std::to_string(version));
  if (r.get<std::uint8_t>() != kDtypeF32) throw Error(ErrorCode::VersionUnsupported, "EMB1 dtype not f32");
  (void)r.get<std::uint16_t>();
  Header h;
  h.dim = r.get<std::uint32_t>();
  h.count = r.get<std::uint64_t>();
  return h;
}

inline EmbeddingRecord parse_record(io::ByteReader& r, std::uint32_t dim) {
  EmbeddingRecord rec;
  rec.id = r.get<std::uint64_t>();
  const auto label = r.get<std::int32_t>();
  if (label != kNoLabel) rec.label = label;
  rec.timestamp = r.get<std::uint64_t>();
  rec.vec.resize(dim);
  r.get_into(std::span<float>(rec.vec));
  return rec;
}

/// `dim` is taken from the first record unless given (an empty file still
/// records the dim its producer would have written).
inline std::vector<std::uint8_t> encode(std::span<const EmbeddingRecord> records,
                                        std::optional<std::uint32_t> dim_hint = std::nullopt) {
  const std::uint32_t dim =
      dim_hint ? *dim_hint : (records.empty() ? 0 : static_cast<std::uint32_t>(records.front().vec.size()));
  io::ByteWriter w;
  put_header(w, dim, records.size());
  for (const auto& r : records) {
    if (r.vec.size() != dim) throw Error(ErrorCode::DimMismatch, "EMB1 records must share one dim");
    put_record(w, r);
  }
  return std::move(w.bytes());
}

inline std::vector<EmbeddingRecord> decode(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes, ErrorCode::MalformedRecord);
  const Header h = parse_header(r);
  if (h.dim == 0 && h.count > 0) throw Error(ErrorCode::MalformedRecord, "EMB1 records with dim 0");
  if (r.remaining() != h.count * record_size(h.dim)) {
    throw Error(ErrorCode::MalformedRecord, "EMB1 payload size does not match header count");
  }
  std::vector<EmbeddingRecord> out;
  out.reserve(h.count);
  for (std::uint64_t i = 0; i < h.count; ++i) out.push_back(parse_record(r, h.dim));
  return out;
}

inline void write(const std::string& path, std::span<const EmbeddingRecord> records) {
  io::write_file(path, encode(records));
}

}  // namespace emb1

namespace jsonl {

inline std::optional<std::uint64_t> as_unsigned(const nlohmann::json& v) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
  return std::nullopt;
}

/// Parses `{"id":…,"label":…,"ts":…,"vec":[…]}`. A missing `ts` takes
/// `default_ts`; a missing or null `label` means unlabeled.
inline EmbeddingRecord parse_record(const nlohmann::json& j, std::uint64_t default_ts) {
  if (!j.is_object()) throw Error(ErrorCode::MalformedRecord, "record is not an object");
  EmbeddingRecord rec;
  try {
    const auto id = j.contains("id") ? as_unsigned(j["id"]) : std::nullopt;
    if (!id) throw Error(ErrorCode::MalformedRecord, "record needs a non-negative integer id");
    rec.id = *id;
    if (j.contains("label") && !j["label"].is_null()) {
      const auto label = as_unsigned(j["label"]);
      if (!label || *label > INT32_MAX) throw Error(ErrorCode::MalformedRecord, "label must be an integer in [0, 2^31)");
      rec.label = static_cast<std::int32_t>(*label);
    }
    rec.timestamp = default_ts;
    if (j.contains("ts") && !j["ts"].is_null()) {
      const auto ts = as_unsigned(j["ts"]);
      if (!ts) throw Error(ErrorCode::MalformedRecord, "ts must be a non-negative integer");
      rec.timestamp = *ts;
    }
    if (!j.contains("vec") || !j["vec"].is_array() || j["vec"].empty()) {
      throw Error(ErrorCode::MalformedRecord, "record needs a non-empty vec array");
    }
    rec.vec.reserve(j["vec"].size());
    for (const auto& x : j["vec"]) {
      if (!x.is_number()) throw Error(ErrorCode::MalformedRecord, "vec entries must be numbers");
      rec.vec.push_back(x.get<float>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, e.what());
  }
  return rec;
}

inline EmbeddingRecord parse_line(const std::string& line, std::uint64_t default_ts) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, e.what());
  }
  return parse_record(j, default_ts);
}

inline nlohmann::json to_json(const EmbeddingRecord& r) {
  nlohmann::json j = {{"id", r.id}, {"ts", r.timestamp}, {"vec", r.vec}};
  j["label"] = r.label ? nlohmann::json(*r.label) : nlohmann::json(nullptr);
  return j;
}

}  // namespace jsonl

/// Loads an embedding file, EMB1 binary or JSON lines, chosen by magic.
inline std::vector<EmbeddingRecord> read_embeddings(const std::string& path) {
  const auto bytes = io::read_file(path);
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), emb1::kMagic, 4) == 0) return emb1::decode(bytes);
  std::vector<EmbeddingRecord> out;
  const std::uint64_t now = unix_now();
  std::string text(bytes.begin(), bytes.end());
  std::size_t start = 0;
  std::size_t line_no = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    ++line_no;
    std::string line = text.substr(start, end - start);
    start = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(jsonl::parse_line(line, now));
    } catch (const Error& e) {
      throw Error(ErrorCode::MalformedRecord, path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace simsearch
