#pragma once

// On-disk embedding container ("EMB1") plus the in-memory matrix, manifest and
// metadata types shared by every other module.
//
// EMB1 layout:
//   bytes 0..3   'E' 'M' 'B' '1'
//   bytes 4..7   u32 little-endian header length H
//   next H bytes UTF-8 JSON header
//   remainder    little-endian f32 payload
//
// Embedding headers carry n_rows, n_cols, dtype="f32", order="row_major",
// model_id and optionally season and row_ids. Other payload kinds (SVD
// models, linear maps, conv weights) reuse the container with a "kind" key.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "geoemb/error.hpp"

namespace geoemb {

using Json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr std::string_view kMagic = "EMB1";

/// N×D row-major f32 matrix with a model identity and optional row ids.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;

  EmbeddingMatrix(std::size_t n_rows, std::size_t n_cols, std::vector<float> data,
                  std::string model_id = {}, std::optional<std::vector<std::string>> row_ids = {})
      : n_rows_(n_rows),
        n_cols_(n_cols),
        data_(std::move(data)),
        model_id_(std::move(model_id)),
        row_ids_(std::move(row_ids)) {
    if (data_.size() != n_rows_ * n_cols_)
      detail::fail("size_mismatch", "data length " + std::to_string(data_.size()) + " != " +
                                        std::to_string(n_rows_) + "x" + std::to_string(n_cols_));
    for (float v : data_)
      if (!std::isfinite(v)) detail::fail("non_finite", "embedding contains NaN or Inf");
    if (row_ids_) {
      if (row_ids_->size() != n_rows_)
        detail::fail("row_id_mismatch", "row_ids length does not match n_rows");
      std::unordered_set<std::string_view> seen;
      for (const auto& id : *row_ids_)
        if (!seen.insert(id).second) detail::fail("duplicate_row_id", "duplicate row id '" + id + "'");
    }
  }

  static EmbeddingMatrix zeros(std::size_t n_rows, std::size_t n_cols, std::string model_id = {}) {
    return {n_rows, n_cols, std::vector<float>(n_rows * n_cols, 0.0f), std::move(model_id)};
  }

  [[nodiscard]] std::size_t n_rows() const noexcept { return n_rows_; }
  [[nodiscard]] std::size_t n_cols() const noexcept { return n_cols_; }
  [[nodiscard]] bool empty() const noexcept { return n_rows_ == 0 || n_cols_ == 0; }
  [[nodiscard]] std::span<const float> data() const noexcept { return data_; }
  [[nodiscard]] std::span<const float> row(std::size_t r) const noexcept {
    return {data_.data() + r * n_cols_, n_cols_};
  }
  [[nodiscard]] float at(std::size_t r, std::size_t c) const noexcept { return data_[r * n_cols_ + c]; }

  [[nodiscard]] const std::string& model_id() const noexcept { return model_id_; }
  [[nodiscard]] const std::optional<std::vector<std::string>>& row_ids() const noexcept { return row_ids_; }
  [[nodiscard]] const std::optional<std::string>& season() const noexcept { return season_; }
  /// Extra header keys preserved through save/load (e.g. an embedded layout).
  [[nodiscard]] const Json& attrs() const noexcept { return attrs_; }

  void set_model_id(std::string id) { model_id_ = std::move(id); }
  void set_season(std::optional<std::string> s) { season_ = std::move(s); }
  void set_attrs(Json a) { attrs_ = std::move(a); }

  bool operator==(const EmbeddingMatrix& o) const {
    return n_rows_ == o.n_rows_ && n_cols_ == o.n_cols_ && model_id_ == o.model_id_ &&
           row_ids_ == o.row_ids_ && season_ == o.season_ && attrs_ == o.attrs_ &&
           std::equal(data_.begin(), data_.end(), o.data_.begin(), o.data_.end(),
                      [](float a, float b) { return std::bit_cast<std::uint32_t>(a) == std::bit_cast<std::uint32_t>(b); });
  }

 private:
  std::size_t n_rows_ = 0;
  std::size_t n_cols_ = 0;
  std::vector<float> data_;
  std::string model_id_;
  std::optional<std::vector<std::string>> row_ids_;
  std::optional<std::string> season_;
  Json attrs_;
};

// ---------------------------------------------------------------------------
// Container I/O

struct Container {
  Json header;
  std::vector<float> payload;
};

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::string read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("io_error", "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

inline void write_all(const fs::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("io_error", "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail("io_error", "write failed for " + path.string());
}

inline std::size_t header_count(const Json& h, const char* key) {
  if (!h.contains(key) || !h[key].is_number_unsigned())
    fail("bad_header", std::string("header key '") + key + "' missing or not a non-negative integer");
  return h[key].get<std::size_t>();
}

inline std::string header_string(const Json& h, const char* key) {
  if (!h.contains(key) || !h[key].is_string())
    fail("bad_header", std::string("header key '") + key + "' missing or not a string");
  return h[key].get<std::string>();
}

}  // namespace detail

/// Serialises header + payload to bytes. JSON keys are emitted sorted, so equal
/// inputs always give byte-identical files.
inline std::string encode_container(const Json& header, std::span<const float> payload) {
  const std::string text = header.dump();
  std::string out;
  out.reserve(8 + text.size() + 4 * payload.size());
  out.append(kMagic);
  detail::put_u32_le(out, static_cast<std::uint32_t>(text.size()));
  out.append(text);
  for (float v : payload) detail::put_u32_le(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

inline Container decode_container(std::string_view bytes) {
  if (bytes.size() < 4 || bytes.substr(0, 4) != kMagic) detail::fail("bad_magic", "not an EMB1 file");
  if (bytes.size() < 8) detail::fail("truncated_header", "file ends inside the header length");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t hlen = detail::get_u32_le(p + 4);
  if (bytes.size() < 8 + hlen) detail::fail("truncated_header", "file ends inside the JSON header");
  Container c;
  try {
    c.header = Json::parse(bytes.substr(8, hlen));
  } catch (const Json::parse_error& e) {
    detail::fail("bad_header", std::string("header is not valid JSON: ") + e.what());
  }
  if (!c.header.is_object()) detail::fail("bad_header", "header is not a JSON object");
  const std::size_t payload_bytes = bytes.size() - 8 - hlen;
  if (payload_bytes % 4 != 0) detail::fail("truncated_payload", "payload ends inside a float");
  c.payload.resize(payload_bytes / 4);
  for (std::size_t i = 0; i < c.payload.size(); ++i)
    c.payload[i] = std::bit_cast<float>(detail::get_u32_le(p + 8 + hlen + 4 * i));
  return c;
}

inline void write_container(const fs::path& path, const Json& header, std::span<const float> payload) {
  detail::write_all(path, encode_container(header, payload));
}

inline Container read_container(const fs::path& path) { return decode_container(detail::read_all(path)); }

/// Checks the container's kind tag and payload length.
inline void expect_payload(const Container& c, std::string_view kind, std::size_t expected) {
  const std::string actual = c.header.value("kind", std::string("emb"));
  if (actual != kind)
    detail::fail("wrong_kind", "expected kind '" + std::string(kind) + "', found '" + actual + "'");
  if (c.payload.size() != expected)
    detail::fail("size_mismatch", "header declares " + std::to_string(expected) + " values, payload has " +
                                      std::to_string(c.payload.size()));
  for (float v : c.payload)
    if (!std::isfinite(v)) detail::fail("non_finite", "payload contains NaN or Inf");
}

// ---------------------------------------------------------------------------
// Embeddings

inline Json embedding_header(const EmbeddingMatrix& m) {
  Json h = m.attrs().is_object() ? m.attrs() : Json::object();
  h["kind"] = "emb";
  h["n_rows"] = m.n_rows();
  h["n_cols"] = m.n_cols();
  h["dtype"] = "f32";
  h["order"] = "row_major";
  h["model_id"] = m.model_id();
  if (m.season()) h["season"] = *m.season();
  if (m.row_ids()) h["row_ids"] = *m.row_ids();
  return h;
}

inline EmbeddingMatrix decode_embeddings(const Container& c) {
  const Json& h = c.header;
  const std::size_t rows = detail::header_count(h, "n_rows");
  const std::size_t cols = detail::header_count(h, "n_cols");
  if (detail::header_string(h, "dtype") != "f32") detail::fail("bad_header", "dtype must be f32");
  if (detail::header_string(h, "order") != "row_major") detail::fail("bad_header", "order must be row_major");
  std::string model_id = detail::header_string(h, "model_id");
  expect_payload(c, "emb", rows * cols);

  std::optional<std::vector<std::string>> ids;
  if (h.contains("row_ids")) {
    if (!h["row_ids"].is_array()) detail::fail("bad_header", "row_ids must be an array of strings");
    ids = h["row_ids"].get<std::vector<std::string>>();
  }
  EmbeddingMatrix m(rows, cols, c.payload, std::move(model_id), std::move(ids));
  if (h.contains("season")) m.set_season(detail::header_string(h, "season"));
  Json extra = h;
  for (const char* k : {"kind", "n_rows", "n_cols", "dtype", "order", "model_id", "season", "row_ids"}) extra.erase(k);
  if (!extra.empty()) m.set_attrs(std::move(extra));
  return m;
}

inline void save_embeddings(const EmbeddingMatrix& m, const fs::path& path) {
  write_container(path, embedding_header(m), m.data());
}

inline EmbeddingMatrix load_embeddings(const fs::path& path) { return decode_embeddings(read_container(path)); }

// ---------------------------------------------------------------------------
// Matrix utilities

/// Horizontal concatenation; column blocks appear in input order.
inline EmbeddingMatrix concat_columns(std::span<const EmbeddingMatrix> parts) {
  if (parts.empty()) detail::fail("empty_input", "concat_columns needs at least one matrix");
  const std::size_t rows = parts[0].n_rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.n_rows() != rows) detail::fail("row_count_mismatch", "matrices disagree on n_rows");
    if (p.row_ids() && parts[0].row_ids() && *p.row_ids() != *parts[0].row_ids())
      detail::fail("row_id_mismatch", "row ids differ between '" + parts[0].model_id() + "' and '" + p.model_id() + "'");
    cols += p.n_cols();
  }
  if (parts.size() == 1) return parts[0];
  std::vector<float> data(rows * cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < rows; ++r) {
      auto src = p.row(r);
      std::copy(src.begin(), src.end(), data.begin() + static_cast<std::ptrdiff_t>(r * cols + offset));
    }
    offset += p.n_cols();
  }
  std::optional<std::vector<std::string>> ids;
  for (const auto& p : parts)
    if (p.row_ids()) {
      ids = p.row_ids();
      break;
    }
  std::string id;
  for (const auto& p : parts) id += (id.empty() ? "" : "+") + p.model_id();
  return {rows, cols, std::move(data), std::move(id), std::move(ids)};
}

inline EmbeddingMatrix concat_columns(std::initializer_list<EmbeddingMatrix> parts) {
  return concat_columns(std::span<const EmbeddingMatrix>(parts.begin(), parts.size()));
}

/// Columns [start, end) as a new matrix; keeps model id and row ids.
inline EmbeddingMatrix column_slice(const EmbeddingMatrix& m, std::size_t start, std::size_t end) {
  if (start > end || end > m.n_cols()) detail::fail("slice_out_of_range", "column slice out of range");
  const std::size_t w = end - start;
  std::vector<float> data(m.n_rows() * w);
  for (std::size_t r = 0; r < m.n_rows(); ++r) {
    auto src = m.row(r);
    std::copy(src.begin() + static_cast<std::ptrdiff_t>(start), src.begin() + static_cast<std::ptrdiff_t>(end),
              data.begin() + static_cast<std::ptrdiff_t>(r * w));
  }
  return {m.n_rows(), w, std::move(data), m.model_id(), m.row_ids()};
}

/// Scales each row to unit L2 norm; zero rows are left as zero.
inline EmbeddingMatrix l2_normalize_rows(const EmbeddingMatrix& m) {
  std::vector<float> data(m.data().begin(), m.data().end());
  for (std::size_t r = 0; r < m.n_rows(); ++r) {
    double s = 0.0;
    for (float v : m.row(r)) s += static_cast<double>(v) * v;
    if (s == 0.0) continue;
    const double inv = 1.0 / std::sqrt(s);
    for (std::size_t c = 0; c < m.n_cols(); ++c)
      data[r * m.n_cols() + c] = static_cast<float>(m.at(r, c) * inv);
  }
  EmbeddingMatrix out(m.n_rows(), m.n_cols(), std::move(data), m.model_id(), m.row_ids());
  out.set_season(m.season());
  return out;
}

// ---------------------------------------------------------------------------
// Manifest

struct ManifestEntry {
  std::string model_id;
  std::optional<std::string> season;
  fs::path path;

  /// Key used to match layout slots: "model" or "model_season".
  [[nodiscard]] std::string slot_key() const { return season ? model_id + "_" + *season : model_id; }
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  std::optional<fs::path> metadata_path;

  [[nodiscard]] const ManifestEntry* find(std::string_view slot_key) const {
    for (const auto& e : entries)
      if (e.slot_key() == slot_key) return &e;
    return nullptr;
  }
};

/// Parses a manifest. Relative paths resolve against `base_dir`.
inline Manifest parse_manifest(const Json& j, const fs::path& base_dir = {}) {
  if (!j.is_object() || !j.contains("entries") || !j["entries"].is_array())
    detail::fail("bad_manifest", "manifest must be an object with an 'entries' array");
  auto resolve = [&](const std::string& p) {
    fs::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  };
  Manifest m;
  std::unordered_set<std::string> keys;
  for (const auto& e : j["entries"]) {
    if (!e.is_object() || !e.contains("model_id") || !e.contains("path"))
      detail::fail("bad_manifest", "each entry needs model_id and path");
    ManifestEntry entry{e["model_id"].get<std::string>(), std::nullopt, resolve(e["path"].get<std::string>())};
    if (e.contains("season") && !e["season"].is_null()) entry.season = e["season"].get<std::string>();
    const std::string key = entry.model_id + "\x1f" + entry.season.value_or("");
    if (!keys.insert(key).second)
      detail::fail("duplicate_manifest_entry", "duplicate (model_id, season) pair: " + entry.slot_key());
    m.entries.push_back(std::move(entry));
  }
  if (j.contains("metadata") && !j["metadata"].is_null()) m.metadata_path = resolve(j["metadata"].get<std::string>());
  return m;
}

inline Manifest load_manifest(const fs::path& path) {
  Json j;
  try {
    j = Json::parse(detail::read_all(path));
  } catch (const Json::parse_error& e) {
    detail::fail("bad_manifest", std::string("manifest is not valid JSON: ") + e.what());
  }
  return parse_manifest(j, path.parent_path());
}

// ---------------------------------------------------------------------------
// Sample metadata CSV

struct SampleMetadata {
  std::string sample_id;
  std::optional<double> lat;           // degrees
  std::optional<double> lon;           // degrees
  std::optional<double> forest_cover;  // percent
  std::optional<double> elevation;     // metres
  std::optional<double> nightlights;   // radiance index
  std::optional<double> population;    // density index
};

inline constexpr std::string_view kMetadataHeader = "sample_id,lat,lon,forest_cover,elevation,nightlights,population";

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      out.push_back(trim(line.substr(start, i - start)));
      start = i + 1;
    }
  }
  return out;
}

inline std::optional<double> parse_optional_double(std::string_view s, std::size_t line_no) {
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  if (s.front() == '+') s.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(v))
    fail("bad_csv", "line " + std::to_string(line_no) + ": '" + std::string(s) + "' is not a finite number");
  return v;
}

}  // namespace detail

inline std::vector<SampleMetadata> parse_metadata_csv(std::string_view text) {
  std::vector<SampleMetadata> rows;
  std::size_t line_no = 0;
  bool header_seen = false;
  std::unordered_set<std::string> ids;
  while (!text.empty()) {
    const std::size_t nl = text.find('\n');
    std::string_view line = detail::trim(text.substr(0, nl));
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (line.empty()) continue;
    if (!header_seen) {
      if (line != kMetadataHeader)
        detail::fail("bad_csv", "metadata header must be '" + std::string(kMetadataHeader) + "'");
      header_seen = true;
      continue;
    }
    auto cells = detail::split_csv_line(line);
    if (cells.size() != 7) detail::fail("bad_csv", "line " + std::to_string(line_no) + ": expected 7 cells");
    SampleMetadata s;
    s.sample_id = std::string(cells[0]);
    if (s.sample_id.empty()) detail::fail("bad_csv", "line " + std::to_string(line_no) + ": empty sample_id");
    if (!ids.insert(s.sample_id).second) detail::fail("duplicate_row_id", "duplicate sample_id " + s.sample_id);
    s.lat = detail::parse_optional_double(cells[1], line_no);
    s.lon = detail::parse_optional_double(cells[2], line_no);
    s.forest_cover = detail::parse_optional_double(cells[3], line_no);
    s.elevation = detail::parse_optional_double(cells[4], line_no);
    s.nightlights = detail::parse_optional_double(cells[5], line_no);
    s.population = detail::parse_optional_double(cells[6], line_no);
    if (s.lat && (*s.lat < -90.0 || *s.lat > 90.0))
      detail::fail("out_of_range", "latitude out of [-90, 90] for " + s.sample_id);
    if (s.lon && (*s.lon < -180.0 || *s.lon > 180.0))
      detail::fail("out_of_range", "longitude out of [-180, 180] for " + s.sample_id);
    rows.push_back(std::move(s));
  }
  if (!header_seen) detail::fail("bad_csv", "metadata file is empty");
  return rows;
}

inline std::vector<SampleMetadata> load_metadata(const fs::path& path) {
  return parse_metadata_csv(detail::read_all(path));
}

}  // namespace geoemb
