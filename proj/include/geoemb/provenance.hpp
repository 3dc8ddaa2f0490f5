#pragma once

// Provenance records: which files went in, which came out (with SHA-256),
// under which seed and tool version. Re-hashing the listed files verifies a
// record.

#include <cstdint>
#include <string>
#include <vector>

#include "geoemb/embedding_store.hpp"
#include "geoemb/hash.hpp"

namespace geoemb {

inline constexpr std::string_view kVersion = "0.1.0";

struct Provenance {
  std::string command;
  std::optional<std::uint64_t> seed;
  Json params = Json::object();
  std::vector<fs::path> inputs{};   // recorded as absolute paths
  std::vector<fs::path> outputs{};  // recorded relative to the record's directory

  void add_input(const fs::path& p) { inputs.push_back(p); }
  void add_output(const fs::path& p) { outputs.push_back(p); }
};

namespace detail {

inline std::string absolute_string(const fs::path& p) { return fs::absolute(p).lexically_normal().generic_string(); }

inline std::string relative_string(const fs::path& p, const fs::path& base) {
  const fs::path abs = fs::absolute(p).lexically_normal();
  const fs::path rel = abs.lexically_relative(fs::absolute(base).lexically_normal());
  return rel.empty() ? abs.generic_string() : rel.generic_string();
}

}  // namespace detail

/// Hashes every listed file and writes the record to `path` (pretty JSON,
/// sorted keys, trailing newline).
inline Json write_provenance(const Provenance& p, const fs::path& path) {
  const fs::path dir = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  Json inputs = Json::array(), outputs = Json::array();
  for (const auto& f : p.inputs) inputs.push_back({{"path", detail::absolute_string(f)}, {"sha256", sha256_file(f)}});
  for (const auto& f : p.outputs)
    outputs.push_back({{"path", detail::relative_string(f, dir)}, {"sha256", sha256_file(f)}});
  Json j = {{"tool", "geoemb"}, {"version", kVersion}, {"command", p.command}, {"params", p.params},
            {"inputs", inputs},  {"outputs", outputs}};
  j["seed"] = p.seed ? Json(*p.seed) : Json(nullptr);
  detail::write_all(path, j.dump(2) + "\n");
  return j;
}

struct ProvenanceCheck {
  std::string path;
  std::string expected;
  std::string actual;  // empty if the file is missing
};

/// Files whose current hash differs from the record; empty means verified.
inline std::vector<ProvenanceCheck> verify_provenance(const fs::path& record) {
  Json j;
  try {
    j = Json::parse(detail::read_all(record));
  } catch (const Json::parse_error& e) {
    detail::fail("bad_provenance", std::string("provenance is not valid JSON: ") + e.what());
  }
  const fs::path dir = record.parent_path().empty() ? fs::path(".") : record.parent_path();
  std::vector<ProvenanceCheck> bad;
  try {
    for (const char* key : {"inputs", "outputs"})
      for (const auto& e : j.at(key)) {
        fs::path p = e.at("path").get<std::string>();
        if (p.is_relative()) p = dir / p;
        const std::string expected = e.at("sha256").get<std::string>();
        const std::string actual = fs::exists(p) ? sha256_file(p) : std::string();
        if (actual != expected) bad.push_back({p.generic_string(), expected, actual});
      }
  } catch (const Json::exception& e) {
    detail::fail("bad_provenance", std::string("provenance record: ") + e.what());
  }
  return bad;
}

}  // namespace geoemb
