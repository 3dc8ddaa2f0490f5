#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "geoemb/embedding_store.hpp"
#include "geoemb/hash.hpp"
#include "test_util.hpp"

using namespace geoemb;
using geoemb::testing::from_rows;
using geoemb::testing::error_code;
using geoemb::testing::random_matrix;
using geoemb::testing::TempDir;

namespace {

// Hand-assembled EMB1 bytes, independent of encode_container.
std::string raw_file(const std::string& header, const std::vector<float>& payload) {
  std::string out = "EMB1";
  const auto len = static_cast<std::uint32_t>(header.size());
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
  out += header;
  for (float f : payload) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
  }
  return out;
}

const char* kHeader23 = R"({"n_rows":2,"n_cols":3,"dtype":"f32","order":"row_major","model_id":"m"})";

}  // namespace

TEST(EmbeddingStore, DecodesHandBuiltFile) {
  auto m = decode_embeddings(decode_container(raw_file(kHeader23, {1, 2, 3, 4, 5, 6})));
  ASSERT_EQ(m.n_rows(), 2u);
  ASSERT_EQ(m.n_cols(), 3u);
  EXPECT_EQ(m.at(0, 0), 1.0f);
  EXPECT_EQ(m.at(0, 2), 3.0f);
  EXPECT_EQ(m.at(1, 0), 4.0f);
  EXPECT_EQ(m.at(1, 2), 6.0f);
  EXPECT_EQ(m.model_id(), "m");
}

TEST(EmbeddingStore, DistinctErrorsForMalformedFiles) {
  auto load = [](const std::string& bytes) { return [bytes] { decode_embeddings(decode_container(bytes)); }; };
  EXPECT_EQ(error_code(load(raw_file(kHeader23, {1, 2, 3, 4, 5}))), "size_mismatch");
  EXPECT_EQ(error_code(load("EMB2" + raw_file(kHeader23, {}).substr(4))), "bad_magic");
  auto partial = raw_file(kHeader23, {1, 2, 3, 4, 5, 6});
  partial.pop_back();
  EXPECT_EQ(error_code(load(partial)), "truncated_payload");
  EXPECT_EQ(error_code(load(raw_file(kHeader23, {}).substr(0, 20))), "truncated_header");
  const float nan = std::numeric_limits<float>::quiet_NaN();
  EXPECT_EQ(error_code(load(raw_file(kHeader23, {1, 2, nan, 4, 5, 6}))), "non_finite");
  const float inf = std::numeric_limits<float>::infinity();
  EXPECT_EQ(error_code(load(raw_file(kHeader23, {1, 2, 3, 4, 5, -inf}))), "non_finite");
  EXPECT_EQ(error_code(load(raw_file(R"({"n_rows":1,"n_cols":1,"dtype":"f16","order":"row_major","model_id":"m"})",
                                     {1}))),
            "bad_header");
}

TEST(EmbeddingStore, RejectsDuplicateRowIds) {
  EXPECT_EQ(error_code([] { EmbeddingMatrix(2, 1, {1, 2}, "m", std::vector<std::string>{"a", "a"}); }),
            "duplicate_row_id");
}

TEST(EmbeddingStore, RoundTripPreservesEverything) {
  TempDir tmp("roundtrip");
  auto m = random_matrix(17, 5, 3, "vit_base_dino");
  std::vector<std::string> ids;
  for (int i = 0; i < 17; ++i) ids.push_back("s" + std::to_string(i));
  EmbeddingMatrix with_ids(17, 5, {m.data().begin(), m.data().end()}, "vit_base_dino", ids);
  with_ids.set_season("fall");
  with_ids.set_attrs(Json{{"note", "x"}});
  save_embeddings(with_ids, tmp / "a.emb");
  EXPECT_EQ(load_embeddings(tmp / "a.emb"), with_ids);
}

TEST(EmbeddingStore, EmptyAndScalarMatrices) {
  TempDir tmp("small");
  save_embeddings(EmbeddingMatrix(0, 0, {}, "e"), tmp / "e.emb");
  auto e = load_embeddings(tmp / "e.emb");
  EXPECT_EQ(e.n_rows(), 0u);
  EXPECT_EQ(e.n_cols(), 0u);

  save_embeddings(EmbeddingMatrix(1, 1, {3.5f}, "s"), tmp / "s.emb");
  EXPECT_EQ(load_embeddings(tmp / "s.emb").at(0, 0), 3.5f);
}

TEST(EmbeddingStore, GoldenHashOfRandomFile) {
  TempDir tmp("golden");
  save_embeddings(random_matrix(1000, 64, 20250611, "golden"), tmp / "g.emb");
  // Pinned from the first run; guards the on-disk layout and the RNG.
  EXPECT_EQ(sha256_file(tmp / "g.emb"), "e71a755ec1ba95cbf29d923ba17f2718a08bd391ec516fb94a3b5caf1f42ae08");
}

TEST(EmbeddingStore, ConcatColumns) {
  auto a = from_rows({{1}, {2}});
  auto b = from_rows({{3}, {4}});
  auto ab = concat_columns({a, b});
  EXPECT_EQ(ab.n_cols(), 2u);
  EXPECT_EQ(ab.at(0, 0), 1.0f);
  EXPECT_EQ(ab.at(0, 1), 3.0f);
  EXPECT_EQ(ab.at(1, 0), 2.0f);
  EXPECT_EQ(ab.at(1, 1), 4.0f);

  EXPECT_EQ(concat_columns({a}), a);

  std::vector<EmbeddingMatrix> seasons;
  for (int s = 0; s < 4; ++s) seasons.push_back(random_matrix(10, 128, 100 + s));
  EXPECT_EQ(concat_columns(seasons).n_cols(), 512u);
  EXPECT_EQ(concat_columns(seasons).n_rows(), 10u);
}

TEST(EmbeddingStore, ConcatIsAssociative) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto a = random_matrix(6, 1 + seed % 3, seed);
    auto b = random_matrix(6, 2 + seed % 4, seed + 100);
    auto c = random_matrix(6, 1 + seed % 5, seed + 200);
    auto left = concat_columns({concat_columns({a, b}), c});
    auto flat = concat_columns({a, b, c});
    ASSERT_EQ(left.n_cols(), flat.n_cols());
    EXPECT_TRUE(std::equal(left.data().begin(), left.data().end(), flat.data().begin()));
  }
}

TEST(EmbeddingStore, ConcatRejectsMisalignment) {
  EXPECT_EQ(error_code([] { concat_columns({random_matrix(3, 2, 1), random_matrix(4, 2, 2)}); }),
            "row_count_mismatch");
  EmbeddingMatrix a(2, 1, {1, 2}, "a", std::vector<std::string>{"x", "y"});
  EmbeddingMatrix b(2, 1, {1, 2}, "b", std::vector<std::string>{"y", "x"});
  EXPECT_EQ(error_code([&] { concat_columns({a, b}); }), "row_id_mismatch");
}

TEST(Manifest, ParsesAndResolvesPaths) {
  auto j = Json::parse(R"({"entries":[
      {"model_id":"georsclip","season":"spring","path":"g_spring.emb"},
      {"model_id":"convnext_xxl","path":"/abs/c.emb"}],
    "metadata":"meta.csv"})");
  auto m = parse_manifest(j, "/data");
  ASSERT_EQ(m.entries.size(), 2u);
  EXPECT_EQ(m.entries[0].slot_key(), "georsclip_spring");
  EXPECT_EQ(m.entries[0].path, fs::path("/data/g_spring.emb"));
  EXPECT_EQ(m.entries[1].path, fs::path("/abs/c.emb"));
  EXPECT_EQ(*m.metadata_path, fs::path("/data/meta.csv"));
  ASSERT_NE(m.find("convnext_xxl"), nullptr);
  EXPECT_EQ(m.find("nope"), nullptr);
}

TEST(Manifest, RejectsDuplicatePairs) {
  auto j = Json::parse(R"({"entries":[
      {"model_id":"g","season":"fall","path":"a"},
      {"model_id":"g","season":"fall","path":"b"}]})");
  EXPECT_EQ(error_code([&] { parse_manifest(j); }), "duplicate_manifest_entry");
  auto ok = Json::parse(R"({"entries":[
      {"model_id":"g","season":"fall","path":"a"},
      {"model_id":"g","season":"winter","path":"b"}]})");
  EXPECT_EQ(parse_manifest(ok).entries.size(), 2u);
}

TEST(Metadata, ParsesCsvWithEmptyCells) {
  auto rows = parse_metadata_csv(
      "sample_id,lat,lon,forest_cover,elevation,nightlights,population\n"
      "a,47.6,-122.3,10,250,3,1200\n"
      "b,,,,,,\n"
      "c,90,180,,1.5,,\n");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_DOUBLE_EQ(*rows[0].lat, 47.6);
  EXPECT_DOUBLE_EQ(*rows[0].population, 1200);
  EXPECT_FALSE(rows[1].lat.has_value());
  EXPECT_FALSE(rows[1].forest_cover.has_value());
  EXPECT_DOUBLE_EQ(*rows[2].lon, 180);
  EXPECT_DOUBLE_EQ(*rows[2].elevation, 1.5);
}

TEST(Metadata, RejectsBadInput) {
  const std::string head = "sample_id,lat,lon,forest_cover,elevation,nightlights,population\n";
  EXPECT_EQ(error_code([&] { parse_metadata_csv(head + "a,91,0,,,,\n"); }), "out_of_range");
  EXPECT_EQ(error_code([&] { parse_metadata_csv(head + "a,0,-180.5,,,,\n"); }), "out_of_range");
  EXPECT_EQ(error_code([&] { parse_metadata_csv(head + "a,abc,0,,,,\n"); }), "bad_csv");
  EXPECT_EQ(error_code([&] { parse_metadata_csv("id,lat\n"); }), "bad_csv");
  EXPECT_EQ(error_code([&] { parse_metadata_csv(head + "a,1,1,,,,\na,2,2,,,,\n"); }), "duplicate_row_id");
}
