#include <gtest/gtest.h>

#include "chips/config.hpp"
#include "temp_dir.hpp"

using namespace chips;

namespace {

std::string error_of(const std::string& text) {
  try {
    parse_config_text(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, EmptyObjectYieldsDefaults) {
  const auto c = parse_config_text("{}");
  EXPECT_EQ(c.alpha, 0.6);
  EXPECT_EQ(c.beta, 0.5);
  EXPECT_FALSE(c.lambda_ridge.has_value());
  EXPECT_EQ(c.sketch_kind, "countsketch");
  EXPECT_EQ(c.sketch_k, 4096u);
  EXPECT_EQ(c.cg_iters, 5u);
  EXPECT_EQ(c.batch_size, 256u);
  EXPECT_EQ(c.eval_samples_per_task, 200u);
  EXPECT_EQ(c.retention, 0.1);
  EXPECT_EQ(c.retention_grid, (std::vector<double>{0.1, 0.2, 0.3, 0.5}));
  EXPECT_EQ(c.method, Method::Chips);
  EXPECT_EQ(c.ablation, Ablation::Full);
  EXPECT_EQ(c.tracin_epochs, 10u);
  EXPECT_EQ(c.concepts.whitelist.size(), 8u);
  EXPECT_EQ(c.concepts.overrepresented.size(), 3u);
  EXPECT_EQ(c.concepts.downsample_rate, 0.25);
  EXPECT_EQ(fingerprint(c), fingerprint(RunConfig{}));
}

TEST(Config, OutOfRangeNamesTheKey) {
  const std::string msg = error_of(R"({"alpha": 1.5})");
  EXPECT_NE(msg.find("'alpha'"), std::string::npos) << msg;
  EXPECT_NE(error_of(R"({"beta": -0.1})").find("'beta'"), std::string::npos);
  EXPECT_NE(error_of(R"({"retention": 0})").find("'retention'"), std::string::npos);
  EXPECT_NE(error_of(R"({"cg": {"iters": 0}})").find("'cg.iters'"), std::string::npos);
  EXPECT_NE(error_of(R"({"sketch": {"k": -3}})").find("'sketch.k'"), std::string::npos);
  EXPECT_NE(error_of(R"({"batch_size": 1})").find("'batch_size'"), std::string::npos);
  EXPECT_NE(error_of(R"({"lambda_ridge": 0})").find("'lambda_ridge'"), std::string::npos);
}

TEST(Config, AcceptsBoundaryValues) {
  EXPECT_NO_THROW(parse_config_text(R"({"alpha": 0, "beta": 1, "retention": 1})"));
  EXPECT_NO_THROW(parse_config_text(R"({"alpha": 1, "beta": 0})"));
}

TEST(Config, RejectsUnknownKeys) {
  EXPECT_NE(error_of(R"({"alpah": 0.5})").find("alpah"), std::string::npos);
  EXPECT_NE(error_of(R"({"sketch": {"kind": "srht", "seed": 3}})").find("sketch.seed"), std::string::npos);
}

TEST(Config, RejectsWrongTypesAndBadJson) {
  EXPECT_NE(error_of(R"({"alpha": "high"})").find("'alpha'"), std::string::npos);
  EXPECT_THROW(parse_config_text("{alpha: 1"), ConfigError);
  EXPECT_THROW(parse_config_text("[1, 2]"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"sketch": {"kind": "gaussian"}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"method": "magic"})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"ablation": "half"})"), ConfigError);
}

TEST(Config, FingerprintIgnoresKeyOrderAndDefaults) {
  const auto a = parse_config_text(R"({"alpha": 0.3, "sketch": {"k": 512, "kind": "srht"}, "seed": 9})");
  const auto b = parse_config_text(R"({"seed": 9, "sketch": {"kind": "srht", "k": 512}, "alpha": 0.3, "beta": 0.5})");
  EXPECT_EQ(canonical_json(a), canonical_json(b));
  EXPECT_EQ(fingerprint(a), fingerprint(b));
  const auto c = parse_config_text(R"({"alpha": 0.31, "sketch": {"k": 512, "kind": "srht"}, "seed": 9})");
  EXPECT_NE(fingerprint(a), fingerprint(c));
}

TEST(Config, CanonicalDumpRoundTrips) {
  const auto a = parse_config_text(
      R"({"alpha": 0.2, "lambda_ridge": 0.01, "method": "trak", "ablation": "alignment-margin",
          "concepts": {"downsample_rate": 0.5}, "retention_grid": [0.05, 1.0]})");
  const auto b = parse_config_text(canonical_json(a));
  EXPECT_EQ(canonical_json(a), canonical_json(b));
  EXPECT_EQ(b.method, Method::Trak);
  EXPECT_EQ(b.ablation, Ablation::AlignmentMargin);
  ASSERT_TRUE(b.lambda_ridge.has_value());
  EXPECT_EQ(*b.lambda_ridge, 0.01);
}

TEST(Config, LoadFromFile) {
  chips::testing::TempDir dir;
  chips::testing::write_bytes(dir / "c.json", R"({"retention": 0.3})");
  EXPECT_EQ(load_config(dir / "c.json").retention, 0.3);
  EXPECT_THROW(load_config(dir / "missing.json"), ConfigError);
}

TEST(Config, MethodNamesRoundTrip) {
  for (auto m : {Method::Chips, Method::Dot, Method::TracIn, Method::Trak, Method::ClipScore, Method::Random,
                 Method::ConceptFilter, Method::ConceptBalance})
    EXPECT_EQ(parse_method(to_string(m)), m);
  EXPECT_TRUE(is_gradient_method(Method::Trak));
  EXPECT_FALSE(is_gradient_method(Method::ClipScore));
}

TEST(Config, SketchSpecDerivesFromRunSeed) {
  RunConfig a, b;
  a.seed = 1;
  b.seed = 2;
  EXPECT_NE(a.sketch_spec(10000).seed, b.sketch_spec(10000).seed);
  EXPECT_EQ(a.sketch_spec(10000).seed, a.sketch_spec(10000).seed);
  EXPECT_EQ(a.sketch_spec(10000).k, 4096u);
  EXPECT_THROW(a.sketch_spec(1000), ConfigError);
}

TEST(Config, ShippedConfigsParse) {
  std::size_t n = 0;
  for (const auto& e : std::filesystem::directory_iterator(CHIPS_SOURCE_DIR "/configs")) {
    if (e.path().extension() != ".json") continue;
    EXPECT_NO_THROW(load_config(e.path())) << e.path();
    ++n;
  }
  EXPECT_GE(n, 1u);
  EXPECT_EQ(fingerprint(load_config(CHIPS_SOURCE_DIR "/configs/default.json")), fingerprint(RunConfig{}));
}
