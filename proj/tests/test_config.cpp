#include <gtest/gtest.h>

#include <fstream>
#include <string>

#include "scn/config.hpp"
#include "test_util.hpp"

namespace {

std::string error_of(const std::string& text) {
  try {
    scn::RunConfig::parse(text);
  } catch (const scn::ValidationError& e) {
    return e.what();
  }
  return "";
}

bool contains(const std::string& s, const std::string& part) { return s.find(part) != std::string::npos; }

}  // namespace

TEST(Config, EmptyTextGivesDefaults) {
  const auto c = scn::RunConfig::parse("");
  EXPECT_EQ(c.world.width, 64);
  EXPECT_EQ(c.world.num_objects, 3);
  EXPECT_EQ(c.slots, 3u);
  EXPECT_EQ(c.slot_dim, 32u);
  EXPECT_EQ(c.variant, scn::Variant::kScn);
  EXPECT_DOUBLE_EQ(c.optim.lr, 3e-4);
  EXPECT_DOUBLE_EQ(c.loss.lambda_diversity, 1.0);
  EXPECT_DOUBLE_EQ(c.probe_train_fraction, 0.8);
}

TEST(Config, ParsesValuesCommentsAndWhitespace) {
  const auto c = scn::RunConfig::parse(
      "# header\n"
      "world.width = 48   # trailing\n"
      "world.height=40\n"
      "\n"
      "  world.sprite_radius = 3.5\n"
      "world.num_objects = 2\n"
      "world.palette = 255,0,0; 0,0,255\n"
      "model.slots = 2\n"
      "model.separate_diversity_scorer = true\n"
      "loss.lambda_diversity = 0.5\n"
      "train.variant = scn_loss1only\n"
      "seed.sampling = 18446744073709551615\n"
      "paths.out = runs/a b\n");
  EXPECT_EQ(c.world.width, 48);
  EXPECT_EQ(c.world.height, 40);
  EXPECT_DOUBLE_EQ(c.world.sprite_radius, 3.5);
  ASSERT_EQ(c.world.palette.size(), 2u);
  EXPECT_EQ(c.world.palette[1], (scn::Rgb{0, 0, 255}));
  EXPECT_TRUE(c.separate_diversity_scorer);
  EXPECT_EQ(c.variant, scn::Variant::kScnLoss1Only);
  EXPECT_DOUBLE_EQ(c.effective_lambda(), 0.0);
  EXPECT_EQ(c.seed_sampling, 18446744073709551615ull);
  EXPECT_EQ(c.out_dir, "runs/a b");
}

TEST(Config, UnknownKeyNamesLineAndKey) {
  const auto e = error_of("world.width = 32\nmodel.slotz = 3\n");
  EXPECT_TRUE(contains(e, "line 2")) << e;
  EXPECT_TRUE(contains(e, "model.slotz")) << e;
}

TEST(Config, DuplicateKeyNamesBothLines) {
  const auto e = error_of("train.steps = 10\n# x\ntrain.steps = 20\n");
  EXPECT_TRUE(contains(e, "line 3")) << e;
  EXPECT_TRUE(contains(e, "train.steps")) << e;
  EXPECT_TRUE(contains(e, "line 1")) << e;
}

TEST(Config, BadValuesNameLineKeyAndType) {
  for (const auto& [text, key, kind] : std::vector<std::tuple<std::string, std::string, std::string>>{
           {"world.width = wide", "world.width", "integer"},
           {"model.slots = -1", "model.slots", "integer"},
           {"optim.lr = 1e-3x", "optim.lr", "real"},
           {"model.separate_diversity_scorer = maybe", "model.separate_diversity_scorer", "boolean"},
           {"world.background = 1,2", "world.background", "r,g,b"},
           {"world.palette = 1,2,300", "world.palette", "r,g,b"}}) {
    const auto e = error_of(text);
    EXPECT_TRUE(contains(e, "line 1")) << e;
    EXPECT_TRUE(contains(e, key)) << e;
    EXPECT_TRUE(contains(e, kind)) << e;
  }
  const auto no_eq = error_of("\nworld.width 32\n");
  EXPECT_TRUE(contains(no_eq, "line 2")) << no_eq;
  const auto variant = error_of("train.variant = vae");
  EXPECT_TRUE(contains(variant, "train.variant")) << variant;
  EXPECT_TRUE(contains(variant, "vae")) << variant;
}

TEST(Config, SemanticValidationNamesTheKey) {
  EXPECT_TRUE(contains(error_of("world.num_objects = 2\nworld.palette = 1,1,1;1,1,1\nmodel.slots = 2"), "world.palette"));
  EXPECT_TRUE(contains(error_of("world.palette = 0,0,0;1,1,1;2,2,2"), "world.palette"));
  EXPECT_TRUE(contains(error_of("world.num_objects = 2\nworld.palette = 1,1,1"), "world.palette"));
  EXPECT_TRUE(contains(error_of("probe.train_fraction = 1"), "probe.train_fraction"));
  EXPECT_TRUE(contains(error_of("model.slots = 0"), "model.slots"));
  EXPECT_TRUE(contains(error_of("train.variant = supervised\nmodel.slots = 4"), "model.slots"));
  EXPECT_TRUE(contains(error_of("world.sprite_radius = 40"), "world.sprite_radius"));
  EXPECT_TRUE(contains(error_of("optim.beta2 = 1"), "optim.beta2"));
  EXPECT_TRUE(contains(error_of("world.width = 32\nworld.height = 32\nworld.sprite_radius = 3"), "world.width"));
}

TEST(Config, TextRoundTrip) {
  const auto c = scn::RunConfig::parse(
      "world.width = 48\nworld.height = 40\nworld.num_objects = 2\nworld.palette = 9,8,7;6,5,4\n"
      "model.slots = 5\noptim.lr = 0.000123\nprobe.ridge = 0.1\ntrain.variant = random-cnn\n");
  const std::string text = c.to_text();
  const auto d = scn::RunConfig::parse(text);
  EXPECT_EQ(d.to_text(), text);
  EXPECT_EQ(d.world.height, 40);
  EXPECT_EQ(d.world.palette, c.world.palette);
  EXPECT_DOUBLE_EQ(d.optim.lr, 0.000123);
  EXPECT_EQ(d.variant, scn::Variant::kRandomCnn);
  EXPECT_TRUE(contains(text, "world.palette = 9,8,7;6,5,4\n"));
  const auto echo = scn::config_echo(c);
  EXPECT_EQ(echo["model.slots"].get<std::string>(), "5");
}

TEST(Config, LoadReportsMissingFileAndPrefixesPath) {
  const auto dir = scratch_dir();
  EXPECT_THROW(scn::RunConfig::load(dir / "missing.cfg"), scn::ValidationError);
  const auto path = dir / "bad.cfg";
  std::ofstream(path) << "world.width = 10\nbogus = 1\n";
  try {
    scn::RunConfig::load(path);
    FAIL();
  } catch (const scn::ValidationError& e) {
    EXPECT_TRUE(contains(e.what(), "bad.cfg")) << e.what();
    EXPECT_TRUE(contains(e.what(), "line 2")) << e.what();
  }
}

TEST(Config, ShippedDefaultConfigParses) {
  const auto c = scn::RunConfig::load(SCN_SOURCE_DIR "/configs/scn.cfg");
  EXPECT_EQ(c.world.width, 64);
  EXPECT_EQ(c.num_episodes * c.world.episode_length, 20000);
  EXPECT_EQ(c.probe_frames, 5000u);
}
