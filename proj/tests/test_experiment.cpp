#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>

#include "scn/experiment.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;

namespace {

scn::RunConfig tiny_config(const fs::path& root, scn::Variant variant = scn::Variant::kScn) {
  scn::RunConfig c;
  c.world.width = 40;
  c.world.height = 40;
  c.world.num_objects = 2;
  c.world.sprite_radius = 3;
  c.world.episode_length = 10;
  c.num_episodes = 6;
  c.probe_episodes = 4;
  c.slots = 2;
  c.slot_channels = 4;
  c.slot_dim = 4;
  c.hidden = 16;
  c.variant = variant;
  c.batch_size = 8;
  c.steps = 6;
  c.checkpoint_every = 2;
  c.probe_frames = 40;
  c.dataset_dir = root / "data" / "train";
  c.probe_dataset_dir = root / "data" / "probe";
  c.out_dir = root / "runs" / scn::variant_name(variant);
  return c;
}

std::vector<float> values(const scn::Tensor<float>& t) { return {t.data().begin(), t.data().end()}; }

void expect_same_tensors(const scn::Checkpoint& a, const scn::Checkpoint& b) {
  ASSERT_EQ(a.tensors.size(), b.tensors.size());
  for (const auto& t : a.tensors) {
    ASSERT_TRUE(b.contains(t.name)) << t.name;
    EXPECT_EQ(values(t.tensor), values(b.get(t.name))) << t.name;
  }
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + SCN_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Gen, WritesTrainAndProbeDatasets) {
  const auto root = scratch_dir();
  const auto config = tiny_config(root);
  const auto result = scn::run_gen(config);
  EXPECT_EQ(result.train.frame_count, 60u);
  EXPECT_EQ(result.train.episodes, (std::vector<std::size_t>{0, 10, 20, 30, 40, 50}));
  ASSERT_TRUE(result.probe.has_value());
  EXPECT_EQ(result.probe->frame_count, 40u);
  const auto train = scn::Dataset::load(config.dataset_dir);
  const auto probe = scn::Dataset::load(config.probe_dataset_dir);
  EXPECT_EQ(train.manifest().seed, config.seed_data);
  // the probe set is a different draw, not a prefix of the training set
  EXPECT_NE(scn::dataset_hash(config.dataset_dir), scn::dataset_hash(config.probe_dataset_dir));
  EXPECT_FALSE(std::equal(probe.frame_bytes(0).begin(), probe.frame_bytes(0).end(), train.frame_bytes(0).begin()));
}

TEST(Gen, SameSeedSameBytesOtherSeedDiffers) {
  const auto root = scratch_dir();
  auto a = tiny_config(root / "a");
  auto b = tiny_config(root / "b");
  scn::run_gen(a);
  scn::run_gen(b);
  for (const char* f : {"meta.json", "frames.bin", "labels.csv"})
    EXPECT_EQ(scn::read_file(a.dataset_dir / f), scn::read_file(b.dataset_dir / f)) << f;
  auto c = tiny_config(root / "c");
  c.seed_data = 99;
  scn::run_gen(c);
  EXPECT_NE(scn::dataset_hash(a.dataset_dir), scn::dataset_hash(c.dataset_dir));
}

TEST(Gen, ProbeEpisodesZeroSkipsProbeSet) {
  const auto root = scratch_dir();
  auto config = tiny_config(root);
  config.probe_episodes = 0;
  EXPECT_FALSE(scn::run_gen(config).probe.has_value());
  EXPECT_FALSE(fs::exists(config.probe_dataset_dir));
}

TEST(Gen, DefaultConfigGivesTwentyThousandFrames) {
  const scn::RunConfig config;
  const auto data = scn::simulate_dataset(config.world_with_seed(), config.num_episodes);
  EXPECT_EQ(data.frame_count(), 20000u);
  ASSERT_EQ(data.manifest().episodes.size(), 200u);
  for (std::size_t e = 0; e < 200; ++e) EXPECT_EQ(data.manifest().episodes[e], 100 * e);
}

TEST(Train, WritesCheckpointsLossesAndRecord) {
  const auto root = scratch_dir();
  const auto config = tiny_config(root);
  scn::run_gen(config);
  const auto record = scn::run_train(config);
  EXPECT_EQ(record.steps_completed, 6u);
  ASSERT_EQ(record.losses.size(), 6u);
  for (std::size_t s = 0; s < 6; ++s) {
    EXPECT_EQ(record.losses[s].step, s);
    ASSERT_TRUE(record.losses[s].saliency && record.losses[s].diversity);
    EXPECT_NEAR(record.losses[s].total, *record.losses[s].saliency + *record.losses[s].diversity, 1e-5);
  }
  for (std::size_t s : {2, 4, 6}) EXPECT_TRUE(fs::exists(scn::checkpoint_path(config.out_dir, s))) << s;
  EXPECT_TRUE(fs::exists(config.out_dir / "checkpoints" / "final.scn"));
  const auto csv = scn::read_file(config.out_dir / "losses.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,total,saliency,diversity");
  EXPECT_EQ(scn::parse_losses_csv(csv, 100).size(), 6u);

  const auto run = nlohmann::json::parse(scn::read_file(config.out_dir / "run.json"));
  EXPECT_EQ(run["variant"], "scn");
  EXPECT_EQ(run["steps_completed"], 6);
  // the record alone suffices to rebuild the config
  const auto again = scn::RunConfig::parse(run["config_text"].get<std::string>());
  EXPECT_EQ(again.to_text(), config.to_text());

  const auto ckpt = scn::load_checkpoint(config.out_dir / "checkpoints" / "final.scn");
  EXPECT_EQ(ckpt.header["step"], 6);
  EXPECT_EQ(ckpt.header["variant"], "scn");
}

TEST(Train, RandomCnnCheckpointIsItsInitialization) {
  const auto root = scratch_dir();
  const auto config = tiny_config(root, scn::Variant::kRandomCnn);
  const auto gen = scn::run_gen(config);
  const auto record = scn::run_train(config);
  EXPECT_EQ(record.steps_completed, 0u);
  EXPECT_TRUE(record.losses.empty());
  const auto ckpt = scn::load_checkpoint(record.final_checkpoint);
  const auto fresh = scn::fresh_train_state(config, gen.train);
  const auto names = scn::EncoderParams<float>::names();
  const auto tensors = fresh.encoder.tensors();
  for (std::size_t i = 0; i < names.size(); ++i) EXPECT_EQ(values(ckpt.get(names[i])), values(tensors[i])) << names[i];
}

TEST(Train, AblationLogsDiversityWithoutTrainingOnIt) {
  const auto root = scratch_dir();
  const auto config = tiny_config(root, scn::Variant::kScnLoss1Only);
  scn::run_gen(config);
  const auto record = scn::run_train(config);
  for (const auto& row : record.losses) {
    ASSERT_TRUE(row.diversity.has_value());
    EXPECT_GT(*row.diversity, 0.0);
    EXPECT_DOUBLE_EQ(row.total, *row.saliency);
  }
}

TEST(Train, SupervisedNeedsOneSlotPerObject) {
  const auto root = scratch_dir();
  auto config = tiny_config(root, scn::Variant::kSupervised);
  scn::run_gen(config);
  const auto record = scn::run_train(config);
  EXPECT_EQ(record.steps_completed, 6u);
  EXPECT_FALSE(record.losses.front().saliency.has_value());
  EXPECT_TRUE(std::isfinite(record.losses.back().total));
  config.slots = 3;
  EXPECT_THROW(scn::run_train(config), scn::ValidationError);
}

TEST(Train, ResumeReproducesUninterruptedRun) {
  const auto root = scratch_dir();
  auto full = tiny_config(root);
  scn::run_gen(full);
  full.out_dir = root / "full";
  scn::run_train(full);

  auto part = full;
  part.out_dir = root / "part";
  part.steps = 4;
  scn::run_train(part);
  part.steps = 6;
  scn::TrainOptions options;
  options.resume = scn::checkpoint_path(part.out_dir, 4);
  const auto resumed = scn::run_train(part, options);
  EXPECT_EQ(resumed.resumed_from, std::optional<std::size_t>(4));

  EXPECT_EQ(scn::read_file(full.out_dir / "losses.csv"), scn::read_file(part.out_dir / "losses.csv"));
  expect_same_tensors(scn::load_checkpoint(full.out_dir / "checkpoints" / "final.scn"),
                      scn::load_checkpoint(part.out_dir / "checkpoints" / "final.scn"));
}

TEST(Train, ResumeRejectsAnotherVariant) {
  const auto root = scratch_dir();
  auto config = tiny_config(root);
  scn::run_gen(config);
  config.steps = 2;
  scn::run_train(config);
  auto other = config;
  other.variant = scn::Variant::kScnLoss1Only;
  other.steps = 4;
  scn::TrainOptions options;
  options.resume = scn::checkpoint_path(config.out_dir, 2);
  EXPECT_ANY_THROW(scn::run_train(other, options));
}

TEST(Train, NonFiniteLossAbortsWithStep) {
  const auto root = scratch_dir();
  const auto config = tiny_config(root);
  const auto gen = scn::run_gen(config);
  const auto data = scn::Dataset::load(config.dataset_dir);
  auto state = scn::fresh_train_state(config, gen.train);
  scn::train_step(state, data);
  scn::train_step(state, data);
  state.encoder.fc2_b.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    scn::train_step(state, data);
    FAIL() << "expected NumericAbort";
  } catch (const scn::NumericAbort& e) {
    EXPECT_EQ(e.step(), 2u);
    EXPECT_NE(std::string(e.what()).find("step 2"), std::string::npos);
  }
}

TEST(Probe, WritesMetricsAndUpdatesRunRecord) {
  const auto root = scratch_dir();
  const auto config = tiny_config(root);
  scn::run_gen(config);
  const auto record = scn::run_train(config);
  scn::ProbeOptions options;
  options.checkpoint = record.final_checkpoint;
  options.data_dir = config.probe_dataset_dir;
  options.out_dir = config.out_dir;
  const auto report = scn::run_probe(options);
  EXPECT_EQ(report.r2_per_target.size(), 4u);
  EXPECT_GE(report.compactness, 0.0);
  EXPECT_LE(report.compactness, 1.0);
  ASSERT_TRUE(report.modularity.has_value());
  EXPECT_GE(*report.modularity, 0.0);
  EXPECT_LE(*report.modularity, 1.0);

  const auto metrics = nlohmann::json::parse(scn::read_file(config.out_dir / "metrics.json"));
  EXPECT_EQ(metrics["provenance"]["variant"], "scn");
  EXPECT_EQ(metrics["provenance"]["probe_frames"], 40);
  EXPECT_EQ(metrics["provenance"]["train_rows"], 32);
  EXPECT_EQ(metrics["provenance"]["test_rows"], 8);
  EXPECT_TRUE(fs::exists(config.out_dir / "metrics.csv"));
  const auto run = nlohmann::json::parse(scn::read_file(config.out_dir / "run.json"));
  EXPECT_EQ(run["metrics"]["compactness"], metrics["compactness"]);

  // the probe is deterministic
  const auto again = scn::run_probe(options);
  EXPECT_EQ(again.r2_per_target, report.r2_per_target);
}

TEST(Probe, MismatchedSlotWidthIsAFormatError) {
  const auto root = scratch_dir();
  const auto config = tiny_config(root, scn::Variant::kRandomCnn);
  scn::run_gen(config);
  const auto record = scn::run_train(config);
  auto wrong = config;
  wrong.slot_dim = 8;
  scn::ProbeOptions options;
  options.checkpoint = record.final_checkpoint;
  options.data_dir = config.probe_dataset_dir;
  options.config = wrong;
  options.out_dir = root / "out";
  EXPECT_THROW(scn::run_probe(options), scn::FormatError);
}

TEST(Probe, SingleObjectOmitsModularity) {
  const auto root = scratch_dir();
  auto config = tiny_config(root, scn::Variant::kRandomCnn);
  config.world.num_objects = 1;
  config.slots = 1;
  scn::run_gen(config);
  const auto record = scn::run_train(config);
  scn::ProbeOptions options;
  options.checkpoint = record.final_checkpoint;
  options.data_dir = config.probe_dataset_dir;
  const auto report = scn::run_probe(options);
  EXPECT_FALSE(report.modularity.has_value());
  EXPECT_NEAR(report.compactness, 1.0, 1e-12);
  const auto metrics = nlohmann::json::parse(scn::read_file(config.out_dir / "metrics.json"));
  EXPECT_FALSE(metrics.contains("modularity"));
}

TEST(Report, SingleRunAndFourVariantOrdering) {
  const auto root = scratch_dir();
  std::vector<fs::path> dirs;
  for (auto v : {scn::Variant::kSupervised, scn::Variant::kScnLoss1Only, scn::Variant::kRandomCnn, scn::Variant::kScn}) {
    auto config = tiny_config(root, v);
    config.steps = 2;
    if (dirs.empty()) scn::run_gen(config);
    const auto record = scn::run_train(config);
    scn::ProbeOptions options;
    options.checkpoint = record.final_checkpoint;
    options.data_dir = config.probe_dataset_dir;
    scn::run_probe(options);
    dirs.push_back(config.out_dir);
  }

  const auto single = scn::run_report({dirs[3]});
  EXPECT_EQ(single.diversity.substr(0, single.diversity.find('\n')), "metric,scn");

  const auto tables = scn::run_report(dirs);
  EXPECT_EQ(tables.diversity.substr(0, tables.diversity.find('\n')), "metric,random-cnn,scn,scn_loss1only,supervised");
  EXPECT_EQ(tables.accuracy.substr(0, tables.accuracy.find('\n')), "dataset,random-cnn,scn,scn_loss1only,supervised");

  // every value is the metrics.json number, byte for byte
  const auto metrics = nlohmann::ordered_json::parse(scn::read_file(dirs[0] / "metrics.json"));
  EXPECT_NE(tables.accuracy.find(metrics["slot_accuracy_mean"].dump()), std::string::npos) << tables.accuracy;
  EXPECT_NE(tables.diversity.find(metrics["compactness"].dump()), std::string::npos);
  const auto ablation = nlohmann::ordered_json::parse(scn::read_file(dirs[1] / "metrics.json"));
  EXPECT_NE(tables.ablation.find(ablation["modularity"].dump()), std::string::npos);
}

TEST(Report, MissingMetricsNamesTheRun) {
  const auto root = scratch_dir();
  fs::create_directories(root / "empty_run");
  try {
    scn::run_report({root / "empty_run"});
    FAIL();
  } catch (const scn::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("empty_run"), std::string::npos);
  }
  EXPECT_THROW(scn::run_report({}), scn::ArgumentError);
}

TEST(Cli, ExitCodesAndEndToEnd) {
  const auto root = scratch_dir();
  const auto cfg = root / "run.cfg";
  std::ofstream(cfg) << tiny_config(root).to_text();
  const auto log = root / "log.txt";
  EXPECT_EQ(run_cli("gen --config \"" + cfg.string() + "\"", log), 0) << scn::read_file(log);
  EXPECT_NE(scn::read_file(log).find("frames=60"), std::string::npos) << scn::read_file(log);
  EXPECT_EQ(run_cli("train --config \"" + cfg.string() + "\"", log), 0) << scn::read_file(log);
  const auto out = root / "runs" / "scn";
  EXPECT_EQ(run_cli("probe --ckpt \"" + (out / "checkpoints" / "final.scn").string() + "\" --data \"" +
                        (root / "data" / "probe").string() + "\"",
                    log),
            0)
      << scn::read_file(log);
  EXPECT_TRUE(fs::exists(out / "metrics.json"));
  EXPECT_EQ(run_cli("report \"" + out.string() + "\"", log), 0) << scn::read_file(log);
  EXPECT_NE(scn::read_file(log).find("scn"), std::string::npos);

  const auto bad = root / "bad.cfg";
  std::ofstream(bad) << "model.slotz = 2\n";
  EXPECT_EQ(run_cli("train --config \"" + bad.string() + "\"", log), 2);
  EXPECT_NE(scn::read_file(log).find("model.slotz"), std::string::npos);
  std::ofstream(root / "junk.scn") << "not a checkpoint";
  EXPECT_EQ(run_cli("probe --ckpt \"" + (root / "junk.scn").string() + "\" --data \"" + (root / "data" / "probe").string() +
                        "\"",
                    log),
            2);
}
