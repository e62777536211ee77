#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "scn/config.hpp"
#include "scn/error.hpp"
#include "scn/experiment.hpp"

namespace {

scn::RunConfig load_config(const std::string& path, const std::string& out) {
  auto config = scn::RunConfig::load(path);
  if (!out.empty()) config.out_dir = out;
  return config;
}

void print_manifest(const char* label, const std::filesystem::path& dir, const scn::DatasetManifest& m) {
  std::cout << label << ": " << dir.string() << " frames=" << m.frame_count << " episodes=" << m.episodes.size()
            << " objects=" << m.objects.size() << " size=" << m.width << "x" << m.height << " hash=" << scn::dataset_hash(dir)
            << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Slot contrastive representation learning on bounce-world"};
  app.require_subcommand(1);
  std::string out;
  app.add_option("--out", out, "Output directory (overrides paths.out)");

  std::string gen_config;
  auto* gen = app.add_subcommand("gen", "Generate the training and probe datasets");
  gen->add_option("--config", gen_config, "Run config")->required()->check(CLI::ExistingFile);

  std::string train_config, resume;
  auto* train = app.add_subcommand("train", "Train one variant");
  train->add_option("--config", train_config, "Run config")->required()->check(CLI::ExistingFile);
  train->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);

  std::string probe_ckpt, probe_data, probe_config;
  auto* probe = app.add_subcommand("probe", "Fit linear probes on a frozen checkpoint");
  probe->add_option("--ckpt", probe_ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  probe->add_option("--data", probe_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  probe->add_option("--config", probe_config, "Run config (default: the one stored in the checkpoint)")
      ->check(CLI::ExistingFile);

  std::vector<std::string> report_dirs;
  auto* report = app.add_subcommand("report", "Print comparison tables over finished runs");
  report->add_option("runs", report_dirs, "Run directories")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const auto config = load_config(gen_config, out);
      const auto result = scn::run_gen(config);
      print_manifest("train", config.dataset_dir, result.train);
      if (result.probe) print_manifest("probe", config.probe_dataset_dir, *result.probe);
    } else if (*train) {
      const auto config = load_config(train_config, out);
      scn::TrainOptions options;
      if (!resume.empty()) options.resume = resume;
      options.log = &std::cerr;
      const auto record = scn::run_train(config, options);
      std::cout << "trained " << record.variant << " for " << record.steps_completed << " steps in " << record.wall_time_s
                << " s\ncheckpoint: " << record.final_checkpoint.string() << "\n";
    } else if (*probe) {
      scn::ProbeOptions options;
      options.checkpoint = probe_ckpt;
      options.data_dir = probe_data;
      if (!probe_config.empty()) options.config = scn::RunConfig::load(probe_config);
      if (!out.empty()) {
        options.out_dir = out;
      } else {
        // Next to the run the checkpoint came from: <out>/checkpoints/x.scn.
        options.out_dir = std::filesystem::path(probe_ckpt).parent_path().parent_path();
      }
      const auto metrics = scn::run_probe(options);
      std::cout << metrics.to_csv();
    } else if (*report) {
      std::vector<std::filesystem::path> dirs(report_dirs.begin(), report_dirs.end());
      const auto tables = scn::run_report(dirs);
      std::cout << "# slot modularity / compactness\n" << tables.diversity << "\n# ablation\n" << tables.ablation
                << "\n# slot accuracy\n" << tables.accuracy;
    }
  } catch (const scn::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const scn::ValidationError& e) {
    std::cerr << "invalid config: " << e.what() << "\n";
    return 2;
  } catch (const scn::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
