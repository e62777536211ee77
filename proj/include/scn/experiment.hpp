#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "scn/adam.hpp"
#include "scn/config.hpp"
#include "scn/error.hpp"
#include "scn/io.hpp"
#include "scn/losses.hpp"
#include "scn/model.hpp"
#include "scn/probes.hpp"
#include "scn/rng.hpp"
#include "scn/spriteworld.hpp"

// Run orchestration behind the command-line tool: dataset generation,
// training (with checkpoint/resume), probe evaluation and report tables.

namespace scn {

// Raised when training produces a non-finite loss.
class NumericAbort : public NumericError {
 public:
  NumericAbort(std::size_t step, const std::string& what)
      : NumericError("step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

// RNG stream ids. Training step s samples from stream kTrainStreamBase + s so
// a resumed run draws exactly what the uninterrupted run would have drawn.
inline constexpr std::uint64_t kTrainDataStream = 0;
inline constexpr std::uint64_t kProbeDataStream = 1;
inline constexpr std::uint64_t kProbeSplitStream = 2;
inline constexpr std::uint64_t kTrainStreamBase = std::uint64_t{1} << 32;

inline bool deterministic_mode() {
  const char* flag = std::getenv("SCN_DETERMINISTIC");
  return flag != nullptr && std::string(flag) == "1";
}

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t hash = 0xcbf29ce484222325ull) {
  for (unsigned char c : bytes) {
    hash ^= c;
    hash *= 0x100000001b3ull;
  }
  return hash;
}

// FNV-1a over meta.json, frames.bin and labels.csv, in that order.
inline std::string dataset_hash(const std::filesystem::path& dir) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const char* name : {"meta.json", "frames.bin", "labels.csv"}) h = fnv1a(read_file(dir / name), h);
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

// ---------------------------------------------------------------------------
// gen

struct GenResult {
  DatasetManifest train;
  std::optional<DatasetManifest> probe;
};

inline GenResult run_gen(const RunConfig& config) {
  config.validate();
  GenResult result;
  const WorldConfig world = config.world_with_seed();
  {
    Dataset train = simulate_dataset(world, config.num_episodes, kTrainDataStream);
    write_dataset(train, config.dataset_dir);
    result.train = train.manifest();
  }
  if (config.probe_episodes > 0) {
    Dataset probe = simulate_dataset(world, config.probe_episodes, kProbeDataStream);
    write_dataset(probe, config.probe_dataset_dir);
    result.probe = probe.manifest();
  }
  return result;
}

// ---------------------------------------------------------------------------
// train

struct LossRow {
  std::size_t step = 0;
  double total = 0.0;
  std::optional<double> saliency;
  std::optional<double> diversity;
};

inline std::string losses_csv(const std::vector<LossRow>& rows) {
  std::string out = "step,total,saliency,diversity\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step) + "," + format_double(r.total) + "," + (r.saliency ? format_double(*r.saliency) : "") +
           "," + (r.diversity ? format_double(*r.diversity) : "") + "\n";
  }
  return out;
}

inline std::vector<LossRow> parse_losses_csv(const std::string& text, std::size_t before_step) {
  std::vector<LossRow> rows;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      f.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (f.size() != 4) throw FormatError("losses.csv: malformed row '" + line + "'");
    LossRow row;
    row.step = detail::parse_int<std::size_t>(f[0]);
    if (row.step >= before_step) break;
    row.total = detail::parse_real(f[1]);
    if (!f[2].empty()) row.saliency = detail::parse_real(f[2]);
    if (!f[3].empty()) row.diversity = detail::parse_real(f[3]);
    rows.push_back(row);
  }
  return rows;
}

/// Everything a training run holds in memory.
struct TrainState {
  RunConfig config;
  EncoderParams<float> encoder;
  ScorerParams<float> scorer;
  std::optional<ReadoutHeads<float>> readout;
  AdamState<float> adam;
  std::size_t step = 0;

  std::vector<Tensor<float>> trainables() const {
    auto params = encoder.tensors();
    if (config.variant == Variant::kSupervised) {
      for (const auto& t : readout->tensors()) params.push_back(t);
    } else {
      for (const auto& t : scorer.tensors()) params.push_back(t);
    }
    return params;
  }

  std::vector<std::string> trainable_names() const {
    auto names = EncoderParams<float>::names();
    const auto extra = config.variant == Variant::kSupervised ? ReadoutHeads<float>::names() : scorer.names();
    names.insert(names.end(), extra.begin(), extra.end());
    return names;
  }

  // Every tensor in the checkpoint: encoder, scorer, readout, Adam moments.
  Checkpoint to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.header["format"] = "scn-checkpoint";
    ckpt.header["arch"] = encoder.arch.to_json();
    ckpt.header["K"] = encoder.arch.slots;
    ckpt.header["C"] = encoder.arch.slot_channels;
    ckpt.header["D"] = encoder.arch.slot_dim;
    ckpt.header["step"] = step;
    ckpt.header["variant"] = variant_name(config.variant);
    ckpt.header["adam_step"] = adam.step_count;
    ckpt.header["config"] = config.to_text();
    const auto enc_names = EncoderParams<float>::names();
    const auto enc = encoder.tensors();
    for (std::size_t i = 0; i < enc.size(); ++i) ckpt.tensors.push_back({enc_names[i], enc[i]});
    const auto sc = scorer.tensors();
    const auto sc_names = scorer.names();
    for (std::size_t i = 0; i < sc.size(); ++i) ckpt.tensors.push_back({sc_names[i], sc[i]});
    if (readout) {
      const auto ro = readout->tensors();
      const auto ro_names = ReadoutHeads<float>::names();
      for (std::size_t i = 0; i < ro.size(); ++i) ckpt.tensors.push_back({ro_names[i], ro[i]});
    }
    const auto names = trainable_names();
    const auto params = trainables();
    for (std::size_t i = 0; i < params.size() && i < adam.m.size(); ++i) {
      ckpt.tensors.push_back({"adam.m." + names[i], Tensor<float>::from_data(params[i].shape(), adam.m[i])});
      ckpt.tensors.push_back({"adam.v." + names[i], Tensor<float>::from_data(params[i].shape(), adam.v[i])});
    }
    return ckpt;
  }
};

inline TrainState fresh_train_state(const RunConfig& config, const DatasetManifest& manifest) {
  TrainState state;
  state.config = config;
  const Architecture arch = config.architecture(manifest.channels, manifest.height, manifest.width);
  CounterRng init_rng(config.seed_init, 0);
  auto [encoder, scorer] = init_params<float>(arch, init_rng, config.separate_diversity_scorer);
  state.encoder = std::move(encoder);
  state.scorer = std::move(scorer);
  if (config.variant == Variant::kSupervised) state.readout = init_readout<float>(arch, init_rng);
  state.adam = AdamState<float>(config.optim, state.trainables());
  return state;
}

// Rebuilds encoder/scorer (and readout, when present) from a checkpoint.
inline void restore_model(const Checkpoint& ckpt, EncoderParams<float>& encoder, ScorerParams<float>& scorer,
                          std::optional<ReadoutHeads<float>>* readout = nullptr) {
  const Architecture arch = Architecture::from_json(ckpt.header.at("arch"));
  CounterRng scratch(0, 0);
  auto [enc, sc] = init_params<float>(arch, scratch, ckpt.contains("scorer.diversity_w"));
  restore_tensors(ckpt, EncoderParams<float>::names(), enc.tensors());
  restore_tensors(ckpt, sc.names(), sc.tensors());
  encoder = std::move(enc);
  scorer = std::move(sc);
  if (readout && ckpt.contains("readout.w")) {
    auto heads = init_readout<float>(arch, scratch);
    restore_tensors(ckpt, ReadoutHeads<float>::names(), heads.tensors());
    *readout = std::move(heads);
  }
}

inline TrainState resume_train_state(const RunConfig& config, const DatasetManifest& manifest, const Checkpoint& ckpt) {
  TrainState state = fresh_train_state(config, manifest);
  const Architecture stored = Architecture::from_json(ckpt.header.at("arch"));
  if (!(stored == state.encoder.arch)) throw FormatError("resume: checkpoint architecture does not match the config");
  if (ckpt.header.at("variant").get<std::string>() != variant_name(config.variant)) {
    throw FormatError("resume: checkpoint variant differs from train.variant");
  }
  restore_model(ckpt, state.encoder, state.scorer, &state.readout);
  state.step = ckpt.header.at("step").get<std::size_t>();
  state.adam.step_count = ckpt.header.at("adam_step").get<std::uint64_t>();
  const auto names = state.trainable_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto& m = ckpt.get("adam.m." + names[i]);
    const auto& v = ckpt.get("adam.v." + names[i]);
    state.adam.m[i].assign(m.data().begin(), m.data().end());
    state.adam.v[i].assign(v.data().begin(), v.data().end());
  }
  return state;
}

/// One optimizer step at state.step; returns the logged losses.
inline LossRow train_step(TrainState& state, const Dataset& data) {
  const auto& config = state.config;
  CounterRng rng(config.seed_sampling, kTrainStreamBase + state.step);
  LossRow row;
  row.step = state.step;
  Tensor<float> loss;
  if (config.variant == Variant::kSupervised) {
    std::vector<std::size_t> indices(config.batch_size);
    for (auto& i : indices) i = rng.below(data.frame_count());
    std::vector<float> targets;
    targets.reserve(indices.size() * data.num_objects() * 2);
    for (auto i : indices)
      for (std::size_t o = 0; o < data.num_objects(); ++o) {
        targets.push_back(static_cast<float>(data.label(i, o, 0) / static_cast<double>(data.manifest().width)));
        targets.push_back(static_cast<float>(data.label(i, o, 1) / static_cast<double>(data.manifest().height)));
      }
    loss = loss_supervised(data.frames(indices), state.encoder, *state.readout, std::span<const float>(targets),
                           data.num_objects());
  } else {
    const TransitionBatch batch = sample_transition_batch(data, config.batch_size, rng);
    LossConfig lc;
    lc.lambda_diversity = config.effective_lambda();
    auto parts = total_loss(batch, state.encoder, state.scorer, lc);
    row.saliency = parts.saliency.item();
    row.diversity = parts.diversity.item();
    loss = parts.total;
  }
  row.total = loss.item();
  if (!std::isfinite(row.total)) throw NumericAbort(state.step, "non-finite training loss");

  auto params = state.trainables();
  loss.backward();
  adam_step(std::span<Tensor<float>>(params), state.adam);
  for (auto& p : params) p.zero_grad();
  ++state.step;
  return row;
}

struct RunRecord {
  nlohmann::ordered_json config;
  std::string config_text;
  std::string variant;
  std::size_t steps_completed = 0;
  std::optional<std::size_t> resumed_from;
  double wall_time_s = 0.0;
  std::filesystem::path final_checkpoint;
  bool deterministic = false;
  std::vector<LossRow> losses;
  std::optional<nlohmann::ordered_json> metrics;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["variant"] = variant;
    j["steps_completed"] = steps_completed;
    if (resumed_from) j["resumed_from_step"] = *resumed_from;
    j["wall_time_s"] = wall_time_s;
    j["final_checkpoint"] = final_checkpoint.string();
    j["deterministic"] = deterministic;
    j["losses"] = "losses.csv";
    if (!losses.empty()) {
      j["final_loss"] = {{"step", losses.back().step}, {"total", losses.back().total}};
      if (losses.back().saliency) j["final_loss"]["saliency"] = *losses.back().saliency;
      if (losses.back().diversity) j["final_loss"]["diversity"] = *losses.back().diversity;
    }
    j["config"] = config;
    j["config_text"] = config_text;
    if (metrics) j["metrics"] = *metrics;
    return j;
  }
};

struct TrainOptions {
  std::optional<std::filesystem::path> resume;
  std::ostream* log = nullptr;  // progress lines, optional
  std::size_t log_every = 100;
};

inline std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, std::size_t step) {
  char name[32];
  std::snprintf(name, sizeof(name), "step_%08zu.scn", step);
  return out_dir / "checkpoints" / name;
}

/// Trains the configured variant and writes run.json, losses.csv and
/// checkpoints/ under config.out_dir. random-cnn performs zero steps.
inline RunRecord run_train(const RunConfig& config, const TrainOptions& options = {}) {
  config.validate();
  const auto started = std::chrono::steady_clock::now();
  const Dataset data = Dataset::load(config.dataset_dir);
  if (config.variant == Variant::kSupervised && data.num_objects() != config.slots) {
    throw ValidationError("model.slots: supervised variant needs K == number of objects in the dataset (" +
                          std::to_string(data.num_objects()) + ")");
  }

  RunRecord record;
  record.config = config_echo(config);
  record.config_text = config.to_text();
  record.variant = variant_name(config.variant);
  record.deterministic = deterministic_mode();

  TrainState state = [&] {
    if (!options.resume) return fresh_train_state(config, data.manifest());
    return resume_train_state(config, data.manifest(), load_checkpoint(*options.resume));
  }();
  if (options.resume) {
    record.resumed_from = state.step;
    const auto previous = config.out_dir / "losses.csv";
    if (std::filesystem::exists(previous)) record.losses = parse_losses_csv(read_file(previous), state.step);
  }

  const std::size_t target_steps = config.variant == Variant::kRandomCnn ? 0 : config.steps;
  while (state.step < target_steps) {
    record.losses.push_back(train_step(state, data));
    const auto& row = record.losses.back();
    if (options.log && (row.step % options.log_every == 0 || state.step == target_steps)) {
      *options.log << "step " << row.step << " loss " << row.total;
      if (row.saliency) *options.log << " L1 " << *row.saliency << " L2 " << *row.diversity;
      *options.log << std::endl;
    }
    if (state.step % config.checkpoint_every == 0 && state.step < target_steps) {
      save_checkpoint(checkpoint_path(config.out_dir, state.step), state.to_checkpoint());
      write_file_atomic(config.out_dir / "losses.csv", losses_csv(record.losses));
    }
  }

  record.final_checkpoint = checkpoint_path(config.out_dir, state.step);
  save_checkpoint(record.final_checkpoint, state.to_checkpoint());
  save_checkpoint(config.out_dir / "checkpoints" / "final.scn", state.to_checkpoint());
  write_file_atomic(config.out_dir / "losses.csv", losses_csv(record.losses));
  record.steps_completed = state.step;
  record.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  write_file_atomic(config.out_dir / "run.json", record.to_json().dump(2) + "\n");
  return record;
}

// ---------------------------------------------------------------------------
// probe

struct ProbeOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path data_dir;
  std::optional<RunConfig> config;  // falls back to the config embedded in the checkpoint
  std::optional<std::filesystem::path> out_dir;
};

/// Encodes held-out frames with a frozen checkpoint, fits one ridge probe per
/// coordinate and writes metrics.json / metrics.csv.
inline MetricsReport run_probe(const ProbeOptions& options) {
  const Checkpoint ckpt = load_checkpoint(options.checkpoint);
  const RunConfig config = options.config ? *options.config : RunConfig::parse(ckpt.header.at("config").get<std::string>());
  const std::size_t ckpt_k = ckpt.header.at("K"), ckpt_d = ckpt.header.at("D");
  if (ckpt_k * ckpt_d != config.slots * config.slot_dim || ckpt_k != config.slots) {
    throw FormatError(options.checkpoint.string() + ": checkpoint has K=" + std::to_string(ckpt_k) + ", D=" +
                      std::to_string(ckpt_d) + " but the config asks for K=" + std::to_string(config.slots) +
                      ", D=" + std::to_string(config.slot_dim));
  }
  const Dataset data = Dataset::load(options.data_dir);
  if (data.num_objects() != config.slots) {
    throw ValidationError("model.slots: metric runs need K == number of objects (" + std::to_string(data.num_objects()) +
                          "), got " + std::to_string(config.slots));
  }
  EncoderParams<float> encoder;
  ScorerParams<float> scorer;
  restore_model(ckpt, encoder, scorer);
  const Architecture& arch = encoder.arch;
  if (arch.in_channels != data.manifest().channels || arch.height != data.manifest().height ||
      arch.width != data.manifest().width) {
    throw FormatError(options.data_dir.string() + ": frame shape does not match the checkpoint encoder input");
  }

  CounterRng split_rng(config.seed_sampling, kProbeSplitStream);
  const std::size_t frames = std::min(config.probe_frames, data.frame_count());
  const ProbeDataset ds = build_probe_dataset(data, encoder, frames, config.probe_train_fraction, split_rng);
  MetricsReport report = evaluate_probes(ds, config.probe_ridge);
  report.config = config_echo(config);
  const std::filesystem::path out_dir = options.out_dir ? *options.out_dir : config.out_dir;
  report.provenance = {{"run_id", out_dir.filename().string()},
                       {"variant", ckpt.header.at("variant")},
                       {"checkpoint", options.checkpoint.string()},
                       {"checkpoint_step", ckpt.header.at("step")},
                       {"dataset", options.data_dir.string()},
                       {"dataset_name", options.data_dir.filename().string()},
                       {"probe_frames", frames},
                       {"train_rows", ds.train.size()},
                       {"test_rows", ds.test.size()},
                       {"ridge", config.probe_ridge},
                       {"seeds", {{"data", config.seed_data}, {"init", config.seed_init}, {"sampling", config.seed_sampling}}}};

  const auto json = report.to_json();
  write_file_atomic(out_dir / "metrics.json", json.dump(2) + "\n");
  write_file_atomic(out_dir / "metrics.csv", report.to_csv());
  const auto run_json = out_dir / "run.json";
  if (std::filesystem::exists(run_json)) {
    auto record = nlohmann::ordered_json::parse(read_file(run_json));
    record["metrics"] = json;
    write_file_atomic(run_json, record.dump(2) + "\n");
  }
  return report;
}

// ---------------------------------------------------------------------------
// report

struct ReportTables {
  std::string diversity;  // slot modularity / compactness per variant
  std::string ablation;   // scn_loss1only vs scn
  std::string accuracy;   // slot accuracy per dataset and variant
};

/// Comparison tables over finished runs. Values are copied from each run's
/// metrics.json text, never recomputed. Columns follow the fixed variant order
/// random-cnn, scn, scn_loss1only, supervised.
inline ReportTables run_report(const std::vector<std::filesystem::path>& run_dirs) {
  if (run_dirs.empty()) throw ArgumentError("report: no run directories given");
  struct Run {
    std::string variant;
    std::string dataset;
    nlohmann::ordered_json metrics;
  };
  std::vector<Run> runs;
  for (const auto& dir : run_dirs) {
    const auto path = dir / "metrics.json";
    if (!std::filesystem::exists(path)) throw FormatError(path.string() + ": missing MetricsReport");
    Run run;
    try {
      run.metrics = nlohmann::ordered_json::parse(read_file(path));
      run.variant = run.metrics.at("provenance").at("variant").get<std::string>();
      run.dataset = run.metrics.at("provenance").value("dataset_name", std::string("dataset"));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
    runs.push_back(std::move(run));
  }
  const std::vector<std::string> order{"random-cnn", "scn", "scn_loss1only", "supervised"};
  std::stable_sort(runs.begin(), runs.end(), [&](const Run& a, const Run& b) {
    auto rank = [&](const std::string& v) { return std::find(order.begin(), order.end(), v) - order.begin(); };
    return rank(a.variant) < rank(b.variant);
  });
  auto value_text = [](const nlohmann::ordered_json& m, const char* key) {
    return m.contains(key) ? m.at(key).dump() : std::string();
  };

  // Columns: one per run; disambiguated by dataset when a variant repeats.
  std::vector<std::string> datasets;
  for (const auto& r : runs)
    if (std::find(datasets.begin(), datasets.end(), r.dataset) == datasets.end()) datasets.push_back(r.dataset);
  std::vector<std::string> variants;
  for (const auto& r : runs)
    if (std::find(variants.begin(), variants.end(), r.variant) == variants.end()) variants.push_back(r.variant);
  auto column = [&](const Run& r) { return datasets.size() > 1 ? r.variant + "@" + r.dataset : r.variant; };

  ReportTables t;
  t.diversity = "metric";
  for (const auto& r : runs) t.diversity += "," + column(r);
  t.diversity += "\nslot_modularity";
  for (const auto& r : runs) t.diversity += "," + value_text(r.metrics, "modularity");
  t.diversity += "\nslot_compactness";
  for (const auto& r : runs) t.diversity += "," + value_text(r.metrics, "compactness");
  t.diversity += "\n";

  t.ablation = "metric";
  std::vector<const Run*> ablation_runs;
  for (const auto& r : runs)
    if (r.variant == "scn_loss1only" || r.variant == "scn") ablation_runs.push_back(&r);
  std::stable_sort(ablation_runs.begin(), ablation_runs.end(),
                   [](const Run* a, const Run* b) { return a->variant == "scn_loss1only" && b->variant != "scn_loss1only"; });
  for (const auto* r : ablation_runs) t.ablation += "," + column(*r);
  for (auto [label, key] : {std::pair{"slot_accuracy", "slot_accuracy_mean"}, std::pair{"slot_modularity", "modularity"},
                            std::pair{"slot_compactness", "compactness"}}) {
    t.ablation += std::string("\n") + label;
    for (const auto* r : ablation_runs) t.ablation += "," + value_text(r->metrics, key);
  }
  t.ablation += "\n";

  t.accuracy = "dataset";
  for (const auto& v : variants) t.accuracy += "," + v;
  t.accuracy += "\n";
  for (const auto& d : datasets) {
    t.accuracy += d;
    for (const auto& v : variants) {
      std::string cell;
      for (const auto& r : runs)
        if (r.variant == v && r.dataset == d) cell = value_text(r.metrics, "slot_accuracy_mean");
      t.accuracy += "," + cell;
    }
    t.accuracy += "\n";
  }
  return t;
}

}  // namespace scn
