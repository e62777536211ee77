#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "scn/adam.hpp"
#include "scn/error.hpp"
#include "scn/io.hpp"
#include "scn/losses.hpp"
#include "scn/model.hpp"
#include "scn/spriteworld.hpp"

namespace scn {

enum class Variant { kScn, kScnLoss1Only, kRandomCnn, kSupervised };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kScn: return "scn";
    case Variant::kScnLoss1Only: return "scn_loss1only";
    case Variant::kRandomCnn: return "random-cnn";
    case Variant::kSupervised: return "supervised";
  }
  return "?";
}

inline Variant parse_variant(std::string_view name) {
  for (Variant v : {Variant::kScn, Variant::kScnLoss1Only, Variant::kRandomCnn, Variant::kSupervised})
    if (name == variant_name(v)) return v;
  throw ValidationError("train.variant: unknown variant '" + std::string(name) +
                        "' (expected scn, scn_loss1only, random-cnn or supervised)");
}

/// Everything one run needs. Every seed is explicit; nothing draws from
/// ambient entropy.
struct RunConfig {
  WorldConfig world;
  int num_episodes = 200;
  int probe_episodes = 50;

  std::size_t slots = 3;
  std::size_t slot_channels = 16;
  std::size_t slot_dim = 32;
  std::size_t hidden = 256;
  bool separate_diversity_scorer = false;

  LossConfig loss;
  AdamHyper optim;

  Variant variant = Variant::kScn;
  std::size_t batch_size = 64;
  std::size_t steps = 20000;
  std::size_t checkpoint_every = 1000;

  std::size_t probe_frames = 5000;
  double probe_train_fraction = 0.8;
  double probe_ridge = 1e-4;

  std::uint64_t seed_data = 1;
  std::uint64_t seed_init = 2;
  std::uint64_t seed_sampling = 3;

  std::filesystem::path dataset_dir = "data/train";
  std::filesystem::path probe_dataset_dir = "data/probe";
  std::filesystem::path out_dir = "runs/scn";

  WorldConfig world_with_seed() const {
    WorldConfig w = world;
    w.seed = seed_data;
    return w;
  }

  // Lambda actually applied: the ablation variant always drops L2.
  double effective_lambda() const { return variant == Variant::kScnLoss1Only ? 0.0 : loss.lambda_diversity; }

  Architecture architecture(std::size_t channels, std::size_t height, std::size_t width) const {
    Architecture a;
    a.in_channels = channels;
    a.height = height;
    a.width = width;
    a.slots = slots;
    a.slot_channels = slot_channels;
    a.slot_dim = slot_dim;
    a.hidden = hidden;
    return a;
  }

  void validate() const {
    world.validate();
    loss.validate();
    if (slots < 1) throw ValidationError("model.slots: must be at least 1");
    if (slot_channels < 1 || slot_dim < 1 || hidden < 1) throw ValidationError("model: slot_channels, slot_dim, hidden must be positive");
    try {
      architecture(3, static_cast<std::size_t>(world.height), static_cast<std::size_t>(world.width)).validate();
    } catch (const ValidationError& e) {
      throw ValidationError(std::string("world.width/world.height: ") + e.what());
    }
    if (variant == Variant::kSupervised && slots != static_cast<std::size_t>(world.num_objects)) {
      throw ValidationError("model.slots: supervised variant needs K == world.num_objects (" +
                            std::to_string(world.num_objects) + ")");
    }
    if (batch_size < 1) throw ValidationError("train.batch_size: must be positive");
    if (checkpoint_every < 1) throw ValidationError("train.checkpoint_every: must be positive");
    if (num_episodes < 1) throw ValidationError("world.num_episodes: must be at least 1");
    if (probe_episodes < 0) throw ValidationError("world.probe_episodes: must be non-negative");
    if (!(probe_train_fraction > 0.0 && probe_train_fraction < 1.0)) throw ValidationError("probe.train_fraction: must lie in (0,1)");
    if (!(probe_ridge >= 0.0)) throw ValidationError("probe.ridge: must be non-negative");
    if (!(optim.lr > 0.0)) throw ValidationError("optim.lr: must be positive");
    if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0)) throw ValidationError("optim.beta1: must lie in [0,1)");
    if (!(optim.beta2 >= 0.0 && optim.beta2 < 1.0)) throw ValidationError("optim.beta2: must lie in [0,1)");
    if (!(optim.eps >= 0.0)) throw ValidationError("optim.eps: must be non-negative");
  }

  static RunConfig parse(std::string_view text);
  static RunConfig load(const std::filesystem::path& path);
  std::string to_text() const;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

inline std::string format_rgb(const Rgb& c) {
  return std::to_string(c.r) + "," + std::to_string(c.g) + "," + std::to_string(c.b);
}

inline Rgb parse_rgb(std::string_view text) {
  std::vector<int> parts;
  std::size_t start = 0;
  while (true) {
    const auto comma = text.find(',', start);
    const std::string part = trim(text.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    int v = -1;
    const auto r = std::from_chars(part.data(), part.data() + part.size(), v);
    if (r.ec != std::errc() || r.ptr != part.data() + part.size() || v < 0 || v > 255) throw std::invalid_argument("rgb");
    parts.push_back(v);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  if (parts.size() != 3) throw std::invalid_argument("rgb");
  return {static_cast<std::uint8_t>(parts[0]), static_cast<std::uint8_t>(parts[1]), static_cast<std::uint8_t>(parts[2])};
}

template <typename Int>
Int parse_int(const std::string& text) {
  Int v{};
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (r.ec != std::errc() || r.ptr != text.data() + text.size()) throw std::invalid_argument("integer");
  return v;
}

inline double parse_real(const std::string& text) {
  double v = 0.0;
  if (!parse_double(text, v)) throw std::invalid_argument("real");
  return v;
}

inline bool parse_bool(const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw std::invalid_argument("boolean");
}

struct ConfigKey {
  const char* name;
  const char* kind;  // for error messages
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<ConfigKey>& config_keys() {
  using C = RunConfig;
  static const std::vector<ConfigKey> keys{
      {"world.width", "integer", [](C& c, const std::string& v) { c.world.width = parse_int<int>(v); },
       [](const C& c) { return std::to_string(c.world.width); }},
      {"world.height", "integer", [](C& c, const std::string& v) { c.world.height = parse_int<int>(v); },
       [](const C& c) { return std::to_string(c.world.height); }},
      {"world.num_objects", "integer", [](C& c, const std::string& v) { c.world.num_objects = parse_int<int>(v); },
       [](const C& c) { return std::to_string(c.world.num_objects); }},
      {"world.sprite_radius", "real", [](C& c, const std::string& v) { c.world.sprite_radius = parse_real(v); },
       [](const C& c) { return format_double(c.world.sprite_radius); }},
      {"world.speed_min", "real", [](C& c, const std::string& v) { c.world.speed_min = parse_real(v); },
       [](const C& c) { return format_double(c.world.speed_min); }},
      {"world.speed_max", "real", [](C& c, const std::string& v) { c.world.speed_max = parse_real(v); },
       [](const C& c) { return format_double(c.world.speed_max); }},
      {"world.palette", "list of r,g,b separated by ';'",
       [](C& c, const std::string& v) {
         c.world.palette.clear();
         std::size_t start = 0;
         while (true) {
           const auto semi = v.find(';', start);
           c.world.palette.push_back(parse_rgb(std::string_view(v).substr(start, semi == std::string::npos ? std::string::npos : semi - start)));
           if (semi == std::string::npos) break;
           start = semi + 1;
         }
       },
       [](const C& c) {
         std::string out;
         for (const auto& rgb : c.world.colors()) out += (out.empty() ? "" : ";") + format_rgb(rgb);
         return out;
       }},
      {"world.background", "r,g,b", [](C& c, const std::string& v) { c.world.background = parse_rgb(v); },
       [](const C& c) { return format_rgb(c.world.background); }},
      {"world.episode_length", "integer", [](C& c, const std::string& v) { c.world.episode_length = parse_int<int>(v); },
       [](const C& c) { return std::to_string(c.world.episode_length); }},
      {"world.num_episodes", "integer", [](C& c, const std::string& v) { c.num_episodes = parse_int<int>(v); },
       [](const C& c) { return std::to_string(c.num_episodes); }},
      {"world.probe_episodes", "integer", [](C& c, const std::string& v) { c.probe_episodes = parse_int<int>(v); },
       [](const C& c) { return std::to_string(c.probe_episodes); }},
      {"model.slots", "integer", [](C& c, const std::string& v) { c.slots = parse_int<std::size_t>(v); },
       [](const C& c) { return std::to_string(c.slots); }},
      {"model.slot_channels", "integer", [](C& c, const std::string& v) { c.slot_channels = parse_int<std::size_t>(v); },
       [](const C& c) { return std::to_string(c.slot_channels); }},
      {"model.slot_dim", "integer", [](C& c, const std::string& v) { c.slot_dim = parse_int<std::size_t>(v); },
       [](const C& c) { return std::to_string(c.slot_dim); }},
      {"model.hidden", "integer", [](C& c, const std::string& v) { c.hidden = parse_int<std::size_t>(v); },
       [](const C& c) { return std::to_string(c.hidden); }},
      {"model.separate_diversity_scorer", "boolean",
       [](C& c, const std::string& v) { c.separate_diversity_scorer = parse_bool(v); },
       [](const C& c) { return std::string(c.separate_diversity_scorer ? "true" : "false"); }},
      {"loss.lambda_diversity", "real", [](C& c, const std::string& v) { c.loss.lambda_diversity = parse_real(v); },
       [](const C& c) { return format_double(c.loss.lambda_diversity); }},
      {"optim.lr", "real", [](C& c, const std::string& v) { c.optim.lr = parse_real(v); },
       [](const C& c) { return format_double(c.optim.lr); }},
      {"optim.beta1", "real", [](C& c, const std::string& v) { c.optim.beta1 = parse_real(v); },
       [](const C& c) { return format_double(c.optim.beta1); }},
      {"optim.beta2", "real", [](C& c, const std::string& v) { c.optim.beta2 = parse_real(v); },
       [](const C& c) { return format_double(c.optim.beta2); }},
      {"optim.eps", "real", [](C& c, const std::string& v) { c.optim.eps = parse_real(v); },
       [](const C& c) { return format_double(c.optim.eps); }},
      {"train.variant", "variant name", [](C& c, const std::string& v) { c.variant = parse_variant(v); },
       [](const C& c) { return std::string(variant_name(c.variant)); }},
      {"train.batch_size", "integer", [](C& c, const std::string& v) { c.batch_size = parse_int<std::size_t>(v); },
       [](const C& c) { return std::to_string(c.batch_size); }},
      {"train.steps", "integer", [](C& c, const std::string& v) { c.steps = parse_int<std::size_t>(v); },
       [](const C& c) { return std::to_string(c.steps); }},
      {"train.checkpoint_every", "integer", [](C& c, const std::string& v) { c.checkpoint_every = parse_int<std::size_t>(v); },
       [](const C& c) { return std::to_string(c.checkpoint_every); }},
      {"probe.frames", "integer", [](C& c, const std::string& v) { c.probe_frames = parse_int<std::size_t>(v); },
       [](const C& c) { return std::to_string(c.probe_frames); }},
      {"probe.train_fraction", "real", [](C& c, const std::string& v) { c.probe_train_fraction = parse_real(v); },
       [](const C& c) { return format_double(c.probe_train_fraction); }},
      {"probe.ridge", "real", [](C& c, const std::string& v) { c.probe_ridge = parse_real(v); },
       [](const C& c) { return format_double(c.probe_ridge); }},
      {"seed.data", "integer", [](C& c, const std::string& v) { c.seed_data = parse_int<std::uint64_t>(v); },
       [](const C& c) { return std::to_string(c.seed_data); }},
      {"seed.init", "integer", [](C& c, const std::string& v) { c.seed_init = parse_int<std::uint64_t>(v); },
       [](const C& c) { return std::to_string(c.seed_init); }},
      {"seed.sampling", "integer", [](C& c, const std::string& v) { c.seed_sampling = parse_int<std::uint64_t>(v); },
       [](const C& c) { return std::to_string(c.seed_sampling); }},
      {"paths.dataset", "path", [](C& c, const std::string& v) { c.dataset_dir = v; },
       [](const C& c) { return c.dataset_dir.string(); }},
      {"paths.probe_dataset", "path", [](C& c, const std::string& v) { c.probe_dataset_dir = v; },
       [](const C& c) { return c.probe_dataset_dir.string(); }},
      {"paths.out", "path", [](C& c, const std::string& v) { c.out_dir = v; }, [](const C& c) { return c.out_dir.string(); }},
  };
  return keys;
}

}  // namespace detail

/// Parses "key = value" lines; '#' starts a comment. Unknown or repeated
/// keys and unparsable values are rejected with the line number and key.
inline RunConfig RunConfig::parse(std::string_view text) {
  RunConfig config;
  std::map<std::string, std::size_t> seen;
  std::size_t line_no = 0, pos = 0;
  while (pos <= text.size()) {
    const auto end = std::min(text.find('\n', pos), text.size());
    std::string_view raw = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const auto hash = raw.find('#'); hash != std::string_view::npos) raw = raw.substr(0, hash);
    const std::string line = detail::trim(raw);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "line " + std::to_string(line_no);
    if (eq == std::string::npos) throw ValidationError(where + ": expected 'key = value', got '" + line + "'");
    const std::string key = detail::trim(std::string_view(line).substr(0, eq));
    const std::string value = detail::trim(std::string_view(line).substr(eq + 1));
    const auto& keys = detail::config_keys();
    const auto it = std::find_if(keys.begin(), keys.end(), [&](const auto& k) { return key == k.name; });
    if (it == keys.end()) throw ValidationError(where + ": unknown key '" + key + "'");
    if (auto [prev, inserted] = seen.emplace(key, line_no); !inserted) {
      throw ValidationError(where + ": key '" + key + "' already set on line " + std::to_string(prev->second));
    }
    try {
      it->set(config, value);
    } catch (const ValidationError& e) {
      throw ValidationError(where + ": " + e.what());
    } catch (const std::exception&) {
      throw ValidationError(where + ": key '" + key + "' expects " + it->kind + ", got '" + value + "'");
    }
    if (pos > text.size()) break;
  }
  config.validate();
  return config;
}

inline RunConfig RunConfig::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ValidationError(path.string() + ": config file not found");
  try {
    return parse(read_file(path));
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

// Canonical text form; parse(to_text()) reproduces the config.
inline std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& key : detail::config_keys()) out += std::string(key.name) + " = " + key.get(*this) + "\n";
  return out;
}

inline nlohmann::ordered_json config_echo(const RunConfig& config) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& key : detail::config_keys()) j[key.name] = key.get(config);
  return j;
}

}  // namespace scn
