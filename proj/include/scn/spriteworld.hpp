#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "scn/error.hpp"
#include "scn/io.hpp"
#include "scn/rng.hpp"
#include "scn/tensor.hpp"

// Bounce-world: colored discs moving with constant speed inside a box and
// reflecting elastically off the walls, plus the on-disk dataset layout
// (meta.json / frames.bin / labels.csv) shared with external corpora.

namespace scn {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

inline const std::vector<Rgb>& default_palette() {
  static const std::vector<Rgb> palette{{230, 25, 75},  {60, 180, 75},  {0, 130, 200},  {255, 225, 25},
                                        {245, 130, 48}, {145, 30, 180}, {70, 240, 240}, {240, 50, 230}};
  return palette;
}

struct WorldConfig {
  int width = 64;
  int height = 64;
  int num_objects = 3;
  double sprite_radius = 5.0;
  double speed_min = 1.0;
  double speed_max = 3.0;
  std::vector<Rgb> palette;  // empty: first num_objects entries of default_palette()
  Rgb background{0, 0, 0};
  int episode_length = 100;
  std::uint64_t seed = 0;

  std::vector<Rgb> colors() const {
    if (!palette.empty()) return palette;
    if (num_objects > static_cast<int>(default_palette().size())) {
      throw ValidationError("world.palette: " + std::to_string(num_objects) + " objects need explicit colors, only " +
                            std::to_string(default_palette().size()) + " defaults available");
    }
    return {default_palette().begin(), default_palette().begin() + num_objects};
  }

  void validate() const {
    if (width <= 0 || height <= 0) throw ValidationError("world.width/world.height: must be positive");
    if (num_objects < 1) throw ValidationError("world.num_objects: must be at least 1");
    if (!(sprite_radius > 0.0) || 2.0 * sprite_radius >= std::min(width, height)) {
      throw ValidationError("world.sprite_radius: 2*radius must be below min(width, height)");
    }
    if (!(speed_min >= 0.0) || speed_max < speed_min) throw ValidationError("world.speed_min/world.speed_max: bad range");
    if (episode_length < 1) throw ValidationError("world.episode_length: must be at least 1");
    const auto cs = colors();
    if (static_cast<int>(cs.size()) != num_objects) {
      throw ValidationError("world.palette: " + std::to_string(cs.size()) + " colors for " +
                            std::to_string(num_objects) + " objects");
    }
    for (std::size_t i = 0; i < cs.size(); ++i) {
      if (cs[i] == background) throw ValidationError("world.palette: color " + std::to_string(i) + " equals the background");
      for (std::size_t j = 0; j < i; ++j)
        if (cs[i] == cs[j]) {
          throw ValidationError("world.palette: colors " + std::to_string(j) + " and " + std::to_string(i) +
                                " are identical");
        }
    }
  }
};

using Vec2 = std::array<double, 2>;

struct WorldState {
  std::vector<Vec2> positions;
  std::vector<Vec2> velocities;
};

namespace detail {

// Folds x back into [lo, hi], flipping v once per wall crossed.
inline void reflect_into(double& x, double& v, double lo, double hi) {
  while (x < lo || x > hi) {
    if (x > hi) {
      x = 2.0 * hi - x;
    } else {
      x = 2.0 * lo - x;
    }
    v = -v;
  }
}

}  // namespace detail

/// Advances every sprite by its velocity; wall crossings are reflected
/// (possibly several times within one step). Sprites never interact.
inline WorldState simulate_step(const WorldState& state, const WorldConfig& config) {
  WorldState next = state;
  const double r = config.sprite_radius;
  const double hi[2] = {config.width - r, config.height - r};
  for (std::size_t i = 0; i < next.positions.size(); ++i) {
    for (int axis = 0; axis < 2; ++axis) {
      next.positions[i][axis] += next.velocities[i][axis];
      detail::reflect_into(next.positions[i][axis], next.velocities[i][axis], r, hi[axis]);
    }
  }
  return next;
}

// Draws a fresh state: uniform positions inside the walls, speed uniform in
// [speed_min, speed_max] with a uniformly random heading.
inline WorldState random_state(const WorldConfig& config, CounterRng& rng) {
  WorldState state;
  const double r = config.sprite_radius;
  for (int i = 0; i < config.num_objects; ++i) {
    const double x = rng.uniform(r, config.width - r);
    const double y = rng.uniform(r, config.height - r);
    const double speed = rng.uniform(config.speed_min, config.speed_max);
    const double heading = rng.uniform(0.0, 2.0 * std::numbers::pi);
    state.positions.push_back({x, y});
    state.velocities.push_back({speed * std::cos(heading), speed * std::sin(heading)});
  }
  return state;
}

/// Rasterizes to 8-bit (C,H,W) RGB. Pixel (px,py) has its center at
/// (px+0.5, py+0.5); it takes a sprite's color when that center lies within
/// sprite_radius of the sprite center. Later sprites paint over earlier ones.
inline std::vector<std::uint8_t> render_bytes(const WorldState& state, const WorldConfig& config) {
  const std::size_t w = static_cast<std::size_t>(config.width);
  const std::size_t h = static_cast<std::size_t>(config.height);
  const std::size_t plane = w * h;
  std::vector<std::uint8_t> image(3 * plane);
  std::fill_n(image.begin(), plane, config.background.r);
  std::fill_n(image.begin() + plane, plane, config.background.g);
  std::fill_n(image.begin() + 2 * plane, plane, config.background.b);
  if (state.positions.empty()) return image;

  const auto colors = config.colors();
  const double r = config.sprite_radius;
  for (std::size_t i = 0; i < state.positions.size(); ++i) {
    const auto [cx, cy] = state.positions[i];
    const Rgb color = colors.at(i);
    const auto y0 = static_cast<long>(std::max(0.0, std::floor(cy - r - 1.0)));
    const auto y1 = static_cast<long>(std::min<double>(h - 1, std::ceil(cy + r + 1.0)));
    const auto x0 = static_cast<long>(std::max(0.0, std::floor(cx - r - 1.0)));
    const auto x1 = static_cast<long>(std::min<double>(w - 1, std::ceil(cx + r + 1.0)));
    for (long py = y0; py <= y1; ++py) {
      for (long px = x0; px <= x1; ++px) {
        const double dx = px + 0.5 - cx;
        const double dy = py + 0.5 - cy;
        if (dx * dx + dy * dy <= r * r) {
          const std::size_t at = static_cast<std::size_t>(py) * w + static_cast<std::size_t>(px);
          image[at] = color.r;
          image[plane + at] = color.g;
          image[2 * plane + at] = color.b;
        }
      }
    }
  }
  return image;
}

inline Tensor<float> bytes_to_tensor(std::span<const std::uint8_t> bytes, Shape shape) {
  std::vector<float> values(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) values[i] = static_cast<float>(bytes[i]) / 255.0f;
  return Tensor<float>::from_data(std::move(shape), std::move(values));
}

// Frame as floats in [0,1], shape [3,H,W].
inline Tensor<float> render(const WorldState& state, const WorldConfig& config) {
  return bytes_to_tensor(render_bytes(state, config),
                         {3, static_cast<std::size_t>(config.height), static_cast<std::size_t>(config.width)});
}

struct DatasetManifest {
  std::size_t width = 0, height = 0, channels = 0;
  std::size_t frame_count = 0;
  std::vector<std::string> objects;
  std::vector<std::size_t> episodes;  // start index of every episode
  std::uint64_t seed = 0;
  std::string normalization = "frames: u8/255 -> [0,1]; labels: pixel coordinates";

  std::size_t frame_bytes() const { return channels * height * width; }

  void validate() const {
    if (width == 0 || height == 0 || channels == 0) throw FormatError("meta.json: width/height/channels must be positive");
    if (frame_count == 0) throw FormatError("meta.json: frame_count must be positive");
    if (objects.empty()) throw FormatError("meta.json: objects must be non-empty");
    if (episodes.empty() || episodes.front() != 0) throw FormatError("meta.json: episodes must start at 0");
    for (std::size_t i = 0; i < episodes.size(); ++i) {
      if (episodes[i] >= frame_count) throw FormatError("meta.json: episode start beyond frame_count");
      if (i > 0 && episodes[i] <= episodes[i - 1]) throw FormatError("meta.json: episode starts must increase strictly");
    }
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["schema_version"] = 1;
    j["width"] = width;
    j["height"] = height;
    j["channels"] = channels;
    j["frame_count"] = frame_count;
    j["objects"] = objects;
    j["episodes"] = episodes;
    j["seed"] = seed;
    return j;
  }
};

inline const char* kCoordNames[2] = {"x", "y"};

/// In-memory view of a dataset directory: frames as bytes, labels as a dense
/// [frame][object][coord] table in pixels. Read-only after load, so concurrent
/// readers are fine.
class Dataset {
 public:
  struct Label {
    std::string object;
    std::string coord;
    double value;
  };

  Dataset(DatasetManifest manifest, std::vector<std::uint8_t> frames, std::vector<double> labels)
      : manifest_(std::move(manifest)), frames_(std::move(frames)), labels_(std::move(labels)) {
    manifest_.validate();
    if (frames_.size() != manifest_.frame_count * manifest_.frame_bytes()) throw FormatError("frame buffer size mismatch");
    if (labels_.size() != manifest_.frame_count * manifest_.objects.size() * 2) throw FormatError("label table size mismatch");
  }

  static Dataset load(const std::filesystem::path& dir);

  const DatasetManifest& manifest() const { return manifest_; }
  std::size_t frame_count() const { return manifest_.frame_count; }
  std::size_t num_objects() const { return manifest_.objects.size(); }
  Shape frame_shape() const { return {manifest_.channels, manifest_.height, manifest_.width}; }

  std::span<const std::uint8_t> frame_bytes(std::size_t index) const {
    check_index(index);
    return std::span<const std::uint8_t>(frames_).subspan(index * manifest_.frame_bytes(), manifest_.frame_bytes());
  }

  Tensor<float> frame(std::size_t index) const { return bytes_to_tensor(frame_bytes(index), frame_shape()); }

  // Stacks the requested frames into [N,C,H,W].
  Tensor<float> frames(std::span<const std::size_t> indices) const {
    const std::size_t per = manifest_.frame_bytes();
    std::vector<float> values(indices.size() * per);
    for (std::size_t n = 0; n < indices.size(); ++n) {
      const auto bytes = frame_bytes(indices[n]);
      for (std::size_t i = 0; i < per; ++i) values[n * per + i] = static_cast<float>(bytes[i]) / 255.0f;
    }
    return Tensor<float>::from_data({indices.size(), manifest_.channels, manifest_.height, manifest_.width},
                                    std::move(values));
  }

  // Pixel coordinate (0 = x, 1 = y) of an object in a frame.
  double label(std::size_t frame, std::size_t object, int coord) const {
    check_index(frame);
    return labels_.at((frame * num_objects() + object) * 2 + static_cast<std::size_t>(coord));
  }

  std::vector<Label> labels(std::size_t frame) const {
    std::vector<Label> out;
    for (std::size_t o = 0; o < num_objects(); ++o)
      for (int c = 0; c < 2; ++c) out.push_back({manifest_.objects[o], kCoordNames[c], label(frame, o, c)});
    return out;
  }

  std::size_t episode_of(std::size_t frame) const {
    check_index(frame);
    const auto& starts = manifest_.episodes;
    return static_cast<std::size_t>(std::upper_bound(starts.begin(), starts.end(), frame) - starts.begin()) - 1;
  }

  std::size_t episode_length(std::size_t episode) const {
    const auto& starts = manifest_.episodes;
    const std::size_t end = episode + 1 < starts.size() ? starts[episode + 1] : manifest_.frame_count;
    return end - starts.at(episode);
  }

 private:
  void check_index(std::size_t index) const {
    if (index >= manifest_.frame_count) {
      throw ArgumentError("frame index " + std::to_string(index) + " out of range for " +
                          std::to_string(manifest_.frame_count) + " frames");
    }
  }

  DatasetManifest manifest_;
  std::vector<std::uint8_t> frames_;
  std::vector<double> labels_;
};

namespace detail {

inline std::string labels_csv(const DatasetManifest& manifest, std::span<const double> labels) {
  std::string out = "frame,object,coord,value\n";
  const std::size_t objects = manifest.objects.size();
  for (std::size_t f = 0; f < manifest.frame_count; ++f)
    for (std::size_t o = 0; o < objects; ++o)
      for (int c = 0; c < 2; ++c) {
        out += std::to_string(f);
        out += ',';
        out += manifest.objects[o];
        out += ',';
        out += kCoordNames[c];
        out += ',';
        out += format_double(labels[(f * objects + o) * 2 + static_cast<std::size_t>(c)]);
        out += '\n';
      }
  return out;
}

}  // namespace detail

/// Writes meta.json, frames.bin and labels.csv for a dataset already in memory.
inline void write_dataset(const Dataset& data, const std::filesystem::path& dir) {
  const auto& manifest = data.manifest();
  std::filesystem::create_directories(dir);
  std::string frames;
  frames.reserve(manifest.frame_count * manifest.frame_bytes());
  for (std::size_t f = 0; f < manifest.frame_count; ++f) {
    const auto bytes = data.frame_bytes(f);
    frames.append(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  }
  std::vector<double> labels;
  labels.reserve(manifest.frame_count * manifest.objects.size() * 2);
  for (std::size_t f = 0; f < manifest.frame_count; ++f)
    for (std::size_t o = 0; o < manifest.objects.size(); ++o)
      for (int c = 0; c < 2; ++c) labels.push_back(data.label(f, o, c));

  write_file_atomic(dir / "frames.bin", frames);
  write_file_atomic(dir / "labels.csv", detail::labels_csv(manifest, labels));
  write_file_atomic(dir / "meta.json", manifest.to_json().dump(2) + "\n");
}

/// Simulates num_episodes episodes from the config's seed (on the given RNG
/// stream) and keeps them in memory. Frame t of an episode shows the state
/// after t steps.
inline Dataset simulate_dataset(const WorldConfig& config, int num_episodes, std::uint64_t stream = 0) {
  config.validate();
  if (num_episodes < 1) throw ValidationError("world.num_episodes: must be at least 1");
  DatasetManifest manifest;
  manifest.width = static_cast<std::size_t>(config.width);
  manifest.height = static_cast<std::size_t>(config.height);
  manifest.channels = 3;
  manifest.frame_count = static_cast<std::size_t>(num_episodes) * static_cast<std::size_t>(config.episode_length);
  manifest.seed = config.seed;
  for (int i = 0; i < config.num_objects; ++i) manifest.objects.push_back("obj" + std::to_string(i));

  std::vector<std::uint8_t> frames;
  frames.reserve(manifest.frame_count * manifest.frame_bytes());
  std::vector<double> labels;
  labels.reserve(manifest.frame_count * manifest.objects.size() * 2);

  CounterRng rng(config.seed, stream);
  for (int e = 0; e < num_episodes; ++e) {
    manifest.episodes.push_back(static_cast<std::size_t>(e) * static_cast<std::size_t>(config.episode_length));
    WorldState state = random_state(config, rng);
    for (int t = 0; t < config.episode_length; ++t) {
      if (t > 0) state = simulate_step(state, config);
      const auto image = render_bytes(state, config);
      frames.insert(frames.end(), image.begin(), image.end());
      for (const auto& p : state.positions) {
        labels.push_back(p[0]);
        labels.push_back(p[1]);
      }
    }
  }
  return Dataset(std::move(manifest), std::move(frames), std::move(labels));
}

inline DatasetManifest generate_dataset(const WorldConfig& config, int num_episodes, const std::filesystem::path& out_dir,
                                        std::uint64_t stream = 0) {
  Dataset data = simulate_dataset(config, num_episodes, stream);
  write_dataset(data, out_dir);
  return data.manifest();
}

inline Dataset Dataset::load(const std::filesystem::path& dir) {
  for (const char* name : {"meta.json", "frames.bin", "labels.csv"}) {
    if (!std::filesystem::exists(dir / name)) throw FormatError((dir / name).string() + ": missing");
  }

  DatasetManifest manifest;
  const auto meta_path = (dir / "meta.json").string();
  try {
    const auto meta = nlohmann::json::parse(read_file(dir / "meta.json"));
    const int version = meta.at("schema_version").get<int>();
    if (version != 1) throw FormatError(meta_path + ": schema_version " + std::to_string(version) + " unsupported (expected 1)");
    manifest.width = meta.at("width").get<std::size_t>();
    manifest.height = meta.at("height").get<std::size_t>();
    manifest.channels = meta.at("channels").get<std::size_t>();
    manifest.frame_count = meta.at("frame_count").get<std::size_t>();
    manifest.objects = meta.at("objects").get<std::vector<std::string>>();
    manifest.episodes = meta.at("episodes").get<std::vector<std::size_t>>();
    manifest.seed = meta.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(meta_path + ": " + e.what());
  }
  try {
    manifest.validate();
  } catch (const FormatError& e) {
    throw FormatError(dir.string() + "/" + e.what());
  }

  std::string raw = read_file(dir / "frames.bin");
  const std::size_t expected = manifest.frame_count * manifest.frame_bytes();
  if (raw.size() != expected) {
    throw FormatError((dir / "frames.bin").string() + ": expected " + std::to_string(expected) + " bytes (" +
                      std::to_string(manifest.frame_count) + " frames of " + std::to_string(manifest.frame_bytes()) +
                      "), found " + std::to_string(raw.size()) + "; data ends at offset " + std::to_string(raw.size()));
  }
  std::vector<std::uint8_t> frames(raw.begin(), raw.end());
  raw.clear();
  raw.shrink_to_fit();

  const std::string csv_path = (dir / "labels.csv").string();
  const std::string csv = read_file(dir / "labels.csv");
  const std::size_t objects = manifest.objects.size();
  std::vector<double> labels(manifest.frame_count * objects * 2, 0.0);
  std::vector<bool> seen(labels.size(), false);
  std::size_t pos = 0, line_no = 0;
  auto fail = [&](std::size_t offset, const std::string& why) {
    throw FormatError(csv_path + ": line " + std::to_string(line_no) + " (offset " + std::to_string(offset) + "): " + why);
  };
  while (pos < csv.size()) {
    const std::size_t line_start = pos;
    std::size_t end = csv.find('\n', pos);
    if (end == std::string::npos) end = csv.size();
    std::string_view line(csv.data() + pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    pos = end + 1;
    ++line_no;
    if (line_no == 1) {
      if (line != "frame,object,coord,value") fail(line_start, "expected header frame,object,coord,value");
      continue;
    }
    if (line.empty()) continue;
    std::string_view fields[4];
    std::size_t field = 0, cursor = 0;
    for (; field < 4; ++field) {
      const std::size_t comma = line.find(',', cursor);
      if (field < 3 && comma == std::string_view::npos) fail(line_start, "expected 4 fields");
      fields[field] = line.substr(cursor, field < 3 ? comma - cursor : std::string_view::npos);
      cursor = comma + 1;
    }
    std::size_t frame = 0;
    if (auto r = std::from_chars(fields[0].data(), fields[0].data() + fields[0].size(), frame);
        r.ec != std::errc() || r.ptr != fields[0].data() + fields[0].size() || frame >= manifest.frame_count) {
      fail(line_start, "bad frame index '" + std::string(fields[0]) + "'");
    }
    const auto obj_it = std::find(manifest.objects.begin(), manifest.objects.end(), fields[1]);
    if (obj_it == manifest.objects.end()) fail(line_start, "unknown object '" + std::string(fields[1]) + "'");
    int coord = -1;
    if (fields[2] == "x") coord = 0;
    if (fields[2] == "y") coord = 1;
    if (coord < 0) fail(line_start, "coord must be x or y");
    double value = 0.0;
    if (!parse_double(fields[3], value)) fail(line_start, "bad value '" + std::string(fields[3]) + "'");
    const std::size_t slot = (frame * objects + static_cast<std::size_t>(obj_it - manifest.objects.begin())) * 2 +
                             static_cast<std::size_t>(coord);
    if (seen[slot]) fail(line_start, "duplicate label");
    seen[slot] = true;
    labels[slot] = value;
  }
  if (line_no == 0) throw FormatError(csv_path + ": empty file");
  const auto missing = std::find(seen.begin(), seen.end(), false);
  if (missing != seen.end()) {
    const std::size_t slot = static_cast<std::size_t>(missing - seen.begin());
    throw FormatError(csv_path + ": no label for frame " + std::to_string(slot / (objects * 2)) + ", object " +
                      manifest.objects[(slot / 2) % objects] + ", coord " + kCoordNames[slot % 2]);
  }
  return Dataset(std::move(manifest), std::move(frames), std::move(labels));
}

/// Minibatch of consecutive pairs; second_frames[i] follows first_frames[i]
/// within one episode.
struct TransitionBatch {
  Tensor<float> first_frames;   // [N,C,H,W]
  Tensor<float> second_frames;  // [N,C,H,W]
  std::vector<std::size_t> first_indices;
  std::size_t size() const { return first_indices.size(); }
};

/// Picks N positions uniformly among all (t, t+1) pairs lying in one episode.
inline std::vector<std::size_t> sample_pair_indices(const Dataset& data, std::size_t batch_size, CounterRng& rng) {
  const auto& starts = data.manifest().episodes;
  std::vector<std::size_t> cumulative;  // pairs available before episode e
  std::size_t total = 0;
  for (std::size_t e = 0; e < starts.size(); ++e) {
    const std::size_t len = data.episode_length(e);
    if (len < 2) throw ArgumentError("sample_transition_batch: episode " + std::to_string(e) + " has fewer than 2 frames");
    cumulative.push_back(total);
    total += len - 1;
  }
  if (batch_size == 0) throw ArgumentError("sample_transition_batch: batch size must be positive");
  std::vector<std::size_t> indices(batch_size);
  for (auto& index : indices) {
    const std::size_t u = rng.below(total);
    const std::size_t e =
        static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin()) - 1;
    index = starts[e] + (u - cumulative[e]);
  }
  return indices;
}

inline TransitionBatch sample_transition_batch(const Dataset& data, std::size_t batch_size, CounterRng& rng) {
  TransitionBatch batch;
  batch.first_indices = sample_pair_indices(data, batch_size, rng);
  std::vector<std::size_t> next(batch.first_indices);
  for (auto& i : next) ++i;
  batch.first_frames = data.frames(batch.first_indices);
  batch.second_frames = data.frames(next);
  return batch;
}

}  // namespace scn
