#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "scn/error.hpp"
#include "scn/io.hpp"
#include "scn/ops.hpp"
#include "scn/rng.hpp"
#include "scn/tensor.hpp"

namespace scn {

/// Layer sizes of the slot encoder. Defaults are the 64x64 RGB desk-scale
/// model: conv(3->32, k8, s4) -> conv(32->K*C, k4, s2) -> per-slot
/// conv(C->C, k3) -> linear(->hidden) -> linear(->D).
struct Architecture {
  std::size_t in_channels = 3;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t conv1_filters = 32;
  std::size_t conv1_kernel = 8;
  std::size_t conv1_stride = 4;
  std::size_t conv2_kernel = 4;
  std::size_t conv2_stride = 2;
  std::size_t head_kernel = 3;
  std::size_t hidden = 256;
  std::size_t slots = 3;          // K
  std::size_t slot_channels = 16;  // C
  std::size_t slot_dim = 32;       // D

  static std::size_t out_extent(std::size_t in, std::size_t kernel, std::size_t stride) {
    return in < kernel ? 0 : (in - kernel) / stride + 1;
  }
  std::size_t conv1_h() const { return out_extent(height, conv1_kernel, conv1_stride); }
  std::size_t conv1_w() const { return out_extent(width, conv1_kernel, conv1_stride); }
  std::size_t slot_map_h() const { return out_extent(conv1_h(), conv2_kernel, conv2_stride); }
  std::size_t slot_map_w() const { return out_extent(conv1_w(), conv2_kernel, conv2_stride); }
  std::size_t head_h() const { return out_extent(slot_map_h(), head_kernel, 1); }
  std::size_t head_w() const { return out_extent(slot_map_w(), head_kernel, 1); }
  std::size_t flat_features() const { return slot_channels * head_h() * head_w(); }

  void validate() const {
    if (slots < 1 || slot_channels < 1 || slot_dim < 1) throw ValidationError("model: K, C and D must be at least 1");
    if (conv1_stride < 1 || conv2_stride < 1) throw ValidationError("model: strides must be positive");
    if (head_h() == 0 || head_w() == 0) {
      throw ValidationError("model: " + std::to_string(height) + "x" + std::to_string(width) +
                            " input is too small for the encoder kernels");
    }
  }

  nlohmann::ordered_json to_json() const {
    return {{"in_channels", in_channels},     {"height", height},           {"width", width},
            {"conv1_filters", conv1_filters}, {"conv1_kernel", conv1_kernel}, {"conv1_stride", conv1_stride},
            {"conv2_kernel", conv2_kernel},   {"conv2_stride", conv2_stride}, {"head_kernel", head_kernel},
            {"hidden", hidden},               {"K", slots},                 {"C", slot_channels},
            {"D", slot_dim}};
  }

  static Architecture from_json(const nlohmann::json& j) {
    Architecture a;
    a.in_channels = j.at("in_channels");
    a.height = j.at("height");
    a.width = j.at("width");
    a.conv1_filters = j.at("conv1_filters");
    a.conv1_kernel = j.at("conv1_kernel");
    a.conv1_stride = j.at("conv1_stride");
    a.conv2_kernel = j.at("conv2_kernel");
    a.conv2_stride = j.at("conv2_stride");
    a.head_kernel = j.at("head_kernel");
    a.hidden = j.at("hidden");
    a.slots = j.at("K");
    a.slot_channels = j.at("C");
    a.slot_dim = j.at("D");
    return a;
  }

  bool operator==(const Architecture&) const = default;
};

template <typename T>
struct EncoderParams {
  Architecture arch;
  Tensor<T> conv1_w, conv1_b;  // backbone
  Tensor<T> conv2_w, conv2_b;  // backbone, K*C output channels
  Tensor<T> head_w, head_b;    // shared slot-head conv
  Tensor<T> fc1_w, fc1_b;      // shared slot-head MLP
  Tensor<T> fc2_w, fc2_b;

  std::vector<Tensor<T>> tensors() const {
    return {conv1_w, conv1_b, conv2_w, conv2_b, head_w, head_b, fc1_w, fc1_b, fc2_w, fc2_b};
  }
  static std::vector<std::string> names() {
    return {"conv1.w", "conv1.b", "conv2.w", "conv2.b", "head.w", "head.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b"};
  }
};

/// Bilinear scorer f_ij = s_i^T W s_j. One matrix serves both loss terms
/// unless a separate diversity matrix is configured.
template <typename T>
struct ScorerParams {
  Tensor<T> w;            // [D,D]
  Tensor<T> diversity_w;  // [D,D] or undefined

  const Tensor<T>& saliency() const { return w; }
  const Tensor<T>& diversity() const { return diversity_w.defined() ? diversity_w : w; }

  std::vector<Tensor<T>> tensors() const {
    if (diversity_w.defined()) return {w, diversity_w};
    return {w};
  }
  std::vector<std::string> names() const {
    if (diversity_w.defined()) return {"scorer.w", "scorer.diversity_w"};
    return {"scorer.w"};
  }
};

// Per-slot linear readouts D -> (x, y) used by the supervised baseline.
template <typename T>
struct ReadoutHeads {
  Tensor<T> w;  // [K,2,D]
  Tensor<T> b;  // [K,2]

  std::vector<Tensor<T>> tensors() const { return {w, b}; }
  static std::vector<std::string> names() { return {"readout.w", "readout.b"}; }
};

namespace detail {

template <typename T>
Tensor<T> uniform_fan_in(Shape shape, std::size_t fan_in, CounterRng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::from_data(std::move(shape), std::move(values), true);
}

template <typename T>
Tensor<T> normal_matrix(std::size_t d, double stddev, CounterRng& rng) {
  std::vector<T> values(d * d);
  for (auto& v : values) v = static_cast<T>(stddev * rng.normal());
  return Tensor<T>::from_data({d, d}, std::move(values), true);
}

}  // namespace detail

/// Fan-in scaled uniform weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero
/// biases, scorer entries N(0, 1/D).
template <typename T>
std::pair<EncoderParams<T>, ScorerParams<T>> init_params(const Architecture& arch, CounterRng& rng,
                                                         bool separate_diversity_scorer = false) {
  arch.validate();
  const std::size_t k = arch.slots, c = arch.slot_channels;
  EncoderParams<T> p;
  p.arch = arch;
  p.conv1_w = detail::uniform_fan_in<T>({arch.conv1_filters, arch.in_channels, arch.conv1_kernel, arch.conv1_kernel},
                                        arch.in_channels * arch.conv1_kernel * arch.conv1_kernel, rng);
  p.conv1_b = Tensor<T>::zeros({arch.conv1_filters}, true);
  p.conv2_w = detail::uniform_fan_in<T>({k * c, arch.conv1_filters, arch.conv2_kernel, arch.conv2_kernel},
                                        arch.conv1_filters * arch.conv2_kernel * arch.conv2_kernel, rng);
  p.conv2_b = Tensor<T>::zeros({k * c}, true);
  p.head_w = detail::uniform_fan_in<T>({c, c, arch.head_kernel, arch.head_kernel}, c * arch.head_kernel * arch.head_kernel, rng);
  p.head_b = Tensor<T>::zeros({c}, true);
  p.fc1_w = detail::uniform_fan_in<T>({arch.hidden, arch.flat_features()}, arch.flat_features(), rng);
  p.fc1_b = Tensor<T>::zeros({arch.hidden}, true);
  p.fc2_w = detail::uniform_fan_in<T>({arch.slot_dim, arch.hidden}, arch.hidden, rng);
  p.fc2_b = Tensor<T>::zeros({arch.slot_dim}, true);

  ScorerParams<T> scorer;
  const double stddev = 1.0 / std::sqrt(static_cast<double>(arch.slot_dim));
  scorer.w = detail::normal_matrix<T>(arch.slot_dim, stddev, rng);
  if (separate_diversity_scorer) scorer.diversity_w = detail::normal_matrix<T>(arch.slot_dim, stddev, rng);
  return {std::move(p), std::move(scorer)};
}

template <typename T>
ReadoutHeads<T> init_readout(const Architecture& arch, CounterRng& rng) {
  ReadoutHeads<T> heads;
  heads.w = detail::uniform_fan_in<T>({arch.slots, 2, arch.slot_dim}, arch.slot_dim, rng);
  heads.b = Tensor<T>::zeros({arch.slots, 2}, true);
  return heads;
}

/// frames [N,C_in,H,W] -> slots [N,K,D]. The backbone runs once; its K*C
/// output channels are read as K contiguous slot maps of C channels, and the
/// same head maps every slot map to its slot vector.
template <typename T>
Tensor<T> encode(const Tensor<T>& frames, const EncoderParams<T>& p) {
  const auto& a = p.arch;
  if (frames.rank() != 4 || frames.dim(1) != a.in_channels || frames.dim(2) != a.height || frames.dim(3) != a.width) {
    throw DimensionError("encode: frames " + shape_str(frames.shape()) + " do not match the encoder input (N," +
                         std::to_string(a.in_channels) + "," + std::to_string(a.height) + "," + std::to_string(a.width) + ")");
  }
  const std::size_t n = frames.dim(0);
  auto h = relu(conv2d(frames, p.conv1_w, p.conv1_b, static_cast<int>(a.conv1_stride)));
  h = relu(conv2d(h, p.conv2_w, p.conv2_b, static_cast<int>(a.conv2_stride)));
  // [N, K*C, h, w] and [N*K, C, h, w] share the same row-major layout.
  h = reshape(h, {n * a.slots, a.slot_channels, a.slot_map_h(), a.slot_map_w()});
  h = relu(conv2d(h, p.head_w, p.head_b, 1));
  h = reshape(h, {n * a.slots, a.flat_features()});
  h = relu(linear(h, p.fc1_w, p.fc1_b));
  h = linear(h, p.fc2_w, p.fc2_b);
  return reshape(h, {n, a.slots, a.slot_dim});
}

/// K x K matrix of bilinear scores: entry (i, j) = slots_a[i]^T W slots_b[j].
template <typename T>
Tensor<T> score_matrix(const Tensor<T>& slots_a, const Tensor<T>& slots_b, const Tensor<T>& w) {
  if (slots_a.rank() != 2 || slots_a.shape() != slots_b.shape() || w.rank() != 2 || w.dim(0) != slots_a.dim(1) ||
      w.dim(1) != slots_a.dim(1)) {
    throw DimensionError("score_matrix: slots " + shape_str(slots_a.shape()) + " / " + shape_str(slots_b.shape()) +
                         " with W " + shape_str(w.shape()));
  }
  const std::size_t k = slots_a.dim(0), d = slots_a.dim(1);
  auto projected = reshape(matmul(slots_a, w), {1, k, d});
  return reshape(batched_inner(projected, reshape(slots_b, {1, k, d})), {k, k});
}

// ---------------------------------------------------------------------------
// Checkpoint blob: "SCN1", u32 little-endian header length, UTF-8 JSON header,
// then every tensor listed in header["tensors"] as little-endian f32, in order.

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
};

struct Checkpoint {
  nlohmann::ordered_json header;
  std::vector<NamedTensor> tensors;

  const Tensor<float>& get(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t.tensor;
    throw FormatError("checkpoint: no tensor named '" + name + "'");
  }
  bool contains(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return true;
    return false;
  }
};

namespace detail {

inline void append_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void append_f32_le(std::string& out, float value) {
  const auto bits = std::bit_cast<std::uint32_t>(value);
  append_u32_le(out, bits);
}

inline std::uint32_t read_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  auto header = ckpt.header;
  header["tensors"] = nlohmann::ordered_json::array();
  for (const auto& t : ckpt.tensors) header["tensors"].push_back({{"name", t.name}, {"shape", t.tensor.shape()}});
  const std::string text = header.dump();
  std::string out = "SCN1";
  detail::append_u32_le(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (const auto& t : ckpt.tensors)
    for (float v : t.tensor.data()) detail::append_f32_le(out, v);
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string blob = read_file(path);
  const std::string where = path.string();
  if (blob.size() < 8 || blob.compare(0, 4, "SCN1") != 0) throw FormatError(where + ": missing SCN1 magic at offset 0");
  const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
  const std::size_t header_len = detail::read_u32_le(bytes + 4);
  if (8 + header_len > blob.size()) throw FormatError(where + ": header length " + std::to_string(header_len) + " exceeds file");
  Checkpoint ckpt;
  try {
    ckpt.header = nlohmann::ordered_json::parse(blob.substr(8, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": bad JSON header: " + e.what());
  }
  if (!ckpt.header.is_object() || !ckpt.header.contains("tensors") || !ckpt.header["tensors"].is_array()) {
    throw FormatError(where + ": header has no tensor list");
  }
  std::size_t offset = 8 + header_len;
  for (const auto& entry : ckpt.header.at("tensors")) {
    if (!entry.contains("name") || !entry.contains("shape") || !entry["shape"].is_array() || !entry["name"].is_string()) {
      throw FormatError(where + ": malformed tensor entry " + entry.dump());
    }
    Shape shape = entry.at("shape").get<Shape>();
    const std::size_t count = shape_numel(shape);
    if (offset + 4 * count > blob.size()) {
      throw FormatError(where + ": tensor '" + entry.at("name").get<std::string>() + "' needs " + std::to_string(4 * count) +
                        " bytes at offset " + std::to_string(offset) + ", file has " + std::to_string(blob.size()));
    }
    std::vector<float> values(count);
    for (std::size_t i = 0; i < count; ++i) values[i] = std::bit_cast<float>(detail::read_u32_le(bytes + offset + 4 * i));
    offset += 4 * count;
    ckpt.tensors.push_back({entry.at("name").get<std::string>(), Tensor<float>::from_data(std::move(shape), std::move(values))});
  }
  if (offset != blob.size()) throw FormatError(where + ": " + std::to_string(blob.size() - offset) + " trailing bytes at offset " + std::to_string(offset));
  ckpt.header.erase("tensors");
  return ckpt;
}

// Copies checkpoint values into existing parameters, matching by name and shape.
inline void restore_tensors(const Checkpoint& ckpt, const std::vector<std::string>& names, std::vector<Tensor<float>> params) {
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto& src = ckpt.get(names[i]);
    if (src.shape() != params[i].shape()) {
      throw FormatError("checkpoint: tensor '" + names[i] + "' has shape " + shape_str(src.shape()) + ", expected " +
                        shape_str(params[i].shape()));
    }
    std::copy(src.data().begin(), src.data().end(), params[i].mutable_data().begin());
  }
}

}  // namespace scn
