#pragma once

#include <span>
#include <string>
#include <vector>

#include "scn/error.hpp"
#include "scn/model.hpp"
#include "scn/ops.hpp"
#include "scn/spriteworld.hpp"
#include "scn/tensor.hpp"

namespace scn {

struct LossConfig {
  double lambda_diversity = 1.0;

  void validate() const {
    if (!(lambda_diversity >= 0.0)) throw ValidationError("loss.lambda_diversity: must be non-negative");
  }
};

template <typename T>
struct LossBreakdown {
  Tensor<T> total;
  Tensor<T> saliency;   // L1
  Tensor<T> diversity;  // L2
};

namespace detail {

// slots [N,K,D] -> slots W, same shape.
template <typename T>
Tensor<T> project_slots(const Tensor<T>& slots, const Tensor<T>& w) {
  const std::size_t n = slots.dim(0), k = slots.dim(1), d = slots.dim(2);
  return reshape(matmul(reshape(slots, {n * k, d}), w), {n, k, d});
}

template <typename T>
void check_slot_pair(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& w) {
  if (a.rank() != 3 || a.shape() != b.shape() || w.rank() != 2 || w.dim(0) != a.dim(2) || w.dim(1) != a.dim(2)) {
    throw DimensionError("loss: slot sets " + shape_str(a.shape()) + " / " + shape_str(b.shape()) + " with W " +
                         shape_str(w.shape()));
  }
}

}  // namespace detail

/// Time-contrastive saliency term on pre-computed slots.
///
/// For pair p and slot j the candidates are slot j of every second frame in
/// the batch, scored f_jj(x_t^p, x_{t'}); the positive is candidate p. The
/// result is the mean InfoNCE over all N*K (pair, slot) instances.
template <typename T>
Tensor<T> saliency_loss_from_slots(const Tensor<T>& first, const Tensor<T>& second, const Tensor<T>& w) {
  detail::check_slot_pair(first, second, w);
  const std::size_t n = first.dim(0), k = first.dim(1);
  auto scores = batched_inner(transpose01(detail::project_slots(first, w)), transpose01(second));  // [K,N,N]
  std::vector<std::size_t> targets(k * n);
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t p = 0; p < n; ++p) targets[j * n + p] = p;
  return cross_entropy_rows(reshape(scores, {k * n, n}), std::span<const std::size_t>(targets));
}

/// Slot-contrastive diversity term on pre-computed slots.
///
/// For pair p and slot j the candidates are every slot i of x_{t+1}, scored
/// f_ji(x_t, x_{t+1}); the positive is i = j. Mean over N*K instances.
template <typename T>
Tensor<T> diversity_loss_from_slots(const Tensor<T>& first, const Tensor<T>& second, const Tensor<T>& w) {
  detail::check_slot_pair(first, second, w);
  const std::size_t n = first.dim(0), k = first.dim(1);
  auto scores = batched_inner(detail::project_slots(first, w), second);  // [N,K,K], (p, j, i)
  std::vector<std::size_t> targets(n * k);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t j = 0; j < k; ++j) targets[p * k + j] = j;
  return cross_entropy_rows(reshape(scores, {n * k, k}), std::span<const std::size_t>(targets));
}

template <typename T>
LossBreakdown<T> total_loss_from_slots(const Tensor<T>& first, const Tensor<T>& second, const ScorerParams<T>& scorer,
                                       const LossConfig& config) {
  config.validate();
  LossBreakdown<T> out;
  out.saliency = saliency_loss_from_slots(first, second, scorer.saliency());
  out.diversity = diversity_loss_from_slots(first, second, scorer.diversity());
  out.total = add(out.saliency, scale(out.diversity, static_cast<T>(config.lambda_diversity)));
  return out;
}

template <typename T>
Tensor<T> loss_saliency(const Tensor<T>& first_frames, const Tensor<T>& second_frames, const EncoderParams<T>& encoder,
                        const ScorerParams<T>& scorer) {
  return saliency_loss_from_slots(encode(first_frames, encoder), encode(second_frames, encoder), scorer.saliency());
}

template <typename T>
Tensor<T> loss_diversity(const Tensor<T>& first_frames, const Tensor<T>& second_frames, const EncoderParams<T>& encoder,
                         const ScorerParams<T>& scorer) {
  return diversity_loss_from_slots(encode(first_frames, encoder), encode(second_frames, encoder), scorer.diversity());
}

/// L = L1 + lambda * L2 with both components kept for logging.
template <typename T>
LossBreakdown<T> total_loss(const Tensor<T>& first_frames, const Tensor<T>& second_frames, const EncoderParams<T>& encoder,
                            const ScorerParams<T>& scorer, const LossConfig& config) {
  return total_loss_from_slots(encode(first_frames, encoder), encode(second_frames, encoder), scorer, config);
}

inline LossBreakdown<float> total_loss(const TransitionBatch& batch, const EncoderParams<float>& encoder,
                                       const ScorerParams<float>& scorer, const LossConfig& config) {
  return total_loss(batch.first_frames, batch.second_frames, encoder, scorer, config);
}

/// Supervised-baseline regression: slot j is read out by its own linear head
/// and regressed onto object j's normalized (x, y). targets is [N,P,2]
/// row-major; the mean runs over batch, slots and coordinates.
template <typename T>
Tensor<T> supervised_loss_from_slots(const Tensor<T>& slots, const ReadoutHeads<T>& heads, std::span<const T> targets,
                                     std::size_t num_objects) {
  const std::size_t n = slots.dim(0), k = slots.dim(1);
  if (k != num_objects) {
    throw ArgumentError("loss_supervised: " + std::to_string(k) + " slots for " + std::to_string(num_objects) +
                        " objects; the supervised baseline needs K == P");
  }
  if (targets.size() != n * k * 2) {
    throw DimensionError("loss_supervised: " + std::to_string(targets.size()) + " targets, expected " + std::to_string(n * k * 2));
  }
  return mse(grouped_linear(slots, heads.w, heads.b), targets);
}

template <typename T>
Tensor<T> loss_supervised(const Tensor<T>& frames, const EncoderParams<T>& encoder, const ReadoutHeads<T>& heads,
                          std::span<const T> targets, std::size_t num_objects) {
  if (encoder.arch.slots != num_objects) {
    throw ArgumentError("loss_supervised: " + std::to_string(encoder.arch.slots) + " slots for " +
                        std::to_string(num_objects) + " objects; the supervised baseline needs K == P");
  }
  return supervised_loss_from_slots(encode(frames, encoder), heads, targets, num_objects);
}

}  // namespace scn
