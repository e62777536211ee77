#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "scn/error.hpp"
#include "scn/io.hpp"
#include "scn/model.hpp"
#include "scn/rng.hpp"
#include "scn/spriteworld.hpp"

// Linear-probe evaluation of slot representations: R^2 slot accuracy, the
// probe-weight importance matrices and the entropy-based compactness and
// modularity scores.

namespace scn {

struct TargetDescriptor {
  std::size_t object = 0;
  std::string object_name;
  int coord = 0;  // 0 = x, 1 = y

  std::string label() const { return object_name + "." + kCoordNames[coord]; }
};

/// Frozen representations (all slots concatenated per frame) with their
/// normalized coordinate targets and a disjoint train/test split.
struct ProbeDataset {
  Eigen::MatrixXd representations;  // [M, K*D]
  Eigen::MatrixXd targets;          // [M, T], in [0,1]
  std::vector<TargetDescriptor> descriptors;
  std::vector<double> target_scale;  // pixels per normalized unit, per target
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  std::size_t slots = 0;
  std::size_t slot_dim = 0;
  std::size_t num_objects = 0;

  std::size_t rows() const { return static_cast<std::size_t>(representations.rows()); }
  std::size_t num_targets() const { return descriptors.size(); }

  void validate() const {
    if (representations.rows() != targets.rows()) throw DimensionError("probe dataset: representation/target row mismatch");
    if (static_cast<std::size_t>(representations.cols()) != slots * slot_dim) {
      throw DimensionError("probe dataset: representation width " + std::to_string(representations.cols()) +
                           " != K*D = " + std::to_string(slots * slot_dim));
    }
    if (static_cast<std::size_t>(targets.cols()) != descriptors.size()) throw DimensionError("probe dataset: target descriptor count mismatch");
    std::vector<char> used(rows(), 0);
    for (auto i : train) {
      if (i >= rows() || used[i]) throw ArgumentError("probe dataset: bad or repeated train index");
      used[i] = 1;
    }
    for (auto i : test) {
      if (i >= rows() || used[i]) throw ArgumentError("probe dataset: train and test overlap");
      used[i] = 1;
    }
  }
};

// Shuffled split of [0, rows): the first floor(train_fraction * rows) go to train.
inline void assign_split(ProbeDataset& ds, double train_fraction, CounterRng& rng) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ArgumentError("probe split fraction must lie in (0, 1)");
  std::vector<std::size_t> order(ds.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  shuffle(order, rng);
  const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(order.size())));
  ds.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  ds.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
}

/// Encodes the first num_frames frames without recording gradients and pairs
/// each concatenated slot vector with its object coordinates divided by the
/// frame width (x) or height (y).
template <typename T>
ProbeDataset build_probe_dataset(const Dataset& data, const EncoderParams<T>& encoder, std::size_t num_frames,
                                 double train_fraction, CounterRng& rng, std::size_t chunk = 250) {
  if (num_frames < 4 || num_frames > data.frame_count()) {
    throw ArgumentError("build_probe_dataset: need between 4 and " + std::to_string(data.frame_count()) +
                        " frames, asked for " + std::to_string(num_frames));
  }
  const auto& arch = encoder.arch;
  ProbeDataset ds;
  ds.slots = arch.slots;
  ds.slot_dim = arch.slot_dim;
  ds.num_objects = data.num_objects();
  const std::size_t width = arch.slots * arch.slot_dim;
  ds.representations.resize(static_cast<Eigen::Index>(num_frames), static_cast<Eigen::Index>(width));
  ds.targets.resize(static_cast<Eigen::Index>(num_frames), static_cast<Eigen::Index>(2 * ds.num_objects));
  for (std::size_t o = 0; o < ds.num_objects; ++o)
    for (int c = 0; c < 2; ++c) {
      ds.descriptors.push_back({o, data.manifest().objects[o], c});
      ds.target_scale.push_back(static_cast<double>(c == 0 ? data.manifest().width : data.manifest().height));
    }

  NoGradGuard no_grad;
  std::vector<std::size_t> indices;
  for (std::size_t start = 0; start < num_frames; start += chunk) {
    const std::size_t stop = std::min(num_frames, start + chunk);
    indices.resize(stop - start);
    std::iota(indices.begin(), indices.end(), start);
    Tensor<T> frames = [&] {
      if constexpr (std::is_same_v<T, float>) {
        return data.frames(indices);
      } else {
        return data.frames(indices).template cast<T>();
      }
    }();
    const Tensor<T> slots = encode(frames, encoder);
    const auto values = slots.data();
    for (std::size_t r = 0; r < indices.size(); ++r)
      for (std::size_t f = 0; f < width; ++f)
        ds.representations(static_cast<Eigen::Index>(start + r), static_cast<Eigen::Index>(f)) =
            static_cast<double>(values[r * width + f]);
  }
  for (std::size_t m = 0; m < num_frames; ++m)
    for (std::size_t t = 0; t < ds.descriptors.size(); ++t)
      ds.targets(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(t)) =
          data.label(m, ds.descriptors[t].object, ds.descriptors[t].coord) / ds.target_scale[t];
  assign_split(ds, train_fraction, rng);
  return ds;
}

struct LinearProbe {
  Eigen::VectorXd weights;  // [K*D]
  double intercept = 0.0;
  TargetDescriptor target;

  double predict(const Eigen::Ref<const Eigen::RowVectorXd>& x) const { return x.dot(weights) + intercept; }
};

namespace detail {

inline Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& m, std::span<const std::size_t> rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

}  // namespace detail

/// Closed-form ridge regression on the train split, fitted on centered data:
/// w = (Xc^T Xc + ridge I)^-1 Xc^T (y - ybar), intercept = ybar - xbar^T w.
inline LinearProbe fit_probe(const ProbeDataset& ds, std::size_t target_index, double ridge) {
  if (target_index >= ds.num_targets()) throw ArgumentError("fit_probe: target index out of range");
  if (!(ridge >= 0.0)) throw ArgumentError("fit_probe: ridge must be non-negative");
  if (ds.train.empty()) throw ArgumentError("fit_probe: empty train split");
  const Eigen::MatrixXd x = detail::gather_rows(ds.representations, ds.train);
  Eigen::VectorXd y(static_cast<Eigen::Index>(ds.train.size()));
  for (std::size_t i = 0; i < ds.train.size(); ++i)
    y(static_cast<Eigen::Index>(i)) = ds.targets(static_cast<Eigen::Index>(ds.train[i]), static_cast<Eigen::Index>(target_index));

  const Eigen::RowVectorXd x_mean = x.colwise().mean();
  const double y_mean = y.mean();
  const Eigen::MatrixXd xc = x.rowwise() - x_mean;
  Eigen::MatrixXd gram = xc.transpose() * xc;
  gram.diagonal().array() += ridge;
  const Eigen::VectorXd rhs = xc.transpose() * (y.array() - y_mean).matrix();

  Eigen::LDLT<Eigen::MatrixXd> solver(gram);
  const Eigen::VectorXd pivots = solver.vectorD().cwiseAbs();
  const double pivot_ratio = pivots.size() == 0 ? 1.0 : pivots.minCoeff() / std::max(pivots.maxCoeff(), 1e-300);
  const bool singular = ridge == 0.0 && (!solver.isPositive() || pivot_ratio < 1e-12);
  if (solver.info() != Eigen::Success || singular) {
    throw NumericError("fit_probe: normal equations are singular (pivot ratio " + std::to_string(pivot_ratio) +
                       "); use a ridge > 0");
  }
  LinearProbe probe;
  probe.weights = solver.solve(rhs);
  probe.intercept = y_mean - x_mean.dot(probe.weights);
  probe.target = ds.descriptors[target_index];
  return probe;
}

/// Coefficient of determination 1 - SSE / SStot (SStot about the truth mean).
inline double r2_score(std::span<const double> predictions, std::span<const double> truth) {
  if (predictions.size() != truth.size()) throw DimensionError("r2_score: prediction/truth length mismatch");
  if (truth.size() < 2) throw ArgumentError("r2_score: need at least 2 samples");
  const double mean = std::accumulate(truth.begin(), truth.end(), 0.0) / static_cast<double>(truth.size());
  double sse = 0.0, sst = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    sse += (predictions[i] - truth[i]) * (predictions[i] - truth[i]);
    sst += (truth[i] - mean) * (truth[i] - mean);
  }
  if (sst == 0.0) throw NumericError("r2_score: undefined for constant truth");
  return 1.0 - sse / sst;
}

struct SlotAccuracy {
  std::vector<double> r2;  // per target, test split
  double mean = 0.0;
};

inline SlotAccuracy slot_accuracy(const ProbeDataset& ds, std::span<const LinearProbe> probes) {
  if (probes.size() != ds.num_targets()) throw ArgumentError("slot_accuracy: need one probe per target");
  const Eigen::MatrixXd x = detail::gather_rows(ds.representations, ds.test);
  SlotAccuracy acc;
  std::vector<double> pred(ds.test.size()), truth(ds.test.size());
  for (std::size_t t = 0; t < probes.size(); ++t) {
    const Eigen::VectorXd p = (x * probes[t].weights).array() + probes[t].intercept;
    for (std::size_t i = 0; i < ds.test.size(); ++i) {
      pred[i] = p(static_cast<Eigen::Index>(i));
      truth[i] = ds.targets(static_cast<Eigen::Index>(ds.test[i]), static_cast<Eigen::Index>(t));
    }
    acc.r2.push_back(r2_score(pred, truth));
  }
  acc.mean = std::accumulate(acc.r2.begin(), acc.r2.end(), 0.0) / static_cast<double>(acc.r2.size());
  return acc;
}

struct ImportanceMatrix {
  Eigen::MatrixXd slot_importance;     // [P, K], rows sum to 1
  Eigen::MatrixXd feature_importance;  // [T, K*D], rows sum to 1
  std::vector<std::string> degenerate;  // human-readable flags

  std::size_t objects() const { return static_cast<std::size_t>(slot_importance.rows()); }
  std::size_t slots() const { return static_cast<std::size_t>(slot_importance.cols()); }
};

/// |w| per probe normalized to sum 1, averaged over each slot's D entries,
/// averaged over each object's targets, then rows renormalized. A probe whose
/// weights are all zero contributes a uniform row and is flagged.
inline ImportanceMatrix importance_matrix(std::span<const LinearProbe> probes, std::size_t slots, std::size_t slot_dim,
                                          std::span<const std::size_t> object_of_target, std::size_t num_objects) {
  if (object_of_target.size() != probes.size()) throw ArgumentError("importance_matrix: object map size mismatch");
  const auto width = static_cast<Eigen::Index>(slots * slot_dim);
  ImportanceMatrix imp;
  imp.feature_importance.resize(static_cast<Eigen::Index>(probes.size()), width);
  imp.slot_importance = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(num_objects), static_cast<Eigen::Index>(slots));
  std::vector<std::size_t> per_object(num_objects, 0);

  for (std::size_t t = 0; t < probes.size(); ++t) {
    if (probes[t].weights.size() != width) throw DimensionError("importance_matrix: probe weight extent != K*D");
    Eigen::VectorXd w = probes[t].weights.cwiseAbs();
    const double total = w.sum();
    if (total > 0.0) {
      w /= total;
    } else {
      w.setConstant(1.0 / static_cast<double>(width));
      imp.degenerate.push_back("target " + probes[t].target.label() + ": all-zero probe weights, uniform importance used");
    }
    imp.feature_importance.row(static_cast<Eigen::Index>(t)) = w.transpose();
    const std::size_t object = object_of_target[t];
    if (object >= num_objects) throw ArgumentError("importance_matrix: object index out of range");
    for (std::size_t k = 0; k < slots; ++k)
      imp.slot_importance(static_cast<Eigen::Index>(object), static_cast<Eigen::Index>(k)) +=
          w.segment(static_cast<Eigen::Index>(k * slot_dim), static_cast<Eigen::Index>(slot_dim)).mean();
    ++per_object[object];
  }
  for (std::size_t o = 0; o < num_objects; ++o) {
    auto row = imp.slot_importance.row(static_cast<Eigen::Index>(o));
    if (per_object[o] == 0 || row.sum() <= 0.0) {
      row.setConstant(1.0 / static_cast<double>(slots));
      imp.degenerate.push_back("object " + std::to_string(o) + ": no importance mass, uniform row used");
      continue;
    }
    row /= row.sum();
  }
  return imp;
}

// 1 - entropy of a distribution, with the logarithm taken in base len(p).
// A single-element distribution scores 1.
inline double one_minus_normalized_entropy(const Eigen::Ref<const Eigen::VectorXd>& p) {
  if (p.size() <= 1) return 1.0;
  double h = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p(i) > 0.0) h -= p(i) * std::log(p(i));
  return 1.0 - h / std::log(static_cast<double>(p.size()));
}

/// Mean over objects (rows) of 1 - H_K(row); 1 means each object lives in one slot.
inline double slot_compactness(const ImportanceMatrix& imp) {
  const auto& m = imp.slot_importance;
  double total = 0.0;
  for (Eigen::Index r = 0; r < m.rows(); ++r) total += one_minus_normalized_entropy(m.row(r).transpose());
  return total / static_cast<double>(m.rows());
}

/// Mean over slots (columns, each normalized to sum 1) of 1 - H_P(column);
/// 1 means each slot encodes one object. Absent when there is one object.
/// All-zero columns are treated as uniform and flagged in `flags`.
inline std::optional<double> slot_modularity(const ImportanceMatrix& imp, std::vector<std::string>* flags = nullptr) {
  const auto& m = imp.slot_importance;
  if (m.rows() < 2) return std::nullopt;
  double total = 0.0;
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    Eigen::VectorXd column = m.col(c);
    const double mass = column.sum();
    if (mass > 0.0) {
      column /= mass;
    } else {
      column.setConstant(1.0 / static_cast<double>(m.rows()));
      if (flags) flags->push_back("slot " + std::to_string(c) + ": no importance mass, uniform column used");
    }
    total += one_minus_normalized_entropy(column);
  }
  return total / static_cast<double>(m.cols());
}

struct MetricsReport {
  std::vector<std::string> target_names;
  std::vector<double> r2_per_target;
  double slot_accuracy_mean = 0.0;
  double compactness = 0.0;
  std::optional<double> modularity;
  Eigen::MatrixXd slot_importance;
  std::vector<std::string> degenerate_flags;
  nlohmann::ordered_json config;      // echo of the run configuration
  nlohmann::ordered_json provenance;  // run id, checkpoint, seeds

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["r2_per_target"] = nlohmann::ordered_json::object();
    for (std::size_t t = 0; t < target_names.size(); ++t) j["r2_per_target"][target_names[t]] = r2_per_target[t];
    j["slot_accuracy_mean"] = slot_accuracy_mean;
    j["compactness"] = compactness;
    if (modularity) j["modularity"] = *modularity;
    j["degenerate_flags"] = degenerate_flags;
    auto rows = nlohmann::ordered_json::array();
    for (Eigen::Index r = 0; r < slot_importance.rows(); ++r) {
      std::vector<double> row(static_cast<std::size_t>(slot_importance.cols()));
      for (Eigen::Index c = 0; c < slot_importance.cols(); ++c) row[static_cast<std::size_t>(c)] = slot_importance(r, c);
      rows.push_back(row);
    }
    j["slot_importance"] = rows;
    j["metric_conventions"] = {
        {"importance", "per-probe |w| normalized to sum 1, intercept excluded; slot = mean over its D entries; "
                       "object row = mean of its x and y targets, renormalized"},
        {"entropy_base", "K for compactness rows, P for modularity columns"},
        {"slot_accuracy_mean", "mean of per-target test R^2"}};
    j["provenance"] = provenance;
    j["config"] = config;
    return j;
  }

  // metric,target,value rows; target is empty for the summary metrics.
  std::string to_csv() const {
    std::string out = "metric,target,value\n";
    out += "slot_accuracy,," + format_double(slot_accuracy_mean) + "\n";
    out += "slot_modularity,," + (modularity ? format_double(*modularity) : std::string()) + "\n";
    out += "slot_compactness,," + format_double(compactness) + "\n";
    for (std::size_t t = 0; t < target_names.size(); ++t) out += "r2," + target_names[t] + "," + format_double(r2_per_target[t]) + "\n";
    return out;
  }
};

/// Fits one probe per target and assembles accuracy, importance,
/// compactness and modularity.
inline MetricsReport evaluate_probes(const ProbeDataset& ds, double ridge) {
  ds.validate();
  std::vector<LinearProbe> probes;
  std::vector<std::size_t> object_of_target;
  for (std::size_t t = 0; t < ds.num_targets(); ++t) {
    probes.push_back(fit_probe(ds, t, ridge));
    object_of_target.push_back(ds.descriptors[t].object);
  }
  const SlotAccuracy acc = slot_accuracy(ds, probes);
  const ImportanceMatrix imp = importance_matrix(probes, ds.slots, ds.slot_dim, object_of_target, ds.num_objects);

  MetricsReport report;
  for (const auto& d : ds.descriptors) report.target_names.push_back(d.label());
  report.r2_per_target = acc.r2;
  report.slot_accuracy_mean = acc.mean;
  report.slot_importance = imp.slot_importance;
  report.degenerate_flags = imp.degenerate;
  report.compactness = slot_compactness(imp);
  report.modularity = slot_modularity(imp, &report.degenerate_flags);
  return report;
}

}  // namespace scn
