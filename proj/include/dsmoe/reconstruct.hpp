#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "dsmoe/transform.hpp"

namespace dsmoe {

enum class Metric : int { gate = 0, abs_gate = 1, gate_up = 2, abs_gate_up = 3 };

inline const char* metric_name(Metric m) {
  switch (m) {
    case Metric::gate: return "gate";
    case Metric::abs_gate: return "abs_gate";
    case Metric::gate_up: return "gate_up";
    case Metric::abs_gate_up: return "abs_gate_up";
  }
  return "unknown";
}

inline Metric metric_from_name(const std::string& s) {
  if (s == "gate") return Metric::gate;
  if (s == "abs_gate" || s == "abs-gate") return Metric::abs_gate;
  if (s == "gate_up" || s == "gate-up") return Metric::gate_up;
  if (s == "abs_gate_up" || s == "abs-gate-up") return Metric::abs_gate_up;
  fail(Status::invalid_argument, "unknown importance metric: " + s);
}

// Per-expert, per-neuron accumulated importance. Accumulators are double in
// both precisions so that batch-order additivity holds to the last bit.
struct ImportanceProfile {
  Metric metric = Metric::abs_gate;
  int num_experts = 0;
  int d_ffn = 0;
  long token_count = 0;
  int layer_index = 0;
  std::vector<std::vector<double>> values;  // [num_experts][d_ffn]

  void validate() const {
    require(num_experts >= 1 && d_ffn >= 2, Status::invalid_state, "profile: bad dimensions");
    require(static_cast<int>(values.size()) == num_experts, Status::invalid_state,
            "profile: expert count mismatch");
    for (const auto& v : values)
      require(static_cast<int>(v.size()) == d_ffn, Status::invalid_state,
              "profile: neuron count mismatch");
  }
};

// Per-expert neuron permutation: the first major_size entries are the major
// block (importance descending, ties toward the lower original index), the
// rest the minor block.
struct ReconstructionMap {
  int num_experts = 0;
  int d_ffn = 0;
  int major_size = 0;
  std::vector<std::vector<int>> order;  // [num_experts][d_ffn]

  static ReconstructionMap identity(int num_experts, int d_ffn) {
    ReconstructionMap m;
    m.num_experts = num_experts;
    m.d_ffn = d_ffn;
    m.major_size = (d_ffn + 1) / 2;
    m.order.assign(static_cast<size_t>(num_experts), std::vector<int>(static_cast<size_t>(d_ffn)));
    for (auto& o : m.order) std::iota(o.begin(), o.end(), 0);
    return m;
  }

  void validate() const {
    require(num_experts >= 1 && d_ffn >= 2, Status::invalid_state, "recon map: bad dimensions");
    require(major_size == (d_ffn + 1) / 2, Status::invalid_state,
            "recon map: major block must hold ceil(d_ffn/2) neurons");
    require(static_cast<int>(order.size()) == num_experts, Status::invalid_state,
            "recon map: expert count mismatch");
    std::vector<char> seen;
    for (const auto& o : order) {
      require(static_cast<int>(o.size()) == d_ffn, Status::invalid_state,
              "recon map: order length mismatch");
      seen.assign(static_cast<size_t>(d_ffn), 0);
      for (int idx : o) {
        require(idx >= 0 && idx < d_ffn && !seen[static_cast<size_t>(idx)], Status::invalid_state,
                "recon map: order is not a permutation");
        seen[static_cast<size_t>(idx)] = 1;
      }
    }
  }
};

// Accumulates the chosen per-neuron statistic over exactly the tokens routed
// to each expert:
//   gate        Sum Swish(x W1_n)
//   abs_gate    Sum |Swish(x W1_n)|
//   gate_up     Sum Swish(x W1_n) * (x W3_n)
//   abs_gate_up Sum |Swish(x W1_n) * (x W3_n)|
template <std::floating_point T>
ImportanceProfile profile_importance(const MoeLayer<T>& layer, const Matrix<T>& calib,
                                     const RoutingDecision& routing, Metric metric,
                                     int layer_index = 0) {
  layer.validate();
  routing.validate();
  require(layer.replay_factor == 1, Status::invalid_state,
          "profile_importance: profile the original layer, not a partitioned one");
  require(calib.rows >= 1, Status::invalid_argument, "profile_importance: empty calibration set");
  require(routing.num_tokens == calib.rows, Status::invalid_argument,
          "profile_importance: routing does not match calibration batch");
  require(calib.cols == layer.config.d_model, Status::shape_mismatch,
          "profile_importance: token width does not match d_model");

  ImportanceProfile prof;
  prof.metric = metric;
  prof.num_experts = layer.config.num_experts;
  prof.d_ffn = layer.config.d_ffn;
  prof.token_count = calib.rows;
  prof.layer_index = layer_index;
  prof.values.assign(static_cast<size_t>(prof.num_experts),
                     std::vector<double>(static_cast<size_t>(prof.d_ffn), 0.0));

  for (int t = 0; t < calib.rows; ++t) {
    const T* xr = calib.data.data() + static_cast<size_t>(t) * calib.cols;
    for (int j = 0; j < routing.k; ++j) {
      const int e = routing.indices[routing.flat(t, j)];
      require(e >= 0 && e < prof.num_experts, Status::invalid_state,
              "profile_importance: expert index out of range");
      const Expert<T>& ex = layer.experts[static_cast<size_t>(e)];
      std::vector<double>& acc = prof.values[static_cast<size_t>(e)];
      for (int n = 0; n < prof.d_ffn; ++n) {
        T g = T(0), u = T(0);
        for (int kk = 0; kk < calib.cols; ++kk) {
          g += xr[kk] * ex.w1.at(kk, n);
          if (metric == Metric::gate_up || metric == Metric::abs_gate_up)
            u += xr[kk] * ex.w3.at(kk, n);
        }
        const double sg = static_cast<double>(swish(g));
        double v = 0.0;
        switch (metric) {
          case Metric::gate: v = sg; break;
          case Metric::abs_gate: v = std::abs(sg); break;
          case Metric::gate_up: v = sg * static_cast<double>(u); break;
          case Metric::abs_gate_up: v = std::abs(sg * static_cast<double>(u)); break;
        }
        acc[static_cast<size_t>(n)] += v;
      }
    }
  }
  return prof;
}

inline ReconstructionMap build_reconstruction_map(const ImportanceProfile& profile) {
  profile.validate();
  ReconstructionMap map;
  map.num_experts = profile.num_experts;
  map.d_ffn = profile.d_ffn;
  map.major_size = (profile.d_ffn + 1) / 2;
  map.order.resize(static_cast<size_t>(profile.num_experts));
  for (int e = 0; e < profile.num_experts; ++e) {
    std::vector<int>& order = map.order[static_cast<size_t>(e)];
    order.resize(static_cast<size_t>(profile.d_ffn));
    std::iota(order.begin(), order.end(), 0);
    const std::vector<double>& imp = profile.values[static_cast<size_t>(e)];
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return imp[static_cast<size_t>(a)] > imp[static_cast<size_t>(b)];
    });
  }
  return map;
}

namespace detail {

template <std::floating_point T>
Expert<T> permute_expert(const Expert<T>& src, const std::vector<int>& order) {
  Expert<T> out;
  out.w1 = Matrix<T>(src.w1.rows, src.w1.cols);
  out.w3 = Matrix<T>(src.w3.rows, src.w3.cols);
  out.w2 = Matrix<T>(src.w2.rows, src.w2.cols);
  for (int n = 0; n < src.w1.cols; ++n) {
    const int o = order[static_cast<size_t>(n)];
    for (int r = 0; r < src.w1.rows; ++r) {
      out.w1.at(r, n) = src.w1.at(r, o);
      out.w3.at(r, n) = src.w3.at(r, o);
    }
    for (int c = 0; c < src.w2.cols; ++c) out.w2.at(n, c) = src.w2.at(o, c);
  }
  return out;
}

}  // namespace detail

// Splits every expert into a major and a minor sub-expert: W1/W3 columns and
// W2 rows are permuted by the importance order, then sliced without scaling
// (partial-transformation semantics; route with replay_routing, P=2).
// Sub-expert 2e is the major half of original expert e, 2e+1 the minor half.
template <std::floating_point T>
std::tuple<MoeLayer<T>, PartitionSpec, ReconstructionMap> reconstruct_experts(
    const MoeLayer<T>& layer, const ImportanceProfile& profile) {
  layer.validate();
  profile.validate();
  require(layer.replay_factor == 1, Status::invalid_state,
          "reconstruct_experts: layer already partitioned");
  require(profile.num_experts == layer.config.num_experts && profile.d_ffn == layer.config.d_ffn,
          Status::invalid_argument, "reconstruct_experts: profile does not match layer shape");

  ReconstructionMap map = build_reconstruction_map(profile);
  const MoeConfig& c = layer.config;
  MoeLayer<T> out;
  out.config = c;
  out.gate = layer.gate;
  out.replay_factor = 2;
  out.lineage = Lineage::reconstructed;
  out.shared_experts = layer.shared_experts;
  out.neuron_order = map.order;
  out.experts.reserve(static_cast<size_t>(c.num_experts) * 2);
  for (int e = 0; e < c.num_experts; ++e) {
    Expert<T> perm =
        detail::permute_expert(layer.experts[static_cast<size_t>(e)], map.order[static_cast<size_t>(e)]);
    out.experts.push_back(detail::slice_expert(perm, 0, map.major_size, T(1)));
    out.experts.push_back(detail::slice_expert(perm, map.major_size, c.d_ffn, T(1)));
  }
  out.validate();

  PartitionSpec spec;
  spec.factor = 2;
  spec.mode = PartitionSpec::Mode::partial;
  spec.num_experts = c.num_experts;
  spec.d_ffn = c.d_ffn;
  spec.chunk_cols = map.major_size;
  return {std::move(out), spec, std::move(map)};
}

}  // namespace dsmoe
