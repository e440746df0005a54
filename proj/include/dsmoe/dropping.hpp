#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dsmoe/reconstruct.hpp"

namespace dsmoe {

struct DropPolicy {
  enum class Kind : int { none = 0, one_threshold = 1, two_threshold = 2 };
  Kind kind = Kind::none;
  double t_drop = 0.0;
  double t_major = 0.0;
  double t_minor = 0.0;
  bool keep_top1 = true;
  bool normalize = true;

  static DropPolicy none_policy() { return {}; }

  static DropPolicy one_t(double t, bool keep_top1 = true) {
    DropPolicy p;
    p.kind = Kind::one_threshold;
    p.t_drop = t;
    p.keep_top1 = keep_top1;
    return p;
  }

  // Default dual thresholds around a 1T operating point: (t - 0.01, t + 0.01).
  static DropPolicy two_t_from(double t, bool keep_top1 = true) {
    return two_t(t, t - 0.01, t + 0.01, keep_top1);
  }

  static DropPolicy two_t(double t, double t_major, double t_minor, bool keep_top1 = true) {
    require(t_major <= t_minor, Status::invalid_argument,
            "drop policy: t_major must be <= t_minor");
    DropPolicy p;
    p.kind = Kind::two_threshold;
    p.t_drop = t;
    p.t_major = t_major;
    p.t_minor = t_minor;
    p.keep_top1 = keep_top1;
    return p;
  }

  const char* kind_name() const {
    switch (kind) {
      case Kind::none: return "none";
      case Kind::one_threshold: return "1t";
      case Kind::two_threshold: return "2t";
    }
    return "unknown";
  }
};

// Per-token renormalization over the Top-K selections. Raw scores are left
// untouched; they keep weighting the outputs.
inline RoutingDecision normalize_topk(const RoutingDecision& routing) {
  routing.validate();
  RoutingDecision out = routing;
  out.normalized.resize(out.raw.size());
  for (int t = 0; t < out.num_tokens; ++t) {
    double sum = 0.0;
    for (int j = 0; j < out.base_k; ++j) sum += out.raw[out.flat(t, j)];
    require(sum > 0.0, Status::invalid_argument,
            "normalize_topk: degenerate zero-sum scores for token " + std::to_string(t));
    for (int j = 0; j < out.k; ++j) out.normalized[out.flat(t, j)] = out.raw[out.flat(t, j)] / sum;
  }
  return out;
}

// Prenormalized gates skip the division and adopt the raw scores as-is.
inline RoutingDecision ensure_normalized(const RoutingDecision& routing, const DropPolicy& policy) {
  if (routing.has_normalized()) return routing;
  if (policy.normalize) return normalize_topk(routing);
  RoutingDecision out = routing;
  out.normalized = out.raw;
  return out;
}

namespace detail {

// Shared banding core. Operates at original-selection granularity: slot s of
// a token owns the copies at positions {s, s+K, ...}. Bands (lower edges
// inclusive): ns >= t_minor keeps everything; t_major <= ns < t_minor keeps
// the major part (copy 0 when replayed, fraction 0.5 on an unsplit block);
// ns < t_major drops the whole selection. keep_top1 restores the full group
// of the top-normalized slot. Thresholds are callables (t, s) -> double so
// the EP simulator can vary them per owning device.
template <class FMaj, class FMin>
RoutingDecision apply_bands_fn(const RoutingDecision& routing, FMaj t_major_of, FMin t_minor_of,
                               bool keep_top1) {
  require(routing.has_normalized(), Status::invalid_state,
          "drop: normalized scores must be computed first");
  RoutingDecision out = routing;
  const int kbase = out.base_k;
  const int p = out.replay_factor;
  for (int t = 0; t < out.num_tokens; ++t) {
    int top_slot = 0;
    for (int s = 0; s < kbase; ++s) {
      const double ns = out.normalized[out.flat(t, s)];
      if (ns > out.normalized[out.flat(t, top_slot)]) top_slot = s;
      if (ns >= t_minor_of(t, s)) {
        for (int cp = 0; cp < p; ++cp) out.fraction[out.flat(t, cp * kbase + s)] = 1.0;
      } else if (ns >= t_major_of(t, s)) {
        if (p == 1) {
          out.fraction[out.flat(t, s)] = 0.5;
        } else {
          out.fraction[out.flat(t, s)] = 1.0;
          for (int cp = 1; cp < p; ++cp) out.fraction[out.flat(t, cp * kbase + s)] = 0.0;
        }
      } else {
        for (int cp = 0; cp < p; ++cp) out.fraction[out.flat(t, cp * kbase + s)] = 0.0;
      }
    }
    if (keep_top1)
      for (int cp = 0; cp < p; ++cp) out.fraction[out.flat(t, cp * kbase + top_slot)] = 1.0;
  }
  return out;
}

inline RoutingDecision apply_bands(const RoutingDecision& routing, double t_major, double t_minor,
                                   bool keep_top1) {
  return apply_bands_fn(
      routing, [t_major](int, int) { return t_major; }, [t_minor](int, int) { return t_minor; },
      keep_top1);
}

}  // namespace detail

inline RoutingDecision drop_1t(const RoutingDecision& routing, const DropPolicy& policy) {
  require(policy.kind == DropPolicy::Kind::one_threshold, Status::invalid_argument,
          "drop_1t: policy kind must be one_threshold");
  return detail::apply_bands(routing, policy.t_drop, policy.t_drop, policy.keep_top1);
}

// Requires a routing replayed to P=2 sub-expert indices; normalized scores
// carry over from the original granularity through the replay.
inline RoutingDecision drop_2t(const RoutingDecision& routing, const DropPolicy& policy,
                               const ReconstructionMap& map) {
  require(policy.kind == DropPolicy::Kind::two_threshold, Status::invalid_argument,
          "drop_2t: policy kind must be two_threshold");
  require(policy.t_major <= policy.t_minor, Status::invalid_argument,
          "drop_2t: thresholds out of order");
  require(routing.replay_factor == 2, Status::invalid_state,
          "drop_2t: routing must be replayed with P=2");
  map.validate();
  for (int idx : routing.indices)
    require(idx >= 0 && idx < 2 * map.num_experts, Status::invalid_argument,
            "drop_2t: routing does not match the reconstruction map");
  return detail::apply_bands(routing, policy.t_major, policy.t_minor, policy.keep_top1);
}

struct DropStats {
  long num_tokens = 0;
  double total_routed_units = 0.0;
  double dropped_units = 0.0;
  double shared_units = 0.0;
  double drop_rate = 0.0;
  double total_flops = 0.0;
  double saved_flops = 0.0;
  double retained_flops = 0.0;
};

// Unit accounting: one unit is one full original-expert evaluation
// (6 * d_model * d_ffn FLOPs). A replayed copy weighs 1/P units, so a
// dropped minor half counts 0.5; shared experts always run in full and only
// widen the denominator.
inline DropStats drop_stats(const RoutingDecision& before, const RoutingDecision& after,
                            const MoeConfig& config) {
  before.validate();
  after.validate();
  require(before.num_tokens == after.num_tokens && before.k == after.k &&
              before.replay_factor == after.replay_factor,
          Status::invalid_argument, "drop_stats: routing shapes differ");
  DropStats st;
  st.num_tokens = before.num_tokens;
  const double w = 1.0 / before.replay_factor;
  double retained = 0.0;
  for (size_t i = 0; i < before.fraction.size(); ++i) {
    st.total_routed_units += before.fraction[i] * w;
    retained += after.fraction[i] * w;
  }
  st.dropped_units = st.total_routed_units - retained;
  st.shared_units = static_cast<double>(config.num_shared_experts) * before.num_tokens;
  const double denom = st.total_routed_units + st.shared_units;
  st.drop_rate = denom > 0.0 ? st.dropped_units / denom : 0.0;
  const double unit_flops = 6.0 * config.d_model * config.d_ffn;
  st.total_flops = denom * unit_flops;
  st.saved_flops = st.dropped_units * unit_flops;
  st.retained_flops = st.total_flops - st.saved_flops;
  return st;
}

struct GatingDistributionReport {
  int bins = 0;
  long num_tokens = 0;
  int top_k = 0;
  std::vector<long> selection_counts;  // per gate expert
  std::vector<long> raw_hist;          // activated raw scores, uniform bins on [0,1]
  std::vector<long> norm_hist;         // activated normalized scores
};

template <std::floating_point T>
GatingDistributionReport analyze_gating(const MoeLayer<T>& layer, const Matrix<T>& tokens, int bins) {
  require(bins >= 2, Status::invalid_argument, "analyze_gating: bins must be >= 2");
  require(tokens.rows >= 1, Status::invalid_argument, "analyze_gating: empty token set");
  RoutingDecision r = normalize_topk(topk_route(gate_scores(layer, tokens), layer.config.top_k));
  GatingDistributionReport rep;
  rep.bins = bins;
  rep.num_tokens = tokens.rows;
  rep.top_k = layer.config.top_k;
  rep.selection_counts.assign(static_cast<size_t>(layer.config.num_experts), 0);
  rep.raw_hist.assign(static_cast<size_t>(bins), 0);
  rep.norm_hist.assign(static_cast<size_t>(bins), 0);
  auto bin_of = [bins](double v) {
    int b = static_cast<int>(v * bins);
    return std::clamp(b, 0, bins - 1);
  };
  for (size_t i = 0; i < r.indices.size(); ++i) {
    rep.selection_counts[static_cast<size_t>(r.indices[i])]++;
    rep.raw_hist[static_cast<size_t>(bin_of(r.raw[i]))]++;
    rep.norm_hist[static_cast<size_t>(bin_of(r.normalized[i]))]++;
  }
  return rep;
}

template <std::floating_point T>
ReconstructionMap map_from_layer(const MoeLayer<T>& layer) {
  require(layer.replay_factor == 2, Status::invalid_state,
          "map_from_layer: layer is not split into major/minor halves");
  if (layer.neuron_order.empty())
    return ReconstructionMap::identity(layer.config.num_experts, layer.config.d_ffn);
  ReconstructionMap m;
  m.num_experts = layer.config.num_experts;
  m.d_ffn = layer.config.d_ffn;
  m.major_size = (layer.config.d_ffn + 1) / 2;
  m.order = layer.neuron_order;
  m.validate();
  return m;
}

// Applies the policy to one layer's fresh routing. Returns the dropped
// routing; `pre` (if given) receives the normalized pre-drop routing.
template <std::floating_point T>
RoutingDecision route_and_drop(const MoeLayer<T>& layer, const Matrix<T>& x,
                               const DropPolicy& policy, RoutingDecision* pre = nullptr) {
  RoutingDecision r = ensure_normalized(route_tokens(layer, x), policy);
  if (pre) *pre = r;
  switch (policy.kind) {
    case DropPolicy::Kind::none: return r;
    case DropPolicy::Kind::one_threshold: return drop_1t(r, policy);
    case DropPolicy::Kind::two_threshold: return drop_2t(r, policy, map_from_layer(layer));
  }
  fail(Status::internal, "route_and_drop: unreachable policy kind");
}

// Residual chain with per-layer dropping; later layers see the activations
// produced under the drop. Per-layer stats are appended to `stats`.
template <std::floating_point T>
Matrix<T> model_forward_dropped(const MoeModel<T>& model, const Matrix<T>& x,
                                const DropPolicy& policy, std::vector<DropStats>* stats = nullptr) {
  Matrix<T> cur = x;
  for (const auto& layer : model.layers) {
    RoutingDecision pre;
    RoutingDecision rd = route_and_drop(layer, cur, policy, &pre);
    if (stats) stats->push_back(drop_stats(pre, rd, layer.config));
    Matrix<T> y = moe_forward(layer, cur, rd);
    for (size_t i = 0; i < cur.data.size(); ++i) cur.data[i] += y.data[i];
  }
  return cur;
}

// Mean over tokens of ||a_t - b_t||_2 / ||b_t||_2 (b is the baseline).
template <std::floating_point T>
double mean_relative_error(const Matrix<T>& a, const Matrix<T>& b) {
  require(a.rows == b.rows && a.cols == b.cols, Status::shape_mismatch,
          "mean_relative_error: shape mismatch");
  double acc = 0.0;
  for (int t = 0; t < a.rows; ++t) {
    double diff2 = 0.0, base2 = 0.0;
    for (int j = 0; j < a.cols; ++j) {
      const double d = static_cast<double>(a.at(t, j)) - static_cast<double>(b.at(t, j));
      diff2 += d * d;
      base2 += static_cast<double>(b.at(t, j)) * static_cast<double>(b.at(t, j));
    }
    acc += base2 > 0.0 ? std::sqrt(diff2) / std::sqrt(base2) : std::sqrt(diff2);
  }
  return a.rows > 0 ? acc / a.rows : 0.0;
}

struct SweepRow {
  double threshold = 0.0;
  double drop_rate = 0.0;
  std::vector<double> per_layer_rates;
  double mean_rel_error = 0.0;
};

struct SweepReport {
  std::string policy_kind;
  std::vector<SweepRow> rows;
};

// Per threshold: drop rate (aggregate and per layer) plus mean relative
// output error against the no-drop baseline. 2T policies derive their band
// from each threshold as (t - 0.01, t + 0.01).
template <std::floating_point T>
SweepReport threshold_sweep(const MoeModel<T>& model, const Matrix<T>& tokens,
                            DropPolicy::Kind kind, const std::vector<double>& thresholds,
                            bool keep_top1 = true, bool normalize = true) {
  require(!thresholds.empty(), Status::invalid_argument, "threshold_sweep: empty threshold list");
  require(std::is_sorted(thresholds.begin(), thresholds.end()), Status::invalid_argument,
          "threshold_sweep: thresholds must be sorted ascending");
  require(kind != DropPolicy::Kind::none, Status::invalid_argument,
          "threshold_sweep: pick a drop policy kind");
  model.validate();

  Matrix<T> baseline = model_forward(model, tokens);
  SweepReport rep;
  DropPolicy probe;
  probe.kind = kind;
  rep.policy_kind = probe.kind_name();
  rep.rows.reserve(thresholds.size());
  for (double t : thresholds) {
    DropPolicy policy = kind == DropPolicy::Kind::one_threshold ? DropPolicy::one_t(t, keep_top1)
                                                                : DropPolicy::two_t_from(t, keep_top1);
    policy.normalize = normalize;
    std::vector<DropStats> stats;
    Matrix<T> y = model_forward_dropped(model, tokens, policy, &stats);
    SweepRow row;
    row.threshold = t;
    double dropped = 0.0, denom = 0.0;
    for (const DropStats& s : stats) {
      dropped += s.dropped_units;
      denom += s.total_routed_units + s.shared_units;
      row.per_layer_rates.push_back(s.drop_rate);
    }
    row.drop_rate = denom > 0.0 ? dropped / denom : 0.0;
    row.mean_rel_error = mean_relative_error(y, baseline);
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

}  // namespace dsmoe
