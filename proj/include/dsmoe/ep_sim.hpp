#pragma once

#include <algorithm>
#include <limits>
#include <string>
#include <vector>

#include "dsmoe/dropping.hpp"

namespace dsmoe {

struct Placement {
  enum class Strategy : int { round_robin = 0, contiguous = 1 };
  int devices = 0;
  Strategy strategy = Strategy::contiguous;
  std::vector<int> device_of;  // physical expert index -> device

  void validate() const {
    require(devices >= 1, Status::invalid_argument, "placement: need at least one device");
    require(!device_of.empty(), Status::invalid_state, "placement: no experts mapped");
    for (int d : device_of)
      require(d >= 0 && d < devices, Status::invalid_state, "placement: device id out of range");
  }
};

inline const char* strategy_name(Placement::Strategy s) {
  return s == Placement::Strategy::round_robin ? "round_robin" : "contiguous";
}

inline Placement::Strategy strategy_from_name(const std::string& s) {
  if (s == "round_robin" || s == "round-robin") return Placement::Strategy::round_robin;
  if (s == "contiguous") return Placement::Strategy::contiguous;
  fail(Status::invalid_argument, "unknown placement strategy: " + s);
}

// round_robin: e -> e mod D. contiguous: blocks of E/D consecutive experts
// per device, which keeps sub-experts of one original expert co-resident.
inline Placement place_experts(int num_experts, int devices, Placement::Strategy strategy) {
  require(devices >= 1 && num_experts >= devices, Status::invalid_argument,
          "place_experts: need num_experts >= devices >= 1");
  Placement p;
  p.devices = devices;
  p.strategy = strategy;
  p.device_of.resize(static_cast<size_t>(num_experts));
  if (strategy == Placement::Strategy::round_robin) {
    for (int e = 0; e < num_experts; ++e) p.device_of[static_cast<size_t>(e)] = e % devices;
  } else {
    require(num_experts % devices == 0, Status::invalid_argument,
            "place_experts: contiguous placement needs num_experts divisible by devices");
    const int chunk = num_experts / devices;
    for (int e = 0; e < num_experts; ++e) p.device_of[static_cast<size_t>(e)] = e / chunk;
  }
  return p;
}

// Load in compute units (matching drop_stats): each selection contributes
// fraction / replay_factor, so a fully kept original expert always adds one
// unit no matter how it is split.
inline std::vector<double> device_loads(const RoutingDecision& routing, const Placement& placement) {
  routing.validate();
  placement.validate();
  std::vector<double> loads(static_cast<size_t>(placement.devices), 0.0);
  const double w = 1.0 / routing.replay_factor;
  for (size_t i = 0; i < routing.indices.size(); ++i) {
    const int e = routing.indices[i];
    require(e >= 0 && e < static_cast<int>(placement.device_of.size()), Status::invalid_argument,
            "device_loads: expert " + std::to_string(e) + " has no placement");
    loads[static_cast<size_t>(placement.device_of[static_cast<size_t>(e)])] +=
        routing.fraction[i] * w;
  }
  return loads;
}

// threshold_d = t_max when the device is at or above the ideal balanced
// load, otherwise t_max scaled by load/ideal.
inline std::vector<double> load_aware_thresholds(const std::vector<double>& loads, double t_max) {
  require(t_max > 0.0 && t_max <= 1.0, Status::invalid_argument,
          "load_aware_thresholds: t_max must be in (0, 1]");
  double total = 0.0;
  for (double l : loads) total += l;
  require(total > 0.0, Status::invalid_argument, "load_aware_thresholds: zero total load");
  const double ideal = total / static_cast<double>(loads.size());
  std::vector<double> out(loads.size());
  for (size_t d = 0; d < loads.size(); ++d) {
    const double ratio = loads[d] / ideal;
    out[d] = ratio >= 1.0 ? t_max : t_max * ratio;
  }
  return out;
}

struct EpReport {
  int devices = 0;
  bool load_aware = false;
  std::string policy_kind;
  std::vector<double> pre_loads;
  std::vector<double> post_loads;
  std::vector<double> thresholds;  // applied per-device t_drop
  double ideal_load = 0.0;
  double drop_rate = 0.0;
  double speedup = 1.0;  // max(pre) / max(post)
  DropStats stats;
};

// One simulated MoE step on one batch. Each selection is thresholded with
// the drop threshold of the device owning its block (the major block's
// device when an original expert is split); for 2T policies a device
// threshold T_d keeps the policy's band offsets, (T_d - 0.01, T_d + 0.01)
// under the defaults.
template <std::floating_point T>
std::pair<EpReport, RoutingDecision> simulate_step(const MoeLayer<T>& layer, const Matrix<T>& tokens,
                                                   const Placement& placement,
                                                   const DropPolicy& policy, bool load_aware) {
  layer.validate();
  placement.validate();
  require(static_cast<int>(placement.device_of.size()) == layer.num_physical_experts(),
          Status::invalid_argument, "simulate_step: placement does not cover this layer's experts");
  if (policy.kind == DropPolicy::Kind::two_threshold)
    require(layer.replay_factor == 2, Status::invalid_state,
            "simulate_step: 2T policy needs a layer split into major/minor halves");

  EpReport rep;
  rep.devices = placement.devices;
  rep.load_aware = load_aware;
  rep.policy_kind = policy.kind_name();

  RoutingDecision pre = ensure_normalized(route_tokens(layer, tokens), policy);
  rep.pre_loads = device_loads(pre, placement);
  double total = 0.0;
  for (double l : rep.pre_loads) total += l;
  rep.ideal_load = total / placement.devices;

  RoutingDecision post = pre;
  if (policy.kind == DropPolicy::Kind::none) {
    rep.thresholds.assign(static_cast<size_t>(placement.devices), 0.0);
  } else {
    rep.thresholds = load_aware
                         ? load_aware_thresholds(rep.pre_loads, policy.t_drop)
                         : std::vector<double>(static_cast<size_t>(placement.devices), policy.t_drop);
    const double maj_off =
        policy.kind == DropPolicy::Kind::two_threshold ? policy.t_major - policy.t_drop : 0.0;
    const double min_off =
        policy.kind == DropPolicy::Kind::two_threshold ? policy.t_minor - policy.t_drop : 0.0;
    auto owner_threshold = [&](int t, int s) {
      const int block = pre.indices[pre.flat(t, s)];  // copy 0 = whole or major block
      return rep.thresholds[static_cast<size_t>(placement.device_of[static_cast<size_t>(block)])];
    };
    post = detail::apply_bands_fn(
        pre, [&](int t, int s) { return owner_threshold(t, s) + maj_off; },
        [&](int t, int s) { return owner_threshold(t, s) + min_off; }, policy.keep_top1);
  }

  rep.post_loads = device_loads(post, placement);
  rep.stats = drop_stats(pre, post, layer.config);
  rep.drop_rate = rep.stats.drop_rate;
  const double max_pre = *std::max_element(rep.pre_loads.begin(), rep.pre_loads.end());
  const double max_post = *std::max_element(rep.post_loads.begin(), rep.post_loads.end());
  rep.speedup = max_post > 0.0 ? max_pre / max_post
                               : (max_pre > 0.0 ? std::numeric_limits<double>::infinity() : 1.0);
  return {std::move(rep), std::move(post)};
}

}  // namespace dsmoe
