#pragma once

#include <compare>
#include <string>
#include <utility>
#include <vector>

#include "dsmoe/error.hpp"

namespace dsmoe {

// ep_degree * tp_degree devices, id = group * tp + rank. Token t lives on
// device t / tokens_per_device; experts are assigned to EP groups in
// contiguous blocks of num_experts / ep_degree.
struct CommScenario {
  int ep_degree = 1;
  int tp_degree = 1;
  int tokens_per_device = 0;
  long bytes_per_token = 0;
  double alpha = 0.0;  // seconds per collective launch
  double beta = 1.0;   // bytes per second per link
  int num_experts = 0;
  std::vector<int> routing;  // token -> original expert

  int devices() const { return ep_degree * tp_degree; }
  long total_tokens() const { return static_cast<long>(devices()) * tokens_per_device; }
  int group_of_expert(int e) const { return e / (num_experts / ep_degree); }

  void validate() const {
    require(ep_degree >= 1 && tp_degree >= 1, Status::invalid_argument,
            "comm scenario: degrees must be >= 1");
    require(tokens_per_device >= 1 && bytes_per_token >= 1, Status::invalid_argument,
            "comm scenario: tokens and bytes per token must be >= 1");
    require(alpha >= 0.0 && beta > 0.0, Status::invalid_argument,
            "comm scenario: alpha must be >= 0 and beta > 0");
    require(num_experts >= ep_degree && num_experts % ep_degree == 0, Status::invalid_argument,
            "comm scenario: num_experts must be a positive multiple of ep_degree");
    require(static_cast<long>(routing.size()) == total_tokens(), Status::invalid_argument,
            "comm scenario: routing must cover every token");
    for (int e : routing)
      require(e >= 0 && e < num_experts, Status::invalid_argument,
              "comm scenario: routed expert out of range");
  }
};

struct CommPhase {
  std::string kind;  // all_to_all | all_gather | reduce_scatter
  int participants = 0;
  std::vector<long> link_bytes;  // devices x devices, row-major, diagonal zero
  long max_link_bytes = 0;
  long max_device_bytes = 0;  // max over devices of max(ingress, egress)
  double time = 0.0;          // alpha + max_device_bytes / beta
};

// A token reaching the host of one shard of its expert during dispatch.
struct Delivery {
  long token = 0;
  int expert = 0;
  int shard = 0;
  auto operator<=>(const Delivery&) const = default;
};

struct CommReport {
  std::string scheme;  // etp | setp
  std::vector<CommPhase> phases;
  int launches = 0;
  double total_time = 0.0;
  long total_bytes = 0;
  std::vector<Delivery> dispatch_deliveries;             // sorted
  std::vector<std::pair<long, int>> combine_deliveries;  // (token, expert), sorted
};

struct ComparisonReport {
  double etp_time = 0.0;
  double setp_time = 0.0;
  double etp_bandwidth = 0.0;  // input bytes per device / total time
  double setp_bandwidth = 0.0;
  double improvement_pct = 0.0;
  int etp_launches = 0;
  int setp_launches = 0;
};

struct CommSweepRow {
  long bytes_per_token = 0;
  double etp_bw = 0.0;
  double setp_bw = 0.0;
  double improvement_pct = 0.0;
};

// Dispatch: AlltoAll among the EP group leads, then a chain AllGather inside
// each TP group. Combine: chain ReduceScatter, then AlltoAll back. The
// AllGather/ReduceScatter phases vanish at tp_degree == 1.
CommReport simulate_etp(const CommScenario& scenario);

// Dispatch and combine are each one AlltoAll over all EP x TP devices; every
// token goes directly to the tp_degree hosts of its expert's partitions.
CommReport simulate_setp(const CommScenario& scenario);

ComparisonReport compare_schemes(const CommScenario& scenario);

// Reruns the comparison with bytes_per_token swept over `sizes`.
std::vector<CommSweepRow> sweep_comm(CommScenario scenario, const std::vector<long>& sizes);

}  // namespace dsmoe
