#include "dsmoe/comm_sim.hpp"

#include <algorithm>

namespace dsmoe {

namespace {

struct LinkMatrix {
  int devices;
  std::vector<long> bytes;

  explicit LinkMatrix(int d) : devices(d), bytes(static_cast<size_t>(d) * d, 0) {}

  void add(int from, int to, long amount) {
    if (from == to) return;  // local handoff, no wire traffic
    bytes[static_cast<size_t>(from) * devices + to] += amount;
  }
};

CommPhase make_phase(std::string kind, int participants, LinkMatrix links, double alpha,
                     double beta) {
  CommPhase ph;
  ph.kind = std::move(kind);
  ph.participants = participants;
  const int d = links.devices;
  std::vector<long> in(static_cast<size_t>(d), 0), out(static_cast<size_t>(d), 0);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      const long b = links.bytes[static_cast<size_t>(i) * d + j];
      ph.max_link_bytes = std::max(ph.max_link_bytes, b);
      out[static_cast<size_t>(i)] += b;
      in[static_cast<size_t>(j)] += b;
    }
  for (int i = 0; i < d; ++i)
    ph.max_device_bytes = std::max(ph.max_device_bytes, std::max(in[static_cast<size_t>(i)],
                                                                 out[static_cast<size_t>(i)]));
  ph.time = alpha + static_cast<double>(ph.max_device_bytes) / beta;
  ph.link_bytes = std::move(links.bytes);
  return ph;
}

void finish_report(CommReport& rep) {
  for (const CommPhase& ph : rep.phases) {
    rep.total_time += ph.time;
    for (long b : ph.link_bytes) rep.total_bytes += b;
  }
  rep.launches = static_cast<int>(rep.phases.size());
  std::sort(rep.dispatch_deliveries.begin(), rep.dispatch_deliveries.end());
  std::sort(rep.combine_deliveries.begin(), rep.combine_deliveries.end());
}

}  // namespace

CommReport simulate_etp(const CommScenario& sc) {
  sc.validate();
  const int tp = sc.tp_degree;
  const int dcount = sc.devices();
  auto lead = [tp](int group) { return group * tp; };

  CommReport rep;
  rep.scheme = "etp";

  // Dispatch AlltoAll between group leads: every token routed to a foreign
  // group crosses the lead-to-lead link once.
  LinkMatrix a2a(dcount);
  std::vector<long> group_payload(static_cast<size_t>(sc.ep_degree), 0);  // tokens for the group
  for (long t = 0; t < sc.total_tokens(); ++t) {
    const int src_group = static_cast<int>(t / sc.tokens_per_device) / tp;
    const int dst_group = sc.group_of_expert(sc.routing[static_cast<size_t>(t)]);
    a2a.add(lead(src_group), lead(dst_group), sc.bytes_per_token);
    group_payload[static_cast<size_t>(dst_group)] += sc.bytes_per_token;
    for (int r = 0; r < tp; ++r)
      rep.dispatch_deliveries.push_back({t, sc.routing[static_cast<size_t>(t)], r});
    rep.combine_deliveries.emplace_back(t, sc.routing[static_cast<size_t>(t)]);
  }
  rep.phases.push_back(make_phase("all_to_all", sc.ep_degree, a2a, sc.alpha, sc.beta));

  if (tp > 1) {
    // Chain AllGather: the lead relays the group's full expert payload down
    // the rank chain so every rank can run its shard over every token.
    LinkMatrix ag(dcount);
    for (int g = 0; g < sc.ep_degree; ++g)
      for (int r = 0; r + 1 < tp; ++r)
        ag.add(lead(g) + r, lead(g) + r + 1, group_payload[static_cast<size_t>(g)]);
    rep.phases.push_back(make_phase("all_gather", tp, ag, sc.alpha, sc.beta));

    // Chain ReduceScatter back toward the lead, same payload per hop.
    LinkMatrix rs(dcount);
    for (int g = 0; g < sc.ep_degree; ++g)
      for (int r = tp - 1; r >= 1; --r)
        rs.add(lead(g) + r, lead(g) + r - 1, group_payload[static_cast<size_t>(g)]);
    rep.phases.push_back(make_phase("reduce_scatter", tp, rs, sc.alpha, sc.beta));
  }

  // Combine AlltoAll: expert outputs travel the reverse lead-to-lead links.
  LinkMatrix back(dcount);
  for (long t = 0; t < sc.total_tokens(); ++t) {
    const int src_group = static_cast<int>(t / sc.tokens_per_device) / tp;
    const int dst_group = sc.group_of_expert(sc.routing[static_cast<size_t>(t)]);
    back.add(lead(dst_group), lead(src_group), sc.bytes_per_token);
  }
  rep.phases.push_back(make_phase("all_to_all", sc.ep_degree, back, sc.alpha, sc.beta));

  finish_report(rep);
  return rep;
}

CommReport simulate_setp(const CommScenario& sc) {
  sc.validate();
  const int tp = sc.tp_degree;
  const int dcount = sc.devices();

  CommReport rep;
  rep.scheme = "setp";

  // Single dispatch AlltoAll over every device: a token reaches each of the
  // tp hosts of its expert's partitions directly.
  LinkMatrix a2a(dcount);
  LinkMatrix back(dcount);
  for (long t = 0; t < sc.total_tokens(); ++t) {
    const int src = static_cast<int>(t / sc.tokens_per_device);
    const int e = sc.routing[static_cast<size_t>(t)];
    const int dst_group = sc.group_of_expert(e);
    for (int r = 0; r < tp; ++r) {
      const int dst = dst_group * tp + r;
      a2a.add(src, dst, sc.bytes_per_token);
      back.add(dst, src, sc.bytes_per_token);
      rep.dispatch_deliveries.push_back({t, e, r});
    }
    rep.combine_deliveries.emplace_back(t, e);
  }
  rep.phases.push_back(make_phase("all_to_all", dcount, a2a, sc.alpha, sc.beta));
  rep.phases.push_back(make_phase("all_to_all", dcount, back, sc.alpha, sc.beta));

  finish_report(rep);
  return rep;
}

ComparisonReport compare_schemes(const CommScenario& sc) {
  CommReport etp = simulate_etp(sc);
  CommReport setp = simulate_setp(sc);
  ComparisonReport cmp;
  cmp.etp_time = etp.total_time;
  cmp.setp_time = setp.total_time;
  cmp.etp_launches = etp.launches;
  cmp.setp_launches = setp.launches;
  require(etp.total_time > 0.0 && setp.total_time > 0.0, Status::invalid_argument,
          "compare_schemes: degenerate scenario with zero modeled time; use alpha > 0");
  const double input_bytes =
      static_cast<double>(sc.tokens_per_device) * static_cast<double>(sc.bytes_per_token);
  cmp.etp_bandwidth = input_bytes / etp.total_time;
  cmp.setp_bandwidth = input_bytes / setp.total_time;
  cmp.improvement_pct = (cmp.setp_bandwidth - cmp.etp_bandwidth) / cmp.etp_bandwidth * 100.0;
  return cmp;
}

std::vector<CommSweepRow> sweep_comm(CommScenario scenario, const std::vector<long>& sizes) {
  require(!sizes.empty(), Status::invalid_argument, "sweep_comm: empty size list");
  std::vector<CommSweepRow> rows;
  rows.reserve(sizes.size());
  for (long s : sizes) {
    require(s >= 1, Status::invalid_argument, "sweep_comm: sizes must be >= 1");
    scenario.bytes_per_token = s;
    ComparisonReport cmp = compare_schemes(scenario);
    rows.push_back({s, cmp.etp_bandwidth, cmp.setp_bandwidth, cmp.improvement_pct});
  }
  return rows;
}

}  // namespace dsmoe
