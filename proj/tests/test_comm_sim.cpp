#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <map>
#include <vector>

#include "doctest.h"
#include "dsmoe/comm_sim.hpp"
#include "dsmoe/rng.hpp"

using dsmoe::CommReport;
using dsmoe::CommScenario;

namespace {

CommScenario tiny_scenario() {
  // 2 EP groups x 2 TP ranks, one expert per group, two tokens per device,
  // alternating routing: every device sends one token to each expert.
  CommScenario sc;
  sc.ep_degree = 2;
  sc.tp_degree = 2;
  sc.tokens_per_device = 2;
  sc.bytes_per_token = 50;
  sc.alpha = 1e-3;
  sc.beta = 1e6;
  sc.num_experts = 2;
  sc.routing = {0, 1, 0, 1, 0, 1, 0, 1};
  return sc;
}

long link(const dsmoe::CommPhase& ph, int devices, int from, int to) {
  return ph.link_bytes[static_cast<size_t>(from) * devices + to];
}

CommScenario random_scenario(int ep, int tp, int experts, uint64_t seed) {
  CommScenario sc;
  sc.ep_degree = ep;
  sc.tp_degree = tp;
  sc.tokens_per_device = 8;
  sc.bytes_per_token = 1000;
  sc.alpha = 1e-4;
  sc.beta = 1e8;
  sc.num_experts = experts;
  dsmoe::Xoshiro256pp rng(seed);
  sc.routing.resize(static_cast<size_t>(sc.total_tokens()));
  for (int& e : sc.routing) e = static_cast<int>(rng.next_u64() % experts);
  return sc;
}

}  // namespace

TEST_CASE("etp phase table on the 2x2 fixture") {
  CommScenario sc = tiny_scenario();
  CommReport rep = dsmoe::simulate_etp(sc);

  REQUIRE(rep.phases.size() == 4);
  CHECK(rep.launches == 4);
  CHECK(rep.scheme == "etp");
  CHECK(rep.phases[0].kind == "all_to_all");
  CHECK(rep.phases[1].kind == "all_gather");
  CHECK(rep.phases[2].kind == "reduce_scatter");
  CHECK(rep.phases[3].kind == "all_to_all");

  // dispatch: leads 0 and 2 exchange the two foreign-bound tokens per group
  CHECK(link(rep.phases[0], 4, 0, 2) == 100);
  CHECK(link(rep.phases[0], 4, 2, 0) == 100);
  CHECK(rep.phases[0].max_device_bytes == 100);
  CHECK(rep.phases[0].max_link_bytes == 100);

  // each group gathers its full 4-token payload down the rank chain
  CHECK(link(rep.phases[1], 4, 0, 1) == 200);
  CHECK(link(rep.phases[1], 4, 2, 3) == 200);
  CHECK(rep.phases[1].max_device_bytes == 200);

  CHECK(link(rep.phases[2], 4, 1, 0) == 200);
  CHECK(link(rep.phases[2], 4, 3, 2) == 200);
  CHECK(rep.phases[2].max_device_bytes == 200);

  CHECK(link(rep.phases[3], 4, 0, 2) == 100);
  CHECK(link(rep.phases[3], 4, 2, 0) == 100);
  CHECK(rep.phases[3].max_device_bytes == 100);

  CHECK(rep.total_bytes == 1200);
  CHECK(rep.total_time == doctest::Approx(4 * 1e-3 + 600.0 / 1e6).epsilon(1e-12));
}

TEST_CASE("setp phase table on the 2x2 fixture") {
  CommScenario sc = tiny_scenario();
  CommReport rep = dsmoe::simulate_setp(sc);

  REQUIRE(rep.phases.size() == 2);
  CHECK(rep.launches == 2);
  CHECK(rep.scheme == "setp");

  // every device sends one local token to its peer rank and one foreign
  // token to both ranks of the other group: 12 live links of one token each
  int live = 0;
  long total = 0;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      const long b = link(rep.phases[0], 4, i, j);
      if (i == j) CHECK(b == 0);
      if (b > 0) ++live;
      total += b;
    }
  CHECK(live == 12);
  CHECK(total == 600);
  CHECK(rep.phases[0].max_device_bytes == 150);
  CHECK(rep.phases[0].max_link_bytes == 50);
  CHECK(rep.phases[1].max_device_bytes == 150);

  CHECK(rep.total_bytes == 1200);
  CHECK(rep.total_time == doctest::Approx(2 * 1e-3 + 300.0 / 1e6).epsilon(1e-12));

  // combine mirrors dispatch
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      CHECK(link(rep.phases[1], 4, i, j) == link(rep.phases[0], 4, j, i));
}

TEST_CASE("comparison favors setp on the fixture and halves the launches") {
  CommScenario sc = tiny_scenario();
  dsmoe::ComparisonReport cmp = dsmoe::compare_schemes(sc);
  CHECK(cmp.etp_launches == 4);
  CHECK(cmp.setp_launches == 2);
  CHECK(cmp.setp_time < cmp.etp_time);
  CHECK(cmp.improvement_pct > 0.0);
  CHECK(cmp.etp_bandwidth ==
        doctest::Approx(2 * 50 / cmp.etp_time).epsilon(1e-12));
}

TEST_CASE("delivery multisets agree between schemes") {
  for (auto [ep, tp, experts] : {std::tuple{2, 4, 2}, {4, 2, 4}, {3, 3, 9}, {2, 2, 8}}) {
    CommScenario sc = random_scenario(ep, tp, experts, 97 + ep * 10 + tp);
    CommReport etp = dsmoe::simulate_etp(sc);
    CommReport setp = dsmoe::simulate_setp(sc);
    CHECK(etp.dispatch_deliveries == setp.dispatch_deliveries);
    CHECK(etp.combine_deliveries == setp.combine_deliveries);
    CHECK(etp.dispatch_deliveries.size() ==
          static_cast<size_t>(sc.total_tokens()) * static_cast<size_t>(tp));
  }
}

TEST_CASE("tp=1 collapses both schemes to the same two alltoalls") {
  CommScenario sc = random_scenario(4, 1, 8, 5);
  CommReport etp = dsmoe::simulate_etp(sc);
  CommReport setp = dsmoe::simulate_setp(sc);
  REQUIRE(etp.phases.size() == 2);
  REQUIRE(setp.phases.size() == 2);
  for (size_t p = 0; p < 2; ++p)
    CHECK(etp.phases[p].link_bytes == setp.phases[p].link_bytes);
  CHECK(etp.total_time == doctest::Approx(setp.total_time).epsilon(1e-15));
}

TEST_CASE("improvement decays as payload grows") {
  CommScenario sc = random_scenario(2, 4, 2, 11);
  std::vector<dsmoe::CommSweepRow> rows =
      dsmoe::sweep_comm(sc, {512, 2048, 8192, 32768, 131072});
  REQUIRE(rows.size() == 5);
  for (size_t i = 1; i < rows.size(); ++i) {
    CHECK(rows[i].improvement_pct < rows[i - 1].improvement_pct);
    CHECK(rows[i].improvement_pct > 0.0);
  }
  CHECK_THROWS_AS(dsmoe::sweep_comm(sc, {}), dsmoe::Error);
  CHECK_THROWS_AS(dsmoe::sweep_comm(sc, {0}), dsmoe::Error);
}

TEST_CASE("zero-traffic scenario still pays launch latency") {
  // all tokens stay in their own group: no bytes move in either scheme at
  // tp == 1... but with tp > 1 ETP still relays the local payload.
  CommScenario sc;
  sc.ep_degree = 2;
  sc.tp_degree = 2;
  sc.tokens_per_device = 4;
  sc.bytes_per_token = 64;
  sc.alpha = 1e-3;
  sc.beta = 1e6;
  sc.num_experts = 2;
  sc.routing.assign(16, 0);
  for (size_t t = 8; t < 16; ++t) sc.routing[t] = 1;  // devices 2,3 route home

  CommReport etp = dsmoe::simulate_etp(sc);
  CHECK(etp.phases[0].max_device_bytes == 0);   // dispatch is all-local
  CHECK(etp.phases[1].max_device_bytes == 512); // gather still moves 8 tokens
  CommReport setp = dsmoe::simulate_setp(sc);
  CHECK(setp.phases[0].max_device_bytes == 256);

  dsmoe::ComparisonReport cmp = dsmoe::compare_schemes(sc);
  CHECK(cmp.setp_time < cmp.etp_time);
}

TEST_CASE("scenario validation") {
  CommScenario sc = tiny_scenario();
  sc.routing.pop_back();
  CHECK_THROWS_AS(sc.validate(), dsmoe::Error);
  sc = tiny_scenario();
  sc.num_experts = 3;  // not a multiple of ep_degree
  CHECK_THROWS_AS(sc.validate(), dsmoe::Error);
  sc = tiny_scenario();
  sc.routing[0] = 9;
  CHECK_THROWS_AS(sc.validate(), dsmoe::Error);
  sc = tiny_scenario();
  sc.beta = 0.0;
  CHECK_THROWS_AS(sc.validate(), dsmoe::Error);
}
