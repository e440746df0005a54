#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "dsmoe/io.hpp"
#include "dsmoe/reconstruct.hpp"
#include "dsmoe/rng.hpp"
#include "oracles.hpp"

using dsmoe::ImportanceProfile;
using dsmoe::Matrix;
using dsmoe::Metric;
using dsmoe::MoeConfig;
using dsmoe::MoeLayer;
using dsmoe::RoutingDecision;

namespace {

MoeConfig tiny_config() {
  MoeConfig c;
  c.d_model = 6;
  c.d_ffn = 4;
  c.num_experts = 3;
  c.top_k = 2;
  return c;
}

MoeConfig desk_config() {
  MoeConfig c;
  c.d_model = 16;
  c.d_ffn = 24;
  c.num_experts = 4;
  c.top_k = 2;
  return c;
}

}  // namespace

TEST_CASE("importance matches a scalar recount on a tiny fixture") {
  MoeLayer<double> layer = dsmoe::generate_synthetic<double>(tiny_config(), 8, 1.0);
  Matrix<double> calib = dsmoe::generate_tokens<double>(3, 6, 14);
  RoutingDecision r = dsmoe::route_tokens(layer, calib);

  for (Metric metric : {Metric::gate, Metric::abs_gate, Metric::gate_up, Metric::abs_gate_up}) {
    ImportanceProfile prof = dsmoe::profile_importance(layer, calib, r, metric);
    std::vector<std::vector<double>> want(3, std::vector<double>(4, 0.0));
    for (int t = 0; t < 3; ++t)
      for (int j = 0; j < r.k; ++j) {
        const int e = r.indices[r.flat(t, j)];
        const auto& ex = layer.experts[static_cast<size_t>(e)];
        for (int n = 0; n < 4; ++n) {
          double g = 0.0, u = 0.0;
          for (int kk = 0; kk < 6; ++kk) {
            g += calib.at(t, kk) * ex.w1.at(kk, n);
            u += calib.at(t, kk) * ex.w3.at(kk, n);
          }
          const double sg = oracle::swish(g);
          double v = 0.0;
          if (metric == Metric::gate) v = sg;
          if (metric == Metric::abs_gate) v = std::fabs(sg);
          if (metric == Metric::gate_up) v = sg * u;
          if (metric == Metric::abs_gate_up) v = std::fabs(sg * u);
          want[static_cast<size_t>(e)][static_cast<size_t>(n)] += v;
        }
      }
    for (int e = 0; e < 3; ++e)
      for (int n = 0; n < 4; ++n)
        CHECK(prof.values[static_cast<size_t>(e)][static_cast<size_t>(n)] ==
              doctest::Approx(want[static_cast<size_t>(e)][static_cast<size_t>(n)])
                  .epsilon(1e-12));
  }
}

TEST_CASE("only routed tokens contribute") {
  MoeLayer<double> layer = dsmoe::generate_synthetic<double>(tiny_config(), 9, 1.0);
  Matrix<double> calib = dsmoe::generate_tokens<double>(16, 6, 2);
  RoutingDecision r = dsmoe::route_tokens(layer, calib);

  // force every token onto experts 0 and 1: expert 2 must stay all-zero
  for (int t = 0; t < r.num_tokens; ++t) {
    r.indices[r.flat(t, 0)] = 0;
    r.indices[r.flat(t, 1)] = 1;
  }
  ImportanceProfile prof = dsmoe::profile_importance(layer, calib, r, Metric::abs_gate);
  for (int n = 0; n < 4; ++n) CHECK(prof.values[2][static_cast<size_t>(n)] == 0.0);
  double sum01 = 0.0;
  for (int e = 0; e < 2; ++e)
    for (double v : prof.values[static_cast<size_t>(e)]) sum01 += v;
  CHECK(sum01 > 0.0);
}

TEST_CASE("abs_gate dominates gate pointwise") {
  MoeLayer<double> layer = dsmoe::generate_synthetic<double>(desk_config(), 4, 1.0);
  Matrix<double> calib = dsmoe::generate_tokens<double>(48, 16, 27);
  RoutingDecision r = dsmoe::route_tokens(layer, calib);
  ImportanceProfile pg = dsmoe::profile_importance(layer, calib, r, Metric::gate);
  ImportanceProfile pa = dsmoe::profile_importance(layer, calib, r, Metric::abs_gate);
  for (size_t e = 0; e < pg.values.size(); ++e)
    for (size_t n = 0; n < pg.values[e].size(); ++n)
      CHECK(pa.values[e][n] >= std::fabs(pg.values[e][n]) - 1e-12);
}

TEST_CASE("profiles are additive over batch splits") {
  MoeLayer<double> layer = dsmoe::generate_synthetic<double>(tiny_config(), 10, 1.0);
  Matrix<double> calib = dsmoe::generate_tokens<double>(10, 6, 8);
  RoutingDecision r = dsmoe::route_tokens(layer, calib);

  Matrix<double> head(6, 6), tail(4, 6);
  std::copy_n(calib.data.begin(), 36, head.data.begin());
  std::copy_n(calib.data.begin() + 36, 24, tail.data.begin());
  ImportanceProfile all = dsmoe::profile_importance(layer, calib, r, Metric::gate_up);
  ImportanceProfile ph =
      dsmoe::profile_importance(layer, head, dsmoe::route_tokens(layer, head), Metric::gate_up);
  ImportanceProfile pt =
      dsmoe::profile_importance(layer, tail, dsmoe::route_tokens(layer, tail), Metric::gate_up);
  for (size_t e = 0; e < all.values.size(); ++e)
    for (size_t n = 0; n < all.values[e].size(); ++n)
      CHECK(all.values[e][n] ==
            doctest::Approx(ph.values[e][n] + pt.values[e][n]).epsilon(1e-12));
}

TEST_CASE("map ordering is stable descending") {
  ImportanceProfile prof;
  prof.metric = Metric::abs_gate;
  prof.num_experts = 1;
  prof.d_ffn = 6;
  prof.token_count = 1;
  prof.values = {{0.3, 0.9, 0.3, 0.1, 0.9, 0.5}};
  dsmoe::ReconstructionMap map = dsmoe::build_reconstruction_map(prof);
  CHECK(map.order[0] == std::vector<int>{1, 4, 5, 0, 2, 3});
  CHECK(map.major_size == 3);
  map.validate();
}

TEST_CASE("uniform importance keeps the natural order and equals P=2 partial") {
  MoeLayer<double> layer = dsmoe::generate_synthetic<double>(desk_config(), 12, 1.0);
  ImportanceProfile uniform;
  uniform.metric = Metric::abs_gate;
  uniform.num_experts = 4;
  uniform.d_ffn = 24;
  uniform.token_count = 1;
  uniform.values.assign(4, std::vector<double>(24, 1.0));

  auto [recon, spec, map] = dsmoe::reconstruct_experts(layer, uniform);
  std::vector<int> natural(24);
  std::iota(natural.begin(), natural.end(), 0);
  for (const auto& o : map.order) CHECK(o == natural);

  auto [part, pspec] = dsmoe::partial_transform(layer, 2);
  for (size_t e = 0; e < part.experts.size(); ++e) {
    CHECK(dsmoe::bit_equal(recon.experts[e].w1, part.experts[e].w1));
    CHECK(dsmoe::bit_equal(recon.experts[e].w3, part.experts[e].w3));
    CHECK(dsmoe::bit_equal(recon.experts[e].w2, part.experts[e].w2));
  }
  CHECK(recon.replay_factor == 2);
  CHECK(recon.lineage == dsmoe::Lineage::reconstructed);
  CHECK(spec.chunk_cols == 12);
}

TEST_CASE("reversed importance mirrors the permutation") {
  MoeLayer<double> layer = dsmoe::generate_synthetic<double>(tiny_config(), 31, 1.0);
  ImportanceProfile rev;
  rev.metric = Metric::abs_gate;
  rev.num_experts = 3;
  rev.d_ffn = 4;
  rev.token_count = 1;
  rev.values.assign(3, {0.1, 0.2, 0.3, 0.4});

  auto [recon, spec, map] = dsmoe::reconstruct_experts(layer, rev);
  for (const auto& o : map.order) CHECK(o == std::vector<int>{3, 2, 1, 0});
  // major block of expert 0 = original columns {3, 2}
  CHECK(recon.experts[0].w1.at(0, 0) == layer.experts[0].w1.at(0, 3));
  CHECK(recon.experts[0].w1.at(0, 1) == layer.experts[0].w1.at(0, 2));
  // minor block of expert 0 = original columns {1, 0}
  CHECK(recon.experts[1].w2.at(0, 0) == layer.experts[0].w2.at(1, 0));
  CHECK(recon.experts[1].w2.at(1, 0) == layer.experts[0].w2.at(0, 0));
  CHECK(recon.experts[1].width() == 2);
  // major block of expert 1 starts at sub-expert index 2
  CHECK(recon.experts[2].w1.at(0, 0) == layer.experts[1].w1.at(0, 3));
}

TEST_CASE("reconstruction preserves the no-drop forward") {
  MoeLayer<double> layer = dsmoe::generate_synthetic<double>(desk_config(), 18, 1.0);
  Matrix<double> calib = dsmoe::generate_tokens<double>(64, 16, 90);
  RoutingDecision r = dsmoe::route_tokens(layer, calib);
  ImportanceProfile prof = dsmoe::profile_importance(layer, calib, r, Metric::abs_gate);
  auto [recon, spec, map] = dsmoe::reconstruct_experts(layer, prof);

  Matrix<double> probe = dsmoe::generate_tokens<double>(32, 16, 123);
  dsmoe::EquivalenceReport rep = dsmoe::verify_equivalence(layer, recon, probe, 1e-10);
  CHECK(rep.pass);

  // permutation safety on 20 random orders: forward stays put
  dsmoe::Xoshiro256pp rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    ImportanceProfile noise = prof;
    for (auto& ev : noise.values)
      for (double& v : ev) v = rng.next_unit();
    auto [rl, rs, rm] = dsmoe::reconstruct_experts(layer, noise);
    dsmoe::EquivalenceReport rr = dsmoe::verify_equivalence(layer, rl, probe, 1e-12);
    CHECK(rr.pass);
  }
}

TEST_CASE("reconstruct rejects mismatched profiles and split layers") {
  MoeLayer<double> layer = dsmoe::generate_synthetic<double>(tiny_config(), 3, 1.0);
  ImportanceProfile wrong;
  wrong.metric = Metric::gate;
  wrong.num_experts = 2;
  wrong.d_ffn = 4;
  wrong.token_count = 1;
  wrong.values.assign(2, std::vector<double>(4, 1.0));
  CHECK_THROWS_AS(dsmoe::reconstruct_experts(layer, wrong), dsmoe::Error);

  ImportanceProfile ok;
  ok.metric = Metric::gate;
  ok.num_experts = 3;
  ok.d_ffn = 4;
  ok.token_count = 1;
  ok.values.assign(3, std::vector<double>(4, 1.0));
  auto [recon, spec, map] = dsmoe::reconstruct_experts(layer, ok);
  CHECK_THROWS_AS(dsmoe::reconstruct_experts(recon, ok), dsmoe::Error);
  Matrix<double> calib = dsmoe::generate_tokens<double>(4, 6, 1);
  CHECK_THROWS_AS(
      dsmoe::profile_importance(recon, calib, dsmoe::route_tokens(recon, calib), Metric::gate),
      dsmoe::Error);
}

TEST_CASE("metric names round-trip") {
  for (Metric m : {Metric::gate, Metric::abs_gate, Metric::gate_up, Metric::abs_gate_up})
    CHECK(dsmoe::metric_from_name(dsmoe::metric_name(m)) == m);
  CHECK(dsmoe::metric_from_name("abs-gate-up") == Metric::abs_gate_up);
  CHECK_THROWS_AS(dsmoe::metric_from_name("bogus"), dsmoe::Error);
}
