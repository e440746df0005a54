#include "dsmoe.h"

#include <cstring>
#include <string>
#include <variant>

#include "dsmoe/comm_sim.hpp"
#include "dsmoe/dropping.hpp"
#include "dsmoe/ep_sim.hpp"
#include "dsmoe/io.hpp"
#include "dsmoe/reconstruct.hpp"
#include "dsmoe/reports.hpp"
#include "dsmoe/rng.hpp"
#include "dsmoe/transform.hpp"
#include "json.hpp"

using nlohmann::json;

static_assert(DSMOE_OK == static_cast<int>(dsmoe::Status::ok));
static_assert(DSMOE_E_INVALID_ARGUMENT == static_cast<int>(dsmoe::Status::invalid_argument));
static_assert(DSMOE_E_SHAPE_MISMATCH == static_cast<int>(dsmoe::Status::shape_mismatch));
static_assert(DSMOE_E_INVALID_STATE == static_cast<int>(dsmoe::Status::invalid_state));
static_assert(DSMOE_E_IO == static_cast<int>(dsmoe::Status::io_error));
static_assert(DSMOE_E_BAD_MAGIC == static_cast<int>(dsmoe::Status::bad_magic));
static_assert(DSMOE_E_TRUNCATED == static_cast<int>(dsmoe::Status::truncated));
static_assert(DSMOE_E_SCHEMA == static_cast<int>(dsmoe::Status::schema_error));
static_assert(DSMOE_E_INTERNAL == static_cast<int>(dsmoe::Status::internal));

struct dsmoe_model {
  dsmoe::ModelVariant v;
};

namespace {

thread_local std::string g_last_error;

template <class F>
int guarded(F&& fn) noexcept {
  try {
    fn();
    g_last_error.clear();
    return DSMOE_OK;
  } catch (const dsmoe::Error& e) {
    g_last_error = e.what();
    return static_cast<int>(e.code());
  } catch (const json::exception& e) {
    // json access errors here always stem from caller-supplied documents;
    // everything the library emits itself round-trips.
    g_last_error = e.what();
    return DSMOE_E_INVALID_ARGUMENT;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return DSMOE_E_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return DSMOE_E_INTERNAL;
  }
}

char* dup_string(const std::string& s) {
  char* out = new char[s.size() + 1];
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void set_out(char** slot, const std::string& s) {
  if (slot) *slot = dup_string(s);
}

void check(bool cond, const char* msg) {
  dsmoe::require(cond, dsmoe::Status::invalid_argument, msg);
}

json parse_json(const char* text, const char* what) {
  check(text != nullptr, "missing JSON argument");
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    dsmoe::fail(dsmoe::Status::invalid_argument,
                std::string(what) + ": invalid JSON: " + e.what());
  }
}

dsmoe::MoeConfig config_from(const json& j) {
  dsmoe::MoeConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.d_ffn = j.at("d_ffn").get<int>();
  c.num_experts = j.at("num_experts").get<int>();
  c.top_k = j.at("top_k").get<int>();
  c.num_shared_experts = j.value("num_shared_experts", 0);
  c.gate_prenormalized = j.value("gate_prenormalized", false);
  c.validate();
  return c;
}

dsmoe::DropPolicy policy_from(const json& j, bool gate_prenormalized) {
  const std::string kind = j.value("kind", "none");
  dsmoe::DropPolicy p;
  if (kind == "none") {
    p = dsmoe::DropPolicy::none_policy();
  } else if (kind == "1t") {
    p = dsmoe::DropPolicy::one_t(j.at("t_drop").get<double>());
  } else if (kind == "2t") {
    const double t = j.at("t_drop").get<double>();
    p = dsmoe::DropPolicy::two_t(t, j.value("t_major", t - 0.01), j.value("t_minor", t + 0.01));
  } else {
    dsmoe::fail(dsmoe::Status::invalid_argument, "policy: unknown kind: " + kind);
  }
  p.keep_top1 = j.value("keep_top1", true);
  p.normalize = j.value("normalize", !gate_prenormalized);
  return p;
}

dsmoe::CommScenario scenario_from(const json& j) {
  dsmoe::CommScenario sc;
  sc.ep_degree = j.at("ep").get<int>();
  sc.tp_degree = j.at("tp").get<int>();
  sc.tokens_per_device = j.at("tokens_per_device").get<int>();
  sc.bytes_per_token = j.at("bytes_per_token").get<long>();
  sc.alpha = j.at("alpha").get<double>();
  sc.beta = j.at("beta").get<double>();
  sc.num_experts = j.value("num_experts", sc.ep_degree);
  const uint64_t seed = j.value("seed", uint64_t{1});
  check(sc.ep_degree >= 1 && sc.tp_degree >= 1 && sc.tokens_per_device >= 1,
        "scenario: degrees and tokens_per_device must be >= 1");
  check(sc.num_experts >= 1, "scenario: num_experts must be >= 1");
  dsmoe::Xoshiro256pp rng(seed);
  sc.routing.resize(static_cast<size_t>(sc.total_tokens()));
  for (int& e : sc.routing) e = static_cast<int>(rng.next_u64() % sc.num_experts);
  sc.validate();
  return sc;
}

template <class F>
decltype(auto) with_model(const dsmoe_model* m, F&& fn) {
  check(m != nullptr, "model handle is null");
  return std::visit(std::forward<F>(fn), m->v);
}

template <std::floating_point T>
json layer_info(const dsmoe::MoeLayer<T>& l) {
  return json{{"lineage", dsmoe::lineage_name(l.lineage)},
              {"replay_factor", l.replay_factor},
              {"physical_experts", l.num_physical_experts()},
              {"block_width", l.experts.empty() ? 0 : l.experts[0].width()},
              {"reconstructed", !l.neuron_order.empty()}};
}

// Full-model scaled-residual comparison, mirroring verify_equivalence on a
// single layer.
template <std::floating_point T>
dsmoe::EquivalenceReport verify_models(const dsmoe::MoeModel<T>& a, const dsmoe::MoeModel<T>& b,
                                       const dsmoe::Matrix<T>& tokens, double tol) {
  dsmoe::Matrix<T> ya = dsmoe::model_forward(a, tokens);
  dsmoe::Matrix<T> yb = dsmoe::model_forward(b, tokens);
  dsmoe::require(ya.rows == yb.rows && ya.cols == yb.cols, dsmoe::Status::shape_mismatch,
                 "verify: model outputs differ in shape");
  dsmoe::EquivalenceReport rep;
  rep.tol = tol;
  double scale = 0.0;
  for (size_t i = 0; i < ya.data.size(); ++i) {
    const double da = static_cast<double>(ya.data[i]);
    const double db = static_cast<double>(yb.data[i]);
    rep.max_abs_diff = std::max(rep.max_abs_diff, std::abs(da - db));
    scale = std::max({scale, std::abs(da), std::abs(db)});
  }
  rep.max_rel_diff = scale > 0.0 ? rep.max_abs_diff / scale : rep.max_abs_diff;
  rep.pass = rep.max_rel_diff <= tol;
  return rep;
}

}  // namespace

extern "C" {

const char* dsmoe_version(void) { return "1.0.0"; }

const char* dsmoe_status_name(int code) {
  return dsmoe::status_name(static_cast<dsmoe::Status>(code));
}

const char* dsmoe_last_error(void) { return g_last_error.c_str(); }

void dsmoe_string_free(char* s) { delete[] s; }

void dsmoe_model_free(dsmoe_model* m) { delete m; }

int dsmoe_generate_model(const char* config_json, uint64_t seed, double scale, int scalar_width,
                         dsmoe_model** out) {
  return guarded([&] {
    check(out != nullptr, "output pointer is null");
    const json j = parse_json(config_json, "config");
    const dsmoe::MoeConfig cfg = config_from(j);
    const int num_layers = j.value("num_layers", 1);
    check(scalar_width == 4 || scalar_width == 8, "scalar_width must be 4 or 8");
    if (scalar_width == 4)
      *out = new dsmoe_model{dsmoe::generate_model<float>(cfg, num_layers, seed, scale)};
    else
      *out = new dsmoe_model{dsmoe::generate_model<double>(cfg, num_layers, seed, scale)};
  });
}

int dsmoe_generate_tokens(int64_t rows, int64_t cols, uint64_t seed, double scale,
                          const char* path) {
  return guarded([&] {
    check(path != nullptr, "path is null");
    dsmoe::Matrix<float> m =
        dsmoe::generate_tokens<float>(static_cast<long>(rows), static_cast<int>(cols), seed, scale);
    dsmoe::save_tokens(m, path);
  });
}

int dsmoe_model_load(const char* path, dsmoe_model** out) {
  return guarded([&] {
    check(path != nullptr && out != nullptr, "path or output pointer is null");
    *out = new dsmoe_model{dsmoe::load_model(path)};
  });
}

int dsmoe_model_save(const dsmoe_model* m, const char* path) {
  return guarded([&] {
    check(path != nullptr, "path is null");
    with_model(m, [&](const auto& model) { dsmoe::save_model(model, path); });
  });
}

int dsmoe_model_info(const dsmoe_model* m, char** json_out) {
  return guarded([&] {
    check(json_out != nullptr, "output pointer is null");
    with_model(m, [&](const auto& model) {
      model.validate();
      json layers = json::array();
      for (const auto& l : model.layers) layers.push_back(layer_info(l));
      const dsmoe::MoeConfig& c = model.config();
      json info{{"scalar_width", dsmoe::variant_width(m->v)},
                {"num_layers", model.num_layers()},
                {"config", json::parse(dsmoe::json_text(c))},
                {"layers", std::move(layers)}};
      set_out(json_out, info.dump(2) + "\n");
    });
  });
}

int dsmoe_transform(const dsmoe_model* m, const char* mode, int p, dsmoe_model** out) {
  return guarded([&] {
    check(mode != nullptr && out != nullptr, "mode or output pointer is null");
    const std::string ms = mode;
    check(ms == "complete" || ms == "partial", "mode must be complete or partial");
    const auto md = ms == "complete" ? dsmoe::PartitionSpec::Mode::complete
                                     : dsmoe::PartitionSpec::Mode::partial;
    with_model(m, [&](const auto& model) {
      *out = new dsmoe_model{dsmoe::transform_model(model, md, p)};
    });
  });
}

int dsmoe_reverse_partial(const dsmoe_model* m, dsmoe_model** out) {
  return guarded([&] {
    check(out != nullptr, "output pointer is null");
    with_model(m, [&](const auto& model) {
      using ModelT = std::decay_t<decltype(model)>;
      ModelT rev;
      for (const auto& layer : model.layers) {
        dsmoe::require(layer.replay_factor > 1, dsmoe::Status::invalid_state,
                       "reverse: model does not carry a partial transformation");
        dsmoe::PartitionSpec spec;
        spec.factor = layer.replay_factor;
        spec.mode = dsmoe::PartitionSpec::Mode::partial;
        spec.num_experts = layer.config.num_experts;
        spec.d_ffn = layer.config.d_ffn;
        spec.chunk_cols = layer.neuron_order.empty()
                              ? layer.config.d_ffn / layer.replay_factor
                              : (layer.config.d_ffn + 1) / 2;
        rev.layers.push_back(dsmoe::reverse_partial(layer, spec));
      }
      *out = new dsmoe_model{std::move(rev)};
    });
  });
}

int dsmoe_reconstruct(const dsmoe_model* m, const char* tokens_path, const char* metric,
                      dsmoe_model** out, char** profiles_json_out) {
  return guarded([&] {
    check(tokens_path != nullptr && metric != nullptr && out != nullptr,
          "tokens_path, metric, or output pointer is null");
    const dsmoe::Metric mt = dsmoe::metric_from_name(metric);
    with_model(m, [&](const auto& model) {
      using ModelT = std::decay_t<decltype(model)>;
      using Scalar = std::decay_t<decltype(model.layers[0].gate.data[0])>;
      auto calib = dsmoe::load_tokens<Scalar>(tokens_path);
      ModelT rec;
      json profiles = json::array();
      dsmoe::Matrix<Scalar> cur = calib;
      for (int l = 0; l < model.num_layers(); ++l) {
        const auto& layer = model.layers[static_cast<size_t>(l)];
        dsmoe::RoutingDecision r = dsmoe::route_tokens(layer, cur);
        dsmoe::ImportanceProfile prof = dsmoe::profile_importance(layer, cur, r, mt, l);
        auto [rl, spec, map] = dsmoe::reconstruct_experts(layer, prof);
        (void)spec;
        (void)map;
        rec.layers.push_back(std::move(rl));
        profiles.push_back(json::parse(dsmoe::json_text(prof)));
        dsmoe::Matrix<Scalar> y = dsmoe::moe_forward(layer, cur, r);
        for (size_t i = 0; i < cur.data.size(); ++i) cur.data[i] += y.data[i];
      }
      *out = new dsmoe_model{std::move(rec)};
      set_out(profiles_json_out, json{{"profiles", std::move(profiles)}}.dump(2) + "\n");
    });
  });
}

int dsmoe_verify_equivalence(const dsmoe_model* a, const dsmoe_model* b, const char* tokens_path,
                             double tol, char** json_out) {
  return guarded([&] {
    check(b != nullptr && tokens_path != nullptr, "model or tokens_path is null");
    with_model(a, [&](const auto& ma) {
      using ModelT = std::decay_t<decltype(ma)>;
      using Scalar = std::decay_t<decltype(ma.layers[0].gate.data[0])>;
      dsmoe::require(std::holds_alternative<ModelT>(b->v), dsmoe::Status::invalid_argument,
                     "verify: models have different scalar widths");
      auto tokens = dsmoe::load_tokens<Scalar>(tokens_path);
      dsmoe::EquivalenceReport rep = verify_models(ma, std::get<ModelT>(b->v), tokens, tol);
      set_out(json_out, dsmoe::json_text(rep));
    });
  });
}

int dsmoe_infer(const dsmoe_model* m, const char* tokens_path, const char* policy_json,
                char** json_out) {
  return guarded([&] {
    check(tokens_path != nullptr && json_out != nullptr, "tokens_path or output pointer is null");
    with_model(m, [&](const auto& model) {
      using Scalar = std::decay_t<decltype(model.layers[0].gate.data[0])>;
      model.validate();
      const dsmoe::DropPolicy policy =
          policy_from(parse_json(policy_json, "policy"), model.config().gate_prenormalized);
      auto tokens = dsmoe::load_tokens<Scalar>(tokens_path);
      dsmoe::Matrix<Scalar> baseline = dsmoe::model_forward(model, tokens);
      std::vector<dsmoe::DropStats> stats;
      dsmoe::Matrix<Scalar> y = dsmoe::model_forward_dropped(model, tokens, policy, &stats);

      double dropped = 0.0, denom = 0.0, flops = 0.0, saved = 0.0;
      json per_layer = json::array();
      for (const dsmoe::DropStats& s : stats) {
        dropped += s.dropped_units;
        denom += s.total_routed_units + s.shared_units;
        flops += s.total_flops;
        saved += s.saved_flops;
        per_layer.push_back(json::parse(dsmoe::json_text(s)));
      }
      json outj{{"policy",
                 json{{"kind", policy.kind_name()},
                      {"t_drop", policy.t_drop},
                      {"t_major", policy.t_major},
                      {"t_minor", policy.t_minor},
                      {"keep_top1", policy.keep_top1},
                      {"normalize", policy.normalize}}},
                {"drop_rate", denom > 0.0 ? dropped / denom : 0.0},
                {"dropped_units", dropped},
                {"total_units", denom},
                {"total_flops", flops},
                {"saved_flops", saved},
                {"rel_error", dsmoe::mean_relative_error(y, baseline)},
                {"per_layer", std::move(per_layer)}};
      set_out(json_out, outj.dump(2) + "\n");
    });
  });
}

int dsmoe_sweep(const dsmoe_model* m, const char* tokens_path, const char* policy_kind,
                const double* thresholds, size_t n, int keep_top1, char** json_out,
                char** csv_out) {
  return guarded([&] {
    check(tokens_path != nullptr && policy_kind != nullptr, "tokens_path or policy_kind is null");
    check(thresholds != nullptr && n > 0, "threshold list is empty");
    const std::string kind = policy_kind;
    check(kind == "1t" || kind == "2t", "policy_kind must be 1t or 2t");
    with_model(m, [&](const auto& model) {
      using Scalar = std::decay_t<decltype(model.layers[0].gate.data[0])>;
      auto tokens = dsmoe::load_tokens<Scalar>(tokens_path);
      dsmoe::SweepReport rep = dsmoe::threshold_sweep(
          model, tokens,
          kind == "1t" ? dsmoe::DropPolicy::Kind::one_threshold
                       : dsmoe::DropPolicy::Kind::two_threshold,
          std::vector<double>(thresholds, thresholds + n), keep_top1 != 0,
          !model.config().gate_prenormalized);
      set_out(json_out, dsmoe::json_text(rep));
      set_out(csv_out, dsmoe::csv_text(rep));
    });
  });
}

int dsmoe_analyze_gating(const dsmoe_model* m, const char* tokens_path, int bins, char** json_out,
                         char** csv_out) {
  return guarded([&] {
    check(tokens_path != nullptr, "tokens_path is null");
    with_model(m, [&](const auto& model) {
      using Scalar = std::decay_t<decltype(model.layers[0].gate.data[0])>;
      model.validate();
      auto tokens = dsmoe::load_tokens<Scalar>(tokens_path);
      dsmoe::GatingDistributionReport rep = dsmoe::analyze_gating(model.layers[0], tokens, bins);
      set_out(json_out, dsmoe::json_text(rep));
      set_out(csv_out, dsmoe::csv_text(rep));
    });
  });
}

int dsmoe_sim_ep(const dsmoe_model* m, const char* tokens_path, int devices, const char* strategy,
                 const char* policy_json, int load_aware, char** json_out) {
  return guarded([&] {
    check(tokens_path != nullptr && strategy != nullptr && json_out != nullptr,
          "tokens_path, strategy, or output pointer is null");
    with_model(m, [&](const auto& model) {
      using Scalar = std::decay_t<decltype(model.layers[0].gate.data[0])>;
      model.validate();
      const dsmoe::DropPolicy policy =
          policy_from(parse_json(policy_json, "policy"), model.config().gate_prenormalized);
      auto tokens = dsmoe::load_tokens<Scalar>(tokens_path);
      dsmoe::Placement placement =
          dsmoe::place_experts(model.layers[0].num_physical_experts(), devices,
                               dsmoe::strategy_from_name(strategy));
      json layers = json::array();
      dsmoe::Matrix<Scalar> cur = tokens;
      for (const auto& layer : model.layers) {
        auto [rep, post] = dsmoe::simulate_step(layer, cur, placement, policy, load_aware != 0);
        layers.push_back(json::parse(dsmoe::json_text(rep)));
        dsmoe::Matrix<Scalar> y = dsmoe::moe_forward(layer, cur, post);
        for (size_t i = 0; i < cur.data.size(); ++i) cur.data[i] += y.data[i];
      }
      json outj{{"devices", devices},
                {"strategy", strategy},
                {"load_aware", load_aware != 0},
                {"layers", std::move(layers)}};
      set_out(json_out, outj.dump(2) + "\n");
    });
  });
}

int dsmoe_sim_comm(const char* scenario_json, char** json_out) {
  return guarded([&] {
    check(json_out != nullptr, "output pointer is null");
    const dsmoe::CommScenario sc = scenario_from(parse_json(scenario_json, "scenario"));
    dsmoe::CommReport etp = dsmoe::simulate_etp(sc);
    dsmoe::CommReport setp = dsmoe::simulate_setp(sc);
    dsmoe::ComparisonReport cmp = dsmoe::compare_schemes(sc);
    json outj{{"etp", json::parse(dsmoe::json_text(etp))},
              {"setp", json::parse(dsmoe::json_text(setp))},
              {"comparison", json::parse(dsmoe::json_text(cmp))}};
    set_out(json_out, outj.dump(2) + "\n");
  });
}

int dsmoe_sim_comm_sweep(const char* scenario_json, const int64_t* sizes, size_t n,
                         char** json_out, char** csv_out) {
  return guarded([&] {
    check(sizes != nullptr && n > 0, "size list is empty");
    const dsmoe::CommScenario sc = scenario_from(parse_json(scenario_json, "scenario"));
    std::vector<long> sz(n);
    for (size_t i = 0; i < n; ++i) sz[i] = static_cast<long>(sizes[i]);
    std::vector<dsmoe::CommSweepRow> rows = dsmoe::sweep_comm(sc, sz);
    set_out(json_out, dsmoe::json_text(rows));
    set_out(csv_out, dsmoe::csv_text(rows));
  });
}

}  // extern "C"
