// Experiment runner over the dsmoe C API. Every subcommand resolves its
// configuration, runs one pipeline, writes its reports, and records a
// run_manifest.json (resolved config plus content hashes) in the output
// directory for reproducibility.
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dsmoe.h"
#include "json.hpp"

namespace {

using nlohmann::json;

constexpr int kExitUsage = 64;     // bad flags / invalid combinations
constexpr int kExitData = 65;      // invalid model, tokens, or parameters
constexpr int kExitNoInput = 66;   // missing or unreadable input file
constexpr int kExitInternal = 70;  // unexpected library failure
constexpr int kExitCantCreate = 73;

[[noreturn]] void die(int code, const std::string& msg) {
  std::fprintf(stderr, "dsmoe: %s\n", msg.c_str());
  std::exit(code);
}

int exit_code_for(int rc, bool reading_input) {
  switch (rc) {
    case DSMOE_E_IO: return reading_input ? kExitNoInput : kExitCantCreate;
    case DSMOE_E_INTERNAL: return kExitInternal;
    default: return kExitData;
  }
}

void ck(int rc, bool reading_input = true) {
  if (rc != DSMOE_OK)
    die(exit_code_for(rc, reading_input),
        std::string(dsmoe_status_name(rc)) + ": " + dsmoe_last_error());
}

std::string take(char* s) {
  std::string out = s ? s : "";
  dsmoe_string_free(s);
  return out;
}

struct ModelHandle {
  dsmoe_model* m = nullptr;
  ~ModelHandle() { dsmoe_model_free(m); }
  dsmoe_model** slot() { return &m; }
};

uint64_t fnv1a64(const std::string& data) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string read_file_or_die(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f.good()) die(kExitNoInput, "cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f.good()) die(kExitCantCreate, "cannot open " + tmp + " for writing");
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    f.flush();
    if (!f.good()) die(kExitCantCreate, "write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    die(kExitCantCreate, "cannot move " + tmp + " to " + path);
  }
}

// Collects the reproducibility record for one run.
struct RunManifest {
  std::string command;
  json args = json::object();
  json inputs = json::array();
  json outputs = json::array();
  std::string out_dir;

  void note_input(const std::string& path) {
    inputs.push_back({{"path", path}, {"fnv1a64", hex64(fnv1a64(read_file_or_die(path)))}});
  }
  void note_output(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::string data{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
    outputs.push_back({{"path", path}, {"fnv1a64", hex64(fnv1a64(data))}});
  }
  void write() const {
    json m{{"command", command}, {"args", args}, {"inputs", inputs}, {"outputs", outputs}};
    write_file_atomic(out_dir + "/run_manifest.json", m.dump(2) + "\n");
  }
};

std::string out_dir_default() {
  const char* env = std::getenv("DSMOE_OUT_DIR");
  return env && *env ? env : ".";
}

std::string join_path(const std::string& dir, const std::string& name) {
  return dir + "/" + name;
}

json policy_json(const std::string& kind, double t, double t_major, double t_minor,
                 bool keep_top1, bool has_band) {
  json p{{"kind", kind}, {"keep_top1", keep_top1}};
  if (kind != "none") p["t_drop"] = t;
  if (kind == "2t" && has_band) {
    p["t_major"] = t_major;
    p["t_minor"] = t_minor;
  }
  return p;
}

void emit(const std::string& text) { std::fputs(text.c_str(), stdout); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale MoE transformation, dropping, and parallelism simulator"};
  app.require_subcommand(1);
  app.fallthrough();  // lets --out-dir appear after the subcommand name
  std::string out_dir = out_dir_default();
  app.add_option("--out-dir", out_dir, "Directory for reports and run_manifest.json")
      ->envname("DSMOE_OUT_DIR");

  // generate
  auto* gen = app.add_subcommand("generate", "Synthesize a seeded model and save it");
  int g_dmodel = 64, g_dffn = 128, g_experts = 8, g_topk = 2, g_shared = 0, g_layers = 2,
      g_width = 8;
  bool g_prenorm = false;
  uint64_t g_seed = 1;
  double g_scale = 1.0;
  std::string g_out = "model.dsmoe";
  gen->add_option("--d-model", g_dmodel, "Model width")->check(CLI::PositiveNumber);
  gen->add_option("--d-ffn", g_dffn, "Expert intermediate size")->check(CLI::PositiveNumber);
  gen->add_option("--experts", g_experts, "Number of routed experts")->check(CLI::PositiveNumber);
  gen->add_option("--top-k", g_topk, "Experts per token")->check(CLI::PositiveNumber);
  gen->add_option("--shared", g_shared, "Number of shared experts");
  gen->add_option("--layers", g_layers, "Number of MoE layers")->check(CLI::PositiveNumber);
  gen->add_option("--width", g_width, "Scalar width in bytes (4 or 8)");
  gen->add_flag("--prenormalized", g_prenorm, "Mark gate scores as already normalized");
  gen->add_option("--seed", g_seed, "PRNG seed");
  gen->add_option("--scale", g_scale, "Weight scale (std dev = scale/sqrt(d_model))");
  gen->add_option("-o,--out", g_out, "Output model path");

  // gen-tokens
  auto* gtok = app.add_subcommand("gen-tokens", "Synthesize a seeded token file");
  int64_t t_rows = 256, t_cols = 64;
  uint64_t t_seed = 7;
  double t_scale = 1.0;
  std::string t_out = "tokens.bin";
  gtok->add_option("--rows", t_rows, "Token count")->check(CLI::PositiveNumber);
  gtok->add_option("--cols", t_cols, "Token width (d_model)")->check(CLI::PositiveNumber);
  gtok->add_option("--seed", t_seed, "PRNG seed");
  gtok->add_option("--scale", t_scale, "Gaussian scale");
  gtok->add_option("-o,--out", t_out, "Output token path");

  // transform
  auto* tr = app.add_subcommand("transform", "Apply an expert-partition transformation");
  std::string tr_model, tr_mode = "complete", tr_out = "transformed.dsmoe", tr_tokens;
  int tr_p = 2;
  double tr_tol = -1.0;
  tr->add_option("--model", tr_model, "Input model container")->required();
  tr->add_option("--mode", tr_mode, "complete or partial")
      ->check(CLI::IsMember({"complete", "partial"}));
  tr->add_option("--p", tr_p, "Partition factor (>= 2)");
  tr->add_option("--tokens", tr_tokens, "Token file for the equivalence check (default: seeded)");
  tr->add_option("--tol", tr_tol, "Equivalence tolerance (default 1e-10 f64, 1e-4 f32)");
  tr->add_option("-o,--out", tr_out, "Output model path");

  // reconstruct
  auto* rc = app.add_subcommand("reconstruct", "Importance-profile and rebuild experts");
  std::string rc_model, rc_calib, rc_metric = "abs-gate", rc_out = "reconstructed.dsmoe";
  std::string rc_profile = "importance_profile.json";
  rc->add_option("--model", rc_model, "Input model container")->required();
  rc->add_option("--calib", rc_calib, "Calibration token file")->required();
  rc->add_option("--metric", rc_metric, "gate | abs-gate | gate-up | abs-gate-up")
      ->check(CLI::IsMember({"gate", "abs-gate", "gate-up", "abs-gate-up"}));
  rc->add_option("--profile-out", rc_profile, "Importance profile JSON path");
  rc->add_option("-o,--out", rc_out, "Output model path");

  // infer
  auto* in = app.add_subcommand("infer", "Forward a token file under a drop policy");
  std::string in_model, in_tokens, in_policy = "none", in_report = "infer_report.json";
  double in_t = 0.0, in_tmaj = 0.0, in_tmin = 0.0;
  bool in_no_keep = false, in_band = false;
  in->add_option("--model", in_model, "Input model container")->required();
  in->add_option("--tokens", in_tokens, "Token file")->required();
  in->add_option("--policy", in_policy, "none | 1t | 2t")
      ->check(CLI::IsMember({"none", "1t", "2t"}));
  in->add_option("--t", in_t, "Drop threshold");
  in->add_option("--t-major", in_tmaj, "2T lower threshold")->needs("--t");
  auto* in_tmin_opt = in->add_option("--t-minor", in_tmin, "2T upper threshold");
  in->add_flag("--no-keep-top1", in_no_keep, "Disable the keep-top-1 guard");
  in->add_option("--report", in_report, "Report JSON path");

  // sweep
  auto* sw = app.add_subcommand("sweep", "Threshold-to-drop-rate sweep");
  std::string sw_model, sw_tokens, sw_policy = "1t", sw_csv = "sweep.csv", sw_json = "sweep.json";
  std::vector<double> sw_thresholds;
  bool sw_no_keep = false;
  sw->add_option("--model", sw_model, "Input model container")->required();
  sw->add_option("--tokens", sw_tokens, "Token file")->required();
  sw->add_option("--policy", sw_policy, "1t or 2t")->check(CLI::IsMember({"1t", "2t"}));
  sw->add_option("--thresholds", sw_thresholds, "Ascending thresholds")
      ->required()
      ->delimiter(',');
  sw->add_flag("--no-keep-top1", sw_no_keep, "Disable the keep-top-1 guard");
  sw->add_option("--csv", sw_csv, "CSV output path");
  sw->add_option("--json", sw_json, "JSON output path");

  // analyze-gating
  auto* ag = app.add_subcommand("analyze-gating", "Gating score distribution histograms");
  std::string ag_model, ag_tokens, ag_csv = "gating.csv", ag_json = "gating.json";
  int ag_bins = 20;
  ag->add_option("--model", ag_model, "Input model container")->required();
  ag->add_option("--tokens", ag_tokens, "Token file")->required();
  ag->add_option("--bins", ag_bins, "Histogram bins (>= 2)");
  ag->add_option("--csv", ag_csv, "CSV output path");
  ag->add_option("--json", ag_json, "JSON output path");

  // sim-ep
  auto* se = app.add_subcommand("sim-ep", "Expert-parallel load and drop simulation");
  std::string se_model, se_tokens, se_policy = "1t", se_strategy = "contiguous";
  std::string se_json = "ep_report.json";
  int se_devices = 4;
  double se_t = 0.1, se_tmaj = 0.0, se_tmin = 0.0;
  bool se_load_aware = false, se_no_keep = false, se_band = false;
  se->add_option("--model", se_model, "Input model container")->required();
  se->add_option("--tokens", se_tokens, "Token file")->required();
  se->add_option("--devices", se_devices, "Device count")->check(CLI::PositiveNumber);
  se->add_option("--strategy", se_strategy, "contiguous or round_robin")
      ->check(CLI::IsMember({"contiguous", "round_robin"}));
  se->add_option("--policy", se_policy, "none | 1t | 2t")
      ->check(CLI::IsMember({"none", "1t", "2t"}));
  se->add_option("--t", se_t, "Drop threshold (t_max when load-aware)");
  se->add_option("--t-major", se_tmaj, "2T lower threshold");
  auto* se_tmin_opt = se->add_option("--t-minor", se_tmin, "2T upper threshold");
  se->add_flag("--load-aware", se_load_aware, "Scale per-device thresholds by load ratio");
  se->add_flag("--no-keep-top1", se_no_keep, "Disable the keep-top-1 guard");
  se->add_option("--json", se_json, "Report JSON path");

  // sim-comm
  auto* sc = app.add_subcommand("sim-comm", "ETP vs S-ETP communication model");
  int sc_ep = 2, sc_tp = 4, sc_tpd = 16, sc_experts = 0;
  int64_t sc_bpt = 4096;
  double sc_alpha = 1e-5, sc_beta = 1e9;
  uint64_t sc_seed = 11;
  std::vector<int64_t> sc_sizes;
  std::string sc_json = "comm_report.json", sc_csv = "comm_sweep.csv";
  sc->add_option("--ep", sc_ep, "Expert-parallel degree")->check(CLI::PositiveNumber);
  sc->add_option("--tp", sc_tp, "Tensor-parallel degree")->check(CLI::PositiveNumber);
  sc->add_option("--tokens-per-device", sc_tpd, "Tokens resident per device")
      ->check(CLI::PositiveNumber);
  sc->add_option("--bytes-per-token", sc_bpt, "Activation bytes per token")
      ->check(CLI::PositiveNumber);
  sc->add_option("--alpha", sc_alpha, "Seconds per collective launch");
  sc->add_option("--beta", sc_beta, "Link bandwidth, bytes per second");
  sc->add_option("--experts", sc_experts, "Original experts (default: one per EP group)");
  sc->add_option("--seed", sc_seed, "Routing sample seed");
  sc->add_option("--sizes", sc_sizes, "Payload sizes for the bandwidth sweep")->delimiter(',');
  sc->add_option("--json", sc_json, "Report JSON path");
  sc->add_option("--csv", sc_csv, "Sweep CSV path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::fprintf(stderr, "%s\n", e.what());
    return kExitUsage;
  }

  RunManifest manifest;
  manifest.out_dir = out_dir;
  auto in_dir = [&out_dir](const std::string& p) { return join_path(out_dir, p); };

  if (gen->parsed()) {
    manifest.command = "generate";
    json cfg{{"d_model", g_dmodel},         {"d_ffn", g_dffn},
             {"num_experts", g_experts},    {"top_k", g_topk},
             {"num_shared_experts", g_shared}, {"gate_prenormalized", g_prenorm},
             {"num_layers", g_layers}};
    manifest.args = {{"config", cfg}, {"seed", g_seed}, {"scale", g_scale},
                     {"width", g_width}, {"out", g_out}};
    ModelHandle m;
    ck(dsmoe_generate_model(cfg.dump().c_str(), g_seed, g_scale, g_width, m.slot()));
    ck(dsmoe_model_save(m.m, g_out.c_str()), false);
    manifest.note_output(g_out);
    char* info = nullptr;
    ck(dsmoe_model_info(m.m, &info));
    emit(take(info));
  } else if (gtok->parsed()) {
    manifest.command = "gen-tokens";
    manifest.args = {{"rows", t_rows}, {"cols", t_cols}, {"seed", t_seed},
                     {"scale", t_scale}, {"out", t_out}};
    ck(dsmoe_generate_tokens(t_rows, t_cols, t_seed, t_scale, t_out.c_str()), false);
    manifest.note_output(t_out);
    std::printf("wrote %lld x %lld tokens to %s\n", static_cast<long long>(t_rows),
                static_cast<long long>(t_cols), t_out.c_str());
  } else if (tr->parsed()) {
    manifest.command = "transform";
    ModelHandle src;
    ck(dsmoe_model_load(tr_model.c_str(), src.slot()));
    manifest.note_input(tr_model);

    char* info_raw = nullptr;
    ck(dsmoe_model_info(src.m, &info_raw));
    const json info = json::parse(take(info_raw));
    const int width = info.at("scalar_width").get<int>();
    const double tol = tr_tol > 0 ? tr_tol : (width == 8 ? 1e-10 : 1e-4);

    std::string tokens_path = tr_tokens;
    if (tokens_path.empty()) {
      tokens_path = in_dir("transform_verify_tokens.bin");
      ck(dsmoe_generate_tokens(256, info.at("config").at("d_model").get<int>(), 20260825, 1.0,
                               tokens_path.c_str()),
         false);
    } else {
      manifest.note_input(tokens_path);
    }

    ModelHandle dst;
    ck(dsmoe_transform(src.m, tr_mode.c_str(), tr_p, dst.slot()));
    ck(dsmoe_model_save(dst.m, tr_out.c_str()), false);
    manifest.note_output(tr_out);

    char* verdict = nullptr;
    ck(dsmoe_verify_equivalence(src.m, dst.m, tokens_path.c_str(), tol, &verdict));
    const json v = json::parse(take(verdict));
    manifest.args = {{"model", tr_model}, {"mode", tr_mode}, {"p", tr_p},
                     {"tokens", tokens_path}, {"tol", tol}, {"out", tr_out},
                     {"verify", v}};
    std::printf("max_rel_error %.17g (tol %.17g): %s\n", v.at("max_rel_diff").get<double>(), tol,
                v.at("pass").get<bool>() ? "PASS" : "FAIL");
    if (!v.at("pass").get<bool>()) {
      manifest.write();
      return kExitData;
    }
  } else if (rc->parsed()) {
    manifest.command = "reconstruct";
    std::string metric = rc_metric;
    for (char& ch : metric)
      if (ch == '-') ch = '_';
    manifest.args = {{"model", rc_model}, {"calib", rc_calib}, {"metric", metric},
                     {"out", rc_out}, {"profile_out", rc_profile}};
    ModelHandle src;
    ck(dsmoe_model_load(rc_model.c_str(), src.slot()));
    manifest.note_input(rc_model);
    manifest.note_input(rc_calib);
    ModelHandle dst;
    char* prof = nullptr;
    ck(dsmoe_reconstruct(src.m, rc_calib.c_str(), metric.c_str(), dst.slot(), &prof));
    ck(dsmoe_model_save(dst.m, rc_out.c_str()), false);
    manifest.note_output(rc_out);
    write_file_atomic(rc_profile, take(prof));
    manifest.note_output(rc_profile);
    std::printf("reconstructed model written to %s (metric %s)\n", rc_out.c_str(), metric.c_str());
  } else if (in->parsed()) {
    manifest.command = "infer";
    in_band = in_tmin_opt->count() > 0;
    const json pol = policy_json(in_policy, in_t, in_tmaj, in_tmin, !in_no_keep, in_band);
    manifest.args = {{"model", in_model}, {"tokens", in_tokens}, {"policy", pol},
                     {"report", in_report}};
    ModelHandle m;
    ck(dsmoe_model_load(in_model.c_str(), m.slot()));
    manifest.note_input(in_model);
    manifest.note_input(in_tokens);
    char* rep_raw = nullptr;
    ck(dsmoe_infer(m.m, in_tokens.c_str(), pol.dump().c_str(), &rep_raw));
    const std::string rep = take(rep_raw);
    write_file_atomic(in_report, rep);
    manifest.note_output(in_report);
    const json r = json::parse(rep);
    std::printf("drop_rate %.6f  dropped_units %.2f / %.2f  rel_error %.6g\n",
                r.at("drop_rate").get<double>(), r.at("dropped_units").get<double>(),
                r.at("total_units").get<double>(), r.at("rel_error").get<double>());
  } else if (sw->parsed()) {
    manifest.command = "sweep";
    manifest.args = {{"model", sw_model}, {"tokens", sw_tokens}, {"policy", sw_policy},
                     {"thresholds", sw_thresholds}, {"keep_top1", !sw_no_keep},
                     {"csv", sw_csv}, {"json", sw_json}};
    ModelHandle m;
    ck(dsmoe_model_load(sw_model.c_str(), m.slot()));
    manifest.note_input(sw_model);
    manifest.note_input(sw_tokens);
    char* js = nullptr;
    char* csv = nullptr;
    ck(dsmoe_sweep(m.m, sw_tokens.c_str(), sw_policy.c_str(), sw_thresholds.data(),
                   sw_thresholds.size(), sw_no_keep ? 0 : 1, &js, &csv));
    write_file_atomic(sw_json, take(js));
    const std::string csv_text = take(csv);
    write_file_atomic(sw_csv, csv_text);
    manifest.note_output(sw_json);
    manifest.note_output(sw_csv);
    emit(csv_text);
  } else if (ag->parsed()) {
    manifest.command = "analyze-gating";
    manifest.args = {{"model", ag_model}, {"tokens", ag_tokens}, {"bins", ag_bins},
                     {"csv", ag_csv}, {"json", ag_json}};
    ModelHandle m;
    ck(dsmoe_model_load(ag_model.c_str(), m.slot()));
    manifest.note_input(ag_model);
    manifest.note_input(ag_tokens);
    char* js = nullptr;
    char* csv = nullptr;
    ck(dsmoe_analyze_gating(m.m, ag_tokens.c_str(), ag_bins, &js, &csv));
    write_file_atomic(ag_json, take(js));
    write_file_atomic(ag_csv, take(csv));
    manifest.note_output(ag_json);
    manifest.note_output(ag_csv);
    std::printf("gating analysis written to %s and %s\n", ag_json.c_str(), ag_csv.c_str());
  } else if (se->parsed()) {
    manifest.command = "sim-ep";
    se_band = se_tmin_opt->count() > 0;
    const json pol = policy_json(se_policy, se_t, se_tmaj, se_tmin, !se_no_keep, se_band);
    manifest.args = {{"model", se_model}, {"tokens", se_tokens}, {"devices", se_devices},
                     {"strategy", se_strategy}, {"policy", pol},
                     {"load_aware", se_load_aware}, {"json", se_json}};
    ModelHandle m;
    ck(dsmoe_model_load(se_model.c_str(), m.slot()));
    manifest.note_input(se_model);
    manifest.note_input(se_tokens);
    char* js = nullptr;
    ck(dsmoe_sim_ep(m.m, se_tokens.c_str(), se_devices, se_strategy.c_str(), pol.dump().c_str(),
                    se_load_aware ? 1 : 0, &js));
    const std::string rep = take(js);
    write_file_atomic(se_json, rep);
    manifest.note_output(se_json);
    const json r = json::parse(rep);
    for (const json& l : r.at("layers"))
      std::printf("layer: drop_rate %.6f  speedup %s\n", l.at("drop_rate").get<double>(),
                  l.at("speedup").dump().c_str());
  } else if (sc->parsed()) {
    manifest.command = "sim-comm";
    if (sc_experts <= 0) sc_experts = sc_ep;
    json scenario{{"ep", sc_ep}, {"tp", sc_tp}, {"tokens_per_device", sc_tpd},
                  {"bytes_per_token", sc_bpt}, {"alpha", sc_alpha}, {"beta", sc_beta},
                  {"num_experts", sc_experts}, {"seed", sc_seed}};
    manifest.args = {{"scenario", scenario}, {"sizes", sc_sizes},
                     {"json", sc_json}, {"csv", sc_csv}};
    char* js = nullptr;
    ck(dsmoe_sim_comm(scenario.dump().c_str(), &js));
    const std::string rep = take(js);
    write_file_atomic(sc_json, rep);
    manifest.note_output(sc_json);
    const json r = json::parse(rep);
    std::printf("etp %d launches %.3g s | setp %d launches %.3g s | improvement %.2f%%\n",
                r.at("comparison").at("etp_launches").get<int>(),
                r.at("comparison").at("etp_time").get<double>(),
                r.at("comparison").at("setp_launches").get<int>(),
                r.at("comparison").at("setp_time").get<double>(),
                r.at("comparison").at("improvement_pct").get<double>());
    if (!sc_sizes.empty()) {
      char* sweep_js = nullptr;
      char* sweep_csv = nullptr;
      ck(dsmoe_sim_comm_sweep(scenario.dump().c_str(), sc_sizes.data(), sc_sizes.size(),
                              &sweep_js, &sweep_csv));
      dsmoe_string_free(sweep_js);
      const std::string csv_text = take(sweep_csv);
      write_file_atomic(sc_csv, csv_text);
      manifest.note_output(sc_csv);
      emit(csv_text);
    }
  }

  manifest.write();
  return 0;
}
