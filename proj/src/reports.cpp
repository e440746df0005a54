#include "dsmoe/reports.hpp"

#include <cmath>
#include <cstdio>

#include "json.hpp"

namespace dsmoe {

namespace {

using nlohmann::json;

// Keeps JSON valid when a value is non-finite (nlohmann would emit null).
json num(double v) {
  if (std::isfinite(v)) return v;
  return fmt_double(v);
}

json stats_json(const DropStats& s) {
  return json{{"num_tokens", s.num_tokens},
              {"total_routed_units", s.total_routed_units},
              {"dropped_units", s.dropped_units},
              {"shared_units", s.shared_units},
              {"drop_rate", s.drop_rate},
              {"total_flops", s.total_flops},
              {"saved_flops", s.saved_flops},
              {"retained_flops", s.retained_flops}};
}

json phase_json(const CommPhase& p) {
  return json{{"kind", p.kind},
              {"participants", p.participants},
              {"max_link_bytes", p.max_link_bytes},
              {"max_device_bytes", p.max_device_bytes},
              {"time", p.time},
              {"link_bytes", p.link_bytes}};
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

}  // namespace

std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

uint64_t fnv1a64(std::string_view data) {
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

std::string json_text(const MoeConfig& c) {
  return dump(json{{"d_model", c.d_model},
                   {"d_ffn", c.d_ffn},
                   {"num_experts", c.num_experts},
                   {"top_k", c.top_k},
                   {"num_shared_experts", c.num_shared_experts},
                   {"gate_prenormalized", c.gate_prenormalized}});
}

std::string json_text(const EquivalenceReport& r) {
  return dump(json{{"max_abs_diff", r.max_abs_diff},
                   {"max_rel_diff", r.max_rel_diff},
                   {"tol", r.tol},
                   {"pass", r.pass}});
}

std::string json_text(const DropStats& s) { return dump(stats_json(s)); }

std::string json_text(const SweepReport& r) {
  json rows = json::array();
  for (const SweepRow& row : r.rows)
    rows.push_back(json{{"threshold", row.threshold},
                        {"drop_rate", row.drop_rate},
                        {"per_layer_rates", row.per_layer_rates},
                        {"mean_rel_error", row.mean_rel_error}});
  return dump(json{{"policy_kind", r.policy_kind}, {"rows", std::move(rows)}});
}

std::string json_text(const GatingDistributionReport& r) {
  return dump(json{{"bins", r.bins},
                   {"num_tokens", r.num_tokens},
                   {"top_k", r.top_k},
                   {"selection_counts", r.selection_counts},
                   {"raw_hist", r.raw_hist},
                   {"norm_hist", r.norm_hist}});
}

std::string json_text(const ImportanceProfile& p) {
  return dump(json{{"metric", metric_name(p.metric)},
                   {"num_experts", p.num_experts},
                   {"d_ffn", p.d_ffn},
                   {"token_count", p.token_count},
                   {"layer_index", p.layer_index},
                   {"values", p.values}});
}

std::string json_text(const EpReport& r) {
  return dump(json{{"devices", r.devices},
                   {"load_aware", r.load_aware},
                   {"policy_kind", r.policy_kind},
                   {"pre_loads", r.pre_loads},
                   {"post_loads", r.post_loads},
                   {"thresholds", r.thresholds},
                   {"ideal_load", r.ideal_load},
                   {"drop_rate", r.drop_rate},
                   {"speedup", num(r.speedup)},
                   {"stats", stats_json(r.stats)}});
}

std::string json_text(const CommReport& r) {
  json phases = json::array();
  for (const CommPhase& p : r.phases) phases.push_back(phase_json(p));
  return dump(json{{"scheme", r.scheme},
                   {"launches", r.launches},
                   {"total_time", r.total_time},
                   {"total_bytes", r.total_bytes},
                   {"phases", std::move(phases)}});
}

std::string json_text(const ComparisonReport& r) {
  return dump(json{{"etp_time", r.etp_time},
                   {"setp_time", r.setp_time},
                   {"etp_bandwidth", r.etp_bandwidth},
                   {"setp_bandwidth", r.setp_bandwidth},
                   {"improvement_pct", r.improvement_pct},
                   {"etp_launches", r.etp_launches},
                   {"setp_launches", r.setp_launches}});
}

std::string json_text(const std::vector<CommSweepRow>& rows) {
  json arr = json::array();
  for (const CommSweepRow& r : rows)
    arr.push_back(json{{"bytes", r.bytes_per_token},
                       {"etp_bw", r.etp_bw},
                       {"setp_bw", r.setp_bw},
                       {"improvement_pct", r.improvement_pct}});
  return dump(json{{"rows", std::move(arr)}});
}

std::string csv_text(const SweepReport& r) {
  const size_t layers = r.rows.empty() ? 0 : r.rows[0].per_layer_rates.size();
  std::string out = "threshold,drop_rate,rel_error";
  for (size_t l = 0; l < layers; ++l) out += ",drop_rate_layer" + std::to_string(l);
  out += "\n";
  for (const SweepRow& row : r.rows) {
    out += fmt_double(row.threshold) + "," + fmt_double(row.drop_rate) + "," +
           fmt_double(row.mean_rel_error);
    for (double v : row.per_layer_rates) out += "," + fmt_double(v);
    out += "\n";
  }
  return out;
}

std::string csv_text(const GatingDistributionReport& r) {
  std::string out = "series,index,bin_low,bin_high,count\n";
  for (size_t e = 0; e < r.selection_counts.size(); ++e)
    out += "selection," + std::to_string(e) + ",,," + std::to_string(r.selection_counts[e]) + "\n";
  auto bins = [&out, &r](const char* series, const std::vector<long>& hist) {
    for (size_t b = 0; b < hist.size(); ++b) {
      const double lo = static_cast<double>(b) / r.bins;
      const double hi = static_cast<double>(b + 1) / r.bins;
      out += std::string(series) + "," + std::to_string(b) + "," + fmt_double(lo) + "," +
             fmt_double(hi) + "," + std::to_string(hist[b]) + "\n";
    }
  };
  bins("raw", r.raw_hist);
  bins("normalized", r.norm_hist);
  return out;
}

std::string csv_text(const std::vector<CommSweepRow>& rows) {
  std::string out = "bytes,etp_bw,setp_bw,improvement_pct\n";
  for (const CommSweepRow& r : rows)
    out += std::to_string(r.bytes_per_token) + "," + fmt_double(r.etp_bw) + "," +
           fmt_double(r.setp_bw) + "," + fmt_double(r.improvement_pct) + "\n";
  return out;
}

}  // namespace dsmoe
