#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "dsmoe/comm_sim.hpp"
#include "dsmoe/dropping.hpp"
#include "dsmoe/ep_sim.hpp"
#include "dsmoe/transform.hpp"

namespace dsmoe {

// %.17g, round-trippable for doubles; non-finite values render as
// "inf"/"-inf"/"nan" (JSON emitters turn those into strings).
std::string fmt_double(double v);

uint64_t fnv1a64(std::string_view data);
std::string hex64(uint64_t v);

std::string json_text(const MoeConfig& c);
std::string json_text(const EquivalenceReport& r);
std::string json_text(const DropStats& s);
std::string json_text(const SweepReport& r);
std::string json_text(const GatingDistributionReport& r);
std::string json_text(const ImportanceProfile& p);
std::string json_text(const EpReport& r);
std::string json_text(const CommReport& r);
std::string json_text(const ComparisonReport& r);
std::string json_text(const std::vector<CommSweepRow>& rows);

std::string csv_text(const SweepReport& r);
std::string csv_text(const GatingDistributionReport& r);
std::string csv_text(const std::vector<CommSweepRow>& rows);

}  // namespace dsmoe
