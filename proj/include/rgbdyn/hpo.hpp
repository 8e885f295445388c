#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rgbdyn/geometry.hpp"
#include "rgbdyn/rng.hpp"

namespace rgbdyn {

using Config = std::map<std::string, double>;

struct RangeParam {
  std::string name;
  double low = 0.0;
  double high = 1.0;
  bool log = true;
};

struct CategoricalParam {
  std::string name;
  std::vector<double> values;
};

struct SearchSpace {
  std::vector<RangeParam> ranges;
  std::vector<CategoricalParam> categorical;

  void validate() const;
  Config sample(Rng& rng) const;
};

// Stable 64-bit hash of a configuration (names and exact values).
std::uint64_t config_hash(const Config& c);

struct RungLadder {
  std::vector<int> budgets{2, 8, 50, 200};
  int eta = 4;

  void validate() const;
};

enum class TrialStatus { kRunning, kStopped, kPromoted, kCompleted, kFailed };
const char* to_string(TrialStatus s);

struct TrialRecord {
  int id = 0;
  Config config;
  std::map<int, double> metrics;  // budget -> metric
  TrialStatus status = TrialStatus::kRunning;
  int rung = 0;  // highest rung started
};

// Higher is better. Throwing marks the trial failed.
using Objective = std::function<double(const Config&, int budget)>;

// One line of the trial log.
struct LogEntry {
  std::uint64_t seq = 0;  // logical clock: order of events at the coordinator
  int trial = 0;
  Config config;
  int budget = 0;
  int rung = 0;
  std::optional<double> metric;
  std::string status;  // "started", "completed", "failed"
  std::uint64_t started_seq = 0;
  bool reused = false;  // taken from a prior log instead of evaluated
};

std::string to_json_line(const LogEntry& e);
LogEntry parse_log_line(const std::string& line);
std::vector<LogEntry> read_trial_log(const std::string& path);

struct AshaOptions {
  RungLadder ladder;
  int workers = 1;
  int max_trials = 32;
  std::uint64_t seed = 0;
  // Completed results of an earlier run; matching (config, budget) jobs reuse
  // them instead of calling the objective.
  std::vector<LogEntry> prior;
  // Called by the coordinator for every log line as it happens.
  std::function<void(const LogEntry&)> on_log;
};

struct AshaResult {
  Config best;
  double best_metric = 0.0;
  int best_budget = 0;
  std::vector<TrialRecord> trials;
  std::vector<LogEntry> log;
  long budget_units = 0;  // sum of budgets actually evaluated
};

AshaResult asha_run(const SearchSpace& space, const Objective& objective, const AshaOptions& opts);

// Mean over frames of PSNR(rgb) + PSNR(depth / max valid gt depth).
double hpo_metric(const std::vector<RgbdFrame>& predicted, const std::vector<RgbdFrame>& gt);

struct CorrelationCell {
  int budget_a = 0;
  int budget_b = 0;
  double r = 0.0;
  double p = 0.0;
  int n = 0;
};

double spearman(const std::vector<double>& a, const std::vector<double>& b);
// Two-sided p-value: exact permutation for n <= 8, Student t otherwise.
double spearman_p_value(double r, const std::vector<double>& a, const std::vector<double>& b);

std::vector<CorrelationCell> budget_correlation(const std::vector<TrialRecord>& trials);
// Rebuilds per-trial metrics from a trial log.
std::vector<TrialRecord> trials_from_log(const std::vector<LogEntry>& log);

}  // namespace rgbdyn
