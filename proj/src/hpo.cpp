#include "rgbdyn/hpo.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>

#include <boost/math/distributions/students_t.hpp>
#include <json.hpp>

#include "rgbdyn/error.hpp"
#include "rgbdyn/metrics.hpp"

namespace rgbdyn {

using nlohmann::json;

void SearchSpace::validate() const {
  std::set<std::string> names;
  for (const RangeParam& r : ranges) {
    require(names.insert(r.name).second, "search space: duplicate parameter " + r.name);
    require(r.low < r.high, "search space: " + r.name + " needs low < high");
    if (r.log) require(r.low > 0.0, "search space: log range " + r.name + " must be positive");
  }
  for (const CategoricalParam& c : categorical) {
    require(names.insert(c.name).second, "search space: duplicate parameter " + c.name);
    require(!c.values.empty(), "search space: categorical " + c.name + " has no values");
  }
  require(!names.empty(), "search space: no parameters");
}

Config SearchSpace::sample(Rng& rng) const {
  Config c;
  for (const RangeParam& r : ranges) {
    const double u = rng.uniform();
    c[r.name] = r.log ? std::exp(std::log(r.low) + u * (std::log(r.high) - std::log(r.low)))
                      : r.low + u * (r.high - r.low);
  }
  for (const CategoricalParam& cat : categorical) c[cat.name] = cat.values[rng.below(cat.values.size())];
  return c;
}

std::uint64_t config_hash(const Config& c) {
  std::uint64_t h = 0x6a09e667f3bcc909ULL;
  for (const auto& [name, value] : c) {
    h = mix64(h ^ hash_name(name));
    std::uint64_t bits;
    static_assert(sizeof(bits) == sizeof(value));
    std::memcpy(&bits, &value, sizeof(bits));
    h = mix64(h ^ bits);
  }
  return h;
}

void RungLadder::validate() const {
  require(!budgets.empty(), "ladder: no budgets");
  require(eta >= 2, "ladder: eta must be at least 2");
  require(budgets.front() >= 1, "ladder: budgets must be positive");
  for (std::size_t i = 1; i < budgets.size(); ++i) {
    require(budgets[i] >= eta * budgets[i - 1], "ladder: each budget must be at least eta times the previous");
  }
}

const char* to_string(TrialStatus s) {
  switch (s) {
    case TrialStatus::kRunning: return "running";
    case TrialStatus::kStopped: return "stopped";
    case TrialStatus::kPromoted: return "promoted";
    case TrialStatus::kCompleted: return "completed";
    case TrialStatus::kFailed: return "failed";
  }
  return "unknown";
}

// ---- trial log --------------------------------------------------------------

std::string to_json_line(const LogEntry& e) {
  json j;
  j["seq"] = e.seq;
  j["trial"] = e.trial;
  j["config"] = e.config;
  j["budget"] = e.budget;
  j["rung"] = e.rung;
  j["metric"] = e.metric ? json(*e.metric) : json(nullptr);
  j["status"] = e.status;
  j["started_seq"] = e.started_seq;
  j["reused"] = e.reused;
  return j.dump();
}

LogEntry parse_log_line(const std::string& line) {
  LogEntry e;
  try {
    const json j = json::parse(line);
    e.seq = j.at("seq").get<std::uint64_t>();
    e.trial = j.at("trial").get<int>();
    e.config = j.at("config").get<Config>();
    e.budget = j.at("budget").get<int>();
    e.rung = j.at("rung").get<int>();
    if (!j.at("metric").is_null()) e.metric = j.at("metric").get<double>();
    e.status = j.at("status").get<std::string>();
    e.started_seq = j.value("started_seq", std::uint64_t{0});
    e.reused = j.value("reused", false);
  } catch (const json::exception& ex) {
    throw ValidationError(std::string("trial log: malformed line: ") + ex.what());
  }
  return e;
}

std::vector<LogEntry> read_trial_log(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("trial log: cannot open " + path);
  std::vector<LogEntry> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(parse_log_line(line));
  }
  return out;
}

// ---- ASHA -------------------------------------------------------------------

namespace {

template <typename T>
class Channel {
 public:
  void push(T v) {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      queue_.push_back(std::move(v));
    }
    cv_.notify_one();
  }
  T pop() {
    std::unique_lock<std::mutex> lock(mutex_);
    cv_.wait(lock, [&] { return !queue_.empty(); });
    T v = std::move(queue_.front());
    queue_.pop_front();
    return v;
  }

 private:
  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<T> queue_;
};

struct Job {
  int trial = -1;  // -1 stops the worker
  int rung = 0;
  int budget = 0;
  Config config;
  std::uint64_t ticket = 0;  // dispatch order
};

struct JobResult {
  int trial = 0;
  int rung = 0;
  std::optional<double> metric;
  std::uint64_t ticket = 0;
};

struct RungEntry {
  int trial;
  double metric;
  std::uint64_t done_seq;
  std::uint64_t hash;
};

bool better(const RungEntry& a, const RungEntry& b) {
  if (a.metric != b.metric) return a.metric > b.metric;
  if (a.done_seq != b.done_seq) return a.done_seq < b.done_seq;
  return a.hash < b.hash;
}

// Scheduler state; only the coordinator touches it.
class Coordinator {
 public:
  Coordinator(const SearchSpace& space, const AshaOptions& opts)
      : space_(space), opts_(opts), rng_(opts.seed, "hpo.sample"),
        rungs_(opts.ladder.budgets.size()), promoted_(opts.ladder.budgets.size()) {
    for (const LogEntry& e : opts.prior) {
      if (e.status == "completed" && e.metric) prior_[{config_hash(e.config), e.budget}] = *e.metric;
    }
  }

  std::optional<Job> next_job() {
    const int top = static_cast<int>(rungs_.size()) - 1;
    for (int i = top - 1; i >= 0; --i) {
      std::vector<RungEntry> sorted = rungs_[i];
      std::sort(sorted.begin(), sorted.end(), better);
      const std::size_t quota = sorted.size() / static_cast<std::size_t>(opts_.ladder.eta);
      for (std::size_t j = 0; j < quota; ++j) {
        const int id = sorted[j].trial;
        if (promoted_[i].count(id)) continue;
        promoted_[i].insert(id);
        TrialRecord& t = result_.trials[id];
        t.status = TrialStatus::kPromoted;
        t.rung = i + 1;
        return make_job(id, i + 1);
      }
    }
    if (static_cast<int>(result_.trials.size()) < opts_.max_trials) {
      TrialRecord t;
      t.id = static_cast<int>(result_.trials.size());
      t.config = space_.sample(rng_);
      result_.trials.push_back(std::move(t));
      return make_job(result_.trials.back().id, 0);
    }
    return std::nullopt;
  }

  void started(const Job& job, bool reused) {
    LogEntry e = entry(job.trial, job.rung);
    e.status = "started";
    e.reused = reused;
    start_seq_[{job.trial, job.rung}] = e.seq;
    log(std::move(e));
  }

  std::optional<double> prior_metric(const Job& job) const {
    auto it = prior_.find({config_hash(job.config), job.budget});
    if (it == prior_.end()) return std::nullopt;
    return it->second;
  }

  void finished(const JobResult& r, bool reused) {
    TrialRecord& t = result_.trials[r.trial];
    const int budget = opts_.ladder.budgets[r.rung];
    LogEntry e = entry(r.trial, r.rung);
    e.metric = r.metric;
    e.reused = reused;
    e.started_seq = start_seq_[{r.trial, r.rung}];
    if (!reused) result_.budget_units += budget;
    if (r.metric) {
      t.metrics[budget] = *r.metric;
      rungs_[r.rung].push_back({r.trial, *r.metric, e.seq, config_hash(t.config)});
      t.status = r.rung + 1 == static_cast<int>(rungs_.size()) ? TrialStatus::kCompleted
                                                               : TrialStatus::kStopped;
      e.status = "completed";
    } else {
      t.status = TrialStatus::kFailed;
      e.status = "failed";
    }
    log(std::move(e));
  }

  AshaResult finish() {
    for (int i = static_cast<int>(rungs_.size()) - 1; i >= 0; --i) {
      if (rungs_[i].empty()) continue;
      const RungEntry best = *std::min_element(rungs_[i].begin(), rungs_[i].end(), better);
      result_.best = result_.trials[best.trial].config;
      result_.best_metric = best.metric;
      result_.best_budget = opts_.ladder.budgets[i];
      break;
    }
    return std::move(result_);
  }

  std::function<void(const LogEntry&)> on_log;

 private:
  Job make_job(int id, int rung) {
    return {id, rung, opts_.ladder.budgets[rung], result_.trials[id].config};
  }

  LogEntry entry(int trial, int rung) {
    LogEntry e;
    e.seq = seq_++;
    e.trial = trial;
    e.config = result_.trials[trial].config;
    e.budget = opts_.ladder.budgets[rung];
    e.rung = rung;
    return e;
  }

  void log(LogEntry e) {
    if (on_log) on_log(e);
    result_.log.push_back(std::move(e));
  }

  const SearchSpace& space_;
  const AshaOptions& opts_;
  Rng rng_;
  AshaResult result_;
  std::vector<std::vector<RungEntry>> rungs_;
  std::vector<std::set<int>> promoted_;
  std::map<std::pair<std::uint64_t, int>, double> prior_;
  std::map<std::pair<int, int>, std::uint64_t> start_seq_;
  std::uint64_t seq_ = 0;
};

}  // namespace

AshaResult asha_run(const SearchSpace& space, const Objective& objective, const AshaOptions& opts) {
  space.validate();
  opts.ladder.validate();
  require(opts.workers >= 1, "asha: workers must be at least 1");
  require(opts.max_trials >= 1, "asha: max_trials must be at least 1");

  Coordinator coord(space, opts);
  coord.on_log = opts.on_log;
  Channel<Job> jobs;
  Channel<JobResult> results;
  std::vector<std::thread> pool;
  for (int w = 0; w < opts.workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        Job job = jobs.pop();
        if (job.trial < 0) return;
        JobResult r{job.trial, job.rung, std::nullopt, job.ticket};
        try {
          const double m = objective(job.config, job.budget);
          if (std::isfinite(m)) r.metric = m;
        } catch (const std::exception&) {
          // failed trial; reported without a metric
        }
        results.push(std::move(r));
      }
    });
  }

  // Workers finish in whatever order the scheduler gives, but the coordinator
  // consumes results in dispatch order. Its decisions, and so the log, then
  // depend only on the seed and never on thread timing.
  std::uint64_t next_ticket = 0;
  std::uint64_t next_result = 0;
  std::map<std::uint64_t, JobResult> arrived;
  int running = 0;
  auto dispatch = [&] {
    while (running < opts.workers) {
      std::optional<Job> job = coord.next_job();
      if (!job) return;
      if (const auto m = coord.prior_metric(*job)) {
        coord.started(*job, true);
        coord.finished({job->trial, job->rung, m, 0}, true);
        continue;
      }
      coord.started(*job, false);
      job->ticket = next_ticket++;
      jobs.push(std::move(*job));
      ++running;
    }
  };
  dispatch();
  while (running > 0) {
    while (arrived.find(next_result) == arrived.end()) {
      JobResult r = results.pop();
      arrived.emplace(r.ticket, std::move(r));
    }
    const JobResult r = std::move(arrived.at(next_result));
    arrived.erase(next_result++);
    --running;
    coord.finished(r, false);
    dispatch();
  }
  for (int w = 0; w < opts.workers; ++w) jobs.push(Job{});
  for (std::thread& t : pool) t.join();
  return coord.finish();
}

// ---- metric and correlation ---------------------------------------------

double hpo_metric(const std::vector<RgbdFrame>& predicted, const std::vector<RgbdFrame>& gt) {
  require(!predicted.empty(), "hpo_metric: empty sequence");
  require(predicted.size() == gt.size(), "hpo_metric: sequences differ in length");
  double total = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const RgbdFrame& p = predicted[i];
    const RgbdFrame& g = gt[i];
    double scale = 0.0;
    for (std::size_t q = 0; q < g.depth.size(); ++q) {
      if (g.valid[q]) scale = std::max(scale, g.depth[q]);
    }
    require(scale > 0.0, "hpo_metric: ground truth has no valid depth");
    Image pd = p.depth;
    Image gd = g.depth;
    for (double& v : pd.data()) v /= scale;
    for (double& v : gd.data()) v /= scale;
    total += psnr(p.rgb, g.rgb) + psnr(pd, gd, &g.valid);
  }
  return total / static_cast<double>(gt.size());
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size(), "spearman: length mismatch");
  require(a.size() >= 2, "spearman: need at least two observations");
  return pearson(average_ranks(a), average_ranks(b));
}

double spearman_p_value(double r, const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t n = a.size();
  if (!std::isfinite(r)) return std::numeric_limits<double>::quiet_NaN();
  if (n <= 8) {
    const std::vector<double> ra = average_ranks(a);
    std::vector<double> rb = average_ranks(b);
    std::sort(rb.begin(), rb.end());
    long hits = 0, total = 0;
    do {
      const double rp = pearson(ra, rb);
      if (std::abs(rp) >= std::abs(r) - 1e-12) ++hits;
      ++total;
    } while (std::next_permutation(rb.begin(), rb.end()));
    // Tied ranks collapse duplicate permutations, which does not change the
    // fraction.
    return static_cast<double>(hits) / static_cast<double>(total);
  }
  if (std::abs(r) >= 1.0) return 0.0;
  const double df = static_cast<double>(n) - 2.0;
  const double t = std::abs(r) * std::sqrt(df / (1.0 - r * r));
  const boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, t));
}

std::vector<CorrelationCell> budget_correlation(const std::vector<TrialRecord>& trials) {
  std::set<int> budgets;
  for (const TrialRecord& t : trials) {
    if (t.status == TrialStatus::kFailed) continue;
    for (const auto& [b, m] : t.metrics) budgets.insert(b);
  }
  std::vector<CorrelationCell> out;
  for (auto ia = budgets.begin(); ia != budgets.end(); ++ia) {
    for (auto ib = std::next(ia); ib != budgets.end(); ++ib) {
      std::vector<double> xa, xb;
      for (const TrialRecord& t : trials) {
        if (t.status == TrialStatus::kFailed) continue;
        const auto a = t.metrics.find(*ia);
        const auto b = t.metrics.find(*ib);
        if (a == t.metrics.end() || b == t.metrics.end()) continue;
        xa.push_back(a->second);
        xb.push_back(b->second);
      }
      if (xa.size() < 2) continue;
      CorrelationCell c;
      c.budget_a = *ia;
      c.budget_b = *ib;
      c.n = static_cast<int>(xa.size());
      c.r = spearman(xa, xb);
      c.p = spearman_p_value(c.r, xa, xb);
      out.push_back(c);
    }
  }
  return out;
}

std::vector<TrialRecord> trials_from_log(const std::vector<LogEntry>& log) {
  std::map<int, TrialRecord> by_id;
  for (const LogEntry& e : log) {
    TrialRecord& t = by_id[e.trial];
    t.id = e.trial;
    t.config = e.config;
    t.rung = std::max(t.rung, e.rung);
    if (e.status == "completed" && e.metric) {
      t.metrics[e.budget] = *e.metric;
      t.status = TrialStatus::kCompleted;
    } else if (e.status == "failed") {
      t.status = TrialStatus::kFailed;
    }
  }
  std::vector<TrialRecord> out;
  for (auto& [id, t] : by_id) out.push_back(std::move(t));
  return out;
}

}  // namespace rgbdyn
