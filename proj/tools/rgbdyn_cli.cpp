// Command-line front end. Talks to the engine only through rgbdyn.h.

#include <cstdint>
#include <cstdio>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rgbdyn/rgbdyn.h"

namespace {

constexpr int kValidationExit = 2;

struct DatasetDeleter {
  void operator()(rgbdyn_dataset* d) const { rgbdyn_dataset_free(d); }
};
struct ModelDeleter {
  void operator()(rgbdyn_model* m) const { rgbdyn_model_free(m); }
};
using DatasetPtr = std::unique_ptr<rgbdyn_dataset, DatasetDeleter>;
using ModelPtr = std::unique_ptr<rgbdyn_model, ModelDeleter>;

// Thrown to unwind with a status already reported.
struct Failed {
  int exit_code;
};

void check(rgbdyn_status s, const char* what) {
  if (s == RGBDYN_OK) return;
  std::fprintf(stderr, "rgbdyn %s: %s\n", what, rgbdyn_last_error());
  throw Failed{rgbdyn_exit_code(s)};
}

void usage_error(const std::string& msg) {
  std::fprintf(stderr, "rgbdyn: %s\n", msg.c_str());
  throw Failed{kValidationExit};
}

std::vector<double> parse_list(const std::string& text, const char* what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      usage_error(std::string("bad number '") + item + "' in " + what);
    }
  }
  return out;
}

DatasetPtr read_dataset(const std::string& dir) {
  rgbdyn_dataset* d = nullptr;
  check(rgbdyn_dataset_read(dir.c_str(), &d), "read dataset");
  return DatasetPtr(d);
}

ModelPtr read_model(const std::string& path) {
  rgbdyn_model* m = nullptr;
  check(rgbdyn_model_read(path.c_str(), &m), "read model");
  return ModelPtr(m);
}

// Writes every PPM plane requested with --ppm-dir for frames of `data`.
void export_frames(const rgbdyn_dataset* data, const std::string& dir, bool flow) {
  int frames = 0;
  check(rgbdyn_dataset_info(data, nullptr, nullptr, &frames, nullptr), "dataset info");
  for (int f = 0; f < frames; ++f) {
    const std::string stem = dir + "/frame" + std::to_string(f);
    check(rgbdyn_export_ppm(data, "rgb", f, (stem + "_rgb.ppm").c_str()), "export");
    check(rgbdyn_export_ppm(data, "depth", f, (stem + "_depth.ppm").c_str()), "export");
    if (flow) check(rgbdyn_export_ppm(data, "optical_flow", f, (stem + "_flow.ppm").c_str()), "export");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RGB-D scene dynamics: data generation, fitting, prediction, planning"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(rgbdyn_version()));

  // gen-data
  std::string spec_path, out_dir;
  int frames = 0;
  std::uint64_t seed = 0;
  auto* gen = app.add_subcommand("gen-data", "Render a synthetic sequence");
  gen->add_option("--spec", spec_path, "Scene description (JSON)")->required();
  gen->add_option("--frames", frames, "Number of frames")->required();
  gen->add_option("--seed", seed, "Random seed")->required();
  gen->add_option("--out", out_dir, "Output dataset directory")->required();

  // fit
  std::string data_dir, weights, model_path;
  int t_index = 0, k = 3, steps = 200;
  double lr = 0.05;
  auto* fit = app.add_subcommand("fit", "Fit a motion model");
  fit->add_option("--data", data_dir, "Dataset directory")->required();
  fit->add_option("--t", t_index, "Source frame; negative fits an action model over all frames")->required();
  fit->add_option("--k", k, "Number of rigid objects")->required();
  fit->add_option("--weights", weights, "JSON file or inline l1,...,l6,alpha,knn_k");
  fit->add_option("--steps", steps, "Iteration limit");
  fit->add_option("--lr", lr, "Step size");
  fit->add_option("--seed", seed, "Random seed");
  fit->add_option("--out", model_path, "Model file")->required();

  // predict
  std::string actions_mode, ppm_dir;
  int horizon = 1;
  auto* predict = app.add_subcommand("predict", "Roll a model forward");
  predict->add_option("--data", data_dir, "Dataset directory")->required();
  predict->add_option("--model", model_path, "Model file")->required();
  predict->add_option("--actions", actions_mode, "'from-data' to replay recorded actions")
      ->check(CLI::IsMember({"from-data", "zero"}));
  predict->add_option("--horizon", horizon, "Steps to predict")->required();
  predict->add_option("--out", out_dir, "Output dataset directory")->required();
  predict->add_option("--ppm-dir", ppm_dir, "Also write rgb, depth and flow PPMs here");

  // eval
  std::string pred_dir, gt_dir, report;
  auto* eval = app.add_subcommand("eval", "Per-frame image and depth metrics");
  eval->add_option("--pred", pred_dir, "Predicted dataset")->required();
  eval->add_option("--gt", gt_dir, "Ground-truth dataset")->required();
  eval->add_option("--report", report, "CSV report")->required();

  // plan
  std::string goal_text, icem_path;
  int budget = 100;
  auto* plan = app.add_subcommand("plan", "Closed-loop servoing with iCEM");
  plan->add_option("--data", data_dir, "Dataset directory")->required();
  plan->add_option("--model", model_path, "Action model file")->required();
  plan->add_option("--goal", goal_text, "Goal X,Y,Z in camera coordinates")->required();
  plan->add_option("--budget", budget, "Environment steps");
  plan->add_option("--icem", icem_path, "Planner parameters (JSON); defaults otherwise");
  plan->add_option("--seed", seed, "Random seed");
  plan->add_option("--report", report, "CSV report")->required();

  // hpo
  std::string space_path, ladder_text = "2,8,50,200", log_path;
  double eta = 4;
  int workers = 1, max_trials = 32;
  auto* hpo = app.add_subcommand("hpo", "Asynchronous successive halving search");
  hpo->add_option("--data", data_dir, "Dataset directory")->required();
  hpo->add_option("--space", space_path, "Search space (JSON)")->required();
  hpo->add_option("--ladder", ladder_text, "Comma-separated rung budgets");
  hpo->add_option("--eta", eta, "Reduction factor");
  hpo->add_option("--workers", workers, "Concurrent evaluations");
  hpo->add_option("--max-trials", max_trials, "Trials to start");
  hpo->add_option("--seed", seed, "Random seed");
  hpo->add_option("--out", log_path, "Trial log; an existing log is reused")->required();

  auto* hpo_report = app.add_subcommand("hpo-report", "Budget correlation table of a trial log");
  hpo_report->add_option("--log", log_path, "Trial log")->required();
  hpo_report->add_option("--out", report, "CSV file instead of stdout");

  // export
  std::string what, ppm_path;
  int frame = 0;
  auto* exp = app.add_subcommand("export", "Write one plane of a dataset as PPM");
  exp->add_option("--data", data_dir, "Dataset directory")->required();
  exp->add_option("--what", what, "rgb, depth, optical_flow or gt_optical_flow")->required();
  exp->add_option("--frame", frame, "Frame index")->required();
  exp->add_option("--out", ppm_path, "PPM file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kValidationExit;
  }

  try {
    if (*gen) {
      rgbdyn_dataset* d = nullptr;
      check(rgbdyn_dataset_generate(spec_path.c_str(), frames, seed, &d), "gen-data");
      DatasetPtr data(d);
      check(rgbdyn_dataset_write(data.get(), out_dir.c_str()), "gen-data");
    } else if (*fit) {
      DatasetPtr data = read_dataset(data_dir);
      rgbdyn_model* m = nullptr;
      check(rgbdyn_fit(data.get(), t_index, k, weights.empty() ? nullptr : weights.c_str(), steps, lr,
                       seed, &m),
            "fit");
      ModelPtr model(m);
      check(rgbdyn_model_write(model.get(), model_path.c_str()), "fit");
    } else if (*predict) {
      DatasetPtr data = read_dataset(data_dir);
      ModelPtr model = read_model(model_path);
      rgbdyn_dataset* p = nullptr;
      check(rgbdyn_predict(data.get(), model.get(), actions_mode == "from-data" ? 1 : 0, horizon, &p),
            "predict");
      DatasetPtr pred(p);
      check(rgbdyn_dataset_write(pred.get(), out_dir.c_str()), "predict");
      if (!ppm_dir.empty()) export_frames(pred.get(), ppm_dir, true);
    } else if (*eval) {
      DatasetPtr pred = read_dataset(pred_dir);
      DatasetPtr gt = read_dataset(gt_dir);
      check(rgbdyn_evaluate(pred.get(), gt.get(), report.c_str()), "eval");
    } else if (*plan) {
      const std::vector<double> goal = parse_list(goal_text, "--goal");
      if (goal.size() != 3) usage_error("--goal needs three numbers X,Y,Z");
      DatasetPtr data = read_dataset(data_dir);
      ModelPtr model = read_model(model_path);
      check(rgbdyn_plan(data.get(), model.get(), goal.data(), budget,
                        icem_path.empty() ? nullptr : icem_path.c_str(), seed, report.c_str()),
            "plan");
    } else if (*hpo) {
      std::vector<int> ladder;
      for (double b : parse_list(ladder_text, "--ladder")) {
        if (b != static_cast<int>(b)) usage_error("--ladder budgets must be integers");
        ladder.push_back(static_cast<int>(b));
      }
      DatasetPtr data = read_dataset(data_dir);
      check(rgbdyn_hpo(data.get(), space_path.c_str(), ladder.data(), ladder.size(), eta, workers,
                       max_trials, seed, log_path.c_str()),
            "hpo");
    } else if (*hpo_report) {
      check(rgbdyn_hpo_report(log_path.c_str(), report.empty() ? nullptr : report.c_str()),
            "hpo-report");
    } else if (*exp) {
      DatasetPtr data = read_dataset(data_dir);
      check(rgbdyn_export_ppm(data.get(), what.c_str(), frame, ppm_path.c_str()), "export");
    }
  } catch (const Failed& f) {
    return f.exit_code;
  }
  return 0;
}
