#include "rgbdyn/rgbdyn.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <new>
#include <sstream>
#include <string>
#include <vector>

#include "rgbdyn/dataset.hpp"
#include "rgbdyn/error.hpp"
#include "rgbdyn/fit.hpp"
#include "rgbdyn/hpo.hpp"
#include "rgbdyn/metrics.hpp"
#include "rgbdyn/plan.hpp"
#include "rgbdyn/serialize.hpp"

struct rgbdyn_dataset {
  rgbdyn::Sequence seq;
};

struct rgbdyn_model {
  rgbdyn::AnyModel model;
};

namespace {

using namespace rgbdyn;

thread_local std::string g_last_error;

template <typename F>
rgbdyn_status guarded(F&& body) {
  g_last_error.clear();
  try {
    body();
    return RGBDYN_OK;
  } catch (const MissingTensorError& e) {
    g_last_error = e.what();
    return RGBDYN_ERR_MISSING_TENSOR;
  } catch (const ShapeMismatchError& e) {
    g_last_error = e.what();
    return RGBDYN_ERR_SHAPE_MISMATCH;
  } catch (const DtypeMismatchError& e) {
    g_last_error = e.what();
    return RGBDYN_ERR_DTYPE_MISMATCH;
  } catch (const ValidationError& e) {
    g_last_error = e.what();
    return RGBDYN_ERR_VALIDATION;
  } catch (const NumericalError& e) {
    g_last_error = e.what();
    return RGBDYN_ERR_NUMERICAL;
  } catch (const IoError& e) {
    g_last_error = e.what();
    return RGBDYN_ERR_IO;
  } catch (const nlohmann::json::exception& e) {
    g_last_error = std::string("json: ") + e.what();
    return RGBDYN_ERR_VALIDATION;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return RGBDYN_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return RGBDYN_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return RGBDYN_ERR_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  if (p == nullptr) throw ValidationError(std::string(what) + " is null");
}

// Shortest text that reads back to the same double.
std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path);
}

// ---- PPM export -------------------------------------------------------------

std::uint8_t to_byte(double v) {
  if (!std::isfinite(v)) return 0;
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

Vec3 hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(h, 1.0);
  if (h < 0) h += 1.0;
  const double f = h * 6.0;
  const int sector = static_cast<int>(f) % 6;
  const double frac = f - std::floor(f);
  const double p = v * (1 - s);
  const double q = v * (1 - s * frac);
  const double t = v * (1 - s * (1 - frac));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

// Hue encodes direction, saturation the magnitude relative to the largest
// valid vector; invalid pixels are black.
Image colorize_flow(const VectorField& flow) {
  const Image& f = flow.values;
  Image out(f.height(), f.width(), 3);
  double max_mag = 0.0;
  for (std::size_t p = 0; p < f.pixel_count(); ++p) {
    if (flow.valid[p]) max_mag = std::max(max_mag, std::hypot(f[p * 2], f[p * 2 + 1]));
  }
  for (std::size_t p = 0; p < f.pixel_count(); ++p) {
    if (!flow.valid[p]) continue;
    const double u = f[p * 2];
    const double v = f[p * 2 + 1];
    const double hue = (std::atan2(-v, -u) / M_PI + 1.0) / 2.0;
    const double sat = max_mag > 0 ? std::hypot(u, v) / max_mag : 0.0;
    const Vec3 c = hsv_to_rgb(hue, sat, 1.0);
    for (int ch = 0; ch < 3; ++ch) out[p * 3 + ch] = c[ch];
  }
  return out;
}

void write_ppm(const Image& img, const std::string& path) {
  std::ostringstream s;
  s << "P6\n" << img.width() << " " << img.height() << "\n255\n";
  std::string bytes = s.str();
  for (std::size_t p = 0; p < img.pixel_count(); ++p) {
    for (int c = 0; c < 3; ++c) {
      const double v = img[p * img.channels() + (img.channels() == 3 ? c : 0)];
      bytes.push_back(static_cast<char>(to_byte(v)));
    }
  }
  write_text(path, bytes);
}

Image depth_preview(const RgbdFrame& f) {
  double max_d = 0.0;
  for (std::size_t p = 0; p < f.depth.pixel_count(); ++p) {
    if (f.valid[p]) max_d = std::max(max_d, f.depth[p]);
  }
  Image out(f.height(), f.width(), 1);
  for (std::size_t p = 0; p < f.depth.pixel_count(); ++p) {
    if (f.valid[p] && max_d > 0) out[p] = f.depth[p] / max_d;
  }
  return out;
}

// ---- model helpers ----------------------------------------------------------

int model_source(const AnyModel& m) {
  return m.scene ? m.scene->source_index : m.action->source_index;
}

json model_json(const AnyModel& m) {
  return m.scene ? scene_model_to_json(*m.scene) : action_model_to_json(*m.action);
}

// Hyperparameters the search may set; anything else in a space is rejected.
void apply_config(const Config& c, LossWeights& w, FitOptions& fo) {
  for (const auto& [name, value] : c) {
    if (name.size() == 7 && name.rfind("lambda", 0) == 0 && name[6] >= '1' && name[6] <= '6') {
      w.lambda[name[6] - '1'] = value;
    } else if (name == "lr") {
      fo.lr = value;
    } else if (name == "alpha") {
      w.alpha = static_cast<int>(std::lround(value));
    } else if (name == "knn_k") {
      w.knn_k = static_cast<int>(std::lround(value));
    } else if (name == "k") {
      fo.k = static_cast<int>(std::lround(value));
    } else {
      throw ValidationError("search space: unknown hyperparameter '" + name + "'");
    }
  }
}

}  // namespace

extern "C" {

const char* rgbdyn_version(void) { return "0.1.0"; }

const char* rgbdyn_last_error(void) { return g_last_error.c_str(); }

int rgbdyn_exit_code(rgbdyn_status status) {
  if (status == RGBDYN_OK) return 0;
  if (status == RGBDYN_ERR_NUMERICAL) return 3;
  return 2;
}

rgbdyn_status rgbdyn_dataset_generate(const char* spec_path, int frames, uint64_t seed,
                                      rgbdyn_dataset** out) {
  return guarded([&] {
    need(spec_path, "spec path");
    need(out, "output handle");
    *out = nullptr;
    const SceneSpec spec = scene_spec_from_json(load_json_file(spec_path));
    // Round through float32 now so the handle matches what a reader sees.
    *out = new rgbdyn_dataset{quantized(generate_sequence(spec, frames, seed))};
  });
}

rgbdyn_status rgbdyn_dataset_read(const char* dir, rgbdyn_dataset** out) {
  return guarded([&] {
    need(dir, "dataset directory");
    need(out, "output handle");
    *out = nullptr;
    *out = new rgbdyn_dataset{read_sequence(dir)};
  });
}

rgbdyn_status rgbdyn_dataset_write(const rgbdyn_dataset* data, const char* dir) {
  return guarded([&] {
    need(data, "dataset");
    need(dir, "dataset directory");
    write_sequence(data->seq, dir);
  });
}

void rgbdyn_dataset_free(rgbdyn_dataset* data) { delete data; }

rgbdyn_status rgbdyn_dataset_info(const rgbdyn_dataset* data, int* height, int* width, int* frames,
                                  int* action_dim) {
  return guarded([&] {
    need(data, "dataset");
    if (height) *height = data->seq.intr.height;
    if (width) *width = data->seq.intr.width;
    if (frames) *frames = data->seq.length();
    if (action_dim) *action_dim = data->seq.action_dim();
  });
}

rgbdyn_status rgbdyn_export_ppm(const rgbdyn_dataset* data, const char* what, int frame,
                                const char* path) {
  return guarded([&] {
    need(data, "dataset");
    need(what, "plane name");
    need(path, "output path");
    const Sequence& s = data->seq;
    const std::string w = what;
    auto check = [&](std::size_t n) {
      require(frame >= 0 && static_cast<std::size_t>(frame) < n,
              "export: frame " + std::to_string(frame) + " out of range for " + w);
    };
    if (w == "rgb") {
      check(s.frames.size());
      write_ppm(s.frames[frame].rgb, path);
    } else if (w == "depth") {
      check(s.frames.size());
      write_ppm(depth_preview(s.frames[frame]), path);
    } else if (w == "optical_flow") {
      check(s.flow.size());
      write_ppm(colorize_flow(s.flow[frame].optical_flow), path);
    } else if (w == "gt_optical_flow") {
      check(s.gt_flow.size());
      write_ppm(colorize_flow(s.gt_flow[frame].optical_flow), path);
    } else {
      throw ValidationError("export: unknown plane '" + w + "'");
    }
  });
}

rgbdyn_status rgbdyn_fit(const rgbdyn_dataset* data, int t, int k, const char* weights, int steps,
                         double lr, uint64_t seed, rgbdyn_model** out) {
  return guarded([&] {
    need(data, "dataset");
    need(out, "output handle");
    *out = nullptr;
    const Sequence& s = data->seq;
    const LossWeights w = weights ? parse_weights(weights) : LossWeights{};
    FitOptions fo;
    fo.k = k;
    fo.steps = steps;
    fo.lr = lr;
    fo.seed = seed;
    fo.validate();
    AnyModel m;
    if (t >= 0) {
      require(t + 1 < s.length(), "fit: --t must leave a following frame");
      SceneModel sm = fit_pair(s.frames[t], s.frames[t + 1], s.intr, w, fo);
      sm.source_index = t;
      m.scene = std::move(sm);
    } else {
      require(s.action_dim() > 0, "fit: an action model needs recorded actions");
      std::vector<Transition> tr;
      for (int i = 0; i + 1 < s.length(); ++i) {
        tr.push_back({s.frames[i], s.frames[i + 1], s.actions.row(i).transpose()});
      }
      m.action = fit_action_model(tr, s.intr, w, fo);
    }
    *out = new rgbdyn_model{std::move(m)};
  });
}

rgbdyn_status rgbdyn_model_read(const char* path, rgbdyn_model** out) {
  return guarded([&] {
    need(path, "model path");
    need(out, "output handle");
    *out = nullptr;
    *out = new rgbdyn_model{model_from_json(load_json_file(path))};
  });
}

rgbdyn_status rgbdyn_model_write(const rgbdyn_model* model, const char* path) {
  return guarded([&] {
    need(model, "model");
    need(path, "model path");
    save_json_file(model_json(model->model), path);
  });
}

void rgbdyn_model_free(rgbdyn_model* model) { delete model; }

int rgbdyn_model_is_action(const rgbdyn_model* model) {
  return model != nullptr && model->model.action.has_value() ? 1 : 0;
}

rgbdyn_status rgbdyn_predict(const rgbdyn_dataset* data, const rgbdyn_model* model,
                             int actions_from_data, int horizon, rgbdyn_dataset** out) {
  return guarded([&] {
    need(data, "dataset");
    need(model, "model");
    need(out, "output handle");
    *out = nullptr;
    require(horizon >= 1, "predict: horizon must be positive");
    const Sequence& s = data->seq;
    const AnyModel& m = model->model;
    const int src = model_source(m) - s.first_frame;
    require(src >= 0 && src < s.length(), "predict: model frame is not in the dataset");
    const RgbdFrame& context = s.frames[src];
    require(context.height() == s.intr.height && context.width() == s.intr.width,
            "predict: frame size does not match the intrinsics");

    Sequence pred;
    pred.intr = s.intr;
    pred.first_frame = s.first_frame + src + 1;
    std::vector<RolloutStep> steps;
    if (m.scene) {
      require(m.scene->motion.masks.height() == s.intr.height &&
                  m.scene->motion.masks.width() == s.intr.width,
              "predict: model masks do not match the dataset");
      steps = rollout(*m.scene, context, s.intr, horizon);
    } else {
      const ActionModel& am = *m.action;
      std::vector<Eigen::VectorXd> actions;
      pred.actions = Eigen::MatrixXd::Zero(horizon, am.action_dim);
      for (int i = 0; i < horizon; ++i) {
        Eigen::VectorXd a = Eigen::VectorXd::Zero(am.action_dim);
        if (actions_from_data) {
          require(s.action_dim() == am.action_dim, "predict: action width differs from the model");
          require(src + i < s.length(), "predict: not enough recorded actions for the horizon");
          a = s.actions.row(src + i).transpose();
        }
        actions.push_back(a);
        pred.actions.row(i) = a.transpose();
      }
      steps = rollout(am, context, actions, s.intr, horizon);
    }
    for (RolloutStep& st : steps) {
      pred.frames.push_back(std::move(st.frame));
      pred.flow.push_back(std::move(st.flow));
      pred.masks.push_back(std::move(st.masks));
    }
    *out = new rgbdyn_dataset{quantized(pred)};
  });
}

rgbdyn_status rgbdyn_evaluate(const rgbdyn_dataset* pred, const rgbdyn_dataset* gt,
                              const char* report_csv) {
  return guarded([&] {
    need(pred, "prediction");
    need(gt, "ground truth");
    need(report_csv, "report path");
    const Sequence& p = pred->seq;
    const Sequence& g = gt->seq;
    std::string csv = "frame,psnr_rgb,ssim,rmse,absrel\n";
    for (int i = 0; i < p.length(); ++i) {
      const int frame = p.first_frame + i;
      const int j = frame - g.first_frame;
      require(j >= 0 && j < g.length(),
              "eval: predicted frame " + std::to_string(frame) + " has no ground truth");
      const RgbdFrame& a = p.frames[i];
      const RgbdFrame& b = g.frames[j];
      if (!a.rgb.same_shape(b.rgb) || !a.depth.same_shape(b.depth)) {
        throw ShapeMismatchError("eval: frame " + std::to_string(frame) + " sizes differ");
      }
      const ImageMetrics im = image_metrics(a.rgb, b.rgb);
      const DepthMetrics dm = depth_metrics(a.depth, b.depth, b.valid);
      csv += std::to_string(frame) + "," + num(im.psnr) + "," + num(im.ssim) + "," + num(dm.rmse) +
             "," + num(dm.absrel) + "\n";
    }
    write_text(report_csv, csv);
  });
}

rgbdyn_status rgbdyn_plan(const rgbdyn_dataset* data, const rgbdyn_model* model,
                          const double goal[3], int budget, const char* icem_path, uint64_t seed,
                          const char* report_csv) {
  return guarded([&] {
    need(data, "dataset");
    need(model, "model");
    need(goal, "goal");
    need(report_csv, "report path");
    require(model->model.action.has_value(), "plan: needs an action-conditioned model");
    const ActionModel& am = *model->model.action;
    const Sequence& s = data->seq;
    const IcemParams p = icem_path ? icem_from_json(load_json_file(icem_path)) : IcemParams{};
    p.validate();
    const Scene env = scene_at(s, am.source_index);
    ServoOptions so;
    so.budget = budget;
    const Vec3 g(goal[0], goal[1], goal[2]);
    const EpisodeRecord ep = run_servoing(env, am, p, g, so, seed);

    std::string csv = "step";
    for (int i = 0; i < am.action_dim; ++i) csv += ",action_" + std::to_string(i);
    csv += ",tracked_x,tracked_y,tracked_z,distance,success\n";
    for (std::size_t t = 0; t < ep.steps.size(); ++t) {
      const EpisodeStep& st = ep.steps[t];
      csv += std::to_string(t);
      for (Eigen::Index i = 0; i < st.action.size(); ++i) csv += "," + num(st.action[i]);
      csv += "," + num(st.tracked.x()) + "," + num(st.tracked.y()) + "," + num(st.tracked.z()) +
             "," + num(st.distance) + "," + (ep.success ? "1" : "0") + "\n";
    }
    write_text(report_csv, csv);
  });
}

rgbdyn_status rgbdyn_hpo(const rgbdyn_dataset* data, const char* space_path, const int* ladder,
                         size_t ladder_len, double eta, int workers, int max_trials, uint64_t seed,
                         const char* log_path) {
  return guarded([&] {
    need(data, "dataset");
    need(space_path, "search space path");
    need(log_path, "log path");
    require(ladder != nullptr && ladder_len > 0, "hpo: empty budget ladder");
    require(eta >= 2 && std::floor(eta) == eta, "hpo: eta must be an integer >= 2");
    const Sequence& s = data->seq;
    require(s.length() >= 2, "hpo: the dataset needs at least two frames");
    const SearchSpace space = search_space_from_json(load_json_file(space_path));
    {
      // Reject unknown names before any work is scheduled.
      LossWeights w;
      FitOptions fo;
      Rng probe(seed, "hpo.probe");
      apply_config(space.sample(probe), w, fo);
    }

    AshaOptions opts;
    opts.ladder.budgets.assign(ladder, ladder + ladder_len);
    opts.ladder.eta = static_cast<int>(eta);
    opts.workers = workers;
    opts.max_trials = max_trials;
    opts.seed = seed;
    if (std::filesystem::exists(log_path)) opts.prior = read_trial_log(log_path);

    // Fit the first pair for `budget` steps and score the rollout over the
    // rest of the sequence.
    const int horizon = std::min(s.length() - 1, 3);
    const std::vector<RgbdFrame> gt(s.frames.begin() + 1, s.frames.begin() + 1 + horizon);
    const Objective objective = [&](const Config& c, int budget) {
      LossWeights w;
      FitOptions fo;
      fo.seed = seed;
      apply_config(c, w, fo);
      fo.steps = budget;
      w.validate();
      fo.validate();
      const SceneModel m = fit_pair(s.frames[0], s.frames[1], s.intr, w, fo);
      std::vector<RgbdFrame> pred;
      for (RolloutStep& st : rollout(m, s.frames[0], s.intr, horizon)) pred.push_back(std::move(st.frame));
      return hpo_metric(pred, gt);
    };

    std::ofstream log(log_path, std::ios::binary | std::ios::trunc);
    if (!log) throw IoError(std::string("cannot open ") + log_path + " for writing");
    opts.on_log = [&](const LogEntry& e) { log << to_json_line(e) << "\n" << std::flush; };
    asha_run(space, objective, opts);
    if (!log) throw IoError(std::string("failed writing ") + log_path);
  });
}

rgbdyn_status rgbdyn_hpo_report(const char* log_path, const char* csv_path) {
  return guarded([&] {
    need(log_path, "log path");
    const std::vector<TrialRecord> trials = trials_from_log(read_trial_log(log_path));
    std::string csv = "budget_a,budget_b,r,p,n\n";
    for (const CorrelationCell& c : budget_correlation(trials)) {
      csv += std::to_string(c.budget_a) + "," + std::to_string(c.budget_b) + "," + num(c.r) + "," +
             num(c.p) + "," + std::to_string(c.n) + "\n";
    }
    if (csv_path) {
      write_text(csv_path, csv);
    } else {
      std::fwrite(csv.data(), 1, csv.size(), stdout);
      std::fflush(stdout);
    }
  });
}

}  // extern "C"
