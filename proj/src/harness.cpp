#include "cpadapt/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

namespace cpadapt::harness {

namespace {

enum Stream : std::uint64_t {
  kOfflineStream = 1,
  kSplitStream = 2,
  kDisturbedStream = 3,
  kHeldOutStream = 4,
  kClosedLoopStream = 5,
  kTrainStream = 6,
  kRegretStream = 7,
};

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

Vector from_json_vector(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

nlohmann::json plant_json(const plant::PlantParams& p) {
  return {{"cart_mass", p.cart_mass},         {"pole_mass", p.pole_mass},
          {"pole_length", p.pole_length},     {"gravity", p.gravity},
          {"cart_friction", p.cart_friction}, {"pole_friction", p.pole_friction},
          {"disturbance_mean", p.disturbance_mean}, {"disturbance_std", p.disturbance_std}};
}

plant::PlantParams plant_from_json(const nlohmann::json& j, plant::PlantParams p) {
  p.cart_mass = j.value("cart_mass", p.cart_mass);
  p.pole_mass = j.value("pole_mass", p.pole_mass);
  p.pole_length = j.value("pole_length", p.pole_length);
  p.gravity = j.value("gravity", p.gravity);
  p.cart_friction = j.value("cart_friction", p.cart_friction);
  p.pole_friction = j.value("pole_friction", p.pole_friction);
  p.disturbance_mean = j.value("disturbance_mean", p.disturbance_mean);
  p.disturbance_std = j.value("disturbance_std", p.disturbance_std);
  p.validate();
  return p;
}

nlohmann::json train_json(const OfflineTrainConfig& c) {
  return {{"kl_weight", c.kl_weight},       {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},     {"epochs", c.epochs},
          {"seed", c.seed},                 {"deterministic_encoder", c.deterministic_encoder},
          {"latent_dim", c.latent_dim}};
}

OfflineTrainConfig train_from_json(const nlohmann::json& j) {
  OfflineTrainConfig c;
  c.kl_weight = j.value("kl_weight", c.kl_weight);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  c.deterministic_encoder = j.value("deterministic_encoder", c.deterministic_encoder);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.validate();
  return c;
}

plant::CartpoleState as_state(const Vector& v) { return plant::CartpoleState::from_vector(v); }

mpc::StepFn nominal_step_fn(const ExperimentConfig& cfg) {
  const double dt = cfg.dt;
  const plant::PlantParams nominal = cfg.nominal;
  return [dt, nominal](const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& u) {
    return plant::nominal_step(x, u, dt, nominal);
  };
}

mpc::References zero_references(const ExperimentConfig& cfg) {
  return mpc::References::constant(Vector::Zero(plant::kStateDim), Vector::Zero(plant::kControlDim),
                                   cfg.ocp.horizon);
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  return 0.5 * (*mid + *std::max_element(v.begin(), mid));
}

}  // namespace

ExperimentConfig ExperimentConfig::cartpole() {
  ExperimentConfig cfg;
  cfg.initial_state_low = Vector(4);
  cfg.initial_state_low << -0.5, -0.1, -0.2, -0.1;
  cfg.initial_state_high = -cfg.initial_state_low;
  cfg.interventions = plant::InterventionSchedule::standard().events();
  return cfg;
}

void ExperimentConfig::validate() const {
  static const std::set<std::string> scenarios{"gen-data", "train", "eval-online", "closed-loop",
                                               "ablate-beam", "report"};
  if (!scenarios.count(scenario)) throw ConfigError("unknown scenario '" + scenario + "'");
  if (trials < 1 || trajectories < 2 || trajectory_length < 1 || eval_trajectories < 1 ||
      closed_loop_seeds < 1) {
    throw ConfigError("experiment: counts must be positive");
  }
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("experiment: train_fraction in (0, 1)");
  if (!(dt > 0.0)) throw ConfigError("experiment: dt must be > 0");
  require_dim(initial_state_low.size(), plant::kStateDim, "initial_state_low");
  require_dim(initial_state_high.size(), plant::kStateDim, "initial_state_high");
  if ((initial_state_low.array() > initial_state_high.array()).any()) {
    throw ConfigError("experiment: initial state bounds need low <= high");
  }
  plant.validate();
  nominal.validate();
  adapt.validate();
  train.validate();
  ocp.validate();
  require_dim(adapt.noise_variance.size(), plant::kStateDim, "adapt.noise_variance");
  require_dim(ocp.state_dim(), plant::kStateDim, "ocp state weights");
  require_dim(ocp.control_dim(), plant::kControlDim, "ocp control weights");
  if (!(sgd_learning_rate > 0.0)) throw ConfigError("experiment: sgd_learning_rate must be > 0");
  for (int k : beam_sizes) {
    if (k < 1) throw ConfigError("experiment: beam sizes must be >= 1");
  }
  if (detection_tolerance < 0 || !(settling_band > 0.0)) throw ConfigError("experiment: bad detection settings");
  (void)schedule();
}

plant::InterventionSchedule ExperimentConfig::schedule() const { return plant::InterventionSchedule(interventions); }

nlohmann::json to_json(const ExperimentConfig& cfg) {
  nlohmann::json events = nlohmann::json::array();
  for (const auto& e : cfg.interventions) {
    events.push_back({{"step", e.step}, {"impulse", e.impulse}, {"mass_scale", e.mass_scale}});
  }
  return {{"scenario", cfg.scenario},
          {"trials", cfg.trials},
          {"seed", cfg.seed},
          {"trajectories", cfg.trajectories},
          {"trajectory_length", cfg.trajectory_length},
          {"eval_trajectories", cfg.eval_trajectories},
          {"closed_loop_seeds", cfg.closed_loop_seeds},
          {"train_fraction", cfg.train_fraction},
          {"dt", cfg.dt},
          {"initial_state_low", to_std(cfg.initial_state_low)},
          {"initial_state_high", to_std(cfg.initial_state_high)},
          {"plant", plant_json(cfg.plant)},
          {"nominal", plant_json(cfg.nominal)},
          {"interventions", events},
          {"adapt", to_json(cfg.adapt)},
          {"train", train_json(cfg.train)},
          {"ocp", mpc::to_json(cfg.ocp)},
          {"sgd_learning_rate", cfg.sgd_learning_rate},
          {"beam_sizes", cfg.beam_sizes},
          {"detection_tolerance", cfg.detection_tolerance},
          {"settling_band", cfg.settling_band},
          {"output_dir", cfg.output_dir}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  const nlohmann::json defaults = to_json(ExperimentConfig::cartpole());
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  try {
    ExperimentConfig cfg = ExperimentConfig::cartpole();
    cfg.scenario = j.value("scenario", cfg.scenario);
    cfg.trials = j.value("trials", cfg.trials);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.trajectories = j.value("trajectories", cfg.trajectories);
    cfg.trajectory_length = j.value("trajectory_length", cfg.trajectory_length);
    cfg.eval_trajectories = j.value("eval_trajectories", cfg.eval_trajectories);
    cfg.closed_loop_seeds = j.value("closed_loop_seeds", cfg.closed_loop_seeds);
    cfg.train_fraction = j.value("train_fraction", cfg.train_fraction);
    cfg.dt = j.value("dt", cfg.dt);
    if (j.contains("initial_state_low")) cfg.initial_state_low = from_json_vector(j["initial_state_low"]);
    if (j.contains("initial_state_high")) cfg.initial_state_high = from_json_vector(j["initial_state_high"]);
    if (j.contains("plant")) cfg.plant = plant_from_json(j["plant"], cfg.plant);
    if (j.contains("nominal")) cfg.nominal = plant_from_json(j["nominal"], cfg.nominal);
    if (j.contains("interventions")) {
      cfg.interventions.clear();
      for (const auto& e : j["interventions"]) {
        cfg.interventions.push_back({e.at("step").get<long>(), e.value("impulse", 0.0), e.value("mass_scale", 1.0)});
      }
    }
    if (j.contains("adapt")) cfg.adapt = adapt_config_from_json(j["adapt"], cfg.adapt);
    if (j.contains("train")) cfg.train = train_from_json(j["train"]);
    if (j.contains("ocp")) cfg.ocp = mpc::ocp_config_from_json(j["ocp"]);
    cfg.sgd_learning_rate = j.value("sgd_learning_rate", cfg.sgd_learning_rate);
    if (j.contains("beam_sizes")) cfg.beam_sizes = j["beam_sizes"].get<std::vector<int>>();
    cfg.detection_tolerance = j.value("detection_tolerance", cfg.detection_tolerance);
    cfg.settling_band = j.value("settling_band", cfg.settling_band);
    cfg.output_dir = j.value("output_dir", cfg.output_dir);
    cfg.validate();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
}

Method parse_method(const std::string& name) {
  if (name == "ours") return Method::Ours;
  if (name == "no_cp") return Method::NoCp;
  if (name == "sgd_last_layer") return Method::SgdLastLayer;
  if (name == "offline_only") return Method::OfflineOnly;
  throw ConfigError("unknown method '" + name + "'");
}

std::string method_name(Method m) {
  switch (m) {
    case Method::Ours: return "ours";
    case Method::NoCp: return "no_cp";
    case Method::SgdLastLayer: return "sgd_last_layer";
    case Method::OfflineOnly: return "offline_only";
  }
  return "unknown";
}

double crmse(const std::vector<Vector>& truth, const std::vector<Vector>& pred) {
  require_dim(static_cast<Eigen::Index>(pred.size()), static_cast<Eigen::Index>(truth.size()), "crmse series length");
  double total = 0.0;
  for (std::size_t k = 0; k < truth.size(); ++k) {
    require_dim(pred[k].size(), truth[k].size(), "crmse state dimension");
    total += std::sqrt((truth[k] - pred[k]).squaredNorm() / static_cast<double>(truth[k].size()));
  }
  return total;
}

ShiftSettling shift_and_settling(const std::vector<double>& error, long event, double band) {
  if (event < 0 || event >= static_cast<long>(error.size())) {
    throw DimensionError("shift_and_settling: event outside the series");
  }
  ShiftSettling out;
  const double before = event > 0 ? error[event - 1] : 0.0;
  out.shift = std::abs(error[event] - before);
  long last_outside = event - 1;
  for (long k = static_cast<long>(error.size()) - 1; k >= event; --k) {
    if (std::abs(error[k]) > band) {
      last_outside = k;
      break;
    }
  }
  out.settling = last_outside == static_cast<long>(error.size()) - 1 ? kNever : last_outside + 1 - event;
  return out;
}

std::mt19937_64 make_rng(std::uint64_t master, std::uint64_t purpose, std::uint64_t trial, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(purpose), static_cast<std::uint32_t>(trial),
                    static_cast<std::uint32_t>(index)};
  return std::mt19937_64(seq);
}

Vector sample_initial_state(const ExperimentConfig& cfg, std::mt19937_64& rng) {
  Vector x(plant::kStateDim);
  for (int i = 0; i < plant::kStateDim; ++i) {
    std::uniform_real_distribution<double> dist(cfg.initial_state_low[i], cfg.initial_state_high[i]);
    x[i] = dist(rng);
  }
  return x;
}

std::vector<Transition> rollout_nominal_mpc(const ExperimentConfig& cfg, const Vector& x0,
                                            const plant::InterventionSchedule& schedule,
                                            std::mt19937_64& rng, long trajectory_id) {
  mpc::Controller controller(cfg.ocp, nominal_step_fn(cfg), zero_references(cfg));
  plant::PlantParams params = cfg.plant;
  plant::CartpoleState s = as_state(x0);
  std::vector<Transition> rows;
  rows.reserve(static_cast<std::size_t>(cfg.trajectory_length));
  for (long k = 0; k < cfg.trajectory_length; ++k) {
    const plant::InterventionEffect eff = plant::apply_interventions(k, params, schedule, s);
    params = eff.params;
    const Vector x = s.to_vector();
    const Vector u = controller.control_step(x).u;
    s = plant::step(s, u[0], cfg.dt, plant::Mode::True, params, &rng, eff.impulse_force, k);
    rows.push_back({x, u, s.to_vector(), trajectory_id, k, eff.active});
  }
  return rows;
}

OfflineData generate_offline_dataset(const ExperimentConfig& cfg) {
  OfflineData data;
  const plant::InterventionSchedule none;
  for (long traj = 0; traj < cfg.trajectories; ++traj) {
    for (int attempt = 0;; ++attempt) {
      auto rng = make_rng(cfg.seed, kOfflineStream, static_cast<std::uint64_t>(attempt),
                          static_cast<std::uint64_t>(traj));
      const Vector x0 = sample_initial_state(cfg, rng);
      try {
        auto rows = rollout_nominal_mpc(cfg, x0, none, rng, traj);
        data.transitions.insert(data.transitions.end(), rows.begin(), rows.end());
        break;
      } catch (const SimulationBlowUp&) {
        ++data.resampled;
        if (attempt >= 100) throw;
      }
    }
  }
  const auto n_train = static_cast<std::size_t>(std::lround(cfg.train_fraction * cfg.trajectories));
  for (int trial = 0; trial < cfg.trials; ++trial) {
    std::vector<long> ids(static_cast<std::size_t>(cfg.trajectories));
    std::iota(ids.begin(), ids.end(), 0L);
    auto rng = make_rng(cfg.seed, kSplitStream, static_cast<std::uint64_t>(trial));
    std::shuffle(ids.begin(), ids.end(), rng);
    Split split;
    split.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.test.begin(), split.test.end());
    data.splits.push_back(std::move(split));
  }
  return data;
}

void write_offline_dataset(const std::filesystem::path& dir, const OfflineData& data) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "trajectories.csv");
    if (!os) throw ConfigError("cannot write " + (dir / "trajectories.csv").string());
    write_transitions_csv(os, data.transitions, true);
  }
  nlohmann::json splits = nlohmann::json::array();
  for (const auto& s : data.splits) splits.push_back({{"train", s.train}, {"test", s.test}});
  std::ofstream os(dir / "splits.json");
  if (!os) throw ConfigError("cannot write " + (dir / "splits.json").string());
  os << nlohmann::json{{"resampled", data.resampled}, {"splits", splits}}.dump(1) << '\n';
}

OfflineData read_offline_dataset(const std::filesystem::path& dir) {
  OfflineData data;
  std::ifstream is(dir / "trajectories.csv");
  if (!is) throw ConfigError("cannot read " + (dir / "trajectories.csv").string());
  data.transitions = read_transitions_csv(is);
  std::ifstream js(dir / "splits.json");
  if (!js) throw ConfigError("cannot read " + (dir / "splits.json").string());
  const auto j = nlohmann::json::parse(js);
  data.resampled = j.value("resampled", 0);
  for (const auto& s : j.at("splits")) {
    data.splits.push_back({s.at("train").get<std::vector<long>>(), s.at("test").get<std::vector<long>>()});
  }
  return data;
}

std::vector<std::vector<Transition>> generate_disturbed_trajectories(const ExperimentConfig& cfg, int trial) {
  std::vector<std::vector<Transition>> out;
  const auto schedule = cfg.schedule();
  for (int j = 0; j < cfg.eval_trajectories; ++j) {
    for (int attempt = 0;; ++attempt) {
      auto rng = make_rng(cfg.seed, kDisturbedStream, static_cast<std::uint64_t>(trial),
                          static_cast<std::uint64_t>(j) + 1000ULL * static_cast<std::uint64_t>(attempt));
      const Vector x0 = sample_initial_state(cfg, rng);
      try {
        out.push_back(rollout_nominal_mpc(cfg, x0, schedule, rng, j));
        break;
      } catch (const SimulationBlowUp&) {
        if (attempt >= 100) throw;
      }
    }
  }
  return out;
}

Dataset dataset_for(const ExperimentConfig& cfg, const std::vector<Transition>& rows) {
  const NominalFn nominal = nominal_step_fn(cfg);
  return Dataset(rows, nominal);
}

TrainedModel train_trial_model(const ExperimentConfig& cfg, const OfflineData& data, int trial,
                               const std::function<void(int, double)>& on_epoch) {
  if (trial < 0 || trial >= static_cast<int>(data.splits.size())) throw ConfigError("trial outside the split list");
  const std::set<long> train_ids(data.splits[trial].train.begin(), data.splits[trial].train.end());
  std::vector<Transition> rows;
  for (const auto& t : data.transitions) {
    if (train_ids.count(t.trajectory)) rows.push_back(t);
  }
  OfflineTrainConfig tc = cfg.train;
  tc.seed = make_rng(cfg.seed, kTrainStream, static_cast<std::uint64_t>(trial))();
  const Dataset train = dataset_for(cfg, rows);
  TrainedModel model = train_offline(train, tc, ResidualScaling::Rms, on_epoch).model;
  calibrate_residual_scale(model, train, cfg.adapt.noise_variance);
  return model;
}

std::vector<Transition> held_out_trajectory(const ExperimentConfig& cfg, int trial) {
  auto rng = make_rng(cfg.seed, kHeldOutStream, static_cast<std::uint64_t>(trial));
  const Vector x0 = sample_initial_state(cfg, rng);
  return rollout_nominal_mpc(cfg, x0, cfg.schedule(), rng, -1);
}

MetricsRecord evaluate_trajectory(const ExperimentConfig& cfg, const TrainedModel& model,
                                  const std::vector<Transition>& trajectory, Method method,
                                  std::vector<double>* step_times_ms) {
  MetricsRecord rec;
  rec.method = method_name(method);
  rec.trajectory = trajectory.empty() ? -1 : trajectory.front().trajectory;
  const bool uses_beam = method == Method::Ours || method == Method::NoCp;
  AdaptConfig ac = cfg.adapt;
  if (method == Method::NoCp) ac.changepoints_enabled = false;
  Beam beam;
  if (uses_beam) beam = init_beam(model.theta0, ac);
  Matrix theta = model.theta0;

  std::vector<Vector> truth, pred;
  std::set<long> seen;
  std::vector<double> times;
  for (std::size_t k = 0; k < trajectory.size(); ++k) {
    const Transition& t = trajectory[k];
    const Vector f = plant::nominal_step(t.x, t.u, cfg.dt, cfg.nominal);
    const Vector z = model.latent(t.x, t.u).mean;
    const auto t0 = Clock::now();
    const Vector r_hat = uses_beam ? predict(beam, z).mean : Vector(theta * z);
    truth.push_back(t.x_next);
    pred.push_back(f + model.unscale_residual(r_hat));

    const Vector delta = model.scale_residual(t.x_next - f);
    if (uses_beam) {
      beam = beam_step(beam, z, delta);
    } else if (method == Method::SgdLastLayer) {
      theta += cfg.sgd_learning_rate * 2.0 * (delta - theta * z) * z.transpose();
    }
    times.push_back(ms_since(t0));
    if (method == Method::Ours) {
      for (const auto idx : top_hypothesis(beam).changepoints) {
        if (seen.insert(static_cast<long>(idx)).second) rec.detections.push_back({static_cast<long>(idx), static_cast<long>(k)});
      }
    }
  }
  rec.crmse = crmse(truth, pred);
  for (std::size_t k = 0; k < truth.size(); ++k) {
    rec.step_rmse.push_back(std::sqrt((truth[k] - pred[k]).squaredNorm() / static_cast<double>(truth[k].size())));
  }
  for (const long e : cfg.schedule().steps()) {
    if (e >= static_cast<long>(trajectory.size())) continue;
    const ShiftSettling ss = shift_and_settling(rec.step_rmse, e, cfg.settling_band);
    rec.shift.push_back(ss.shift);
    rec.settling.push_back(ss.settling);
    ++rec.events;
    const bool hit = std::any_of(rec.detections.begin(), rec.detections.end(), [&](const Detection& d) {
      return std::abs(d.time - e) <= cfg.detection_tolerance;
    });
    if (hit) ++rec.events_detected;
  }
  rec.step_time_ms = mean_of(times);
  if (step_times_ms) step_times_ms->insert(step_times_ms->end(), times.begin(), times.end());
  return rec;
}

MetricsRecord aggregate_trial(const std::vector<MetricsRecord>& per_trajectory) {
  if (per_trajectory.empty()) throw DimensionError("aggregate_trial: no records");
  MetricsRecord agg;
  agg.method = per_trajectory.front().method;
  agg.trial = per_trajectory.front().trial;
  agg.trajectory = -1;
  std::vector<double> crmses, times;
  for (const auto& r : per_trajectory) {
    crmses.push_back(r.crmse);
    times.push_back(r.step_time_ms);
    agg.events += r.events;
    agg.events_detected += r.events_detected;
    agg.tracking_cost += r.tracking_cost / static_cast<double>(per_trajectory.size());
  }
  agg.crmse = mean_of(crmses);
  agg.step_time_ms = mean_of(times);
  return agg;
}

double tune_sgd_rate(const ExperimentConfig& cfg, const TrainedModel& model,
                     const std::vector<Transition>& held_out, const std::vector<double>& grid) {
  if (grid.empty()) throw ConfigError("tune_sgd_rate: empty grid");
  double best_rate = grid.front();
  double best = std::numeric_limits<double>::infinity();
  for (const double rate : grid) {
    ExperimentConfig c = cfg;
    c.sgd_learning_rate = rate;
    const double v = evaluate_trajectory(c, model, held_out, Method::SgdLastLayer).crmse;
    if (v < best) {
      best = v;
      best_rate = rate;
    }
  }
  return best_rate;
}

OnlineEvalResult run_online_eval(const ExperimentConfig& cfg, const OfflineData& data,
                                 const std::vector<Method>& methods) {
  OnlineEvalResult result;
  for (int trial = 0; trial < cfg.trials; ++trial) {
    const TrainedModel model = train_trial_model(cfg, data, trial);
    const auto trajectories = generate_disturbed_trajectories(cfg, trial);
    ExperimentConfig tcfg = cfg;
    if (std::find(methods.begin(), methods.end(), Method::SgdLastLayer) != methods.end()) {
      tcfg.sgd_learning_rate = tune_sgd_rate(cfg, model, held_out_trajectory(cfg, trial), {1e-4, 1e-3, 1e-2});
    }
    for (const Method m : methods) {
      std::vector<MetricsRecord> recs;
      for (const auto& traj : trajectories) {
        MetricsRecord r = evaluate_trajectory(tcfg, model, traj, m);
        r.trial = trial;
        recs.push_back(r);
      }
      result.per_trial.push_back(aggregate_trial(recs));
      result.per_trajectory.insert(result.per_trajectory.end(), recs.begin(), recs.end());
    }
  }
  return result;
}

ClosedLoopRun run_closed_loop(const ExperimentConfig& cfg, const TrainedModel* model, bool adaptive,
                              std::uint64_t episode_seed) {
  if (adaptive && model == nullptr) throw ConfigError("closed loop: adaptive control needs a trained model");
  ClosedLoopRun run;
  run.metrics.method = adaptive ? "adaptive" : "nominal";
  run.metrics.trajectory = static_cast<long>(episode_seed);
  auto rng = make_rng(cfg.seed, kClosedLoopStream, episode_seed);
  const Vector x0 = sample_initial_state(cfg, rng);
  const auto schedule = cfg.schedule();

  mpc::Controller controller(cfg.ocp, nominal_step_fn(cfg), zero_references(cfg));
  Beam beam;
  if (adaptive) beam = init_beam(model->theta0, cfg.adapt);
  std::set<long> seen;
  plant::PlantParams params = cfg.plant;
  plant::CartpoleState s = as_state(x0);
  Vector prev_x, prev_u;
  std::vector<double> times;
  double cost = 0.0;
  for (long k = 0; k < cfg.trajectory_length; ++k) {
    const Vector x = s.to_vector();
    const auto t0 = Clock::now();
    if (adaptive && k > 0) {
      const Vector f = plant::nominal_step(prev_x, prev_u, cfg.dt, cfg.nominal);
      beam = beam_step(beam, model->latent(prev_x, prev_u).mean, model->scale_residual(x - f));
      for (const auto idx : top_hypothesis(beam).changepoints) {
        if (seen.insert(static_cast<long>(idx)).second) run.metrics.detections.push_back({static_cast<long>(idx), k});
      }
    }
    const mpc::ControlOutput out =
        adaptive ? controller.control_step(x, &beam, model) : controller.control_step(x);
    times.push_back(ms_since(t0));
    cost += x.cwiseAbs2().dot(cfg.ocp.q) + out.u.cwiseAbs2().dot(cfg.ocp.r);
    run.log.push_back({k, x, out.u[0], out.solve.iterations, out.solve.cost, out.q_factor, out.sigma_tot, times.back()});

    const plant::InterventionEffect eff = plant::apply_interventions(k, params, schedule, s);
    params = eff.params;
    s = plant::step(s, out.u[0], cfg.dt, plant::Mode::True, params, &rng, eff.impulse_force, k);
    prev_x = x;
    prev_u = out.u;
  }
  cost += s.to_vector().cwiseAbs2().dot(cfg.ocp.q);
  run.metrics.tracking_cost = cost;
  run.metrics.step_time_ms = mean_of(times);
  return run;
}

void write_controller_log(std::ostream& os, const std::vector<ClosedLoopStep>& log) {
  os << "step,x,x_dot,theta,theta_dot,u,iterations,cost";
  const int d = log.empty() ? plant::kStateDim : static_cast<int>(log.front().state.size());
  for (int j = 0; j < d; ++j) os << ",q_factor" << j;
  for (int j = 0; j < d; ++j) os << ",sigma_tot" << j;
  os << ",wall_ms\n";
  os << std::setprecision(10);
  for (const auto& r : log) {
    os << r.step;
    for (Eigen::Index j = 0; j < r.state.size(); ++j) os << ',' << r.state[j];
    os << ',' << r.u << ',' << r.iterations << ',' << r.cost;
    for (Eigen::Index j = 0; j < r.q_factor.size(); ++j) os << ',' << r.q_factor[j];
    for (Eigen::Index j = 0; j < r.sigma_tot.size(); ++j) os << ',' << r.sigma_tot[j];
    os << ',' << r.wall_ms << '\n';
  }
}

std::vector<BeamAblationRow> ablate_beam(const ExperimentConfig& cfg, const TrainedModel& model,
                                         const std::vector<std::vector<Transition>>& trajectories) {
  std::vector<BeamAblationRow> rows;
  for (const int k : cfg.beam_sizes) {
    ExperimentConfig c = cfg;
    c.adapt.beam_size = k;
    std::vector<double> times, crmses;
    for (const auto& traj : trajectories) {
      crmses.push_back(evaluate_trajectory(c, model, traj, Method::Ours, &times).crmse);
    }
    rows.push_back({k, median_of(times), mean_of(crmses)});
  }
  return rows;
}

std::map<std::string, SummaryStat> summarize(const std::vector<MetricsRecord>& records) {
  if (records.empty()) throw DimensionError("summarize: no records");
  std::map<std::string, std::vector<double>> groups;
  for (const auto& r : records) groups[r.method].push_back(r.crmse);
  std::map<std::string, SummaryStat> out;
  for (const auto& [method, values] : groups) {
    SummaryStat s;
    s.n = values.size();
    s.mean = mean_of(values);
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(s.n));
    out[method] = s;
  }
  return out;
}

void write_records_csv(std::ostream& os, const std::vector<MetricsRecord>& records) {
  os << "method,trial,trajectory,crmse,events,events_detected,step_time_ms,tracking_cost\n";
  os << std::setprecision(12);
  for (const auto& r : records) {
    os << r.method << ',' << r.trial << ',' << r.trajectory << ',' << r.crmse << ',' << r.events << ','
       << r.events_detected << ',' << r.step_time_ms << ',' << r.tracking_cost << '\n';
  }
}

std::vector<MetricsRecord> read_records_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ConfigError("records csv: missing header");
  std::vector<MetricsRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::vector<std::string> f;
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 8) throw ConfigError("records csv: expected 8 columns in '" + line + "'");
    MetricsRecord r;
    try {
      r.method = f[0];
      r.trial = std::stoi(f[1]);
      r.trajectory = std::stol(f[2]);
      r.crmse = std::stod(f[3]);
      r.events = std::stoi(f[4]);
      r.events_detected = std::stoi(f[5]);
      r.step_time_ms = std::stod(f[6]);
      r.tracking_cost = std::stod(f[7]);
    } catch (const std::exception&) {
      throw ConfigError("records csv: malformed row '" + line + "'");
    }
    out.push_back(std::move(r));
  }
  return out;
}

nlohmann::json summary_json(const std::map<std::string, SummaryStat>& summary) {
  nlohmann::json methods = nlohmann::json::object();
  for (const auto& [name, s] : summary) methods[name] = {{"mean", s.mean}, {"std", s.std}, {"n", s.n}};
  return {{"metric", "crmse"}, {"std_convention", "population"}, {"methods", methods}};
}

std::map<std::string, SummaryStat> read_summary(const nlohmann::json& j) {
  std::map<std::string, SummaryStat> out;
  for (const auto& [name, s] : j.at("methods").items()) {
    out[name] = {s.at("mean").get<double>(), s.at("std").get<double>(), s.at("n").get<std::size_t>()};
  }
  return out;
}

std::map<std::string, SummaryStat> emit_report(const std::vector<MetricsRecord>& records,
                                               const std::filesystem::path& dir) {
  const auto summary = summarize(records);
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "records.csv");
  write_records_csv(csv, records);
  std::ofstream js(dir / "summary.json");
  js << summary_json(summary).dump(2) << '\n';
  return summary;
}

RegretProbeConfig RegretProbeConfig::standard() {
  RegretProbeConfig cfg;
  cfg.adapt.changepoint_prior = 0.01;
  cfg.adapt.temperature = 0.1;
  cfg.adapt.beam_size = 5;
  cfg.adapt.prior_variance = cfg.weight_std * cfg.weight_std;
  cfg.adapt.noise_variance = Vector::Constant(cfg.output_dim, cfg.noise_std * cfg.noise_std);
  return cfg;
}

double regret_excess(const RegretProbeConfig& cfg, long horizon, int segments, std::uint64_t seed) {
  if (horizon < 1 || segments < 1 || segments > horizon) throw ConfigError("regret probe: bad horizon/segments");
  const int l = cfg.latent_dim;
  const int d = cfg.output_dim;
  auto rng = make_rng(cfg.seed, kRegretStream, seed,
                      static_cast<std::uint64_t>(horizon) * 16 + static_cast<std::uint64_t>(segments));
  std::normal_distribution<double> normal(0.0, 1.0);
  auto gaussian = [&](int rows, int cols, double scale) {
    Matrix m(rows, cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m(i, j) = scale * normal(rng);
    return m;
  };

  Beam beam = init_beam(Matrix::Zero(d, l), cfg.adapt);
  double engine_loss = 0.0;
  double oracle_loss = 0.0;
  for (int s = 0; s < segments; ++s) {
    const long begin = horizon * s / segments;
    const long end = horizon * (s + 1) / segments;
    const Matrix theta = gaussian(d, l, cfg.weight_std);
    Matrix zs(l, end - begin), ys(d, end - begin);
    for (long k = begin; k < end; ++k) {
      const Vector z = gaussian(l, 1, 1.0);
      const Vector y = theta * z + gaussian(d, 1, cfg.noise_std);
      engine_loss += (y - predict(beam, z).mean).squaredNorm();
      beam = beam_step(beam, z, y);
      zs.col(k - begin) = z;
      ys.col(k - begin) = y;
    }
    // Hindsight least squares on the segment.
    const Matrix gram = zs * zs.transpose();
    const Matrix fit = (gram.ldlt().solve(zs * ys.transpose())).transpose();
    oracle_loss += (ys - fit * zs).squaredNorm();
  }
  return engine_loss - oracle_loss;
}

RegretSample regret_sample(const RegretProbeConfig& cfg, long horizon, int segments) {
  double total = 0.0;
  for (int r = 0; r < cfg.repeats; ++r) total += regret_excess(cfg, horizon, segments, static_cast<std::uint64_t>(r));
  return {horizon, segments, total / cfg.repeats};
}

double fitted_exponent(const std::vector<RegretSample>& samples) {
  if (samples.size() < 2) throw DimensionError("fitted_exponent: need at least two samples");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& s : samples) {
    if (!(s.excess > 0.0)) throw NumericError("fitted_exponent: non-positive excess");
    const double x = std::log(static_cast<double>(s.horizon));
    const double y = std::log(s.excess);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double n = static_cast<double>(samples.size());
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace cpadapt::harness
