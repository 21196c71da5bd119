#ifndef CPADAPT_HARNESS_HPP
#define CPADAPT_HARNESS_HPP

#include "cpadapt/cpblr.hpp"
#include "cpadapt/diagnostics.hpp"
#include "cpadapt/model.hpp"
#include "cpadapt/mpc.hpp"
#include "cpadapt/plant.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace cpadapt::harness {

/// Settling-time sentinel: the error never stays inside the band.
inline constexpr long kNever = -1;

struct ExperimentConfig {
  std::string scenario = "eval-online";
  int trials = 10;
  std::uint64_t seed = 0;
  int trajectories = 100;        // offline dataset size
  int trajectory_length = 120;   // steps per rollout
  int eval_trajectories = 10;    // disturbed rollouts per trial
  int closed_loop_seeds = 10;
  double train_fraction = 0.8;
  double dt = plant::kDefaultDt;
  Vector initial_state_low;
  Vector initial_state_high;
  plant::PlantParams plant = plant::PlantParams::true_system();
  plant::PlantParams nominal = plant::PlantParams::nominal_model();
  std::vector<plant::Intervention> interventions;
  AdaptConfig adapt = AdaptConfig::cartpole(plant::kStateDim);
  OfflineTrainConfig train;
  mpc::OcpConfig ocp = mpc::OcpConfig::cartpole();
  double sgd_learning_rate = 1e-3;
  std::vector<int> beam_sizes{5, 10, 15, 20, 30};
  int detection_tolerance = 3;
  double settling_band = 0.05;
  std::string output_dir = "out";

  static ExperimentConfig cartpole();
  void validate() const;
  plant::InterventionSchedule schedule() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
/// Missing keys keep their cartpole defaults; unknown keys are rejected.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

enum class Method { Ours, NoCp, SgdLastLayer, OfflineOnly };
Method parse_method(const std::string& name);
std::string method_name(Method m);

/// A changepoint index first seen in the top hypothesis at `time`.
struct Detection {
  long index = 0;
  long time = 0;
};

struct MetricsRecord {
  std::string method;
  int trial = 0;
  long trajectory = -1;  // -1 for a per-trial aggregate
  double crmse = 0.0;
  std::vector<double> step_rmse;
  std::vector<double> shift;     // one per intervention event
  std::vector<long> settling;    // one per intervention event, kNever if never
  std::vector<Detection> detections;
  int events = 0;
  int events_detected = 0;
  double step_time_ms = 0.0;     // mean wall clock per adaptation step
  double tracking_cost = 0.0;    // closed loop only
};

/// Sum over steps of the per-step root-mean-square state error.
double crmse(const std::vector<Vector>& truth, const std::vector<Vector>& pred);

struct ShiftSettling {
  double shift = 0.0;
  long settling = 0;  // steps after the event, or kNever
};

/// Shift is |e[event] - e[event-1]| (the pre-event error is taken as 0 at
/// event 0). Settling is the first offset s >= 0 such that |e| <= band for
/// every step from event + s to the end.
ShiftSettling shift_and_settling(const std::vector<double>& error, long event, double band);

/// Deterministic generator for one (purpose, trial, index) stream.
std::mt19937_64 make_rng(std::uint64_t master, std::uint64_t purpose, std::uint64_t trial = 0,
                         std::uint64_t index = 0);

Vector sample_initial_state(const ExperimentConfig& cfg, std::mt19937_64& rng);

/// Closed-loop rollout of the true plant under nominal MPC. Interventions in
/// `schedule` are applied before the transition of their step.
std::vector<Transition> rollout_nominal_mpc(const ExperimentConfig& cfg, const Vector& x0,
                                            const plant::InterventionSchedule& schedule,
                                            std::mt19937_64& rng, long trajectory_id);

struct Split {
  std::vector<long> train;
  std::vector<long> test;
};

struct OfflineData {
  std::vector<Transition> transitions;
  std::vector<Split> splits;
  int resampled = 0;  // trajectories discarded after a blow-up
};

/// Stationary rollouts (no interventions) plus per-trial train/test splits.
OfflineData generate_offline_dataset(const ExperimentConfig& cfg);
void write_offline_dataset(const std::filesystem::path& dir, const OfflineData& data);
OfflineData read_offline_dataset(const std::filesystem::path& dir);

/// Ten-trajectory disturbed set of one trial (interventions applied).
std::vector<std::vector<Transition>> generate_disturbed_trajectories(const ExperimentConfig& cfg, int trial);

Dataset dataset_for(const ExperimentConfig& cfg, const std::vector<Transition>& rows);
TrainedModel train_trial_model(const ExperimentConfig& cfg, const OfflineData& data, int trial,
                               const std::function<void(int, double)>& on_epoch = {});
/// Extra disturbed rollout used only for tuning baselines.
std::vector<Transition> held_out_trajectory(const ExperimentConfig& cfg, int trial);

/// Open-loop replay: predict each next state from logged (x, u), then update
/// the learner with the observed residual.
/// `step_times_ms`, when given, receives the wall clock of every
/// adaptation step.
MetricsRecord evaluate_trajectory(const ExperimentConfig& cfg, const TrainedModel& model,
                                  const std::vector<Transition>& trajectory, Method method,
                                  std::vector<double>* step_times_ms = nullptr);

/// Per-trial aggregate (mean CRMSE over trajectories, pooled detections).
MetricsRecord aggregate_trial(const std::vector<MetricsRecord>& per_trajectory);

struct OnlineEvalResult {
  std::vector<MetricsRecord> per_trajectory;
  std::vector<MetricsRecord> per_trial;
};

OnlineEvalResult run_online_eval(const ExperimentConfig& cfg, const OfflineData& data,
                                 const std::vector<Method>& methods);

/// Learning rate from the grid with the lowest CRMSE on a held-out
/// disturbed trajectory.
double tune_sgd_rate(const ExperimentConfig& cfg, const TrainedModel& model,
                     const std::vector<Transition>& held_out, const std::vector<double>& grid);

struct ClosedLoopStep {
  long step = 0;
  Vector state;
  double u = 0.0;
  int iterations = 0;
  double cost = 0.0;
  Vector q_factor;
  Vector sigma_tot;
  double wall_ms = 0.0;
};

struct ClosedLoopRun {
  MetricsRecord metrics;
  std::vector<ClosedLoopStep> log;
};

/// Receding-horizon episode on the true plant with interventions. With
/// `adaptive`, the beam is updated from every observed transition and
/// drives both the prediction model and the Q modulation.
ClosedLoopRun run_closed_loop(const ExperimentConfig& cfg, const TrainedModel* model, bool adaptive,
                              std::uint64_t episode_seed);
void write_controller_log(std::ostream& os, const std::vector<ClosedLoopStep>& log);

struct BeamAblationRow {
  int beam = 0;
  double median_step_ms = 0.0;
  double mean_crmse = 0.0;
};
std::vector<BeamAblationRow> ablate_beam(const ExperimentConfig& cfg, const TrainedModel& model,
                                         const std::vector<std::vector<Transition>>& trajectories);

struct SummaryStat {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::size_t n = 0;
};

/// CRMSE mean and population std grouped by method.
std::map<std::string, SummaryStat> summarize(const std::vector<MetricsRecord>& records);
void write_records_csv(std::ostream& os, const std::vector<MetricsRecord>& records);
/// Reads the scalar columns written by write_records_csv.
std::vector<MetricsRecord> read_records_csv(std::istream& is);
nlohmann::json summary_json(const std::map<std::string, SummaryStat>& summary);
std::map<std::string, SummaryStat> read_summary(const nlohmann::json& j);
/// Writes records.csv and summary.json into `dir`; returns the summary.
std::map<std::string, SummaryStat> emit_report(const std::vector<MetricsRecord>& records,
                                               const std::filesystem::path& dir);

// Synthetic piecewise-stationary regression used to probe the regret rate.
struct RegretProbeConfig {
  int latent_dim = 2;
  int output_dim = 1;
  double noise_std = 0.1;
  double weight_std = 1.0;  // spread of per-segment decoders
  AdaptConfig adapt;
  int repeats = 10;
  std::uint64_t seed = 0;

  static RegretProbeConfig standard();
};

struct RegretSample {
  long horizon = 0;
  int segments = 0;
  double excess = 0.0;  // mean over repeats
};

/// Cumulative squared one-step error of the engine minus that of the
/// per-segment least-squares decoder fit with known boundaries.
double regret_excess(const RegretProbeConfig& cfg, long horizon, int segments, std::uint64_t seed);
RegretSample regret_sample(const RegretProbeConfig& cfg, long horizon, int segments);
/// Least-squares slope of log(excess) against log(horizon).
double fitted_exponent(const std::vector<RegretSample>& samples);

}  // namespace cpadapt::harness

#endif  // CPADAPT_HARNESS_HPP
