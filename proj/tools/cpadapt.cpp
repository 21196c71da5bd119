// Command-line driver for the cartpole experiments.
#include "cpadapt/harness.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace cpadapt;
using namespace cpadapt::harness;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> methods;
  std::optional<int> beam;
  std::optional<int> trials;
};

ExperimentConfig load_config(const Options& opt, const std::string& scenario) {
  ExperimentConfig cfg = ExperimentConfig::cartpole();
  if (!opt.config.empty()) {
    std::ifstream is(opt.config);
    if (!is) throw ConfigError("cannot read config '" + opt.config + "'");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config parse: ") + e.what());
    }
    cfg = experiment_config_from_json(j);
  }
  cfg.scenario = scenario;
  if (opt.seed) cfg.seed = *opt.seed;
  if (!opt.out.empty()) cfg.output_dir = opt.out;
  if (opt.beam) cfg.adapt.beam_size = *opt.beam;
  if (opt.trials) cfg.trials = *opt.trials;
  cfg.validate();
  return cfg;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

OfflineData load_or_generate(const ExperimentConfig& cfg) {
  const fs::path dir(cfg.output_dir);
  if (fs::exists(dir / "trajectories.csv") && fs::exists(dir / "splits.json")) {
    OfflineData data = read_offline_dataset(dir);
    if (static_cast<int>(data.splits.size()) >= cfg.trials) return data;
  }
  OfflineData data = generate_offline_dataset(cfg);
  write_offline_dataset(dir, data);
  return data;
}

fs::path model_path(const ExperimentConfig& cfg, int trial) {
  return fs::path(cfg.output_dir) / "models" / ("trial_" + std::to_string(trial) + ".json");
}

TrainedModel load_or_train(const ExperimentConfig& cfg, const OfflineData& data, int trial) {
  const fs::path path = model_path(cfg, trial);
  if (fs::exists(path)) {
    std::ifstream is(path);
    return trained_model_from_json(nlohmann::json::parse(is));
  }
  TrainedModel model = train_trial_model(cfg, data, trial);
  write_json(path, to_json(model));
  return model;
}

std::vector<Method> selected_methods(const Options& opt) {
  std::vector<Method> out;
  for (const auto& m : opt.methods) out.push_back(parse_method(m));
  if (out.empty()) out = {Method::Ours, Method::NoCp, Method::SgdLastLayer, Method::OfflineOnly};
  return out;
}

void cmd_gen_data(const ExperimentConfig& cfg) {
  const OfflineData data = generate_offline_dataset(cfg);
  write_offline_dataset(cfg.output_dir, data);
  write_json(fs::path(cfg.output_dir) / "config.json", to_json(cfg));
  std::cout << nlohmann::json{{"transitions", data.transitions.size()}, {"resampled", data.resampled},
                              {"out", cfg.output_dir}}
                   .dump()
            << '\n';
}

void cmd_train(const ExperimentConfig& cfg) {
  const OfflineData data = load_or_generate(cfg);
  std::ofstream loss(fs::path(cfg.output_dir) / "train_loss.csv");
  loss << "trial,epoch,loss\n";
  for (int trial = 0; trial < cfg.trials; ++trial) {
    const TrainedModel model = train_trial_model(
        cfg, data, trial, [&](int epoch, double l) { loss << trial << ',' << epoch << ',' << l << '\n'; });
    write_json(model_path(cfg, trial), to_json(model));
  }
  std::cout << nlohmann::json{{"models", cfg.trials}, {"out", cfg.output_dir}}.dump() << '\n';
}

void cmd_eval_online(const ExperimentConfig& cfg, const std::vector<Method>& methods) {
  const OfflineData data = load_or_generate(cfg);
  const fs::path dir(cfg.output_dir);
  std::vector<MetricsRecord> per_trial;
  std::ofstream steps(dir / "online_step_rmse.csv");
  steps << "method,trial,trajectory,step,rmse\n";
  std::ofstream det(dir / "detections.csv");
  det << "trial,trajectory,index,time\n";
  for (int trial = 0; trial < cfg.trials; ++trial) {
    const TrainedModel model = load_or_train(cfg, data, trial);
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
        for (std::size_t k = 0; k < r.step_rmse.size(); ++k) {
          steps << r.method << ',' << trial << ',' << r.trajectory << ',' << k << ',' << r.step_rmse[k] << '\n';
        }
        for (const auto& d : r.detections) det << trial << ',' << r.trajectory << ',' << d.index << ',' << d.time << '\n';
        recs.push_back(std::move(r));
      }
      per_trial.push_back(aggregate_trial(recs));
    }
  }
  const auto summary = emit_report(per_trial, dir);
  nlohmann::json j = summary_json(summary);
  int events = 0, detected = 0;
  for (const auto& r : per_trial) {
    if (r.method == "ours") {
      events += r.events;
      detected += r.events_detected;
    }
  }
  if (events > 0) j["detection_rate"] = static_cast<double>(detected) / events;
  write_json(dir / "summary.json", j);
  std::cout << j.dump() << '\n';
}

void cmd_closed_loop(const ExperimentConfig& cfg) {
  const OfflineData data = load_or_generate(cfg);
  const TrainedModel model = load_or_train(cfg, data, 0);
  const fs::path dir = fs::path(cfg.output_dir) / "closed_loop";
  fs::create_directories(dir);
  std::vector<MetricsRecord> records;
  int wins = 0;
  for (int s = 0; s < cfg.closed_loop_seeds; ++s) {
    const auto seed = static_cast<std::uint64_t>(s);
    ClosedLoopRun nominal = run_closed_loop(cfg, nullptr, false, seed);
    ClosedLoopRun adaptive = run_closed_loop(cfg, &model, true, seed);
    {
      std::ofstream os(dir / ("nominal_" + std::to_string(s) + ".csv"));
      write_controller_log(os, nominal.log);
      std::ofstream oa(dir / ("adaptive_" + std::to_string(s) + ".csv"));
      write_controller_log(oa, adaptive.log);
    }
    if (adaptive.metrics.tracking_cost < nominal.metrics.tracking_cost) ++wins;
    nominal.metrics.trial = adaptive.metrics.trial = s;
    nominal.metrics.crmse = nominal.metrics.tracking_cost;
    adaptive.metrics.crmse = adaptive.metrics.tracking_cost;
    records.push_back(nominal.metrics);
    records.push_back(adaptive.metrics);
  }
  std::ofstream csv(dir / "records.csv");
  write_records_csv(csv, records);
  nlohmann::json j{{"seeds", cfg.closed_loop_seeds}, {"adaptive_wins", wins}};
  for (const auto& [name, s] : summarize(records)) {
    j["tracking_cost"][name] = {{"mean", s.mean}, {"std", s.std}};
  }
  write_json(dir / "summary.json", j);
  std::cout << j.dump() << '\n';
}

void cmd_ablate_beam(const ExperimentConfig& cfg) {
  const OfflineData data = load_or_generate(cfg);
  const TrainedModel model = load_or_train(cfg, data, 0);
  const auto rows = ablate_beam(cfg, model, generate_disturbed_trajectories(cfg, 0));
  std::ofstream os(fs::path(cfg.output_dir) / "beam_ablation.csv");
  os << "beam,median_step_ms,mean_crmse\n";
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) {
    os << r.beam << ',' << r.median_step_ms << ',' << r.mean_crmse << '\n';
    j.push_back({{"beam", r.beam}, {"median_step_ms", r.median_step_ms}, {"mean_crmse", r.mean_crmse}});
  }
  write_json(fs::path(cfg.output_dir) / "beam_ablation.json", j);
  std::cout << j.dump() << '\n';
}

void cmd_report(const ExperimentConfig& cfg) {
  const fs::path path = fs::path(cfg.output_dir) / "records.csv";
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read " + path.string());
  const auto records = read_records_csv(is);
  const auto summary = emit_report(records, cfg.output_dir);
  std::cout << summary_json(summary).dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Changepoint-aware residual adaptation experiments"};
  app.require_subcommand(1);
  Options opt;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "JSON experiment config");
    sub->add_option("--seed", opt.seed, "master seed");
    sub->add_option("--out", opt.out, "output directory");
    sub->add_option("--trials", opt.trials, "number of trials");
    sub->add_option("--beam", opt.beam, "beam size K");
    sub->add_option("--method", opt.methods, "ours | no_cp | sgd_last_layer | offline_only");
  };
  const std::vector<std::string> names{"gen-data", "train", "eval-online", "closed-loop", "ablate-beam", "report"};
  for (const auto& n : names) add_common(app.add_subcommand(n));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    const std::string scenario = app.get_subcommands().front()->get_name();
    const ExperimentConfig cfg = load_config(opt, scenario);
    if (scenario == "gen-data") cmd_gen_data(cfg);
    else if (scenario == "train") cmd_train(cfg);
    else if (scenario == "eval-online") cmd_eval_online(cfg, selected_methods(opt));
    else if (scenario == "closed-loop") cmd_closed_loop(cfg);
    else if (scenario == "ablate-beam") cmd_ablate_beam(cfg);
    else cmd_report(cfg);
  } catch (const cpadapt::Error& e) {
    std::cerr << nlohmann::json{{"error", {{"kind", e.kind()}, {"message", e.what()}}}}.dump() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", {{"kind", "internal"}, {"message", e.what()}}}}.dump() << '\n';
    return 3;
  }
  return 0;
}
