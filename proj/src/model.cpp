#include "cpadapt/model.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

namespace cpadapt {

Dataset::Dataset(std::vector<Transition> transitions, const NominalFn& nominal)
    : transitions_(std::move(transitions)) {
  if (transitions_.empty()) return;
  state_dim_ = static_cast<int>(transitions_.front().x.size());
  control_dim_ = static_cast<int>(transitions_.front().u.size());
  residuals_.reserve(transitions_.size());
  for (std::size_t i = 0; i < transitions_.size(); ++i) {
    const Transition& t = transitions_[i];
    require_dim(t.x.size(), state_dim_, "transition state");
    require_dim(t.u.size(), control_dim_, "transition control");
    require_dim(t.x_next.size(), state_dim_, "transition next state");
    if (!t.x.allFinite() || !t.u.allFinite() || !t.x_next.allFinite()) {
      throw NumericError("dataset: non-finite transition at row " + std::to_string(i));
    }
    residuals_.push_back(t.x_next - nominal(t.x, t.u));
  }
}

Dataset Dataset::select_trajectories(const std::vector<long>& ids, const NominalFn& nominal) const {
  const std::set<long> wanted(ids.begin(), ids.end());
  std::vector<Transition> rows;
  for (const auto& t : transitions_) {
    if (wanted.count(t.trajectory)) rows.push_back(t);
  }
  return Dataset(std::move(rows), nominal);
}

std::vector<long> Dataset::trajectory_ids() const {
  std::vector<long> ids;
  for (const auto& t : transitions_) {
    if (ids.empty() || ids.back() != t.trajectory) ids.push_back(t.trajectory);
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

void write_transitions_csv(std::ostream& os, const std::vector<Transition>& rows,
                           bool with_trajectory_columns) {
  if (rows.empty()) {
    throw DimensionError("write_transitions_csv: no rows");
  }
  const auto d = rows.front().x.size();
  const auto m = rows.front().u.size();
  std::vector<std::string> header;
  if (with_trajectory_columns) {
    header.push_back("traj");
    header.push_back("step");
  }
  for (Eigen::Index i = 0; i < d; ++i) header.push_back("x" + std::to_string(i));
  for (Eigen::Index i = 0; i < m; ++i) header.push_back("u" + std::to_string(i));
  for (Eigen::Index i = 0; i < d; ++i) header.push_back("x_next" + std::to_string(i));
  if (with_trajectory_columns) header.push_back("intervention");
  for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
  os << '\n';

  const auto old_precision = os.precision(17);
  for (const auto& t : rows) {
    bool first = true;
    auto emit = [&](auto v) {
      if (!first) os << ',';
      os << v;
      first = false;
    };
    if (with_trajectory_columns) {
      emit(t.trajectory);
      emit(t.step);
    }
    for (Eigen::Index i = 0; i < d; ++i) emit(t.x[i]);
    for (Eigen::Index i = 0; i < m; ++i) emit(t.u[i]);
    for (Eigen::Index i = 0; i < d; ++i) emit(t.x_next[i]);
    if (with_trajectory_columns) emit(t.intervention ? 1 : 0);
    os << '\n';
  }
  os.precision(old_precision);
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    cells.push_back(cell);
  }
  return cells;
}

}  // namespace

std::vector<Transition> read_transitions_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw DimensionError("transitions csv: missing header");
  const auto header = split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;

  int d = 0, m = 0;
  while (col.count("x" + std::to_string(d))) ++d;
  while (col.count("u" + std::to_string(m))) ++m;
  if (d == 0 || m == 0) throw DimensionError("transitions csv: header lacks x0/u0 columns");
  for (int i = 0; i < d; ++i) {
    if (!col.count("x_next" + std::to_string(i))) {
      throw DimensionError("transitions csv: missing column x_next" + std::to_string(i));
    }
  }
  const bool has_traj = col.count("traj") && col.count("step");
  const bool has_flag = col.count("intervention") > 0;

  std::vector<Transition> rows;
  long line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw DimensionError("transitions csv: wrong column count on line " + std::to_string(line_no));
    }
    Transition t;
    t.x.resize(d);
    t.u.resize(m);
    t.x_next.resize(d);
    for (int i = 0; i < d; ++i) {
      t.x[i] = std::stod(cells[col["x" + std::to_string(i)]]);
      t.x_next[i] = std::stod(cells[col["x_next" + std::to_string(i)]]);
    }
    for (int i = 0; i < m; ++i) t.u[i] = std::stod(cells[col["u" + std::to_string(i)]]);
    if (has_traj) {
      t.trajectory = std::stol(cells[col["traj"]]);
      t.step = std::stol(cells[col["step"]]);
    }
    if (has_flag) t.intervention = std::stol(cells[col["intervention"]]) != 0;
    rows.push_back(std::move(t));
  }
  return rows;
}

Vector TrainedModel::normalized_input(const Eigen::Ref<const Vector>& x,
                                      const Eigen::Ref<const Vector>& u) const {
  Vector in(x.size() + u.size());
  in << x, u;
  return (in - input_mean).cwiseQuotient(input_scale);
}

LatentGaussian TrainedModel::latent(const Eigen::Ref<const Vector>& x,
                                    const Eigen::Ref<const Vector>& u) const {
  return encode(encoder, normalized_input(x, u));
}

Vector TrainedModel::scale_residual(const Eigen::Ref<const Vector>& delta) const {
  Vector out = Vector::Zero(delta.size());
  for (Eigen::Index j = 0; j < delta.size(); ++j) {
    if (residual_scale[j] > 0.0) out[j] = delta[j] / residual_scale[j];
  }
  return out;
}

Vector TrainedModel::unscale_residual(const Eigen::Ref<const Vector>& scaled) const {
  return scaled.cwiseProduct(residual_scale);
}

Vector TrainedModel::unscale_variance(const Eigen::Ref<const Vector>& scaled) const {
  return scaled.cwiseProduct(residual_scale.cwiseAbs2());
}

namespace {

std::vector<double> to_std(const Eigen::Ref<const Vector>& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

Vector from_std(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

nlohmann::json to_json(const TrainedModel& model) {
  nlohmann::json j;
  j["topology"] = {{"hidden", {kHiddenWidths[0], kHiddenWidths[1], kHiddenWidths[2]}},
                   {"activation", model.encoder.activation()},
                   {"input_dim", model.encoder.input_dim()},
                   {"output_dim", model.encoder.output_dim()}};
  j["parameters"] = to_std(model.encoder.flatten());
  std::vector<double> theta;
  for (Eigen::Index r = 0; r < model.theta0.rows(); ++r)
    for (Eigen::Index c = 0; c < model.theta0.cols(); ++c) theta.push_back(model.theta0(r, c));
  j["theta0"] = theta;
  j["latent_dim"] = model.latent_dim();
  j["state_dim"] = model.state_dim;
  j["control_dim"] = model.control_dim;
  j["input_mean"] = to_std(model.input_mean);
  j["input_scale"] = to_std(model.input_scale);
  j["residual_scale"] = to_std(model.residual_scale);
  return j;
}

TrainedModel trained_model_from_json(const nlohmann::json& j) {
  TrainedModel m;
  m.state_dim = j.at("state_dim").get<int>();
  m.control_dim = j.at("control_dim").get<int>();
  const int latent = j.at("latent_dim").get<int>();
  const auto hidden = j.at("topology").at("hidden").get<std::vector<int>>();
  if (hidden != std::vector<int>(kHiddenWidths.begin(), kHiddenWidths.end())) {
    throw ConfigError("model json: unsupported encoder topology");
  }
  m.encoder = EncoderParams(m.state_dim + m.control_dim, latent);
  m.encoder.assign(from_std(j.at("parameters").get<std::vector<double>>()));
  const auto theta = j.at("theta0").get<std::vector<double>>();
  require_dim(static_cast<Eigen::Index>(theta.size()), m.state_dim * latent, "theta0 entries");
  m.theta0.resize(m.state_dim, latent);
  for (int r = 0, k = 0; r < m.state_dim; ++r)
    for (int c = 0; c < latent; ++c) m.theta0(r, c) = theta[k++];
  m.input_mean = from_std(j.at("input_mean").get<std::vector<double>>());
  m.input_scale = from_std(j.at("input_scale").get<std::vector<double>>());
  m.residual_scale = from_std(j.at("residual_scale").get<std::vector<double>>());
  require_dim(m.input_mean.size(), m.state_dim + m.control_dim, "input_mean");
  require_dim(m.input_scale.size(), m.state_dim + m.control_dim, "input_scale");
  require_dim(m.residual_scale.size(), m.state_dim, "residual_scale");
  return m;
}

OfflineTrainOutput train_offline(const Dataset& data, const OfflineTrainConfig& cfg,
                                 ResidualScaling scaling,
                                 const std::function<void(int, double)>& on_epoch) {
  if (data.empty()) throw DimensionError("train_offline: empty dataset");
  const int d = data.state_dim();
  const int m = data.control_dim();
  const auto n = static_cast<double>(data.size());

  TrainedModel model;
  model.state_dim = d;
  model.control_dim = m;
  model.input_mean = Vector::Zero(d + m);
  Vector sq = Vector::Zero(d + m);
  Vector res_sq = Vector::Zero(d);
  for (std::size_t i = 0; i < data.size(); ++i) {
    Vector in(d + m);
    in << data[i].x, data[i].u;
    model.input_mean += in;
    sq += in.cwiseAbs2();
    res_sq += data.residual(i).cwiseAbs2();
  }
  model.input_mean /= n;
  model.input_scale = (sq / n - model.input_mean.cwiseAbs2()).cwiseMax(0.0).cwiseSqrt();
  for (Eigen::Index i = 0; i < model.input_scale.size(); ++i) {
    if (model.input_scale[i] < 1e-12) model.input_scale[i] = 1.0;
  }
  model.residual_scale = Vector::Ones(d);
  if (scaling == ResidualScaling::Rms) {
    model.residual_scale = (res_sq / n).cwiseSqrt();
    const double largest = model.residual_scale.maxCoeff();
    // Dimensions the nominal model already predicts exactly carry no residual.
    for (Eigen::Index i = 0; i < d; ++i) {
      if (!(model.residual_scale[i] > 1e-9 * largest)) model.residual_scale[i] = 0.0;
    }
  }

  std::vector<TrainingPair> pairs;
  pairs.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    pairs.push_back({model.normalized_input(data[i].x, data[i].u), model.scale_residual(data.residual(i))});
  }
  TrainResult trained = train_pairs(pairs, cfg, on_epoch);
  model.encoder = std::move(trained.encoder);
  model.theta0 = std::move(trained.theta0);
  return {std::move(model), std::move(trained.epoch_loss)};
}

Vector calibrate_residual_scale(TrainedModel& model, const Dataset& data, const Vector& noise_variance) {
  const int d = model.state_dim;
  require_dim(noise_variance.size(), d, "noise variance");
  if (data.empty()) throw DimensionError("calibrate_residual_scale: empty dataset");
  if ((noise_variance.array() <= 0.0).any()) throw ConfigError("calibrate_residual_scale: variances must be > 0");
  Vector mse = Vector::Zero(d);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Vector err = model.scale_residual(data.residual(i)) - model.theta0 * model.latent(data[i].x, data[i].u).mean;
    mse += err.cwiseAbs2();
  }
  mse /= static_cast<double>(data.size());
  Vector factor = Vector::Ones(d);
  for (int j = 0; j < d; ++j) {
    if (model.residual_scale[j] > 0.0 && mse[j] > 0.0) factor[j] = std::sqrt(mse[j] / noise_variance[j]);
  }
  model.residual_scale = model.residual_scale.cwiseProduct(factor);
  model.theta0 = factor.cwiseInverse().asDiagonal() * model.theta0;
  return factor;
}

}  // namespace cpadapt
