#include "cpadapt/mpc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cpadapt::mpc {

namespace {

Vector json_vector(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::vector<double> std_vector(const Vector& v) { return {v.data(), v.data() + v.size()}; }

Matrix project(const Matrix& controls, const OcpConfig& cfg) {
  Matrix out = controls;
  for (Eigen::Index i = 0; i < out.cols(); ++i) {
    out.col(i) = out.col(i).cwiseMax(cfg.u_min).cwiseMin(cfg.u_max);
  }
  return out;
}

double soft_penalty(const Vector& x, const OcpConfig& cfg) {
  if (cfg.soft_constraint_weight <= 0.0 || cfg.x_min.size() == 0) return 0.0;
  const Vector over = (x - cfg.x_max).cwiseMax(0.0);
  const Vector under = (cfg.x_min - x).cwiseMax(0.0);
  return cfg.soft_constraint_weight * (over.squaredNorm() + under.squaredNorm());
}

Vector soft_penalty_grad(const Vector& x, const OcpConfig& cfg) {
  if (cfg.soft_constraint_weight <= 0.0 || cfg.x_min.size() == 0) return Vector::Zero(x.size());
  const Vector over = (x - cfg.x_max).cwiseMax(0.0);
  const Vector under = (cfg.x_min - x).cwiseMax(0.0);
  return 2.0 * cfg.soft_constraint_weight * (over - under);
}

}  // namespace

void OcpConfig::validate() const {
  if (horizon < 1) throw ConfigError("ocp: horizon must be >= 1");
  if (q.size() == 0 || p.size() != q.size()) throw ConfigError("ocp: Q and P must have the state dimension");
  if (r.size() == 0 || u_min.size() != r.size() || u_max.size() != r.size()) {
    throw ConfigError("ocp: R and control bounds must have the control dimension");
  }
  if ((q.array() < 0.0).any() || (r.array() < 0.0).any() || (p.array() < 0.0).any()) {
    throw ConfigError("ocp: weights must be non-negative");
  }
  if ((u_min.array() > u_max.array()).any()) throw ConfigError("ocp: control bounds need min <= max");
  if (alpha1 < 0.0 || alpha2 < 0.0) throw ConfigError("ocp: modulation gains must be >= 0");
  if (max_iterations < 0 || !(step_size > 0.0)) throw ConfigError("ocp: bad solver settings");
  if (soft_constraint_weight > 0.0 && (x_min.size() != q.size() || x_max.size() != q.size())) {
    throw ConfigError("ocp: soft constraints need state bounds");
  }
}

OcpConfig OcpConfig::cartpole() {
  OcpConfig cfg;
  cfg.horizon = 50;
  cfg.q = Vector(4);
  cfg.q << 10.0, 1.0, 100.0, 1.0;
  cfg.r = Vector::Constant(1, 0.1);
  cfg.p = 10.0 * cfg.q;
  cfg.u_min = Vector::Constant(1, -20.0);
  cfg.u_max = Vector::Constant(1, 20.0);
  return cfg;
}

nlohmann::json to_json(const OcpConfig& cfg) {
  nlohmann::json j{{"horizon", cfg.horizon},
                   {"q", std_vector(cfg.q)},
                   {"r", std_vector(cfg.r)},
                   {"p", std_vector(cfg.p)},
                   {"u_min", std_vector(cfg.u_min)},
                   {"u_max", std_vector(cfg.u_max)},
                   {"alpha1", cfg.alpha1},
                   {"alpha2", cfg.alpha2},
                   {"max_iterations", cfg.max_iterations},
                   {"step_size", cfg.step_size},
                   {"tolerance", cfg.tolerance},
                   {"smoothness_weight", cfg.smoothness_weight},
                   {"soft_constraint_weight", cfg.soft_constraint_weight},
                   {"freeze_residual", cfg.freeze_residual}};
  if (cfg.x_min.size()) j["x_min"] = std_vector(cfg.x_min);
  if (cfg.x_max.size()) j["x_max"] = std_vector(cfg.x_max);
  return j;
}

OcpConfig ocp_config_from_json(const nlohmann::json& j) {
  OcpConfig cfg = OcpConfig::cartpole();
  cfg.horizon = j.value("horizon", cfg.horizon);
  if (j.contains("q")) cfg.q = json_vector(j["q"]);
  if (j.contains("r")) cfg.r = json_vector(j["r"]);
  if (j.contains("p")) cfg.p = json_vector(j["p"]);
  if (j.contains("u_min")) cfg.u_min = json_vector(j["u_min"]);
  if (j.contains("u_max")) cfg.u_max = json_vector(j["u_max"]);
  if (j.contains("x_min")) cfg.x_min = json_vector(j["x_min"]);
  if (j.contains("x_max")) cfg.x_max = json_vector(j["x_max"]);
  cfg.alpha1 = j.value("alpha1", cfg.alpha1);
  cfg.alpha2 = j.value("alpha2", cfg.alpha2);
  cfg.max_iterations = j.value("max_iterations", cfg.max_iterations);
  cfg.step_size = j.value("step_size", cfg.step_size);
  cfg.tolerance = j.value("tolerance", cfg.tolerance);
  cfg.smoothness_weight = j.value("smoothness_weight", cfg.smoothness_weight);
  cfg.soft_constraint_weight = j.value("soft_constraint_weight", cfg.soft_constraint_weight);
  cfg.freeze_residual = j.value("freeze_residual", cfg.freeze_residual);
  cfg.validate();
  return cfg;
}

PredictiveModel::PredictiveModel(StepFn nominal, StepFn residual)
    : nominal_(std::move(nominal)), residual_(std::move(residual)) {}

Vector PredictiveModel::next(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& u) const {
  Vector out = nominal_(x, u);
  if (residual_) out += residual_(x, u);
  return out;
}

PredictiveModel PredictiveModel::frozen_at(const Eigen::Ref<const Vector>& x,
                                           const Eigen::Ref<const Vector>& u) const {
  if (!residual_) return *this;
  const Vector fixed = residual_(x, u);
  return PredictiveModel(nominal_, [fixed](const Eigen::Ref<const Vector>&, const Eigen::Ref<const Vector>&) {
    return fixed;
  });
}

References References::constant(const Vector& x_ref, const Vector& u_ref, int horizon) {
  References r;
  r.x.assign(static_cast<std::size_t>(horizon) + 1, x_ref);
  r.u.assign(static_cast<std::size_t>(horizon), u_ref);
  return r;
}

Vector modulate_q(const Eigen::Ref<const Vector>& q, const Eigen::Ref<const Vector>& sigma_tot,
                  double alpha1, double alpha2) {
  require_dim(sigma_tot.size(), q.size(), "sigma_tot");
  Vector out(q.size());
  for (Eigen::Index j = 0; j < q.size(); ++j) {
    out[j] = q[j] * (1.0 + alpha1 * std::log1p(alpha2 * std::max(0.0, sigma_tot[j])));
  }
  return out;
}

double rollout_cost(const Eigen::Ref<const Vector>& x0, const Matrix& controls,
                    const PredictiveModel& model, const References& refs, const OcpConfig& cfg) {
  const int n = cfg.horizon;
  require_dim(controls.cols(), n, "control sequence length");
  require_dim(controls.rows(), cfg.control_dim(), "control dimension");
  Vector x = x0;
  double cost = 0.0;
  for (int i = 0; i < n; ++i) {
    const Vector ex = x - refs.x[i];
    const Vector eu = controls.col(i) - refs.u[i];
    cost += ex.cwiseAbs2().dot(cfg.q) + eu.cwiseAbs2().dot(cfg.r) + soft_penalty(x, cfg);
    if (i > 0 && cfg.smoothness_weight > 0.0) {
      cost += cfg.smoothness_weight * (controls.col(i) - controls.col(i - 1)).squaredNorm();
    }
    x = model.next(x, controls.col(i));
    if (!x.allFinite()) return std::numeric_limits<double>::infinity();
  }
  const Vector ex = x - refs.x[n];
  cost += ex.cwiseAbs2().dot(cfg.p) + soft_penalty(x, cfg);
  return std::isfinite(cost) ? cost : std::numeric_limits<double>::infinity();
}

Matrix rollout_gradient(const Eigen::Ref<const Vector>& x0, const Matrix& controls,
                        const PredictiveModel& model, const References& refs, const OcpConfig& cfg) {
  const int n = cfg.horizon;
  const int d = cfg.state_dim();
  const int m = cfg.control_dim();
  std::vector<Vector> xs(static_cast<std::size_t>(n) + 1);
  xs[0] = x0;
  for (int i = 0; i < n; ++i) xs[i + 1] = model.next(xs[i], controls.col(i));

  Matrix grad = Matrix::Zero(m, n);
  Vector lambda = 2.0 * cfg.p.cwiseProduct(xs[n] - refs.x[n]) + soft_penalty_grad(xs[n], cfg);
  Matrix a(d, d), b(d, m);
  for (int i = n - 1; i >= 0; --i) {
    const Vector& x = xs[i];
    const Vector u = controls.col(i);
    for (int k = 0; k < d; ++k) {
      const double h = 1e-6 * std::max(1.0, std::abs(x[k]));
      Vector xp = x, xm = x;
      xp[k] += h;
      xm[k] -= h;
      a.col(k) = (model.next(xp, u) - model.next(xm, u)) / (2.0 * h);
    }
    for (int k = 0; k < m; ++k) {
      const double h = 1e-6 * std::max(1.0, std::abs(u[k]));
      Vector up = u, um = u;
      up[k] += h;
      um[k] -= h;
      b.col(k) = (model.next(x, up) - model.next(x, um)) / (2.0 * h);
    }
    Vector gu = 2.0 * cfg.r.cwiseProduct(u - refs.u[i]) + b.transpose() * lambda;
    if (cfg.smoothness_weight > 0.0) {
      if (i > 0) gu += 2.0 * cfg.smoothness_weight * (u - controls.col(i - 1));
      if (i + 1 < n) gu -= 2.0 * cfg.smoothness_weight * (controls.col(i + 1) - u);
    }
    grad.col(i) = gu;
    lambda = 2.0 * cfg.q.cwiseProduct(x - refs.x[i]) + soft_penalty_grad(x, cfg) + a.transpose() * lambda;
  }
  return grad;
}

SolveResult solve_ocp(const Eigen::Ref<const Vector>& x0, const References& refs,
                      const PredictiveModel& model, const OcpConfig& cfg, const Matrix& warm_start) {
  require_dim(warm_start.cols(), cfg.horizon, "warm start length");
  require_dim(warm_start.rows(), cfg.control_dim(), "warm start control dimension");
  if (static_cast<int>(refs.x.size()) != cfg.horizon + 1 || static_cast<int>(refs.u.size()) != cfg.horizon) {
    throw DimensionError("solve_ocp: references must cover the horizon");
  }

  SolveResult res;
  Matrix u = project(warm_start, cfg);
  double cost = rollout_cost(x0, u, model, refs, cfg);
  res.warm_start_cost = cost;

  Matrix grad = rollout_gradient(x0, u, model, refs, cfg);
  double step = cfg.step_size;
  for (int it = 0; it < cfg.max_iterations; ++it) {
    const double pg = (u - project(u - grad, cfg)).cwiseAbs().maxCoeff();
    if (pg <= cfg.tolerance) {
      res.converged = true;
      break;
    }
    bool accepted = false;
    Matrix trial;
    double trial_cost = cost;
    for (int ls = 0; ls < 40; ++ls) {
      trial = project(u - step * grad, cfg);
      trial_cost = rollout_cost(x0, trial, model, refs, cfg);
      const double decrease = (grad.array() * (u - trial).array()).sum();
      if (trial_cost <= cost - 1e-4 * decrease && decrease > 0.0) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      // No descent along the projected gradient: stationary to precision.
      res.converged = true;
      break;
    }
    const Matrix new_grad = rollout_gradient(x0, trial, model, refs, cfg);
    const Matrix s = trial - u;
    const Matrix y = new_grad - grad;
    const double sy = (s.array() * y.array()).sum();
    step = sy > 1e-16 ? std::clamp(s.squaredNorm() / sy, 1e-8, 1e4) : 2.0 * step;
    u = trial;
    cost = trial_cost;
    grad = new_grad;
    res.iterations = it + 1;
  }
  if (!res.converged && cfg.max_iterations == 0) res.converged = false;
  res.controls = u;
  res.cost = cost;
  res.u_first = u.col(0);
  return res;
}

Matrix shift_warm_start(const Matrix& controls) {
  Matrix out(controls.rows(), controls.cols());
  if (controls.cols() == 0) return out;
  out.leftCols(controls.cols() - 1) = controls.rightCols(controls.cols() - 1);
  out.col(controls.cols() - 1) = controls.col(controls.cols() - 1);
  return out;
}

Controller::Controller(OcpConfig cfg, StepFn nominal, References refs)
    : cfg_(std::move(cfg)), nominal_(std::move(nominal)), refs_(std::move(refs)) {
  cfg_.validate();
  warm_ = Matrix::Zero(cfg_.control_dim(), cfg_.horizon);
  for (int i = 0; i < cfg_.horizon; ++i) warm_.col(i) = refs_.u[i];
}

ControlOutput Controller::control_step(const Eigen::Ref<const Vector>& state, const Beam* beam,
                                       const TrainedModel* model) {
  ControlOutput out;
  OcpConfig cfg = cfg_;
  out.q_factor = Vector::Ones(cfg.state_dim());
  out.sigma_tot = Vector::Zero(cfg.state_dim());

  if (beam != nullptr && model != nullptr) {
    const LatentGaussian g = model->latent(state, warm_.col(0));
    out.sigma_tot = model->unscale_variance(total_variance(*beam, g.mean, g.variance));
    cfg.q = modulate_q(cfg_.q, out.sigma_tot, cfg_.alpha1, cfg_.alpha2);
    for (Eigen::Index j = 0; j < cfg.q.size(); ++j) {
      out.q_factor[j] = cfg_.q[j] > 0.0 ? cfg.q[j] / cfg_.q[j] : 1.0;
    }
    const Beam* b = beam;
    const TrainedModel* tm = model;
    PredictiveModel composite(nominal_, [b, tm](const Eigen::Ref<const Vector>& x,
                                                const Eigen::Ref<const Vector>& u) {
      return tm->unscale_residual(predict(*b, tm->latent(x, u).mean).mean);
    });
    out.solve = solve_ocp(state, refs_, cfg.freeze_residual ? composite.frozen_at(state, warm_.col(0)) : composite,
                          cfg, warm_);
  } else {
    out.solve = solve_ocp(state, refs_, PredictiveModel(nominal_), cfg, warm_);
  }
  out.u = out.solve.u_first;
  warm_ = shift_warm_start(out.solve.controls);
  return out;
}

}  // namespace cpadapt::mpc
