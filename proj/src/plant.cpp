#include "cpadapt/plant.hpp"

#include <algorithm>
#include <cmath>

namespace cpadapt::plant {

Vector CartpoleState::to_vector() const {
  Vector v(kStateDim);
  v << x, x_dot, theta, theta_dot;
  return v;
}

CartpoleState CartpoleState::from_vector(const Eigen::Ref<const Vector>& v) {
  require_dim(v.size(), kStateDim, "cartpole state");
  return {v[0], v[1], v[2], v[3]};
}

bool CartpoleState::finite() const {
  return std::isfinite(x) && std::isfinite(x_dot) && std::isfinite(theta) && std::isfinite(theta_dot);
}

PlantParams PlantParams::true_system() { return PlantParams{}; }

PlantParams PlantParams::nominal_model() {
  PlantParams p;
  p.cart_mass = 1.7;
  p.pole_mass = 0.25;
  p.pole_length = 1.7;
  p.cart_friction = 0.0;
  p.pole_friction = 0.0;
  p.disturbance_mean = 0.0;
  p.disturbance_std = 0.0;
  return p;
}

void PlantParams::validate() const {
  if (!(cart_mass > 0.0 && pole_mass > 0.0 && pole_length > 0.0 && gravity > 0.0)) {
    throw ConfigError("plant: masses, length and gravity must be positive");
  }
  if (!(cart_friction >= 0.0 && pole_friction >= 0.0)) {
    throw ConfigError("plant: friction must be non-negative");
  }
  if (!(disturbance_std >= 0.0)) throw ConfigError("plant: disturbance_std must be >= 0");
}

Accel true_accel(const CartpoleState& s, double u, const PlantParams& p, double u_dist) {
  const double M = p.cart_mass, m = p.pole_mass, L = p.pole_length, g = p.gravity;
  const double st = std::sin(s.theta), ct = std::cos(s.theta);
  const double force = u + u_dist;
  const double denom = M + m * st * st;
  Accel a;
  a.x_ddot = (force - p.cart_friction * s.x_dot +
              m * st * (L * s.theta_dot * s.theta_dot + g * ct)) /
             denom;
  a.theta_ddot = (-force * ct - p.pole_friction * s.theta_dot -
                  m * L * s.theta_dot * s.theta_dot * st * ct + (M + m) * g * st) /
                 (L * denom);
  return a;
}

Accel nominal_accel(const CartpoleState& s, double u, const PlantParams& p) {
  const double M = p.cart_mass, m = p.pole_mass, L = p.pole_length, g = p.gravity;
  const double st = std::sin(s.theta), ct = std::cos(s.theta);
  const double w2 = s.theta_dot * s.theta_dot;
  const double denom = M + m * st * st;
  return {(u + m * st * (L * w2 + g * ct)) / denom,
          (-u * ct - m * L * w2 * st * ct + (M + m) * g * st) / (L * denom)};
}

CartpoleState step(const CartpoleState& s, double u, double dt, Mode mode, const PlantParams& p,
                   std::mt19937_64* rng, double extra_force, long step_index) {
  if (!(dt > 0.0)) throw ConfigError("plant: dt must be positive");
  Accel a;
  if (mode == Mode::True) {
    double u_dist = p.disturbance_mean;
    if (p.disturbance_std > 0.0) {
      if (rng == nullptr) throw ConfigError("plant: true mode needs an rng");
      std::normal_distribution<double> dist(p.disturbance_mean, p.disturbance_std);
      u_dist = dist(*rng);
    }
    a = true_accel(s, u + extra_force, p, u_dist);
  } else {
    a = nominal_accel(s, u + extra_force, p);
  }
  CartpoleState next{s.x + s.x_dot * dt, s.x_dot + a.x_ddot * dt, s.theta + s.theta_dot * dt,
                     s.theta_dot + a.theta_ddot * dt};
  if (!next.finite()) {
    throw SimulationBlowUp(step_index, "cartpole simulation produced a non-finite state at step " +
                                           std::to_string(step_index));
  }
  return next;
}

Vector nominal_step(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& u,
                    double dt, const PlantParams& nominal) {
  require_dim(u.size(), kControlDim, "cartpole control");
  return step(CartpoleState::from_vector(x), u[0], dt, Mode::Nominal, nominal, nullptr).to_vector();
}

InterventionSchedule::InterventionSchedule(std::vector<Intervention> events)
    : events_(std::move(events)) {
  if (!std::is_sorted(events_.begin(), events_.end(),
                      [](const Intervention& a, const Intervention& b) { return a.step < b.step; })) {
    throw ConfigError("intervention schedule must be sorted by step");
  }
}

InterventionSchedule InterventionSchedule::standard() {
  return InterventionSchedule({{0, 2.0, 0.9}, {40, 2.0, 0.9}, {80, 2.0, 0.9}});
}

std::vector<long> InterventionSchedule::steps() const {
  std::vector<long> out;
  for (const auto& e : events_) out.push_back(e.step);
  return out;
}

InterventionEffect apply_interventions(long k, const PlantParams& p,
                                       const InterventionSchedule& sched, const CartpoleState& s) {
  InterventionEffect eff{p, s, 0.0, false};
  for (const auto& e : sched.events()) {
    if (e.step != k) continue;
    eff.active = true;
    eff.impulse_force += e.impulse;
    eff.params.cart_mass *= e.mass_scale;
    eff.params.pole_mass *= e.mass_scale;
  }
  return eff;
}

}  // namespace cpadapt::plant
