#ifndef CPADAPT_PLANT_HPP
#define CPADAPT_PLANT_HPP

#include "cpadapt/common.hpp"

#include <random>
#include <vector>

namespace cpadapt::plant {

inline constexpr int kStateDim = 4;
inline constexpr int kControlDim = 1;
inline constexpr double kDefaultDt = 0.02;

/// Cart position/velocity and pole angle/rate; theta = 0 is upright.
struct CartpoleState {
  double x = 0.0;
  double x_dot = 0.0;
  double theta = 0.0;
  double theta_dot = 0.0;

  Vector to_vector() const;
  static CartpoleState from_vector(const Eigen::Ref<const Vector>& v);
  bool finite() const;
};

struct PlantParams {
  double cart_mass = 1.0;     // M
  double pole_mass = 0.1;     // m
  double pole_length = 1.5;   // L
  double gravity = 9.81;
  double cart_friction = 0.25;
  double pole_friction = 0.05;
  double disturbance_mean = -0.5;
  double disturbance_std = 0.5;

  /// Frictional plant used to generate data.
  static PlantParams true_system();
  /// Friction-free, mis-parameterized model used by the controller.
  static PlantParams nominal_model();

  void validate() const;
};

struct Accel {
  double x_ddot = 0.0;
  double theta_ddot = 0.0;
};

/// Frictional equations of motion with the external disturbance force added
/// to the control force.
Accel true_accel(const CartpoleState& s, double u, const PlantParams& p, double u_dist);

/// Friction- and disturbance-free equations of motion. Friction and
/// disturbance fields of `p` are ignored.
Accel nominal_accel(const CartpoleState& s, double u, const PlantParams& p);

enum class Mode { True, Nominal };

/// One forward-Euler step. In True mode a disturbance force is drawn from
/// N(disturbance_mean, disturbance_std^2) using `rng`; `extra_force` is
/// added to the control (used for impulses). Throws SimulationBlowUp with
/// `step_index` on a non-finite result.
CartpoleState step(const CartpoleState& s, double u, double dt, Mode mode, const PlantParams& p,
                   std::mt19937_64* rng, double extra_force = 0.0, long step_index = -1);

/// Discrete nominal model x_{k+1} = f_nom(x_k, u_k) on plain vectors.
Vector nominal_step(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& u,
                    double dt, const PlantParams& nominal = PlantParams::nominal_model());

struct Intervention {
  long step = 0;
  double impulse = 0.0;     // N, applied for exactly one step
  double mass_scale = 1.0;  // multiplies both cart and pole mass
};

class InterventionSchedule {
 public:
  InterventionSchedule() = default;
  explicit InterventionSchedule(std::vector<Intervention> events);

  /// 2 N impulse and 10% mass reduction at steps 0, 40 and 80.
  static InterventionSchedule standard();

  const std::vector<Intervention>& events() const noexcept { return events_; }
  bool empty() const noexcept { return events_.empty(); }
  std::vector<long> steps() const;

 private:
  std::vector<Intervention> events_;
};

struct InterventionEffect {
  PlantParams params;
  CartpoleState state;
  double impulse_force = 0.0;  // extra force to add during this step
  bool active = false;
};

/// Applies every event scheduled at step k: masses are scaled in place and
/// the impulse is returned as a one-step force for the transition k -> k+1.
InterventionEffect apply_interventions(long k, const PlantParams& p,
                                       const InterventionSchedule& sched, const CartpoleState& s);

}  // namespace cpadapt::plant

#endif  // CPADAPT_PLANT_HPP
