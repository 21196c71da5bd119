/**
 * @file mpc.hpp
 * @brief Direct-shooting receding-horizon control with uncertainty-modulated
 *        state cost.
 *
 * Only the controls U = (u_0, ..., u_{N-1}) are decision variables; states
 * come from simulating the predictive model forward from x0. The cost is
 *
 *   sum_i ||x_i - xr_i||^2_Q + ||u_i - ur_i||^2_R  +  ||x_N - xr_N||^2_P
 *
 * (plus optional smoothness and soft state-bound penalties) and is minimized
 * over box-constrained U by projected gradient descent. Gradients use an
 * adjoint sweep with finite-difference one-step Jacobians.
 */
#ifndef CPADAPT_MPC_HPP
#define CPADAPT_MPC_HPP

#include "cpadapt/cpblr.hpp"
#include "cpadapt/model.hpp"

#include <functional>
#include <optional>
#include <vector>

namespace cpadapt::mpc {

struct OcpConfig {
  int horizon = 25;
  Vector q;  // stage state weights (diagonal)
  Vector r;  // stage control weights (diagonal)
  Vector p;  // terminal weights (diagonal)
  Vector u_min;
  Vector u_max;
  double alpha1 = 10.0;
  double alpha2 = 1e3;
  int max_iterations = 60;
  double step_size = 1e-2;   // first trial step before Barzilai-Borwein kicks in
  double tolerance = 1e-6;   // on the projected-gradient infinity norm
  double smoothness_weight = 0.0;
  double soft_constraint_weight = 0.0;
  Vector x_min;  // soft state bounds, used only with soft_constraint_weight > 0
  Vector x_max;
  /// Evaluate the learned residual once at the current state instead of
  /// re-encoding along the horizon.
  bool freeze_residual = false;

  int state_dim() const noexcept { return static_cast<int>(q.size()); }
  int control_dim() const noexcept { return static_cast<int>(r.size()); }
  void validate() const;

  /// Q = diag(10, 1, 100, 1), R = 0.1, P = 10 Q, N = 50, |u| <= 20.
  static OcpConfig cartpole();
};

nlohmann::json to_json(const OcpConfig& cfg);
OcpConfig ocp_config_from_json(const nlohmann::json& j);

using StepFn = std::function<Vector(const Eigen::Ref<const Vector>&, const Eigen::Ref<const Vector>&)>;

/// Nominal one-step model plus an optional additive residual predictor.
class PredictiveModel {
 public:
  explicit PredictiveModel(StepFn nominal, StepFn residual = {});

  Vector next(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& u) const;
  bool has_residual() const noexcept { return static_cast<bool>(residual_); }

  /// Same model with the residual held at its value for (x, u).
  PredictiveModel frozen_at(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& u) const;

 private:
  StepFn nominal_;
  StepFn residual_;
};

/// Reference trajectory: N + 1 states and N controls.
struct References {
  std::vector<Vector> x;
  std::vector<Vector> u;

  static References constant(const Vector& x_ref, const Vector& u_ref, int horizon);
};

/// Q'_j = Q_j (1 + alpha1 log(1 + alpha2 sigma_tot_j)).
Vector modulate_q(const Eigen::Ref<const Vector>& q, const Eigen::Ref<const Vector>& sigma_tot,
                  double alpha1, double alpha2);

/// Controls are stored column-wise: U is m x N.
double rollout_cost(const Eigen::Ref<const Vector>& x0, const Matrix& controls,
                    const PredictiveModel& model, const References& refs, const OcpConfig& cfg);

/// Analytic adjoint gradient of rollout_cost w.r.t. U (finite-difference
/// one-step Jacobians).
Matrix rollout_gradient(const Eigen::Ref<const Vector>& x0, const Matrix& controls,
                        const PredictiveModel& model, const References& refs, const OcpConfig& cfg);

struct SolveResult {
  Vector u_first;
  Matrix controls;
  double cost = 0.0;
  double warm_start_cost = 0.0;
  int iterations = 0;
  bool converged = false;  // false means the iteration cap was hit
};

/// Box-constrained projected gradient with Barzilai-Borwein steps and Armijo
/// backtracking. The returned cost never exceeds the (projected) warm start.
SolveResult solve_ocp(const Eigen::Ref<const Vector>& x0, const References& refs,
                      const PredictiveModel& model, const OcpConfig& cfg, const Matrix& warm_start);

/// Shift a solution one step forward, repeating the last control.
Matrix shift_warm_start(const Matrix& controls);

struct ControlOutput {
  Vector u;
  Vector q_factor;   // Q' / Q per state dimension
  Vector sigma_tot;  // total predictive variance of the residual (state units)
  SolveResult solve;
};

/// Receding-horizon controller. Without a beam it is the nominal MPC; with a
/// beam and trained model it optimizes over f_nom + marginalized residual
/// mean and modulates Q by the total predictive variance at the current
/// state.
class Controller {
 public:
  Controller(OcpConfig cfg, StepFn nominal, References refs);

  ControlOutput control_step(const Eigen::Ref<const Vector>& state, const Beam* beam = nullptr,
                             const TrainedModel* model = nullptr);

  const OcpConfig& config() const noexcept { return cfg_; }
  const Matrix& warm_start() const noexcept { return warm_; }

 private:
  OcpConfig cfg_;
  StepFn nominal_;
  References refs_;
  Matrix warm_;
};

}  // namespace cpadapt::mpc

#endif  // CPADAPT_MPC_HPP
