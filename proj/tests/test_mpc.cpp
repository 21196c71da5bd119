#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "cpadapt/mpc.hpp"
#include "cpadapt/plant.hpp"

#include <cmath>
#include <random>

using namespace cpadapt;
using namespace cpadapt::mpc;

namespace {

Vector integrator(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& u) { return x + u; }

OcpConfig scalar_config(int horizon, double q, double r, double p, double bound = 100.0) {
  OcpConfig cfg;
  cfg.horizon = horizon;
  cfg.q = Vector::Constant(1, q);
  cfg.r = Vector::Constant(1, r);
  cfg.p = Vector::Constant(1, p);
  cfg.u_min = Vector::Constant(1, -bound);
  cfg.u_max = Vector::Constant(1, bound);
  cfg.max_iterations = 500;
  cfg.tolerance = 1e-10;
  return cfg;
}

// Unconstrained minimizer of the integrator cost by normal equations:
// x_i = x0 + sum_{k<i} u_k is affine in U.
Vector integrator_optimum(double x0, const OcpConfig& cfg) {
  const int n = cfg.horizon;
  Matrix H = Matrix::Zero(n, n);
  Vector g = Vector::Zero(n);
  for (int i = 1; i <= n; ++i) {
    const double w = i < n ? cfg.q[0] : cfg.p[0];
    const Vector a = (Vector::LinSpaced(n, 0, n - 1).array() < i).cast<double>();
    H += w * a * a.transpose();
    g += w * x0 * a;
  }
  H += cfg.r[0] * Matrix::Identity(n, n);
  return H.ldlt().solve(-g);
}

Vector cartpole_nominal(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& u) {
  return plant::nominal_step(x, u, plant::kDefaultDt);
}

TrainedModel zero_model(int latent = 2) {
  TrainedModel m;
  m.state_dim = 4;
  m.control_dim = 1;
  m.encoder = EncoderParams(5, latent);
  m.theta0 = Matrix::Zero(4, latent);
  m.input_mean = Vector::Zero(5);
  m.input_scale = Vector::Ones(5);
  m.residual_scale = Vector::Ones(4);
  return m;
}

}  // namespace

TEST_CASE("modulate_q examples") {
  Vector q(2);
  q << 10.0, 1.0;
  CHECK(modulate_q(q, Vector::Zero(2), 10.0, 1e3) == q);
  const Vector m = modulate_q(q, Vector::Constant(2, 1e-3), 10.0, 1e3);
  CHECK(m[1] == doctest::Approx(1.0 + 10.0 * std::log(2.0)));
  CHECK(m[1] == doctest::Approx(7.931).epsilon(1e-4));
  CHECK(modulate_q(q, Vector::Constant(2, 5.0), 0.0, 1e3) == q);
}

TEST_CASE("modulate_q is monotone") {
  const Vector q = Vector::Constant(1, 3.0);
  double prev = 0.0;
  for (double s = 0.0; s < 10.0; s += 0.05) {
    const double v = modulate_q(q, Vector::Constant(1, s), 10.0, 1e3)[0];
    CHECK(v >= prev);
    prev = v;
  }
}

TEST_CASE("rollout_cost examples") {
  const PredictiveModel model(integrator);
  const OcpConfig cfg = scalar_config(1, 1.0, 0.0, 0.0);
  const References refs = References::constant(Vector::Zero(1), Vector::Zero(1), 1);
  CHECK(rollout_cost(Vector::Ones(1), Matrix::Constant(1, 1, -1.0), model, refs, cfg) == doctest::Approx(1.0));
  CHECK(rollout_cost(Vector::Zero(1), Matrix::Zero(1, 1), model, refs, cfg) == 0.0);

  OcpConfig a = scalar_config(4, 1.3, 0.2, 4.0);
  OcpConfig b = a;
  b.q *= 2.0;
  b.r *= 2.0;
  b.p *= 2.0;
  const References r4 = References::constant(Vector::Constant(1, 0.5), Vector::Zero(1), 4);
  const Matrix U = Matrix::Random(1, 4);
  CHECK(rollout_cost(Vector::Constant(1, -0.7), U, model, r4, b) ==
        doctest::Approx(2.0 * rollout_cost(Vector::Constant(1, -0.7), U, model, r4, a)));
}

TEST_CASE("non-finite rollouts cost infinity") {
  const PredictiveModel model([](const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>&) {
    return Vector(x.array() * 1e200);
  });
  const OcpConfig cfg = scalar_config(5, 1.0, 1.0, 1.0);
  const References refs = References::constant(Vector::Zero(1), Vector::Zero(1), 5);
  CHECK(std::isinf(rollout_cost(Vector::Ones(1), Matrix::Zero(1, 5), model, refs, cfg)));
}

TEST_CASE("adjoint gradient matches finite differences") {
  const PredictiveModel model(cartpole_nominal);
  OcpConfig cfg = OcpConfig::cartpole();
  cfg.horizon = 8;
  cfg.smoothness_weight = 1.0;
  const References refs = References::constant(Vector::Zero(4), Vector::Zero(1), cfg.horizon);
  Vector x0(4);
  x0 << 0.1, -0.2, 0.15, 0.05;
  const Matrix U = Matrix::Random(1, cfg.horizon);
  const Matrix g = rollout_gradient(x0, U, model, refs, cfg);
  for (int i = 0; i < cfg.horizon; ++i) {
    Matrix up = U, um = U;
    up(0, i) += 1e-6;
    um(0, i) -= 1e-6;
    const double fd = (rollout_cost(x0, up, model, refs, cfg) - rollout_cost(x0, um, model, refs, cfg)) / 2e-6;
    CHECK(g(0, i) == doctest::Approx(fd).epsilon(1e-5));
  }
}

TEST_CASE("one-step integrator optimum") {
  const OcpConfig cfg = scalar_config(1, 1.0, 1.0, 3.0);
  const References refs = References::constant(Vector::Zero(1), Vector::Zero(1), 1);
  const SolveResult r = solve_ocp(Vector::Ones(1), refs, PredictiveModel(integrator), cfg, Matrix::Zero(1, 1));
  CHECK(r.u_first[0] == doctest::Approx(-0.75).epsilon(1e-4));
  CHECK(r.converged);
}

TEST_CASE("multi-step integrator matches normal equations") {
  const OcpConfig cfg = scalar_config(6, 1.0, 0.5, 5.0);
  const References refs = References::constant(Vector::Zero(1), Vector::Zero(1), 6);
  const SolveResult r = solve_ocp(Vector::Constant(1, 2.0), refs, PredictiveModel(integrator), cfg, Matrix::Zero(1, 6));
  const Vector opt = integrator_optimum(2.0, cfg);
  CHECK((r.controls.row(0).transpose() - opt).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("fully clamped bounds return zero controls") {
  OcpConfig cfg = scalar_config(4, 1.0, 1.0, 1.0, 0.0);
  const References refs = References::constant(Vector::Zero(1), Vector::Zero(1), 4);
  const PredictiveModel model(integrator);
  const SolveResult r = solve_ocp(Vector::Ones(1), refs, model, cfg, Matrix::Constant(1, 4, 3.0));
  CHECK(r.controls.isZero(0.0));
  CHECK(r.cost == doctest::Approx(rollout_cost(Vector::Ones(1), Matrix::Zero(1, 4), model, refs, cfg)));
}

TEST_CASE("bounds are active when the optimum lies outside") {
  const OcpConfig cfg = scalar_config(1, 1.0, 0.0, 1.0, 0.2);
  const References refs = References::constant(Vector::Zero(1), Vector::Zero(1), 1);
  const SolveResult r = solve_ocp(Vector::Ones(1), refs, PredictiveModel(integrator), cfg, Matrix::Zero(1, 1));
  CHECK(r.u_first[0] == doctest::Approx(-0.2));
}

TEST_CASE("warm start at the optimum stops almost immediately") {
  OcpConfig cfg = scalar_config(6, 1.0, 0.5, 5.0);
  cfg.tolerance = 1e-6;
  const References refs = References::constant(Vector::Zero(1), Vector::Zero(1), 6);
  const Vector opt = integrator_optimum(2.0, cfg);
  const SolveResult r =
      solve_ocp(Vector::Constant(1, 2.0), refs, PredictiveModel(integrator), cfg, opt.transpose());
  CHECK(r.iterations <= 2);
  CHECK(r.converged);
}

TEST_CASE("solver never increases the warm-start cost") {
  const PredictiveModel model(cartpole_nominal);
  OcpConfig cfg = OcpConfig::cartpole();
  cfg.horizon = 15;
  cfg.max_iterations = 10;
  const References refs = References::constant(Vector::Zero(4), Vector::Zero(1), cfg.horizon);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int t = 0; t < 20; ++t) {
    Vector x0(4);
    x0 << u(rng), 0.5 * u(rng), 0.3 * u(rng), 0.5 * u(rng);
    Matrix warm(1, cfg.horizon);
    for (int i = 0; i < cfg.horizon; ++i) warm(0, i) = 30.0 * u(rng);
    const SolveResult r = solve_ocp(x0, refs, model, cfg, warm);
    CHECK(r.cost <= r.warm_start_cost);
    CHECK(r.controls.maxCoeff() <= 20.0);
    CHECK(r.controls.minCoeff() >= -20.0);
  }
}

TEST_CASE("shift_warm_start repeats the last control") {
  Matrix u(1, 3);
  u << 1, 2, 3;
  Matrix expected(1, 3);
  expected << 2, 3, 3;
  CHECK(shift_warm_start(u) == expected);
}

TEST_CASE("receding horizon stabilizes the exact plant") {
  for (const double theta0 : {-0.15, -0.08, 0.1, 0.15}) {
    Controller ctl(OcpConfig::cartpole(), cartpole_nominal,
                   References::constant(Vector::Zero(4), Vector::Zero(1), OcpConfig::cartpole().horizon));
    Vector x(4);
    x << 0.2, 0.0, theta0, 0.0;
    for (int k = 0; k < 120; ++k) x = cartpole_nominal(x, ctl.control_step(x).u);
    CAPTURE(theta0);
    CHECK(std::abs(x[2]) < 0.05);
  }
}

TEST_CASE("zero residual mean reproduces nominal MPC") {
  OcpConfig cfg = OcpConfig::cartpole();
  cfg.horizon = 10;
  cfg.alpha1 = 0.0;
  const References refs = References::constant(Vector::Zero(4), Vector::Zero(1), cfg.horizon);
  const TrainedModel model = zero_model();
  const Beam beam = init_beam(model.theta0, AdaptConfig::cartpole(4));
  Controller nominal(cfg, cartpole_nominal, refs), adaptive(cfg, cartpole_nominal, refs);
  Vector x(4);
  x << 0.1, 0.0, 0.1, 0.0;
  for (int k = 0; k < 5; ++k) {
    const Vector a = nominal.control_step(x).u;
    const Vector b = adaptive.control_step(x, &beam, &model).u;
    CHECK(a == b);
    x = cartpole_nominal(x, a);
  }
}

TEST_CASE("tight single-hypothesis beam leaves Q unmodulated") {
  OcpConfig cfg = OcpConfig::cartpole();
  cfg.horizon = 5;
  const References refs = References::constant(Vector::Zero(4), Vector::Zero(1), cfg.horizon);
  const TrainedModel model = zero_model();
  AdaptConfig ac = AdaptConfig::cartpole(4);
  ac.prior_variance = 1e-14;
  const Beam beam = init_beam(model.theta0, ac);
  Controller ctl(cfg, cartpole_nominal, refs);
  const ControlOutput out = ctl.control_step(Vector::Constant(4, 0.1), &beam, &model);
  CHECK((out.q_factor.array() - 1.0).abs().maxCoeff() < 1e-6);
}

TEST_CASE("inflated beam raises every Q entry") {
  OcpConfig cfg = OcpConfig::cartpole();
  cfg.horizon = 5;
  const References refs = References::constant(Vector::Zero(4), Vector::Zero(1), cfg.horizon);
  TrainedModel model = zero_model();
  std::mt19937_64 rng(1);
  model.encoder = EncoderParams::glorot_uniform(5, 2, rng);
  AdaptConfig ac = AdaptConfig::cartpole(4);
  ac.prior_variance = 10.0;
  Beam beam = init_beam(model.theta0, ac);
  // A second hypothesis with a different mean adds disagreement.
  Hypothesis other = beam.hypotheses.front();
  for (auto& m : other.posterior.mean) m.setConstant(1.0);
  beam.hypotheses.push_back(other);
  Controller ctl(cfg, cartpole_nominal, refs);
  const ControlOutput out = ctl.control_step(Vector::Constant(4, 0.1), &beam, &model);
  CHECK((out.q_factor.array() > 1.0).all());
  CHECK((out.sigma_tot.array() > 0.0).all());
}

TEST_CASE("frozen residual is evaluated once") {
  int calls = 0;
  const PredictiveModel m(integrator, [&calls](const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>&) {
    ++calls;
    return Vector(0.1 * x);
  });
  const PredictiveModel frozen = m.frozen_at(Vector::Ones(1), Vector::Zero(1));
  CHECK(calls == 1);
  CHECK(frozen.next(Vector::Constant(1, 5.0), Vector::Zero(1))[0] == doctest::Approx(5.1));
  CHECK(m.next(Vector::Constant(1, 5.0), Vector::Zero(1))[0] == doctest::Approx(5.5));
}

TEST_CASE("ocp config validation and json") {
  OcpConfig cfg = OcpConfig::cartpole();
  const OcpConfig back = ocp_config_from_json(to_json(cfg));
  CHECK(back.q == cfg.q);
  CHECK(back.horizon == cfg.horizon);
  CHECK(back.u_max == cfg.u_max);
  cfg.u_min[0] = 30.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = OcpConfig::cartpole();
  cfg.horizon = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
