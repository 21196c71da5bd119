#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "cpadapt/cpblr.hpp"
#include "oracles.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <set>

using namespace cpadapt;

namespace {

AdaptConfig scalar_config(double pi = 0.05, int k = 5) {
  AdaptConfig cfg;
  cfg.changepoint_prior = pi;
  cfg.beam_size = k;
  cfg.prior_variance = 1.0;
  cfg.noise_variance = Vector::Ones(1);
  return cfg;
}

DecoderPosterior scalar_posterior(double mu, double sigma) {
  return {{Vector::Constant(1, mu)}, {Matrix::Constant(1, 1, sigma)}};
}

Vector v1(double a) { return Vector::Constant(1, a); }

Beam with_scores(const std::vector<double>& scores) {
  Beam b = init_beam(Matrix::Zero(1, 1), scalar_config());
  const Hypothesis h = b.hypotheses.front();
  b.hypotheses.clear();
  for (double s : scores) {
    Hypothesis c = h;
    c.score = s;
    b.hypotheses.push_back(c);
  }
  return b;
}

}  // namespace

TEST_CASE("init_beam") {
  AdaptConfig cfg = AdaptConfig::cartpole(2);
  Matrix theta(2, 2);
  theta << 1, 2, 3, 4;
  const Beam b = init_beam(theta, cfg);
  REQUIRE(b.hypotheses.size() == 1u);
  const Hypothesis& h = b.hypotheses.front();
  CHECK(h.score == 0.0);
  CHECK(h.changepoints.empty());
  CHECK(h.length == 0);
  CHECK(h.posterior.mean[1] == theta.row(1).transpose());
  CHECK(h.posterior.cov[0].isApprox(0.1 * Matrix::Identity(2, 2), 0.0));

  const Beam zero = init_beam(Matrix::Zero(2, 2), cfg);
  CHECK(predict(zero, Vector::Random(2)).mean.isZero(0.0));

  cfg.temperature = 1.0;
  CHECK_THROWS_AS(init_beam(theta, cfg), ConfigError);
}

TEST_CASE("temper_factor") {
  CHECK(temper_factor(0, 0.9) == 1.0);
  CHECK(temper_factor(1, 0.9) == doctest::Approx(0.81));
  CHECK(temper_factor(1, 0.997) == doctest::Approx(0.994009));
}

TEST_CASE("marginal_loglik examples") {
  const DecoderPosterior p = scalar_posterior(0.0, 1.0);
  CHECK(marginal_loglik(p, v1(1), v1(0), 1.0, v1(1)) == doctest::Approx(-0.5 * std::log(4 * std::numbers::pi)));
  CHECK(marginal_loglik(p, v1(1), v1(0), 0.81, v1(1)) ==
        doctest::Approx(oracle::normal_logpdf(0.0, 0.0, 1.0 / 0.81 + 1.0)));
  CHECK(marginal_loglik(p, v1(1), v1(0), 0.81, v1(1)) == doctest::Approx(-1.3210).epsilon(1e-4));
  CHECK(marginal_loglik(p, v1(0), v1(0.7), 1.0, v1(0.5)) == doctest::Approx(oracle::normal_logpdf(0.7, 0.0, 0.5)));
}

TEST_CASE("marginal_loglik sums Gaussian log densities per dimension") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 1.0);
  DecoderPosterior p;
  Vector z(3), delta(2), s2(2);
  for (auto& v : z) v = n(rng);
  delta << 0.4, -1.1;
  s2 << 0.2, 0.7;
  double expected = 0.0;
  for (int j = 0; j < 2; ++j) {
    Matrix a = Matrix::Random(3, 3);
    const Matrix cov = a * a.transpose() + Matrix::Identity(3, 3);
    const Vector mu = Vector::Random(3);
    p.mean.push_back(mu);
    p.cov.push_back(cov);
    expected += oracle::normal_logpdf(delta[j], z.dot(mu), z.dot(cov * z) / 0.5 + s2[j]);
  }
  CHECK(marginal_loglik(p, z, delta, 0.5, s2) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("changepoint_posterior examples") {
  CHECK(changepoint_posterior(-3.0, -3.0, 0.2) == doctest::Approx(0.2));
  CHECK(changepoint_posterior(0.0, std::log(100.0), 0.05) == doctest::Approx(5.0 / 5.95));
  CHECK(changepoint_posterior(1.0, 1.0, 0.5) == doctest::Approx(0.5));
  const double p = changepoint_posterior(-1e4, 0.0, 0.05);
  CHECK(p > 0.0);
  CHECK(p <= 1.0);
}

TEST_CASE("changepoint log-odds identity") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> ll(-50.0, 5.0), pr(0.001, 0.999);
  for (int t = 0; t < 1000; ++t) {
    const double l0 = ll(rng), l1 = ll(rng), pi = pr(rng);
    const LogDecisionProbs lp = changepoint_log_posterior(l0, l1, pi);
    const double odds = lp.changepoint - lp.no_change;
    CHECK(std::abs(odds - ((l1 - l0) + std::log(pi / (1 - pi)))) < 1e-10);
  }
}

TEST_CASE("posterior_update examples") {
  const DecoderPosterior p = scalar_posterior(0.0, 1.0);
  const DecoderPosterior same = posterior_update(p, v1(0), v1(3), 1.0, v1(1));
  CHECK(same.mean[0][0] == 0.0);
  CHECK(same.cov[0](0, 0) == doctest::Approx(1.0));
  const DecoderPosterior u = posterior_update(p, v1(1), v1(1), 1.0, v1(1));
  CHECK(u.mean[0][0] == doctest::Approx(0.5));
  CHECK(u.cov[0](0, 0) == doctest::Approx(0.5));
  const DecoderPosterior tempered = posterior_update(scalar_posterior(0.3, 2.0), v1(0), v1(3), 0.81, v1(1));
  CHECK(tempered.mean[0][0] == doctest::Approx(0.3));
  CHECK(tempered.cov[0](0, 0) == doctest::Approx(2.0 / 0.81));
}

TEST_CASE("tempering dominates in the Loewner order") {
  Matrix a = Matrix::Random(3, 3);
  const DecoderPosterior p{{Vector::Random(3)}, {a * a.transpose() + 0.1 * Matrix::Identity(3, 3)}};
  const auto c0 = posterior_update(p, Vector::Zero(3), v1(1), 1.0, v1(0.1));
  const auto c1 = posterior_update(p, Vector::Zero(3), v1(1), 0.81, v1(0.1));
  const Eigen::SelfAdjointEigenSolver<Matrix> es(c1.cov[0] - c0.cov[0]);
  CHECK(es.eigenvalues().minCoeff() >= -1e-12);
}

TEST_CASE("score_update examples") {
  CHECK(score_update(0.0, -1.0, 0.5, 1) == doctest::Approx(-1.0 + std::log(0.5)));
  CHECK(score_update(2.0, -1.0, 1e-12, 0) == doctest::Approx(1.0));
  CHECK(score_update(-4.0, -1.0, 0.3, 0) - score_update(-4.0, -2.0, 0.3, 1) ==
        doctest::Approx(1.0 + std::log(0.7) - std::log(0.3)));
}

TEST_CASE("no-changepoint mode equals the batch posterior") {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int inst = 0; inst < 10; ++inst) {
    const int l = 1 + inst % 4, d = 1 + (inst / 4) % 3, T = 40 + 15 * inst;
    AdaptConfig cfg = AdaptConfig::cartpole(d);
    cfg.changepoints_enabled = false;
    Matrix theta0(d, l);
    for (Eigen::Index i = 0; i < theta0.size(); ++i) theta0.data()[i] = n(rng);
    Beam beam = init_beam(theta0, cfg);
    Matrix Z(T, l), Y(T, d);
    for (int k = 0; k < T; ++k) {
      for (int i = 0; i < l; ++i) Z(k, i) = n(rng);
      for (int j = 0; j < d; ++j) Y(k, j) = n(rng);
      beam = beam_step(beam, Z.row(k).transpose(), Y.row(k).transpose());
    }
    REQUIRE(beam.hypotheses.size() == 1u);
    for (int j = 0; j < d; ++j) {
      const auto ref = oracle::batch_blr(theta0.row(j).transpose(), cfg.prior_variance * Matrix::Identity(l, l), Z,
                                         Y.col(j), cfg.noise_variance[j]);
      CHECK((beam.hypotheses[0].posterior.mean[j] - ref.mean).cwiseAbs().maxCoeff() < 1e-8);
      CHECK((beam.hypotheses[0].posterior.cov[j] - ref.cov).cwiseAbs().maxCoeff() < 1e-8);
    }
  }
}

TEST_CASE("beam_step keeps K sorted distinct valid hypotheses") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  AdaptConfig cfg = AdaptConfig::cartpole(2);
  Beam beam = init_beam(Matrix::Zero(2, 3), cfg);
  for (int k = 0; k < 60; ++k) {
    Vector z(3), y(2);
    for (auto& v : z) v = n(rng);
    for (auto& v : y) v = n(rng);
    const std::size_t parents = beam.hypotheses.size();
    beam = beam_step(beam, z, y);
    CHECK(beam.hypotheses.size() == std::min<std::size_t>(2 * parents, 5));
    CHECK(beam.step == k + 1);
    std::set<std::vector<std::int64_t>> traces;
    for (std::size_t h = 0; h < beam.hypotheses.size(); ++h) {
      CHECK(beam.hypotheses[h].length == beam.step);
      CHECK(beam.hypotheses[h].posterior.valid());
      CHECK(std::isfinite(beam.hypotheses[h].score));
      if (h > 0) CHECK(beam.hypotheses[h - 1].score >= beam.hypotheses[h].score);
      traces.insert(beam.hypotheses[h].changepoints);
    }
    CHECK(traces.size() == beam.hypotheses.size());
  }
}

TEST_CASE("K = 1 ties go to the no-change child") {
  AdaptConfig cfg = scalar_config(0.5, 1);
  Beam beam = init_beam(Matrix::Zero(1, 1), cfg);
  beam = beam_step(beam, v1(0), v1(0.3));
  REQUIRE(beam.hypotheses.size() == 1u);
  CHECK(beam.hypotheses[0].changepoints.empty());
}

TEST_CASE("changepoint allowed on the first step") {
  AdaptConfig cfg = scalar_config(0.05, 2);
  cfg.prior_variance = 0.01;
  cfg.noise_variance = v1(0.01);
  const Beam beam = beam_step(init_beam(Matrix::Zero(1, 1), cfg), v1(1), v1(5));
  CHECK(beam.hypotheses.size() == 2u);
  CHECK(top_hypothesis(beam).changepoints == std::vector<std::int64_t>{0});
}

TEST_CASE("a sign flip of the decoder is detected") {
  AdaptConfig cfg = AdaptConfig::cartpole(1);
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 1.0);
  Vector theta(2);
  theta << 1.0, -2.0;
  Beam beam = init_beam(theta.transpose(), cfg);
  const double s = std::sqrt(cfg.noise_variance[0]);
  for (int k = 0; k < 50; ++k) {
    Vector z(2);
    z << n(rng), n(rng);
    beam = beam_step(beam, z, v1(theta.dot(z) + s * n(rng)));
  }
  Vector z(2);
  z << 2.0, -2.0;
  beam = beam_step(beam, z, v1(-theta.dot(z)));
  REQUIRE(!top_hypothesis(beam).changepoints.empty());
  CHECK(top_hypothesis(beam).changepoints.back() == 50);
}

TEST_CASE("beam_weights") {
  CHECK(beam_weights(with_scores({-7.0}))[0] == doctest::Approx(1.0));
  const Vector w2 = beam_weights(with_scores({0.0, 0.0}));
  CHECK(w2[0] == doctest::Approx(0.5));
  const Vector w3 = beam_weights(with_scores({0.0, -std::log(3.0)}));
  CHECK(w3[0] == doctest::Approx(0.75));
  CHECK(w3[1] == doctest::Approx(0.25));
  const Vector shifted = beam_weights(with_scores({1e4, 1e4 - std::log(3.0)}));
  CHECK((shifted - w3).cwiseAbs().maxCoeff() < 1e-12);
  const Vector w = beam_weights(with_scores({-30.0, -3.0, 2.0, 0.5}));
  CHECK(std::abs(w.sum() - 1.0) < 1e-12);
  CHECK((w.array() > 0.0).all());
}

TEST_CASE("predict") {
  Beam one = with_scores({0.0});
  one.hypotheses[0].posterior = scalar_posterior(2.0, 0.5);
  const Prediction p = predict(one, v1(3));
  CHECK(p.mean[0] == doctest::Approx(6.0));
  CHECK(p.variance[0] == doctest::Approx(9 * 0.5 + 1.0));

  Beam two = with_scores({0.0, 0.0});
  two.config.noise_variance = v1(0.5);
  two.hypotheses[0].posterior = scalar_posterior(1.0, 0.5);
  two.hypotheses[1].posterior = scalar_posterior(-1.0, 0.5);
  const Prediction m = predict(two, v1(1));
  CHECK(m.mean[0] == doctest::Approx(0.0).scale(1.0));
  CHECK(m.variance[0] == doctest::Approx(2.0));

  const Beam zero = init_beam(Matrix::Zero(1, 1), scalar_config());
  CHECK(predict(zero, v1(0)).variance[0] == doctest::Approx(1.0));
}

TEST_CASE("total_variance") {
  Beam b = init_beam(Matrix::Zero(1, 2), scalar_config());
  Matrix cov(2, 2);
  cov << 0.3, 0.1, 0.1, 0.2;
  b.hypotheses[0].posterior.cov[0] = cov;
  Vector z(2);
  z << 1.0, -2.0;
  CHECK(total_variance(b, z, Vector::Zero(2))[0] == doctest::Approx(z.dot(cov * z)));

  Beam two = with_scores({0.0, -1.0});
  CHECK(total_variance(two, v1(1), v1(0))[0] == doctest::Approx(1.0));

  Beam aleatoric = init_beam(Matrix::Zero(1, 2), scalar_config());
  aleatoric.hypotheses[0].posterior.mean[0] << 1.0, 2.0;
  aleatoric.hypotheses[0].posterior.cov[0].setZero();
  CHECK(total_variance(aleatoric, Vector::Zero(2), Vector::Ones(2))[0] == doctest::Approx(5.0));
}

TEST_CASE("beam json round trip is bit exact") {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> n(0.0, 1.0);
  Beam beam = init_beam(Matrix::Random(2, 3), AdaptConfig::cartpole(2));
  for (int k = 0; k < 20; ++k) {
    Vector z(3), y(2);
    for (auto& v : z) v = n(rng);
    for (auto& v : y) v = n(rng);
    beam = beam_step(beam, z, y);
  }
  const Beam back = beam_from_json(nlohmann::json::parse(to_json(beam).dump()));
  CHECK(back.step == beam.step);
  REQUIRE(back.hypotheses.size() == beam.hypotheses.size());
  for (std::size_t h = 0; h < beam.hypotheses.size(); ++h) {
    CHECK(back.hypotheses[h].score == beam.hypotheses[h].score);
    CHECK(back.hypotheses[h].changepoints == beam.hypotheses[h].changepoints);
    for (int j = 0; j < 2; ++j) {
      CHECK(back.hypotheses[h].posterior.mean[j] == beam.hypotheses[h].posterior.mean[j]);
      CHECK(back.hypotheses[h].posterior.cov[j] == beam.hypotheses[h].posterior.cov[j]);
    }
  }
  CHECK(to_json(back) == to_json(beam));
}

TEST_CASE("adapt config json keeps base values") {
  AdaptConfig base = AdaptConfig::cartpole(4);
  const AdaptConfig c = adapt_config_from_json({{"beam_size", 12}}, base);
  CHECK(c.beam_size == 12);
  CHECK(c.noise_variance == base.noise_variance);
  CHECK(adapt_config_from_json(to_json(base)).noise_variance == base.noise_variance);
}
