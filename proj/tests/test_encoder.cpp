#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "cpadapt/encoder.hpp"

#include <cmath>
#include <random>
#include <vector>

using namespace cpadapt;

namespace {

// Plain-loop forward pass used as an independent reference.
std::vector<double> reference_forward(const EncoderParams& p, std::vector<double> a) {
  const auto& layers = p.layers();
  for (int l = 0; l < kLayerCount; ++l) {
    const auto& W = layers[l].weight;
    std::vector<double> out(static_cast<std::size_t>(W.rows()));
    for (Eigen::Index i = 0; i < W.rows(); ++i) {
      double s = layers[l].bias[i];
      for (Eigen::Index j = 0; j < W.cols(); ++j) s += W(i, j) * a[static_cast<std::size_t>(j)];
      if (l < kLayerCount - 1) s = s > 0 ? s : std::exp(s) - 1.0;
      out[static_cast<std::size_t>(i)] = s;
    }
    a = std::move(out);
  }
  return a;
}

struct Instance {
  EncoderParams params;
  Matrix theta;
  std::vector<TrainingPair> batch;
  std::vector<Vector> noise;
};

Instance random_instance(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dim(1, 4);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int in = dim(rng) + 1;
  const int latent = dim(rng);
  const int out = dim(rng);
  Instance inst{EncoderParams::glorot_uniform(in, latent, rng), Matrix(out, latent), {}, {}};
  // Nonzero biases so every gradient path is exercised.
  Vector flat = inst.params.flatten();
  for (Eigen::Index i = 0; i < flat.size(); ++i) flat[i] += 0.1 * normal(rng);
  inst.params.assign(flat);
  for (Eigen::Index i = 0; i < inst.theta.size(); ++i) inst.theta.data()[i] = normal(rng);
  const int n = std::uniform_int_distribution<int>(1, 5)(rng);
  for (int k = 0; k < n; ++k) {
    Vector x(in), y(out), e(latent);
    for (auto& v : x) v = normal(rng);
    for (auto& v : y) v = normal(rng);
    for (auto& v : e) v = normal(rng);
    inst.batch.push_back({x, y});
    inst.noise.push_back(e);
  }
  return inst;
}

double max_relative_gradient_error(const Instance& inst, double kl_weight) {
  const VldLoss base = vld_loss(inst.params, inst.theta, inst.batch, kl_weight, inst.noise);
  double worst = 0.0;
  auto check = [&](double analytic, double numeric) {
    if (std::abs(analytic) <= 1e-6 && std::abs(numeric) <= 1e-6) return;
    const double rel = std::abs(analytic - numeric) / std::max(std::abs(analytic), std::abs(numeric));
    worst = std::max(worst, rel);
  };
  const Vector flat = inst.params.flatten();
  for (Eigen::Index i = 0; i < flat.size(); ++i) {
    const double h = 1e-6 * std::max(1.0, std::abs(flat[i]));
    EncoderParams plus = inst.params, minus = inst.params;
    Vector fp = flat, fm = flat;
    fp[i] += h;
    fm[i] -= h;
    plus.assign(fp);
    minus.assign(fm);
    const double lp = vld_loss(plus, inst.theta, inst.batch, kl_weight, inst.noise).total;
    const double lm = vld_loss(minus, inst.theta, inst.batch, kl_weight, inst.noise).total;
    check(base.grad_params[i], (lp - lm) / (2 * h));
  }
  for (Eigen::Index i = 0; i < inst.theta.size(); ++i) {
    const double h = 1e-6 * std::max(1.0, std::abs(inst.theta.data()[i]));
    Matrix tp = inst.theta, tm = inst.theta;
    tp.data()[i] += h;
    tm.data()[i] -= h;
    const double lp = vld_loss(inst.params, tp, inst.batch, kl_weight, inst.noise).total;
    const double lm = vld_loss(inst.params, tm, inst.batch, kl_weight, inst.noise).total;
    check(base.grad_theta.data()[i], (lp - lm) / (2 * h));
  }
  return worst;
}

}  // namespace

TEST_CASE("zero network encodes to a standard normal") {
  const EncoderParams p(5, 4);
  const LatentGaussian g = encode(p, Vector::Random(5));
  CHECK(g.mean.isZero(0.0));
  CHECK(g.variance.isOnes(0.0));
  CHECK(p.output_dim() == 8);
}

TEST_CASE("forward pass matches a loop reference") {
  std::mt19937_64 rng(0);
  const EncoderParams p = EncoderParams::glorot_uniform(5, 4, rng);
  for (const std::vector<double> input : {std::vector<double>{0, 0, 0, 0, 0}, {0.3, -1.2, 0.05, 2.0, -0.7}}) {
    const Vector v = Eigen::Map<const Vector>(input.data(), 5);
    const LatentGaussian g = encode(p, v);
    const auto ref = reference_forward(p, input);
    for (int j = 0; j < 4; ++j) {
      CHECK(g.mean[j] == doctest::Approx(ref[static_cast<std::size_t>(j)]).epsilon(1e-12));
      const double lv = std::clamp(ref[static_cast<std::size_t>(4 + j)], kLogVarMin, kLogVarMax);
      CHECK(g.variance[j] == doctest::Approx(std::exp(lv)).epsilon(1e-12));
    }
  }
}

TEST_CASE("glorot init respects its bound and zero biases") {
  std::mt19937_64 rng(3);
  const EncoderParams p = EncoderParams::glorot_uniform(5, 4, rng);
  for (const auto& layer : p.layers()) {
    const double a = std::sqrt(6.0 / static_cast<double>(layer.weight.rows() + layer.weight.cols()));
    CHECK(layer.weight.cwiseAbs().maxCoeff() <= a);
    CHECK(layer.bias.isZero(0.0));
  }
}

TEST_CASE("log-variance is clamped") {
  EncoderParams p(2, 1);
  Vector flat = p.flatten();
  // Last bias entry feeds the log-variance output.
  flat[flat.size() - 1] = 50.0;
  p.assign(flat);
  CHECK(encode(p, Vector::Zero(2)).variance[0] == doctest::Approx(std::exp(kLogVarMax)));
  flat[flat.size() - 1] = -50.0;
  p.assign(flat);
  CHECK(encode(p, Vector::Zero(2)).variance[0] == doctest::Approx(std::exp(kLogVarMin)));
}

TEST_CASE("flatten and assign round trip") {
  std::mt19937_64 rng(1);
  const EncoderParams p = EncoderParams::glorot_uniform(3, 2, rng);
  EncoderParams q(3, 2);
  q.assign(p.flatten());
  CHECK(q.flatten() == p.flatten());
  CHECK(p.parameter_count() == (8 * 3 + 8) + (16 * 8 + 16) + (8 * 16 + 8) + (4 * 8 + 4));
  CHECK_THROWS_AS(q.assign(Vector::Zero(3)), DimensionError);
}

TEST_CASE("KL divergence examples") {
  CHECK(kl_to_standard_normal({Vector::Zero(3), Vector::Ones(3)}) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(kl_to_standard_normal({Vector::Ones(1), Vector::Ones(1)}) == doctest::Approx(0.5));
  Vector e(1);
  e << std::exp(1.0);
  CHECK(kl_to_standard_normal({Vector::Zero(1), e}) == doctest::Approx(0.5 * (std::exp(1.0) - 2.0)));
}

TEST_CASE("KL is nonnegative on random Gaussians") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int t = 0; t < 200; ++t) {
    LatentGaussian g{Vector(3), Vector(3)};
    for (int j = 0; j < 3; ++j) {
      g.mean[j] = normal(rng);
      g.variance[j] = std::exp(normal(rng));
    }
    CHECK(kl_to_standard_normal(g) >= 0.0);
  }
}

TEST_CASE("sample_latent") {
  Vector mu(2), var(2), eps(2);
  mu << 1, 2;
  var << 4, 9;
  eps << 1, -1;
  const Vector s = sample_latent({mu, var}, eps);
  CHECK(s[0] == 3.0);
  CHECK(s[1] == -1.0);
  CHECK(sample_latent({mu, var}, Vector::Zero(2)) == mu);
  CHECK(sample_latent({mu, var}, eps, true) == mu);
  CHECK_THROWS_AS(sample_latent({mu, var}, Vector::Zero(3)), DimensionError);
}

TEST_CASE("vld_loss trivial cases") {
  std::mt19937_64 rng(2);
  const EncoderParams p = EncoderParams::glorot_uniform(3, 2, rng);
  std::vector<TrainingPair> batch{{Vector::Random(3), Vector::Random(2)}, {Vector::Random(3), Vector::Random(2)}};
  std::vector<Vector> noise{Vector::Random(2), Vector::Random(2)};
  const double expected = batch[0].target.squaredNorm() + batch[1].target.squaredNorm();
  CHECK(vld_loss(p, Matrix::Zero(2, 2), batch, 0.0, noise).total == doctest::Approx(expected).epsilon(1e-14));

  const EncoderParams zero(3, 2);
  std::vector<TrainingPair> one{batch[0]};
  std::vector<Vector> zn{Vector::Zero(2)};
  const VldLoss l = vld_loss(zero, Matrix::Random(2, 2), one, 0.1, zn);
  CHECK(l.kl == doctest::Approx(0.0));
  CHECK(l.total == doctest::Approx(batch[0].target.squaredNorm()));
  CHECK_THROWS_AS(vld_loss(p, Matrix::Zero(2, 2), batch, 0.0, zn), DimensionError);
}

TEST_CASE("analytic gradients match central differences") {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 25; ++t) {
    const Instance inst = random_instance(rng);
    CAPTURE(t);
    CHECK(max_relative_gradient_error(inst, 0.1) < 1e-4);
  }
}

TEST_CASE("non-finite input reports a numeric failure") {
  std::mt19937_64 rng(2);
  const EncoderParams p = EncoderParams::glorot_uniform(2, 1, rng);
  Vector x(2);
  x << std::nan(""), 0.0;
  CHECK_THROWS_AS(encode(p, x), NumericError);
}

TEST_CASE("training fits a realizable target") {
  std::mt19937_64 rng(5);
  const EncoderParams teacher = EncoderParams::glorot_uniform(3, 2, rng);
  Matrix theta_star(2, 2);
  theta_star << 1.0, -0.5, 0.3, 0.8;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<TrainingPair> pairs;
  for (int i = 0; i < 512; ++i) {
    Vector x(3);
    for (auto& v : x) v = u(rng);
    pairs.push_back({x, theta_star * encode(teacher, x).mean});
  }
  OfflineTrainConfig cfg;
  cfg.deterministic_encoder = true;
  cfg.learning_rate = 1e-2;
  cfg.batch_size = 32;
  cfg.epochs = 200;
  const TrainResult r = train_pairs(pairs, cfg);
  REQUIRE(r.epoch_loss.size() == 200u);
  CHECK(r.epoch_loss.back() < 1e-3 * r.epoch_loss.front());

  const TrainResult again = train_pairs(pairs, cfg);
  CHECK(again.encoder.flatten() == r.encoder.flatten());
  CHECK(again.theta0 == r.theta0);
}

TEST_CASE("stochastic training loss trends down") {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<TrainingPair> pairs;
  for (int i = 0; i < 400; ++i) {
    Vector x(3);
    for (auto& v : x) v = normal(rng);
    Vector y(2);
    y << std::sin(x[0]) + 0.5 * x[1], x[2] * x[0];
    pairs.push_back({x, y});
  }
  OfflineTrainConfig cfg;
  cfg.epochs = 30;
  cfg.learning_rate = 5e-3;
  const TrainResult r = train_pairs(pairs, cfg);
  CHECK(r.epoch_loss.back() <= r.epoch_loss.front());
}

TEST_CASE("divergent training is reported") {
  std::vector<TrainingPair> pairs;
  for (int i = 0; i < 64; ++i) {
    Vector x = Vector::Constant(2, 0.01 * i);
    pairs.push_back({x, Vector::Constant(1, 1e-3)});
  }
  OfflineTrainConfig cfg;
  cfg.learning_rate = 1e3;
  cfg.batch_size = 4;
  cfg.epochs = 20;
  cfg.deterministic_encoder = true;
  CHECK_THROWS_AS(train_pairs(pairs, cfg), TrainingDiverged);
}

TEST_CASE("invalid training config") {
  OfflineTrainConfig cfg;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
