#include "cpadapt/cpblr.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <numbers>

namespace cpadapt {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;  // log(2 pi)

void symmetrize(Matrix& m) { m = 0.5 * (m + m.transpose()).eval(); }

double log_sum_exp(double a, double b) {
  const double hi = std::max(a, b);
  return hi + std::log(std::exp(a - hi) + std::exp(b - hi));
}

}  // namespace

void AdaptConfig::validate() const {
  if (!(changepoint_prior > 0.0 && changepoint_prior < 1.0)) {
    throw ConfigError("changepoint_prior must lie in (0, 1)");
  }
  if (!(temperature > 0.0 && temperature < 1.0)) throw ConfigError("temperature must lie in (0, 1)");
  if (beam_size < 1) throw ConfigError("beam_size must be >= 1");
  if (!(prior_variance > 0.0)) throw ConfigError("prior_variance must be > 0");
  if (noise_variance.size() == 0) throw ConfigError("noise_variance must be non-empty");
  if (!(noise_variance.array() > 0.0).all() || !noise_variance.allFinite()) {
    throw ConfigError("noise_variance entries must be positive and finite");
  }
  if (rebase_interval < 1) throw ConfigError("rebase_interval must be >= 1");
}

AdaptConfig AdaptConfig::cartpole(int output_dim) {
  AdaptConfig cfg;
  cfg.noise_variance = Vector::Constant(output_dim, 0.1);
  return cfg;
}

bool DecoderPosterior::valid() const {
  if (mean.size() != cov.size()) return false;
  for (std::size_t j = 0; j < mean.size(); ++j) {
    if (!mean[j].allFinite() || !cov[j].allFinite()) return false;
    if ((cov[j] - cov[j].transpose()).cwiseAbs().maxCoeff() >= 1e-10) return false;
    if (Eigen::LLT<Matrix>(cov[j]).info() != Eigen::Success) return false;
  }
  return true;
}

double temper_factor(int c, double beta) { return c == 0 ? 1.0 : beta * beta; }

double marginal_loglik(const DecoderPosterior& post, const Eigen::Ref<const Vector>& z,
                       const Eigen::Ref<const Vector>& delta, double gamma,
                       const Eigen::Ref<const Vector>& noise_variance) {
  const int d = post.output_dim();
  require_dim(delta.size(), d, "residual");
  require_dim(noise_variance.size(), d, "noise variance");
  require_dim(z.size(), post.latent_dim(), "latent feature");
  double total = 0.0;
  for (int j = 0; j < d; ++j) {
    const double v = z.dot(post.cov[j] * z) / gamma + noise_variance[j];
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw NumericError("marginal_loglik: non-positive predictive variance");
    }
    const double err = delta[j] - z.dot(post.mean[j]);
    total += kLog2Pi + std::log(v) + err * err / v;
  }
  return -0.5 * total;
}

LogDecisionProbs changepoint_log_posterior(double loglik0, double loglik1, double prior) {
  const double a = std::log(prior) + loglik1;
  const double b = std::log1p(-prior) + loglik0;
  const double norm = log_sum_exp(a, b);
  return {b - norm, a - norm};
}

double changepoint_posterior(double loglik0, double loglik1, double prior) {
  return std::exp(changepoint_log_posterior(loglik0, loglik1, prior).changepoint);
}

DecoderPosterior posterior_update(const DecoderPosterior& post, const Eigen::Ref<const Vector>& z,
                                  const Eigen::Ref<const Vector>& delta, double gamma,
                                  const Eigen::Ref<const Vector>& noise_variance) {
  const int d = post.output_dim();
  const int l = post.latent_dim();
  require_dim(delta.size(), d, "residual");
  require_dim(noise_variance.size(), d, "noise variance");
  require_dim(z.size(), l, "latent feature");
  const Matrix eye = Matrix::Identity(l, l);
  const Matrix outer = z * z.transpose();

  DecoderPosterior out;
  out.mean.reserve(d);
  out.cov.reserve(d);
  for (int j = 0; j < d; ++j) {
    Eigen::LLT<Matrix> prior_chol(post.cov[j]);
    if (prior_chol.info() != Eigen::Success) {
      throw NumericError("posterior_update: prior covariance not positive definite (dim " +
                         std::to_string(j) + ")");
    }
    const Matrix prior_precision = prior_chol.solve(eye);
    Matrix precision = gamma * prior_precision + outer / noise_variance[j];
    symmetrize(precision);
    Eigen::LLT<Matrix> chol(precision);
    if (chol.info() != Eigen::Success) {
      throw NumericError("posterior_update: precision not positive definite (dim " +
                         std::to_string(j) + ")");
    }
    Matrix cov = chol.solve(eye);
    symmetrize(cov);
    const Vector rhs = gamma * (prior_precision * post.mean[j]) + z * (delta[j] / noise_variance[j]);
    Vector mean = chol.solve(rhs);
    if (!cov.allFinite() || !mean.allFinite() || Eigen::LLT<Matrix>(cov).info() != Eigen::Success) {
      throw NumericError("posterior_update: updated covariance failed Cholesky check (dim " +
                         std::to_string(j) + ")");
    }
    out.mean.push_back(std::move(mean));
    out.cov.push_back(std::move(cov));
  }
  return out;
}

double score_update(double previous, double loglik_c, double p_changepoint, int c) {
  const double p = c == 1 ? p_changepoint : 1.0 - p_changepoint;
  return previous + loglik_c + std::log(p);
}

Beam init_beam(const Matrix& theta0, const AdaptConfig& cfg) {
  cfg.validate();
  if (!theta0.allFinite()) throw NumericError("init_beam: theta0 has non-finite entries");
  require_dim(cfg.noise_variance.size(), theta0.rows(), "noise variance");
  const auto l = theta0.cols();
  Hypothesis h;
  for (Eigen::Index j = 0; j < theta0.rows(); ++j) {
    h.posterior.mean.push_back(theta0.row(j).transpose());
    h.posterior.cov.push_back(cfg.prior_variance * Matrix::Identity(l, l));
  }
  Beam beam;
  beam.config = cfg;
  beam.hypotheses.push_back(std::move(h));
  return beam;
}

Hypothesis extend_hypothesis(const Hypothesis& parent, const Eigen::Ref<const Vector>& z,
                             const Eigen::Ref<const Vector>& delta, int c, double loglik_c,
                             double p_changepoint, const AdaptConfig& cfg) {
  Hypothesis child;
  child.changepoints = parent.changepoints;
  if (c == 1) child.changepoints.push_back(parent.length);
  child.length = parent.length + 1;
  child.score = score_update(parent.score, loglik_c, p_changepoint, c);
  child.posterior = posterior_update(parent.posterior, z, delta, temper_factor(c, cfg.temperature),
                                     cfg.noise_variance);
  return child;
}

Beam beam_step(const Beam& beam, const Eigen::Ref<const Vector>& z,
               const Eigen::Ref<const Vector>& delta) {
  const AdaptConfig& cfg = beam.config;
  if (!z.allFinite() || !delta.allFinite()) throw NumericError("beam_step: non-finite input");
  const double gamma1 = temper_factor(1, cfg.temperature);

  struct Candidate {
    double score;
    int c;
    std::size_t parent;
  };
  std::vector<Candidate> candidates;
  candidates.reserve(2 * beam.hypotheses.size());
  for (std::size_t h = 0; h < beam.hypotheses.size(); ++h) {
    const Hypothesis& parent = beam.hypotheses[h];
    const double ll0 = marginal_loglik(parent.posterior, z, delta, 1.0, cfg.noise_variance);
    if (!cfg.changepoints_enabled) {
      candidates.push_back({parent.score + ll0, 0, h});
      continue;
    }
    const double ll1 = marginal_loglik(parent.posterior, z, delta, gamma1, cfg.noise_variance);
    const LogDecisionProbs lp = changepoint_log_posterior(ll0, ll1, cfg.changepoint_prior);
    candidates.push_back({parent.score + ll0 + lp.no_change, 0, h});
    candidates.push_back({parent.score + ll1 + lp.changepoint, 1, h});
  }

  std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.c != b.c) return a.c < b.c;
    return a.parent < b.parent;
  });
  if (candidates.size() > static_cast<std::size_t>(cfg.beam_size)) {
    candidates.resize(static_cast<std::size_t>(cfg.beam_size));
  }

  Beam next;
  next.config = cfg;
  next.step = beam.step + 1;
  next.hypotheses.reserve(candidates.size());
  for (const Candidate& cand : candidates) {
    const Hypothesis& parent = beam.hypotheses[cand.parent];
    Hypothesis child;
    child.changepoints = parent.changepoints;
    if (cand.c == 1) child.changepoints.push_back(beam.step);
    child.length = parent.length + 1;
    child.score = cand.score;
    child.posterior = posterior_update(parent.posterior, z, delta,
                                       temper_factor(cand.c, cfg.temperature), cfg.noise_variance);
    next.hypotheses.push_back(std::move(child));
  }
  // Children of distinct parents (or of one parent with different c) never
  // share a trace.
  assert(std::all_of(next.hypotheses.begin(), next.hypotheses.end(),
                     [&](const Hypothesis& h) { return h.length == next.step; }));

  if (next.step % cfg.rebase_interval == 0) {
    const double best = next.hypotheses.front().score;
    for (auto& h : next.hypotheses) h.score -= best;
  }
  return next;
}

Vector beam_weights(const Beam& beam) {
  const auto n = static_cast<Eigen::Index>(beam.hypotheses.size());
  if (n == 0) throw DimensionError("beam_weights: empty beam");
  Vector w(n);
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& h : beam.hypotheses) best = std::max(best, h.score);
  for (Eigen::Index i = 0; i < n; ++i) w[i] = std::exp(beam.hypotheses[i].score - best);
  return w / w.sum();
}

Prediction predict(const Beam& beam, const Eigen::Ref<const Vector>& z) {
  const Vector w = beam_weights(beam);
  const Vector& noise = beam.config.noise_variance;
  const int d = beam.hypotheses.front().posterior.output_dim();
  require_dim(z.size(), beam.hypotheses.front().posterior.latent_dim(), "latent feature");
  Prediction out{Vector::Zero(d), Vector::Zero(d)};
  const auto n = beam.hypotheses.size();
  std::vector<double> means(n);
  for (int j = 0; j < d; ++j) {
    double mean = 0.0, var = 0.0;
    for (std::size_t h = 0; h < n; ++h) {
      const auto& post = beam.hypotheses[h].posterior;
      means[h] = z.dot(post.mean[j]);
      mean += w[h] * means[h];
      var += w[h] * (z.dot(post.cov[j] * z) + noise[j]);
    }
    for (std::size_t h = 0; h < n; ++h) var += w[h] * (means[h] - mean) * (means[h] - mean);
    out.mean[j] = mean;
    out.variance[j] = var;
  }
  return out;
}

Vector total_variance(const Beam& beam, const Eigen::Ref<const Vector>& z,
                      const Eigen::Ref<const Vector>& latent_variance) {
  const Vector w = beam_weights(beam);
  const int d = beam.hypotheses.front().posterior.output_dim();
  const int l = beam.hypotheses.front().posterior.latent_dim();
  require_dim(z.size(), l, "latent feature");
  require_dim(latent_variance.size(), l, "latent variance");
  Vector out = Vector::Zero(d);
  const auto n = beam.hypotheses.size();
  std::vector<double> means(n);
  for (int j = 0; j < d; ++j) {
    Vector second_moment = Vector::Zero(l);
    double within = 0.0, mbar = 0.0;
    for (std::size_t h = 0; h < n; ++h) {
      const auto& post = beam.hypotheses[h].posterior;
      second_moment += w[h] * post.mean[j].cwiseAbs2();
      within += w[h] * z.dot(post.cov[j] * z);
      means[h] = z.dot(post.mean[j]);
      mbar += w[h] * means[h];
    }
    double between = 0.0;
    for (std::size_t h = 0; h < n; ++h) between += w[h] * (means[h] - mbar) * (means[h] - mbar);
    out[j] = latent_variance.dot(second_moment) + within + between;
  }
  return out;
}

const Hypothesis& top_hypothesis(const Beam& beam) {
  if (beam.hypotheses.empty()) throw DimensionError("top_hypothesis: empty beam");
  return beam.hypotheses.front();
}

nlohmann::json to_json(const AdaptConfig& cfg) {
  return {{"changepoint_prior", cfg.changepoint_prior},
          {"temperature", cfg.temperature},
          {"beam_size", cfg.beam_size},
          {"prior_variance", cfg.prior_variance},
          {"noise_variance", std::vector<double>(cfg.noise_variance.data(),
                                                 cfg.noise_variance.data() + cfg.noise_variance.size())},
          {"changepoints_enabled", cfg.changepoints_enabled},
          {"rebase_interval", cfg.rebase_interval}};
}

AdaptConfig adapt_config_from_json(const nlohmann::json& j, AdaptConfig cfg) {
  cfg.changepoint_prior = j.value("changepoint_prior", cfg.changepoint_prior);
  cfg.temperature = j.value("temperature", cfg.temperature);
  cfg.beam_size = j.value("beam_size", cfg.beam_size);
  cfg.prior_variance = j.value("prior_variance", cfg.prior_variance);
  cfg.changepoints_enabled = j.value("changepoints_enabled", cfg.changepoints_enabled);
  cfg.rebase_interval = j.value("rebase_interval", cfg.rebase_interval);
  if (j.contains("noise_variance")) {
    const auto nv = j.at("noise_variance").get<std::vector<double>>();
    cfg.noise_variance = Eigen::Map<const Vector>(nv.data(), static_cast<Eigen::Index>(nv.size()));
  }
  return cfg;
}

nlohmann::json to_json(const Beam& beam) {
  nlohmann::json hyps = nlohmann::json::array();
  for (const auto& h : beam.hypotheses) {
    nlohmann::json means = nlohmann::json::array();
    nlohmann::json covs = nlohmann::json::array();
    for (int j = 0; j < h.posterior.output_dim(); ++j) {
      const Vector& mu = h.posterior.mean[j];
      means.push_back(std::vector<double>(mu.data(), mu.data() + mu.size()));
      const Matrix& s = h.posterior.cov[j];
      std::vector<double> row_major;
      for (Eigen::Index r = 0; r < s.rows(); ++r)
        for (Eigen::Index c = 0; c < s.cols(); ++c) row_major.push_back(s(r, c));
      covs.push_back(row_major);
    }
    hyps.push_back({{"score", h.score},
                    {"changepoints", h.changepoints},
                    {"length", h.length},
                    {"mean", means},
                    {"cov", covs}});
  }
  return {{"config", to_json(beam.config)}, {"step", beam.step}, {"hypotheses", hyps}};
}

Beam beam_from_json(const nlohmann::json& j) {
  Beam beam;
  beam.config = adapt_config_from_json(j.at("config"));
  beam.config.validate();
  beam.step = j.at("step").get<std::int64_t>();
  for (const auto& jh : j.at("hypotheses")) {
    Hypothesis h;
    h.score = jh.at("score").get<double>();
    h.changepoints = jh.at("changepoints").get<std::vector<std::int64_t>>();
    h.length = jh.at("length").get<std::int64_t>();
    const auto& means = jh.at("mean");
    const auto& covs = jh.at("cov");
    if (means.size() != covs.size()) throw DimensionError("beam json: mean/cov count mismatch");
    for (std::size_t d = 0; d < means.size(); ++d) {
      const auto mu = means[d].get<std::vector<double>>();
      const auto l = static_cast<Eigen::Index>(mu.size());
      h.posterior.mean.push_back(Eigen::Map<const Vector>(mu.data(), l));
      const auto s = covs[d].get<std::vector<double>>();
      require_dim(static_cast<Eigen::Index>(s.size()), l * l, "beam json covariance");
      Matrix cov(l, l);
      for (Eigen::Index r = 0, k = 0; r < l; ++r)
        for (Eigen::Index c = 0; c < l; ++c) cov(r, c) = s[static_cast<std::size_t>(k++)];
      h.posterior.cov.push_back(std::move(cov));
    }
    beam.hypotheses.push_back(std::move(h));
  }
  if (beam.hypotheses.empty()) throw DimensionError("beam json: no hypotheses");
  return beam;
}

}  // namespace cpadapt
