/**
 * @file cpblr.hpp
 * @brief Changepoint-aware Bayesian linear regression over a beam of
 *        changepoint histories.
 *
 * Residuals are modeled per output dimension j as
 *
 *   delta_j = z^T theta_j + eps_j,   eps_j ~ N(0, sigma_j^2),
 *
 * with a Gaussian posterior N(mu_j, Sigma_j) on each decoder row. Each
 * hypothesis carries one such posterior and a binary decision trace. On a
 * changepoint (c = 1) the prior precision is tempered by gamma = beta^2
 * before the conjugate update, softly forgetting earlier evidence. Every step
 * each hypothesis spawns both children; the K best by cumulative
 * log-likelihood survive. Predictions marginalize over the surviving beam
 * with softmax weights of the scores.
 *
 * Step indices are 0-based: the first observation passed to beam_step is
 * observation 0, and a changepoint recorded at index i means the prior was
 * tempered before incorporating observation i.
 */
#ifndef CPADAPT_CPBLR_HPP
#define CPADAPT_CPBLR_HPP

#include "cpadapt/common.hpp"

#include "json.hpp"

#include <cstdint>
#include <vector>

namespace cpadapt {

struct AdaptConfig {
  double changepoint_prior = 0.05;  // pi
  double temperature = 0.9;         // beta
  int beam_size = 5;                // K
  double prior_variance = 0.1;      // tau^2
  Vector noise_variance;            // sigma_j^2, one per output dimension
  /// When false only c = 0 children are generated (plain recursive BLR).
  bool changepoints_enabled = true;
  /// Scores are shifted by the best score every this many steps.
  std::int64_t rebase_interval = 10000;

  void validate() const;
  /// Table values used for the cartpole runs: K=5, pi=0.05, beta=0.9,
  /// tau^2=0.1, sigma_j^2=0.1.
  static AdaptConfig cartpole(int output_dim);
};

/// Gaussian posterior over each row of the decoder matrix.
struct DecoderPosterior {
  std::vector<Vector> mean;  // d entries of length l
  std::vector<Matrix> cov;   // d entries of shape l x l

  int output_dim() const noexcept { return static_cast<int>(mean.size()); }
  int latent_dim() const noexcept { return mean.empty() ? 0 : static_cast<int>(mean.front().size()); }

  /// Symmetric, Cholesky-factorizable and finite for every row.
  bool valid() const;
};

struct Hypothesis {
  std::vector<std::int64_t> changepoints;  // indices where c = 1
  std::int64_t length = 0;                 // number of decisions in the trace
  double score = 0.0;
  DecoderPosterior posterior;
};

struct Beam {
  AdaptConfig config;
  std::vector<Hypothesis> hypotheses;  // sorted by score, best first
  std::int64_t step = 0;
};

/// 1 for c = 0, beta^2 for c = 1.
double temper_factor(int c, double beta);

/// log N(delta | Z mu, (1/gamma) z^T Sigma z + sigma^2) summed over dimensions.
double marginal_loglik(const DecoderPosterior& post, const Eigen::Ref<const Vector>& z,
                       const Eigen::Ref<const Vector>& delta, double gamma,
                       const Eigen::Ref<const Vector>& noise_variance);

/// P(c = 1 | data) from the two branch log-likelihoods, evaluated in log space.
double changepoint_posterior(double loglik0, double loglik1, double prior);

struct LogDecisionProbs {
  double no_change;   // log P(c = 0 | data)
  double changepoint; // log P(c = 1 | data)
};

/// Same posterior kept in log space so that neither branch underflows.
LogDecisionProbs changepoint_log_posterior(double loglik0, double loglik1, double prior);

/// Conjugate update of every row with tempered prior precision gamma * Sigma^-1.
/// Computed in precision form through Cholesky factorizations; throws
/// NumericError if the updated covariance is not positive definite.
DecoderPosterior posterior_update(const DecoderPosterior& post, const Eigen::Ref<const Vector>& z,
                                  const Eigen::Ref<const Vector>& delta, double gamma,
                                  const Eigen::Ref<const Vector>& noise_variance);

/// L + loglik_c + log(c p + (1 - c)(1 - p)).
double score_update(double previous, double loglik_c, double p_changepoint, int c);

Beam init_beam(const Matrix& theta0, const AdaptConfig& cfg);

/// Child of `parent` under decision c. `p_changepoint` is the already
/// computed changepoint posterior for this parent and observation.
Hypothesis extend_hypothesis(const Hypothesis& parent, const Eigen::Ref<const Vector>& z,
                             const Eigen::Ref<const Vector>& delta, int c, double loglik_c,
                             double p_changepoint, const AdaptConfig& cfg);

/// One adaptation step: branch every hypothesis on c in {0, 1}, update, score
/// and keep the K best. Ties go to c = 0, then to the lower parent index.
Beam beam_step(const Beam& beam, const Eigen::Ref<const Vector>& z,
               const Eigen::Ref<const Vector>& delta);

/// Softmax of the scores.
Vector beam_weights(const Beam& beam);

struct Prediction {
  Vector mean;
  Vector variance;
};

/// Beam-marginalized predictive mean and variance (mixture moments,
/// observation noise included).
Prediction predict(const Beam& beam, const Eigen::Ref<const Vector>& z);

/// Per-dimension total predictive variance: encoder (aleatoric) term,
/// within-beam parameter variance and between-beam disagreement. Observation
/// noise is not included.
Vector total_variance(const Beam& beam, const Eigen::Ref<const Vector>& z,
                      const Eigen::Ref<const Vector>& latent_variance);

/// Best-scoring hypothesis (front of the beam).
const Hypothesis& top_hypothesis(const Beam& beam);

nlohmann::json to_json(const AdaptConfig& cfg);
/// Keys missing from `j` keep their value in `base`.
AdaptConfig adapt_config_from_json(const nlohmann::json& j, AdaptConfig base = {});
nlohmann::json to_json(const Beam& beam);
Beam beam_from_json(const nlohmann::json& j);

}  // namespace cpadapt

#endif  // CPADAPT_CPBLR_HPP
