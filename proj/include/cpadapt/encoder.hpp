/**
 * @file encoder.hpp
 * @brief Stochastic latent encoder and the variational latent-dynamics objective.
 *
 * The encoder maps a concatenated (state, control) input to a diagonal
 * Gaussian over a latent feature z. The topology is fixed:
 *
 *   input(d+m) -> 8 -> 16 -> 8 -> 2l      (ELU on the hidden layers)
 *
 * The first l outputs are the latent mean, the last l are the log-variance.
 * A linear decoder theta0 (d x l) maps z to the residual dynamics
 * delta = x_next - f_nom(x, u). Both are trained jointly by minimizing
 *
 *   sum_k ||delta_k - theta0 z_k||^2 + beta_kl * KL(q(z_k | x_k, u_k) || N(0, I))
 *
 * with z_k drawn through the reparameterization z = mu + sqrt(var) * eps.
 */
#ifndef CPADAPT_ENCODER_HPP
#define CPADAPT_ENCODER_HPP

#include "cpadapt/common.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace cpadapt {

inline constexpr std::array<int, 3> kHiddenWidths = {8, 16, 8};
inline constexpr int kLayerCount = 4;
inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
};

/// Encoder weights for the fixed [8, 16, 8] ELU topology. The layer shapes
/// are set at construction; only the values may change afterwards.
class EncoderParams {
 public:
  /// All-zero parameters.
  EncoderParams(int input_dim, int latent_dim);

  /// Uniform(-a, a) init with a = sqrt(6 / (fan_in + fan_out)), zero biases.
  static EncoderParams glorot_uniform(int input_dim, int latent_dim, std::mt19937_64& rng);

  int input_dim() const noexcept { return input_dim_; }
  int latent_dim() const noexcept { return latent_dim_; }
  int output_dim() const noexcept { return 2 * latent_dim_; }
  std::string activation() const { return "elu"; }

  const std::array<DenseLayer, kLayerCount>& layers() const noexcept { return layers_; }

  /// Number of scalar parameters; flat order is layer by layer, weight
  /// row-major then bias.
  Eigen::Index parameter_count() const noexcept;
  Vector flatten() const;
  void assign(const Eigen::Ref<const Vector>& flat);

  bool finite() const;

 private:
  int input_dim_;
  int latent_dim_;
  std::array<DenseLayer, kLayerCount> layers_;
};

struct LatentGaussian {
  Vector mean;
  Vector variance;

  Eigen::Index dim() const noexcept { return mean.size(); }
};

double elu(double v) noexcept;

/// Forward pass. `input` is the concatenation (x, u). Throws NumericError
/// naming the layer if any activation is non-finite.
LatentGaussian encode(const EncoderParams& params, const Eigen::Ref<const Vector>& input);
LatentGaussian encode(const EncoderParams& params, const Eigen::Ref<const Vector>& x,
                      const Eigen::Ref<const Vector>& u);

/// KL(N(mean, diag(var)) || N(0, I)).
double kl_to_standard_normal(const LatentGaussian& g);

/// mean + sqrt(var) * unit_noise. In deterministic mode the variance is
/// treated as zero and the mean is returned for any noise.
Vector sample_latent(const LatentGaussian& g, const Eigen::Ref<const Vector>& unit_noise,
                     bool deterministic = false);

/// One supervised pair: encoder input (x, u) and residual target delta.
struct TrainingPair {
  Vector input;
  Vector target;
};

struct VldLoss {
  double total = 0.0;
  double reconstruction = 0.0;
  double kl = 0.0;
  Vector grad_params;  // flat, same order as EncoderParams::flatten()
  Matrix grad_theta;   // d x l
};

/// Loss and analytic gradients over a batch. One unit-noise vector per pair.
/// In deterministic mode the latent is the encoder mean and the KL term is
/// dropped.
VldLoss vld_loss(const EncoderParams& params, const Matrix& theta0,
                 std::span<const TrainingPair> batch, double kl_weight,
                 std::span<const Vector> unit_noise, bool deterministic = false);

struct OfflineTrainConfig {
  double kl_weight = 0.1;
  double learning_rate = 1e-3;
  int batch_size = 128;
  int epochs = 50;
  std::uint64_t seed = 0;
  bool deterministic_encoder = false;
  int latent_dim = 2;

  void validate() const;
};

struct TrainResult {
  EncoderParams encoder;
  Matrix theta0;
  std::vector<double> epoch_loss;  // mean per-sample loss for each epoch
};

/// Minibatch Adam over {encoder, theta0}. Throws TrainingDiverged if a batch
/// loss exceeds 1e3 times the initial loss.
TrainResult train_pairs(std::span<const TrainingPair> pairs, const OfflineTrainConfig& cfg,
                        const std::function<void(int, double)>& on_epoch = {});

}  // namespace cpadapt

#endif  // CPADAPT_ENCODER_HPP
