#include "cpadapt/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cpadapt {

namespace {

std::array<std::pair<int, int>, kLayerCount> layer_shapes(int input_dim, int latent_dim) {
  return {{{kHiddenWidths[0], input_dim},
           {kHiddenWidths[1], kHiddenWidths[0]},
           {kHiddenWidths[2], kHiddenWidths[1]},
           {2 * latent_dim, kHiddenWidths[2]}}};
}

double elu_grad(double v) noexcept { return v > 0.0 ? 1.0 : std::exp(v); }

// Activations kept for the backward pass.
struct ForwardTrace {
  std::array<Vector, kLayerCount> inputs;       // input to each dense layer
  std::array<Vector, kLayerCount - 1> preacts;  // hidden pre-activations
  Vector raw_logvar;
  LatentGaussian latent;
};

ForwardTrace forward(const EncoderParams& params, const Eigen::Ref<const Vector>& input) {
  require_dim(input.size(), params.input_dim(), "encoder input");
  const auto& layers = params.layers();
  ForwardTrace tr;
  tr.inputs[0] = input;
  for (int l = 0; l < kLayerCount - 1; ++l) {
    tr.preacts[l] = layers[l].weight * tr.inputs[l] + layers[l].bias;
    tr.inputs[l + 1] = tr.preacts[l].unaryExpr([](double v) { return elu(v); });
    if (!tr.inputs[l + 1].allFinite()) {
      throw NumericError("encoder: non-finite activation in layer " + std::to_string(l));
    }
  }
  const Vector out = layers[kLayerCount - 1].weight * tr.inputs[kLayerCount - 1] +
                     layers[kLayerCount - 1].bias;
  if (!out.allFinite()) {
    throw NumericError("encoder: non-finite activation in layer " +
                       std::to_string(kLayerCount - 1));
  }
  const int latent = params.latent_dim();
  tr.raw_logvar = out.tail(latent);
  tr.latent.mean = out.head(latent);
  tr.latent.variance =
      tr.raw_logvar.unaryExpr([](double v) { return std::exp(std::clamp(v, kLogVarMin, kLogVarMax)); });
  return tr;
}

}  // namespace

double elu(double v) noexcept { return v > 0.0 ? v : std::expm1(v); }

EncoderParams::EncoderParams(int input_dim, int latent_dim)
    : input_dim_(input_dim), latent_dim_(latent_dim) {
  if (input_dim < 1 || latent_dim < 1) {
    throw ConfigError("encoder dimensions must be positive");
  }
  const auto shapes = layer_shapes(input_dim, latent_dim);
  for (int l = 0; l < kLayerCount; ++l) {
    layers_[l].weight = Matrix::Zero(shapes[l].first, shapes[l].second);
    layers_[l].bias = Vector::Zero(shapes[l].first);
  }
}

EncoderParams EncoderParams::glorot_uniform(int input_dim, int latent_dim, std::mt19937_64& rng) {
  EncoderParams p(input_dim, latent_dim);
  for (auto& layer : p.layers_) {
    const double fan_out = static_cast<double>(layer.weight.rows());
    const double fan_in = static_cast<double>(layer.weight.cols());
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) {
        layer.weight(r, c) = a * dist(rng);
      }
    }
  }
  return p;
}

Eigen::Index EncoderParams::parameter_count() const noexcept {
  Eigen::Index n = 0;
  for (const auto& layer : layers_) n += layer.weight.size() + layer.bias.size();
  return n;
}

Vector EncoderParams::flatten() const {
  Vector flat(parameter_count());
  Eigen::Index k = 0;
  for (const auto& layer : layers_) {
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) flat[k++] = layer.weight(r, c);
    }
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) flat[k++] = layer.bias[r];
  }
  return flat;
}

void EncoderParams::assign(const Eigen::Ref<const Vector>& flat) {
  require_dim(flat.size(), parameter_count(), "encoder parameter vector");
  Eigen::Index k = 0;
  for (auto& layer : layers_) {
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = flat[k++];
    }
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) layer.bias[r] = flat[k++];
  }
}

bool EncoderParams::finite() const {
  return std::all_of(layers_.begin(), layers_.end(), [](const DenseLayer& l) {
    return l.weight.allFinite() && l.bias.allFinite();
  });
}

LatentGaussian encode(const EncoderParams& params, const Eigen::Ref<const Vector>& input) {
  return forward(params, input).latent;
}

LatentGaussian encode(const EncoderParams& params, const Eigen::Ref<const Vector>& x,
                      const Eigen::Ref<const Vector>& u) {
  Vector input(x.size() + u.size());
  input << x, u;
  return encode(params, input);
}

double kl_to_standard_normal(const LatentGaussian& g) {
  double kl = 0.0;
  for (Eigen::Index i = 0; i < g.dim(); ++i) {
    const double var = g.variance[i];
    kl += g.mean[i] * g.mean[i] + var - std::log(var) - 1.0;
  }
  return 0.5 * kl;
}

Vector sample_latent(const LatentGaussian& g, const Eigen::Ref<const Vector>& unit_noise,
                     bool deterministic) {
  require_dim(unit_noise.size(), g.dim(), "unit noise");
  if (deterministic) return g.mean;
  return g.mean + g.variance.cwiseSqrt().cwiseProduct(unit_noise);
}

VldLoss vld_loss(const EncoderParams& params, const Matrix& theta0,
                 std::span<const TrainingPair> batch, double kl_weight,
                 std::span<const Vector> unit_noise, bool deterministic) {
  if (batch.empty()) throw DimensionError("vld_loss: empty batch");
  if (unit_noise.size() != batch.size()) {
    throw DimensionError("vld_loss: need one noise vector per sample");
  }
  const int latent = params.latent_dim();
  require_dim(theta0.cols(), latent, "theta0 columns");

  VldLoss out;
  out.grad_theta = Matrix::Zero(theta0.rows(), theta0.cols());
  std::array<Matrix, kLayerCount> grad_w;
  std::array<Vector, kLayerCount> grad_b;
  const auto& layers = params.layers();
  for (int l = 0; l < kLayerCount; ++l) {
    grad_w[l] = Matrix::Zero(layers[l].weight.rows(), layers[l].weight.cols());
    grad_b[l] = Vector::Zero(layers[l].bias.size());
  }

  for (std::size_t k = 0; k < batch.size(); ++k) {
    const TrainingPair& pair = batch[k];
    require_dim(pair.target.size(), theta0.rows(), "residual target");
    const ForwardTrace tr = forward(params, pair.input);
    const Vector& eps = unit_noise[k];
    require_dim(eps.size(), latent, "unit noise");

    const Vector stddev = tr.latent.variance.cwiseSqrt();
    const Vector z = deterministic ? tr.latent.mean : Vector(tr.latent.mean + stddev.cwiseProduct(eps));
    const Vector resid = pair.target - theta0 * z;
    const double rec = resid.squaredNorm();
    const double kl = deterministic ? 0.0 : kl_to_standard_normal(tr.latent);
    const double sample_loss = rec + kl_weight * kl;
    if (!std::isfinite(sample_loss)) {
      throw NumericError("vld_loss: non-finite loss at sample " + std::to_string(k));
    }
    out.reconstruction += rec;
    out.kl += kl;
    out.total += sample_loss;

    out.grad_theta.noalias() -= 2.0 * resid * z.transpose();
    const Vector dz = -2.0 * theta0.transpose() * resid;

    Vector dout = Vector::Zero(2 * latent);
    if (deterministic) {
      dout.head(latent) = dz;
    } else {
      dout.head(latent) = dz + kl_weight * tr.latent.mean;
      for (int i = 0; i < latent; ++i) {
        const double raw = tr.raw_logvar[i];
        if (raw < kLogVarMin || raw > kLogVarMax) continue;  // clamped: flat
        dout[latent + i] = dz[i] * 0.5 * stddev[i] * eps[i] +
                           kl_weight * 0.5 * (tr.latent.variance[i] - 1.0);
      }
    }

    Vector delta = dout;
    for (int l = kLayerCount - 1; l >= 0; --l) {
      grad_w[l].noalias() += delta * tr.inputs[l].transpose();
      grad_b[l] += delta;
      if (l == 0) break;
      Vector upstream = layers[l].weight.transpose() * delta;
      delta = upstream.cwiseProduct(tr.preacts[l - 1].unaryExpr([](double v) { return elu_grad(v); }));
    }
  }

  out.grad_params.resize(params.parameter_count());
  Eigen::Index idx = 0;
  for (int l = 0; l < kLayerCount; ++l) {
    for (Eigen::Index r = 0; r < grad_w[l].rows(); ++r) {
      for (Eigen::Index c = 0; c < grad_w[l].cols(); ++c) out.grad_params[idx++] = grad_w[l](r, c);
    }
    for (Eigen::Index r = 0; r < grad_b[l].size(); ++r) out.grad_params[idx++] = grad_b[l][r];
  }
  return out;
}

void OfflineTrainConfig::validate() const {
  if (!(kl_weight >= 0.0)) throw ConfigError("kl_weight must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
}

namespace {

// Plain Adam over one flat parameter vector.
class Adam {
 public:
  Adam(Eigen::Index n, double lr) : lr_(lr), m_(Vector::Zero(n)), v_(Vector::Zero(n)) {}

  void step(Vector& params, const Vector& grad) {
    ++t_;
    m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
    v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
  }

 private:
  double lr_;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  int t_ = 0;
  Vector m_;
  Vector v_;
};

}  // namespace

TrainResult train_pairs(std::span<const TrainingPair> pairs, const OfflineTrainConfig& cfg,
                        const std::function<void(int, double)>& on_epoch) {
  cfg.validate();
  if (pairs.empty()) throw DimensionError("train: empty dataset");
  const int input_dim = static_cast<int>(pairs.front().input.size());
  const int out_dim = static_cast<int>(pairs.front().target.size());
  const int latent = cfg.latent_dim;

  std::mt19937_64 rng(cfg.seed);
  EncoderParams enc = EncoderParams::glorot_uniform(input_dim, latent, rng);
  Matrix theta(out_dim, latent);
  {
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    const double a = std::sqrt(6.0 / (latent + out_dim));
    for (Eigen::Index r = 0; r < theta.rows(); ++r)
      for (Eigen::Index c = 0; c < theta.cols(); ++c) theta(r, c) = a * dist(rng);
  }

  const Eigen::Index n_enc = enc.parameter_count();
  const Eigen::Index n_theta = theta.size();
  Vector flat(n_enc + n_theta);
  flat.head(n_enc) = enc.flatten();
  for (Eigen::Index r = 0, k = 0; r < theta.rows(); ++r)
    for (Eigen::Index c = 0; c < theta.cols(); ++c) flat[n_enc + k++] = theta(r, c);

  Adam adam(flat.size(), cfg.learning_rate);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);

  const double kl_weight = cfg.deterministic_encoder ? 0.0 : cfg.kl_weight;
  std::vector<TrainingPair> batch;
  std::vector<Vector> noise;
  double initial_loss = -1.0;
  TrainResult result{enc, theta, {}};

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      batch.clear();
      noise.clear();
      for (std::size_t i = start; i < stop; ++i) {
        batch.push_back(pairs[order[i]]);
        Vector eps(latent);
        for (int j = 0; j < latent; ++j) eps[j] = normal(rng);
        noise.push_back(std::move(eps));
      }
      const VldLoss loss = vld_loss(enc, theta, batch, kl_weight, noise, cfg.deterministic_encoder);
      const double batch_mean = loss.total / static_cast<double>(batch.size());
      if (initial_loss < 0.0) initial_loss = std::max(batch_mean, 1e-300);
      if (!std::isfinite(batch_mean) || batch_mean > 1e3 * initial_loss) {
        throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) +
                               " (batch loss " + std::to_string(batch_mean) + ")");
      }
      epoch_sum += loss.total;

      Vector grad(flat.size());
      grad.head(n_enc) = loss.grad_params;
      for (Eigen::Index r = 0, k = 0; r < theta.rows(); ++r)
        for (Eigen::Index c = 0; c < theta.cols(); ++c) grad[n_enc + k++] = loss.grad_theta(r, c);
      grad /= static_cast<double>(batch.size());

      adam.step(flat, grad);
      enc.assign(flat.head(n_enc));
      for (Eigen::Index r = 0, k = 0; r < theta.rows(); ++r)
        for (Eigen::Index c = 0; c < theta.cols(); ++c) theta(r, c) = flat[n_enc + k++];
    }
    const double epoch_mean = epoch_sum / static_cast<double>(pairs.size());
    result.epoch_loss.push_back(epoch_mean);
    if (on_epoch) on_epoch(epoch, epoch_mean);
  }
  result.encoder = enc;
  result.theta0 = theta;
  return result;
}

}  // namespace cpadapt
