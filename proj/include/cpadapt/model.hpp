#ifndef CPADAPT_MODEL_HPP
#define CPADAPT_MODEL_HPP

#include "cpadapt/encoder.hpp"

#include "json.hpp"

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace cpadapt {

using NominalFn = std::function<Vector(const Eigen::Ref<const Vector>&, const Eigen::Ref<const Vector>&)>;

/// One observed step. `trajectory`, `step` and `intervention` are bookkeeping
/// carried through the trajectory CSV; the learner only sees (x, u, x_next).
struct Transition {
  Vector x;
  Vector u;
  Vector x_next;
  long trajectory = 0;
  long step = 0;
  bool intervention = false;
};

/// Immutable list of transitions with residual targets
/// delta = x_next - f_nom(x, u) computed once from the nominal model.
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::vector<Transition> transitions, const NominalFn& nominal);

  std::size_t size() const noexcept { return transitions_.size(); }
  bool empty() const noexcept { return transitions_.empty(); }
  int state_dim() const noexcept { return state_dim_; }
  int control_dim() const noexcept { return control_dim_; }

  const std::vector<Transition>& transitions() const noexcept { return transitions_; }
  const Transition& operator[](std::size_t i) const { return transitions_[i]; }
  const Vector& residual(std::size_t i) const { return residuals_[i]; }

  /// Subset of transitions whose trajectory id is in `ids` (order kept).
  Dataset select_trajectories(const std::vector<long>& ids, const NominalFn& nominal) const;
  std::vector<long> trajectory_ids() const;

 private:
  std::vector<Transition> transitions_;
  std::vector<Vector> residuals_;
  int state_dim_ = 0;
  int control_dim_ = 0;
};

/// CSV with header; columns x0..x{d-1}, u0..u{m-1}, x_next0..x_next{d-1}.
/// `with_trajectory_columns` adds traj, step and intervention columns.
void write_transitions_csv(std::ostream& os, const std::vector<Transition>& rows,
                           bool with_trajectory_columns);
/// Reads either layout; extra columns are ignored unless they are the
/// trajectory bookkeeping columns.
std::vector<Transition> read_transitions_csv(std::istream& is);

/// Trained encoder + initial decoder, plus the input standardization and
/// residual scaling fitted on the training data. The adaptation engine works
/// on scaled residuals delta / residual_scale; a zero scale marks a
/// dimension whose residual is identically zero (it maps to 0 both ways).
struct TrainedModel {
  EncoderParams encoder{1, 1};
  Matrix theta0;
  Vector input_mean;
  Vector input_scale;
  Vector residual_scale;
  int state_dim = 0;
  int control_dim = 0;

  int latent_dim() const noexcept { return encoder.latent_dim(); }

  Vector normalized_input(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& u) const;
  LatentGaussian latent(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& u) const;
  Vector scale_residual(const Eigen::Ref<const Vector>& delta) const;
  Vector unscale_residual(const Eigen::Ref<const Vector>& scaled) const;
  /// Variance in scaled units to physical residual units.
  Vector unscale_variance(const Eigen::Ref<const Vector>& scaled) const;
};

nlohmann::json to_json(const TrainedModel& model);
TrainedModel trained_model_from_json(const nlohmann::json& j);

enum class ResidualScaling { None, Rms };

/// Rescales residual units so that the offline model's mean squared error on
/// `data` equals `noise_variance` per active dimension. theta0 is rescaled to
/// keep predictions unchanged. Returns the applied per-dimension factors.
Vector calibrate_residual_scale(TrainedModel& model, const Dataset& data, const Vector& noise_variance);

struct OfflineTrainOutput {
  TrainedModel model;
  std::vector<double> epoch_loss;
};

/// Fits input standardization and residual scaling on `data`, then trains
/// the encoder and theta0 on the scaled pairs.
OfflineTrainOutput train_offline(const Dataset& data, const OfflineTrainConfig& cfg,
                                 ResidualScaling scaling = ResidualScaling::Rms,
                                 const std::function<void(int, double)>& on_epoch = {});

}  // namespace cpadapt

#endif  // CPADAPT_MODEL_HPP
