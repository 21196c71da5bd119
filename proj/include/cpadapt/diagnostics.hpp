#ifndef CPADAPT_DIAGNOSTICS_HPP
#define CPADAPT_DIAGNOSTICS_HPP

#include "cpadapt/common.hpp"

#include <deque>
#include <iosfwd>
#include <vector>

namespace cpadapt {

/// Excitation metrics of a stream of latent features.
struct GramianMetrics {
  long t = 0;
  double lambda_min = 0.0;
  double condition = 0.0;  // +inf while singular
  double logdet = 0.0;     // -inf while singular
  std::vector<double> window_lambda_min;  // one per configured window
};

/// Accumulates G_t = sum z z^T and keeps the last W features for every
/// configured sliding window. Eigen decompositions happen only in metrics().
class GramianTracker {
 public:
  GramianTracker(int latent_dim, std::vector<int> windows = {15, 30});

  void track(const Eigen::Ref<const Vector>& z);

  long count() const noexcept { return t_; }
  const Matrix& gramian() const noexcept { return gram_; }
  const std::vector<int>& windows() const noexcept { return windows_; }
  Matrix window_gramian(int window) const;

  GramianMetrics metrics() const;

 private:
  Matrix gram_;
  std::vector<int> windows_;
  std::deque<Vector> recent_;
  long t_ = 0;
};

struct SpectrumSummary {
  double lambda_min;
  double lambda_max;
  double condition;
  double logdet;
};

SpectrumSummary spectrum(const Matrix& symmetric);

void write_metrics_csv_header(std::ostream& os, const std::vector<int>& windows);
void write_metrics_csv_row(std::ostream& os, const GramianMetrics& m);

}  // namespace cpadapt

#endif  // CPADAPT_DIAGNOSTICS_HPP
