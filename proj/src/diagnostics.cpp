#include "cpadapt/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

namespace cpadapt {

GramianTracker::GramianTracker(int latent_dim, std::vector<int> windows)
    : gram_(Matrix::Zero(latent_dim, latent_dim)), windows_(std::move(windows)) {
  if (latent_dim < 1) throw ConfigError("gramian tracker: latent_dim must be >= 1");
  for (int w : windows_) {
    if (w < 1) throw ConfigError("gramian tracker: window sizes must be >= 1");
  }
}

void GramianTracker::track(const Eigen::Ref<const Vector>& z) {
  require_dim(z.size(), gram_.rows(), "latent feature");
  if (!z.allFinite()) throw NumericError("gramian tracker: non-finite feature");
  gram_.noalias() += z * z.transpose();
  ++t_;
  if (windows_.empty()) return;
  recent_.push_back(z);
  const auto longest = static_cast<std::size_t>(*std::max_element(windows_.begin(), windows_.end()));
  while (recent_.size() > longest) recent_.pop_front();
}

Matrix GramianTracker::window_gramian(int window) const {
  Matrix g = Matrix::Zero(gram_.rows(), gram_.cols());
  const auto n = std::min(recent_.size(), static_cast<std::size_t>(window));
  for (auto it = recent_.end() - static_cast<std::ptrdiff_t>(n); it != recent_.end(); ++it) {
    g.noalias() += *it * it->transpose();
  }
  return g;
}

SpectrumSummary spectrum(const Matrix& symmetric) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetric, Eigen::EigenvaluesOnly);
  const Vector& ev = eig.eigenvalues();
  SpectrumSummary s{};
  s.lambda_max = std::max(0.0, ev.maxCoeff());
  // Eigenvalues below round-off of the largest count as zero.
  const double floor = 64.0 * std::numeric_limits<double>::epsilon() * s.lambda_max;
  s.lambda_min = ev.minCoeff() <= floor ? 0.0 : ev.minCoeff();
  s.condition = s.lambda_min > 0.0 ? s.lambda_max / s.lambda_min
                                   : std::numeric_limits<double>::infinity();
  Eigen::LLT<Matrix> llt(symmetric);
  if (s.lambda_min > 0.0 && llt.info() == Eigen::Success) {
    s.logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  } else {
    s.logdet = -std::numeric_limits<double>::infinity();
  }
  return s;
}

GramianMetrics GramianTracker::metrics() const {
  GramianMetrics m;
  m.t = t_;
  const SpectrumSummary s = spectrum(gram_);
  m.lambda_min = s.lambda_min;
  m.condition = s.condition;
  m.logdet = s.logdet;
  for (int w : windows_) m.window_lambda_min.push_back(spectrum(window_gramian(w)).lambda_min);
  return m;
}

void write_metrics_csv_header(std::ostream& os, const std::vector<int>& windows) {
  os << "t,lambda_min,cond,logdet";
  for (int w : windows) os << ",lambda_min_w" << w;
  os << '\n';
}

void write_metrics_csv_row(std::ostream& os, const GramianMetrics& m) {
  os << m.t << ',' << m.lambda_min << ',' << m.condition << ',' << m.logdet;
  for (double v : m.window_lambda_min) os << ',' << v;
  os << '\n';
}

}  // namespace cpadapt
