#pragma once

#include <Eigen/Dense>

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace semavg {

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class EndpointKind { Continuous, Binary, Ordinal };

struct EndpointSpec {
  std::string name;
  EndpointKind kind = EndpointKind::Continuous;
  int n_levels = 0;  // 2 for binary, K >= 3 for ordinal, 0 for continuous

  static EndpointSpec continuous(std::string name) {
    return {std::move(name), EndpointKind::Continuous, 0};
  }
  static EndpointSpec binary(std::string name) {
    return {std::move(name), EndpointKind::Binary, 2};
  }
  static EndpointSpec ordinal(std::string name, int levels) {
    return {std::move(name), EndpointKind::Ordinal, levels};
  }

  bool categorical() const { return kind != EndpointKind::Continuous; }
};

/// Parses "continuous", "binary" or "ordinal:K" into an unnamed spec.
EndpointSpec parse_kind(const std::string& token);
std::string kind_label(const EndpointSpec& spec);

/// Immutable two-arm trial dataset. Column 0 is always the primary endpoint;
/// at most one endpoint may be categorical and it must be the primary.
/// Categorical values are integer level codes 0..K-1 stored as doubles.
class TrialDataset {
 public:
  /// Validating constructor; throws ValidationError on any contract breach.
  TrialDataset(std::vector<int> arm, Eigen::MatrixXd endpoints,
               std::vector<EndpointSpec> specs);

  /// Fast path for rows taken from an already-validated dataset.
  static TrialDataset unchecked(std::vector<int> arm, Eigen::MatrixXd endpoints,
                                std::vector<EndpointSpec> specs);

  int n() const noexcept { return static_cast<int>(arm_.size()); }
  int n_endpoints() const noexcept { return static_cast<int>(specs_.size()); }
  int n_arm(int a) const noexcept { return a == 0 ? n0_ : n1_; }
  int arm(int i) const { return arm_[static_cast<size_t>(i)]; }
  double y(int i, int p) const { return endpoints_(i, p); }
  const Eigen::MatrixXd& endpoints() const noexcept { return endpoints_; }
  const std::vector<int>& arms() const noexcept { return arm_; }
  const std::vector<EndpointSpec>& specs() const noexcept { return specs_; }
  const EndpointSpec& primary() const { return specs_[0]; }

  /// Row-subset copy (bootstrap resamples, cross-validation folds).
  TrialDataset subset(std::span<const int> rows) const;

 private:
  TrialDataset() = default;
  void count_arms();

  std::vector<int> arm_;
  Eigen::MatrixXd endpoints_;  // n x P
  std::vector<EndpointSpec> specs_;
  int n0_ = 0, n1_ = 0;
};

/// Loads a comma-delimited UTF-8 CSV with a header row. The internal column
/// order is (primary, secondaries as given); kinds match that order.
TrialDataset load_csv(const std::string& path, const std::string& primary,
                      const std::string& arm,
                      const std::vector<std::string>& secondaries,
                      const std::vector<EndpointSpec>& kinds);

/// Writes a dataset back out (arm column named "arm"); load_csv of the result
/// reproduces the dataset exactly up to 1e-15 relative on reals and bit-exact
/// on level codes.
void write_csv(const TrialDataset& ds, const std::string& path);

struct ArmMoments {
  int n0 = 0, n1 = 0;
  Eigen::VectorXd mean0, mean1;
  Eigen::MatrixXd cov0, cov1;  // unbiased, denominator n_arm - 1
};

/// Per-arm endpoint means and sample covariances. Throws ValidationError if
/// either arm has fewer than 2 subjects.
ArmMoments arm_split(const TrialDataset& ds);

struct EstimateResult {
  std::string method;    // Saturated | SEM | BIC-MA | SL-MA
  std::string estimand;  // ATE | probit-coefficient | concordance
  double estimate = 0.0;
  double std_error = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::optional<double> weight_on_sem;  // present only for MA methods
  std::vector<std::string> flags;
};

/// Two-sided Wald multiplier for 95% intervals.
inline constexpr double kWald95 = 1.959964;

}  // namespace semavg
