#include "semavg/trial_data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "exact_sum.hpp"

namespace semavg {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  for (char c : line) {
    if (c == ',') {
      out.push_back(field);
      field.clear();
    } else if (c != '\r') {
      field.push_back(c);
    }
  }
  out.push_back(field);
  return out;
}

double parse_number(const std::string& field, int row, const std::string& col) {
  double value = 0.0;
  const char* begin = field.data();
  const char* end = begin + field.size();
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end)
    throw ValidationError("invalid numeric value '" + field + "' at row " +
                          std::to_string(row) + ", column '" + col + "'");
  return value;
}

}  // namespace

EndpointSpec parse_kind(const std::string& token) {
  if (token == "continuous") return EndpointSpec::continuous("");
  if (token == "binary") return EndpointSpec::binary("");
  if (token.rfind("ordinal:", 0) == 0) {
    const std::string levels = token.substr(8);
    int k = 0;
    auto [ptr, ec] = std::from_chars(levels.data(), levels.data() + levels.size(), k);
    if (ec != std::errc() || ptr != levels.data() + levels.size() || k < 3)
      throw ValidationError("ordinal kind needs 'ordinal:K' with K >= 3, got '" +
                            token + "'");
    return EndpointSpec::ordinal("", k);
  }
  throw ValidationError("unknown endpoint kind '" + token +
                        "' (expected continuous, binary, or ordinal:K)");
}

std::string kind_label(const EndpointSpec& spec) {
  switch (spec.kind) {
    case EndpointKind::Continuous: return "continuous";
    case EndpointKind::Binary: return "binary";
    case EndpointKind::Ordinal: return "ordinal:" + std::to_string(spec.n_levels);
  }
  return "?";
}

TrialDataset::TrialDataset(std::vector<int> arm, Eigen::MatrixXd endpoints,
                           std::vector<EndpointSpec> specs) {
  const int n = static_cast<int>(arm.size());
  const int p = static_cast<int>(specs.size());
  if (endpoints.rows() != n)
    throw ValidationError("arm vector and endpoint matrix row counts differ");
  if (endpoints.cols() != p)
    throw ValidationError("endpoint matrix column count does not match specs");
  if (p < 3)
    throw ValidationError(
        "at least 3 endpoints are required: the one-factor model is "
        "under-identified or saturated with fewer");
  for (int j = 1; j < p; ++j)
    if (specs[static_cast<size_t>(j)].categorical())
      throw ValidationError("only the primary endpoint may be categorical; '" +
                            specs[static_cast<size_t>(j)].name + "' is not");
  if (specs[0].kind == EndpointKind::Ordinal && specs[0].n_levels < 3)
    throw ValidationError("ordinal endpoints need at least 3 levels");

  for (int i = 0; i < n; ++i) {
    if (arm[static_cast<size_t>(i)] != 0 && arm[static_cast<size_t>(i)] != 1)
      throw ValidationError("arm indicator must be 0 or 1 at row " +
                            std::to_string(i + 1));
    for (int j = 0; j < p; ++j) {
      const double v = endpoints(i, j);
      if (!std::isfinite(v))
        throw ValidationError("missing or non-finite value at row " +
                              std::to_string(i + 1) + ", column '" +
                              specs[static_cast<size_t>(j)].name + "'");
      const auto& spec = specs[static_cast<size_t>(j)];
      if (spec.categorical()) {
        if (v != std::floor(v) || v < 0.0 || v > spec.n_levels - 1)
          throw ValidationError(
              "categorical value " + std::to_string(v) + " out of range 0.." +
              std::to_string(spec.n_levels - 1) + " at row " +
              std::to_string(i + 1) + ", column '" + spec.name + "'");
      }
    }
  }

  arm_ = std::move(arm);
  endpoints_ = std::move(endpoints);
  specs_ = std::move(specs);
  count_arms();
  if (n0_ == 0 || n1_ == 0)
    throw ValidationError("both treatment arms must be nonempty");
}

TrialDataset TrialDataset::unchecked(std::vector<int> arm,
                                     Eigen::MatrixXd endpoints,
                                     std::vector<EndpointSpec> specs) {
  TrialDataset ds;
  ds.arm_ = std::move(arm);
  ds.endpoints_ = std::move(endpoints);
  ds.specs_ = std::move(specs);
  ds.count_arms();
  return ds;
}

void TrialDataset::count_arms() {
  n0_ = n1_ = 0;
  for (int a : arm_) (a == 0 ? n0_ : n1_)++;
}

TrialDataset TrialDataset::subset(std::span<const int> rows) const {
  std::vector<int> arm(rows.size());
  Eigen::MatrixXd endpoints(static_cast<Eigen::Index>(rows.size()),
                            endpoints_.cols());
  for (size_t r = 0; r < rows.size(); ++r) {
    arm[r] = arm_[static_cast<size_t>(rows[r])];
    endpoints.row(static_cast<Eigen::Index>(r)) = endpoints_.row(rows[r]);
  }
  return unchecked(std::move(arm), std::move(endpoints), specs_);
}

TrialDataset load_csv(const std::string& path, const std::string& primary,
                      const std::string& arm,
                      const std::vector<std::string>& secondaries,
                      const std::vector<EndpointSpec>& kinds) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open input file '" + path + "'");
  std::string line;
  if (!std::getline(in, line))
    throw ValidationError("input file '" + path + "' is empty (no header row)");

  const std::vector<std::string> header = split_csv_line(line);
  auto column_of = [&](const std::string& name) {
    for (size_t j = 0; j < header.size(); ++j)
      if (header[j] == name) return static_cast<int>(j);
    throw ValidationError("column '" + name + "' not found in '" + path + "'");
  };

  std::vector<std::string> endpoint_names;
  endpoint_names.push_back(primary);
  endpoint_names.insert(endpoint_names.end(), secondaries.begin(),
                        secondaries.end());
  const size_t p = endpoint_names.size();
  if (kinds.size() != p)
    throw ValidationError("got " + std::to_string(kinds.size()) +
                          " kinds for " + std::to_string(p) + " endpoints");

  const int arm_col = column_of(arm);
  std::vector<int> endpoint_cols;
  endpoint_cols.reserve(p);
  for (const auto& name : endpoint_names) endpoint_cols.push_back(column_of(name));

  std::vector<int> arms;
  std::vector<double> values;
  int row = 1;  // header is row 1
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
    const std::vector<std::string> fields = split_csv_line(line);
    if (fields.size() != header.size())
      throw ValidationError("row " + std::to_string(row) + " has " +
                            std::to_string(fields.size()) + " fields, header has " +
                            std::to_string(header.size()));
    const std::string& a = fields[static_cast<size_t>(arm_col)];
    if (a.empty())
      throw ValidationError("missing value at row " + std::to_string(row) +
                            ", column '" + arm + "'");
    if (a != "0" && a != "1")
      throw ValidationError("arm value must be exactly \"0\" or \"1\" at row " +
                            std::to_string(row) + ", got '" + a + "'");
    arms.push_back(a == "1" ? 1 : 0);
    for (size_t j = 0; j < p; ++j) {
      const std::string& field = fields[static_cast<size_t>(endpoint_cols[j])];
      if (field.empty())
        throw ValidationError("missing value at row " + std::to_string(row) +
                              ", column '" + endpoint_names[j] + "'");
      values.push_back(parse_number(field, row, endpoint_names[j]));
    }
  }

  const int n = static_cast<int>(arms.size());
  Eigen::MatrixXd endpoints(n, static_cast<Eigen::Index>(p));
  for (int i = 0; i < n; ++i)
    for (size_t j = 0; j < p; ++j)
      endpoints(i, static_cast<Eigen::Index>(j)) = values[static_cast<size_t>(i) * p + j];

  std::vector<EndpointSpec> specs(kinds);
  for (size_t j = 0; j < p; ++j) specs[j].name = endpoint_names[j];
  return TrialDataset(std::move(arms), std::move(endpoints), std::move(specs));
}

void write_csv(const TrialDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot open output file '" + path + "'");
  out << "arm";
  for (const auto& spec : ds.specs()) out << ',' << spec.name;
  out << '\n';
  char buf[40];
  for (int i = 0; i < ds.n(); ++i) {
    out << ds.arm(i);
    for (int j = 0; j < ds.n_endpoints(); ++j) {
      if (ds.specs()[static_cast<size_t>(j)].categorical())
        std::snprintf(buf, sizeof buf, "%.0f", ds.y(i, j));
      else
        std::snprintf(buf, sizeof buf, "%.17g", ds.y(i, j));
      out << ',' << buf;
    }
    out << '\n';
  }
}

ArmMoments arm_split(const TrialDataset& ds) {
  const int p = ds.n_endpoints();
  ArmMoments m;
  m.n0 = ds.n_arm(0);
  m.n1 = ds.n_arm(1);
  if (m.n0 < 2 || m.n1 < 2)
    throw ValidationError("each arm needs at least 2 subjects to estimate a covariance");

  // Order-independent accumulation: outputs are bit-identical under any
  // permutation of the subjects.
  std::vector<detail::ExactSum> mean_acc(static_cast<size_t>(2 * p));
  for (int i = 0; i < ds.n(); ++i)
    for (int j = 0; j < p; ++j)
      mean_acc[static_cast<size_t>(ds.arm(i) * p + j)].add(ds.y(i, j));
  m.mean0.resize(p);
  m.mean1.resize(p);
  for (int j = 0; j < p; ++j) {
    m.mean0(j) = mean_acc[static_cast<size_t>(j)].value() / m.n0;
    m.mean1(j) = mean_acc[static_cast<size_t>(p + j)].value() / m.n1;
  }

  std::vector<detail::ExactSum> cov_acc(static_cast<size_t>(2 * p * p));
  for (int i = 0; i < ds.n(); ++i) {
    const int a = ds.arm(i);
    const Eigen::VectorXd& mean = (a == 0) ? m.mean0 : m.mean1;
    for (int j = 0; j < p; ++j) {
      const double dj = ds.y(i, j) - mean(j);
      for (int k = j; k < p; ++k)
        cov_acc[static_cast<size_t>((a * p + j) * p + k)].add(dj *
                                                              (ds.y(i, k) - mean(k)));
    }
  }
  m.cov0.resize(p, p);
  m.cov1.resize(p, p);
  for (int j = 0; j < p; ++j) {
    for (int k = j; k < p; ++k) {
      m.cov0(j, k) = m.cov0(k, j) =
          cov_acc[static_cast<size_t>(j * p + k)].value() / (m.n0 - 1);
      m.cov1(j, k) = m.cov1(k, j) =
          cov_acc[static_cast<size_t>((p + j) * p + k)].value() / (m.n1 - 1);
    }
  }
  return m;
}

}  // namespace semavg
