#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cutpost/error.hpp"

namespace cutpost {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline bool all_finite(const Vector& v) { return v.allFinite(); }

/// Named parameter vector. Used at the boundaries (CSV columns, CLI, reports);
/// numerical kernels work on plain `Vector`s.
class ParamVector {
 public:
  ParamVector() = default;
  ParamVector(Vector values, std::vector<std::string> names)
      : values_(std::move(values)), names_(std::move(names)) {
    if (static_cast<std::size_t>(values_.size()) != names_.size())
      throw ConfigError("ParamVector: " + std::to_string(values_.size()) + " values but " +
                        std::to_string(names_.size()) + " names");
    if (!values_.allFinite()) throw ConfigError("ParamVector: non-finite value");
  }

  const Vector& values() const { return values_; }
  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }

  double operator[](std::string_view name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return values_[static_cast<Eigen::Index>(i)];
    throw ConfigError("ParamVector: no parameter named '" + std::string(name) + "'");
  }

 private:
  Vector values_;
  std::vector<std::string> names_;
};

enum class SampleSource { cut, full, smi, conditional, prior };

inline std::string_view to_string(SampleSource s) {
  switch (s) {
    case SampleSource::cut: return "cut";
    case SampleSource::full: return "full";
    case SampleSource::smi: return "smi";
    case SampleSource::conditional: return "conditional";
    case SampleSource::prior: return "prior";
  }
  return "unknown";
}

inline SampleSource sample_source_from_string(std::string_view s) {
  if (s == "cut") return SampleSource::cut;
  if (s == "full") return SampleSource::full;
  if (s == "smi") return SampleSource::smi;
  if (s == "conditional") return SampleSource::conditional;
  if (s == "prior") return SampleSource::prior;
  throw ConfigError("unknown sample source '" + std::string(s) + "'");
}

/// Posterior draws: rows are draws, columns are named parameters.
struct SampleSet {
  Matrix draws;
  std::vector<std::string> names;
  SampleSource source = SampleSource::cut;
  nlohmann::json meta = nlohmann::json::object();

  Eigen::Index rows() const { return draws.rows(); }
  Eigen::Index cols() const { return draws.cols(); }

  Eigen::Index column_index(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<Eigen::Index>(i);
    throw ConfigError("SampleSet: no column named '" + std::string(name) + "'");
  }

  Vector column(std::string_view name) const { return draws.col(column_index(name)); }

  /// Throws `ConfigError` if the invariants (S >= 1, finite, labels match) fail.
  void validate() const {
    if (draws.rows() < 1) throw ConfigError("SampleSet: no draws");
    if (static_cast<std::size_t>(draws.cols()) != names.size())
      throw ConfigError("SampleSet: column count does not match names");
    if (!draws.allFinite()) throw ConfigError("SampleSet: non-finite draw");
  }
};

}  // namespace cutpost
