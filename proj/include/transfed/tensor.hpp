#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace transfed {

// Dense types are row-major so that a stack of windows (b*W x d) can be
// reinterpreted as a flattened batch (b x W*d) without copying.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using MatrixXd = Matrix<double>;
using RowVectorXd = RowVector<double>;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct FormatError : Error {
  using Error::Error;
};

std::string shape_string(Eigen::Index rows, Eigen::Index cols);

template <typename Derived>
std::string shape_string(const Eigen::MatrixBase<Derived>& m) {
  return shape_string(m.rows(), m.cols());
}

/// One named parameter tensor. Rank is 1 (bias, gain) or 2 (kernel); rank-1
/// tensors are stored as a single row.
struct NamedTensor {
  std::string name;
  int rank = 2;
  MatrixXd value;

  std::vector<std::uint32_t> dims() const;
  Eigen::Index size() const { return value.size(); }
};

/// Ordered, name-unique collection of parameter tensors. The ordering is the
/// canonical order used for aggregation and on the wire.
class ParameterSet {
 public:
  ParameterSet() = default;

  void add(std::string name, MatrixXd value, int rank = 2);

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  const NamedTensor& operator[](std::size_t i) const { return entries_[i]; }
  NamedTensor& operator[](std::size_t i) { return entries_[i]; }

  const MatrixXd& at(std::string_view name) const;
  MatrixXd& at(std::string_view name);
  bool contains(std::string_view name) const;

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  /// Total number of scalars.
  std::size_t total_count() const;

  /// True when names, ranks and shapes match entry by entry.
  bool same_layout(const ParameterSet& other) const;

  /// Zero-valued copy with the same layout.
  ParameterSet zeros_like() const;

  friend bool operator==(const ParameterSet& a, const ParameterSet& b);

 private:
  std::vector<NamedTensor> entries_;
};

/// Throws DimensionError describing the first layout difference.
void require_same_layout(const ParameterSet& expected, const ParameterSet& actual,
                         std::string_view context);

/// Rounds every scalar through IEEE binary32, as the wire does.
ParameterSet round_to_f32(const ParameterSet& params);

}  // namespace transfed
