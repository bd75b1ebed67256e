#include "transfed/tensor.hpp"

#include <algorithm>
#include <utility>

namespace transfed {

std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

std::vector<std::uint32_t> NamedTensor::dims() const {
  if (rank == 1) return {static_cast<std::uint32_t>(value.size())};
  return {static_cast<std::uint32_t>(value.rows()), static_cast<std::uint32_t>(value.cols())};
}

void ParameterSet::add(std::string name, MatrixXd value, int rank) {
  if (contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  if (rank != 1 && rank != 2) throw ConfigError("parameter rank must be 1 or 2");
  if (rank == 1 && value.rows() != 1) throw DimensionError("rank-1 parameter '" + name + "' must be a row");
  entries_.push_back({std::move(name), rank, std::move(value)});
}

const MatrixXd& ParameterSet::at(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e.value;
  throw ConfigError("no parameter named '" + std::string(name) + "'");
}

MatrixXd& ParameterSet::at(std::string_view name) {
  return const_cast<MatrixXd&>(std::as_const(*this).at(name));
}

bool ParameterSet::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.name == name; });
}

std::size_t ParameterSet::total_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
  return n;
}

bool ParameterSet::same_layout(const ParameterSet& other) const {
  if (size() != other.size()) return false;
  for (std::size_t i = 0; i < size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.name != b.name || a.rank != b.rank || a.value.rows() != b.value.rows() ||
        a.value.cols() != b.value.cols())
      return false;
  }
  return true;
}

ParameterSet ParameterSet::zeros_like() const {
  ParameterSet out;
  for (const auto& e : entries_) out.add(e.name, MatrixXd::Zero(e.value.rows(), e.value.cols()), e.rank);
  return out;
}

bool operator==(const ParameterSet& a, const ParameterSet& b) {
  if (!a.same_layout(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].value != b[i].value) return false;
  return true;
}

void require_same_layout(const ParameterSet& expected, const ParameterSet& actual,
                         std::string_view context) {
  const std::string where(context);
  if (expected.size() != actual.size())
    throw DimensionError(where + ": expected " + std::to_string(expected.size()) + " tensors, got " +
                         std::to_string(actual.size()));
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& e = expected[i];
    const auto& a = actual[i];
    if (e.name != a.name)
      throw DimensionError(where + ": tensor " + std::to_string(i) + " is '" + a.name + "', expected '" +
                           e.name + "'");
    if (e.rank != a.rank || e.value.rows() != a.value.rows() || e.value.cols() != a.value.cols())
      throw DimensionError(where + ": tensor '" + e.name + "' has shape " + shape_string(a.value) +
                           ", expected " + shape_string(e.value));
  }
}

ParameterSet round_to_f32(const ParameterSet& params) {
  ParameterSet out = params;
  for (auto& e : out) e.value = e.value.cast<float>().cast<double>();
  return out;
}

}  // namespace transfed
