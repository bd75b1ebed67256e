#pragma once

#include "transfed/model.hpp"
#include "transfed/tensor.hpp"

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace transfed::data {

struct FileNotFound : Error {
  using Error::Error;
};

struct ParseError : FormatError {
  using FormatError::FormatError;
};

/// Class names of the 15-activity dataset, indexed by class id.
const std::vector<std::string>& own_class_names();
/// WISDM activities, indexed by class id.
const std::vector<std::string>& wisdm_class_names();

/// Time-ordered raw sensor samples, one row per sample.
struct RawSeries {
  double sample_rate_hz = 115.0;
  MatrixXd features;
  std::vector<int> labels;
  int n_classes = 15;
  std::size_t malformed_rows = 0;
  std::string source;

  Eigen::Index samples() const { return features.rows(); }
};

struct LoadOptions {
  double max_malformed_fraction = 0.01;
  double sample_rate_hz = 0.0;  // 0 selects the format default
};

/// Header `timestamp_ms,ax,ay,az,gx,gy,gz,mx,my,mz,label`, labels 0-14.
RawSeries load_own_csv(const std::filesystem::path& path, const LoadOptions& options = {});
RawSeries parse_own_csv(std::istream& in, const std::string& source, const LoadOptions& options = {});

/// WISDM raw text, records `user,activity,timestamp,x,y,z;`. Defaults to 20 Hz.
RawSeries load_wisdm(const std::filesystem::path& path, const LoadOptions& options = {});
RawSeries parse_wisdm(std::istream& in, const std::string& source, const LoadOptions& options = {});

struct Window {
  MatrixXd values;
  int label = 0;
  // Raw sample range [source_begin, source_end) the window was averaged from.
  std::size_t source_begin = 0;
  std::size_t source_end = 0;
};

struct Dataset {
  std::vector<Window> windows;
  int n_classes = 0;
  std::string source;
  int client_id = -1;

  std::size_t size() const { return windows.size(); }
  bool empty() const { return windows.empty(); }
  std::vector<std::size_t> class_counts() const;
  std::vector<int> labels() const;
  std::vector<MatrixXd> inputs() const;
};

struct WindowingConfig {
  int window_rows = 140;
  double frame_seconds = 2.0;
  int stride_rows = 0;  // 0 selects window_rows / 2

  int effective_stride() const { return stride_rows > 0 ? stride_rows : std::max(1, window_rows / 2); }
};

/// Averaged-window format. Each output row is the feature-wise mean of one
/// frame of round(frame_seconds * sample_rate) consecutive samples; a window
/// stacks window_rows consecutive averaged rows. Frames and windows never cross
/// a label change. Runs too short for one window add a message to `warnings`.
Dataset make_windows(const RawSeries& series, const WindowingConfig& config,
                     std::vector<std::string>* warnings = nullptr);

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct Split {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Disjoint, exhaustive split. Split sizes are round(N*train), round(N*val)
/// and the remainder; stratified splits apportion each class by largest
/// remainder so every class stays within one window of its ideal share.
Split split(const Dataset& dataset, const SplitFractions& fractions, std::uint64_t seed, bool stratified = true);

enum class PartitionMode { replicate_reduce, disjoint_reduce };

struct PartitionSpec {
  int clients = 5;
  std::vector<int> reduced_class;  // empty: client k reduces class k mod n_classes
  double reduction = 0.5;
  PartitionMode mode = PartitionMode::replicate_reduce;
  std::uint64_t seed = 1;
  bool allow_any_reduction = false;  // lift the [0.40, 0.50] guard

  int reduced_class_for(int client, int n_classes) const;
  void validate(int n_classes) const;
};

/// Non-IID client datasets: each client drops floor(reduction * count) of its
/// reduced class, chosen uniformly without replacement.
std::vector<Dataset> partition_noniid(const Dataset& dataset, const PartitionSpec& spec);

/// Per-feature standard deviation over every row of every window.
RowVectorXd feature_std(const Dataset& dataset);

/// Jitter then scale; the label is unchanged.
Window augment(const Window& window, std::mt19937_64& rng, const model::AugmentConfig& config,
               const RowVectorXd& feature_std);
MatrixXd augment_values(const MatrixXd& values, std::mt19937_64& rng, const model::AugmentConfig& config,
                        const RowVectorXd& feature_std);

// Window archive: "TFWA" | version u8 | n_classes u16 | count u32 | records,
// each record a parameter-payload tensor named "window" followed by label u16.
void save_archive(const std::filesystem::path& path, const Dataset& dataset);
Dataset load_archive(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_archive(const Dataset& dataset);
Dataset decode_archive(std::span<const std::uint8_t> bytes);

/// `class_id,count` rows for every class.
std::string manifest_csv(const Dataset& dataset);
void write_manifest(const std::filesystem::path& path, const Dataset& dataset);

/// Writes `contents` to a sibling temp file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace transfed::data
