#include "transfed/data.hpp"

#include "transfed/wire.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

namespace transfed::data {

const std::vector<std::string>& own_class_names() {
  static const std::vector<std::string> names = {
      "Standing",     "Sitting",      "Walking",      "Jogging",       "Going Upstairs",
      "Going Downstairs", "Eating",   "Writing",      "Using laptop",  "Washing face",
      "Washing hand", "Swiping",      "Vacuuming",    "Dusting a surface", "Brushing Teeth"};
  return names;
}

const std::vector<std::string>& wisdm_class_names() {
  static const std::vector<std::string> names = {"Walking", "Jogging", "Upstairs",
                                                 "Downstairs", "Sitting", "Standing"};
  return names;
}

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split_fields(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

bool parse_double(std::string_view s, double& out) {
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(out);
}

bool parse_int(std::string_view s, long long& out) {
  if (s.empty()) return false;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

std::ifstream open_input(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw FileNotFound("no such file: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileNotFound("cannot open " + path.string());
  return in;
}

RawSeries finish_series(std::vector<double>&& values, std::vector<int>&& labels, int features, int n_classes,
                        std::size_t malformed, std::size_t total_rows, double rate, const std::string& source,
                        const LoadOptions& options) {
  if (total_rows > 0 &&
      static_cast<double>(malformed) > options.max_malformed_fraction * static_cast<double>(total_rows))
    throw ParseError(source + ": " + std::to_string(malformed) + " of " + std::to_string(total_rows) +
                     " rows malformed, above the " + std::to_string(options.max_malformed_fraction * 100.0) +
                     "% limit");
  RawSeries s;
  s.sample_rate_hz = options.sample_rate_hz > 0.0 ? options.sample_rate_hz : rate;
  s.n_classes = n_classes;
  s.malformed_rows = malformed;
  s.source = source;
  s.labels = std::move(labels);
  s.features = Eigen::Map<const MatrixXd>(values.data(), static_cast<Eigen::Index>(s.labels.size()), features);
  return s;
}

}  // namespace

RawSeries parse_own_csv(std::istream& in, const std::string& source, const LoadOptions& options) {
  static constexpr std::string_view kHeader = "timestamp_ms,ax,ay,az,gx,gy,gz,mx,my,mz,label";
  constexpr int kFeatures = 9;
  constexpr int kClasses = 15;
  std::string line;
  if (!std::getline(in, line)) throw ParseError(source + ": empty file, expected header");
  std::string header;
  for (char c : trim(line))
    if (c != ' ' && c != '\t') header.push_back(c);
  if (header.size() >= 3 && header.compare(0, 3, "\xEF\xBB\xBF") == 0) header.erase(0, 3);
  if (header != kHeader) throw ParseError(source + ": bad header '" + line + "', expected '" + std::string(kHeader) + "'");

  std::vector<double> values;
  std::vector<int> labels;
  std::size_t malformed = 0, total = 0, line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const auto text = trim(line);
    if (text.empty()) continue;
    ++total;
    const auto fields = split_fields(text, ',');
    if (fields.size() != 11) {
      ++malformed;
      continue;
    }
    double row[kFeatures];
    bool ok = true;
    double ts = 0;
    ok = parse_double(fields[0], ts);
    for (int f = 0; f < kFeatures && ok; ++f) ok = parse_double(fields[static_cast<std::size_t>(f + 1)], row[f]);
    long long label = 0;
    if (ok) ok = parse_int(fields[10], label);
    if (!ok) {
      ++malformed;
      continue;
    }
    if (label < 0 || label >= kClasses)
      throw ParseError(source + ": line " + std::to_string(line_no) + " has label " + std::to_string(label) +
                       " outside 0-14");
    values.insert(values.end(), row, row + kFeatures);
    labels.push_back(static_cast<int>(label));
  }
  return finish_series(std::move(values), std::move(labels), kFeatures, kClasses, malformed, total, 115.0, source,
                       options);
}

RawSeries load_own_csv(const std::filesystem::path& path, const LoadOptions& options) {
  auto in = open_input(path);
  return parse_own_csv(in, path.string(), options);
}

RawSeries parse_wisdm(std::istream& in, const std::string& source, const LoadOptions& options) {
  const auto& names = wisdm_class_names();
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<double> values;
  std::vector<int> labels;
  std::size_t malformed = 0, total = 0, line_no = 1;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find_first_of(";\n", start);
    if (end == std::string::npos) end = text.size();
    const std::string_view record = trim(std::string_view(text).substr(start, end - start));
    const std::size_t record_line = line_no;
    if (end < text.size() && text[end] == '\n') ++line_no;
    start = end + 1;
    if (record.empty()) continue;
    ++total;
    auto fields = split_fields(record, ',');
    // Some WISDM lines end with a stray comma before the semicolon.
    if (fields.size() == 7 && fields.back().empty()) fields.pop_back();
    if (fields.size() != 6) {
      ++malformed;
      continue;
    }
    const auto it = std::find(names.begin(), names.end(), fields[1]);
    if (it == names.end())
      throw ParseError(source + ": line " + std::to_string(record_line) + " has unknown activity '" +
                       std::string(fields[1]) + "'");
    double xyz[3];
    double ts = 0;
    bool ok = parse_double(fields[2], ts);
    for (int f = 0; f < 3 && ok; ++f) ok = parse_double(fields[static_cast<std::size_t>(f + 3)], xyz[f]);
    if (!ok) {
      ++malformed;
      continue;
    }
    values.insert(values.end(), xyz, xyz + 3);
    labels.push_back(static_cast<int>(it - names.begin()));
  }
  return finish_series(std::move(values), std::move(labels), 3, static_cast<int>(names.size()), malformed, total,
                       20.0, source, options);
}

RawSeries load_wisdm(const std::filesystem::path& path, const LoadOptions& options) {
  auto in = open_input(path);
  return parse_wisdm(in, path.string(), options);
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(std::max(n_classes, 0)), 0);
  for (const auto& w : windows) ++counts.at(static_cast<std::size_t>(w.label));
  return counts;
}

std::vector<int> Dataset::labels() const {
  std::vector<int> out;
  out.reserve(windows.size());
  for (const auto& w : windows) out.push_back(w.label);
  return out;
}

std::vector<MatrixXd> Dataset::inputs() const {
  std::vector<MatrixXd> out;
  out.reserve(windows.size());
  for (const auto& w : windows) out.push_back(w.values);
  return out;
}

Dataset make_windows(const RawSeries& series, const WindowingConfig& config, std::vector<std::string>* warnings) {
  if (config.window_rows < 1) throw ConfigError("make_windows: window_rows must be positive");
  if (!(series.sample_rate_hz > 0.0) || !(config.frame_seconds > 0.0))
    throw ConfigError("make_windows: sample rate and frame length must be positive");
  const auto frame_len = static_cast<Eigen::Index>(std::llround(config.frame_seconds * series.sample_rate_hz));
  if (frame_len < 1) throw ConfigError("make_windows: frame shorter than one sample");
  const Eigen::Index W = config.window_rows;
  const Eigen::Index stride = config.effective_stride();
  const Eigen::Index F = series.features.cols();

  Dataset out;
  out.n_classes = series.n_classes;
  out.source = series.source;
  const auto n = static_cast<Eigen::Index>(series.labels.size());
  Eigen::Index run_start = 0;
  while (run_start < n) {
    Eigen::Index run_end = run_start;
    const int label = series.labels[static_cast<std::size_t>(run_start)];
    while (run_end < n && series.labels[static_cast<std::size_t>(run_end)] == label) ++run_end;

    const Eigen::Index frames = (run_end - run_start) / frame_len;
    MatrixXd averaged(frames, F);
    for (Eigen::Index f = 0; f < frames; ++f)
      averaged.row(f) = series.features.middleRows(run_start + f * frame_len, frame_len).colwise().mean();
    Eigen::Index emitted = 0;
    for (Eigen::Index s = 0; s + W <= frames; s += stride, ++emitted) {
      Window w;
      w.values = averaged.middleRows(s, W);
      w.label = label;
      w.source_begin = static_cast<std::size_t>(run_start + s * frame_len);
      w.source_end = static_cast<std::size_t>(run_start + (s + W) * frame_len);
      out.windows.push_back(std::move(w));
    }
    if (emitted == 0 && warnings)
      warnings->push_back("label " + std::to_string(label) + " run of " + std::to_string(run_end - run_start) +
                          " samples at " + std::to_string(run_start) + " is shorter than one window (" +
                          std::to_string(W * frame_len) + " samples)");
    run_start = run_end;
  }
  return out;
}

namespace {

Dataset subset(const Dataset& d, std::vector<std::size_t> idx) {
  std::sort(idx.begin(), idx.end());
  Dataset out;
  out.n_classes = d.n_classes;
  out.source = d.source;
  out.client_id = d.client_id;
  out.windows.reserve(idx.size());
  for (auto i : idx) out.windows.push_back(d.windows[i]);
  return out;
}

// Apportions `total` units over `ideal` shares by largest remainder, never
// exceeding `capacity`.
std::vector<std::size_t> apportion(const std::vector<double>& ideal, const std::vector<std::size_t>& capacity,
                                   std::size_t total) {
  std::vector<std::size_t> out(ideal.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < ideal.size(); ++i) {
    out[i] = std::min(capacity[i], static_cast<std::size_t>(std::floor(ideal[i] + 1e-9)));
    assigned += out[i];
  }
  std::vector<std::size_t> order(ideal.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return ideal[a] - std::floor(ideal[a] + 1e-9) > ideal[b] - std::floor(ideal[b] + 1e-9);
  });
  while (assigned < total) {
    bool progressed = false;
    for (auto i : order) {
      if (assigned == total) break;
      if (out[i] < capacity[i] && static_cast<double>(out[i]) < ideal[i] + 1.0) {
        ++out[i];
        ++assigned;
        progressed = true;
      }
    }
    if (!progressed) break;
  }
  return out;
}

}  // namespace

Split split(const Dataset& dataset, const SplitFractions& fr, std::uint64_t seed, bool stratified) {
  if (fr.train < 0 || fr.val < 0 || fr.test < 0 || std::abs(fr.train + fr.val + fr.test - 1.0) > 1e-9)
    throw ConfigError("split: fractions must be non-negative and sum to 1");
  const std::size_t N = dataset.size();
  const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(N) * fr.train));
  const auto n_val = std::min(N - n_train, static_cast<std::size_t>(std::llround(static_cast<double>(N) * fr.val)));
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> train, val, test;

  if (!stratified) {
    std::vector<std::size_t> idx(N);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    val.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train),
               idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
  } else {
    const std::size_t C = static_cast<std::size_t>(dataset.n_classes);
    std::vector<std::vector<std::size_t>> by_class(C);
    for (std::size_t i = 0; i < N; ++i) by_class.at(static_cast<std::size_t>(dataset.windows[i].label)).push_back(i);
    std::vector<double> ideal_train(C), ideal_val(C);
    std::vector<std::size_t> cap(C);
    for (std::size_t c = 0; c < C; ++c) {
      if (by_class[c].empty())
        throw ConfigError("split: class " + std::to_string(c) + " has no windows, cannot stratify");
      cap[c] = by_class[c].size();
      ideal_train[c] = static_cast<double>(cap[c]) * fr.train;
      ideal_val[c] = static_cast<double>(cap[c]) * fr.val;
    }
    const auto q_train = apportion(ideal_train, cap, n_train);
    std::vector<std::size_t> rest(C);
    for (std::size_t c = 0; c < C; ++c) rest[c] = cap[c] - q_train[c];
    const auto q_val = apportion(ideal_val, rest, n_val);
    for (std::size_t c = 0; c < C; ++c) {
      auto& idx = by_class[c];
      std::shuffle(idx.begin(), idx.end(), rng);
      train.insert(train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(q_train[c]));
      val.insert(val.end(), idx.begin() + static_cast<std::ptrdiff_t>(q_train[c]),
                 idx.begin() + static_cast<std::ptrdiff_t>(q_train[c] + q_val[c]));
      test.insert(test.end(), idx.begin() + static_cast<std::ptrdiff_t>(q_train[c] + q_val[c]), idx.end());
    }
  }
  return {subset(dataset, std::move(train)), subset(dataset, std::move(val)), subset(dataset, std::move(test))};
}

int PartitionSpec::reduced_class_for(int client, int n_classes) const {
  if (reduced_class.empty()) return client % n_classes;
  return reduced_class.at(static_cast<std::size_t>(client));
}

void PartitionSpec::validate(int n_classes) const {
  if (clients < 1) throw ConfigError("partition: clients must be >= 1");
  if (!allow_any_reduction && (reduction < 0.40 - 1e-12 || reduction > 0.50 + 1e-12))
    throw ConfigError("partition: reduction " + std::to_string(reduction) + " outside [0.40, 0.50]");
  if (reduction < 0.0 || reduction > 1.0) throw ConfigError("partition: reduction must lie in [0, 1]");
  if (!reduced_class.empty() && reduced_class.size() != static_cast<std::size_t>(clients))
    throw ConfigError("partition: reduced_class needs one entry per client");
  for (int k = 0; k < clients; ++k) {
    const int c = reduced_class_for(k, n_classes);
    if (c < 0 || c >= n_classes)
      throw ConfigError("partition: client " + std::to_string(k) + " reduces invalid class " + std::to_string(c));
  }
}

std::vector<Dataset> partition_noniid(const Dataset& dataset, const PartitionSpec& spec) {
  spec.validate(dataset.n_classes);
  const std::size_t K = static_cast<std::size_t>(spec.clients);
  std::vector<std::vector<std::size_t>> members(K);
  if (spec.mode == PartitionMode::replicate_reduce) {
    for (auto& m : members) {
      m.resize(dataset.size());
      std::iota(m.begin(), m.end(), 0);
    }
  } else {
    std::vector<std::size_t> seen(static_cast<std::size_t>(dataset.n_classes), 0);
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      auto& s = seen[static_cast<std::size_t>(dataset.windows[i].label)];
      members[s % K].push_back(i);
      ++s;
    }
  }

  std::vector<Dataset> out;
  for (std::size_t k = 0; k < K; ++k) {
    const int reduced = spec.reduced_class_for(static_cast<int>(k), dataset.n_classes);
    std::vector<std::size_t> of_class, keep;
    for (auto i : members[k]) (dataset.windows[i].label == reduced ? of_class : keep).push_back(i);
    if (of_class.empty())
      throw ConfigError("partition: client " + std::to_string(k) + " holds no windows of reduced class " +
                        std::to_string(reduced));
    const auto drop = static_cast<std::size_t>(std::floor(spec.reduction * static_cast<double>(of_class.size())));
    std::mt19937_64 rng(spec.seed + k);
    std::shuffle(of_class.begin(), of_class.end(), rng);
    keep.insert(keep.end(), of_class.begin() + static_cast<std::ptrdiff_t>(drop), of_class.end());
    Dataset d = subset(dataset, std::move(keep));
    d.client_id = static_cast<int>(k);
    out.push_back(std::move(d));
  }
  return out;
}

RowVectorXd feature_std(const Dataset& dataset) {
  if (dataset.empty()) return {};
  const Eigen::Index F = dataset.windows.front().values.cols();
  RowVectorXd sum = RowVectorXd::Zero(F), sum_sq = RowVectorXd::Zero(F);
  double rows = 0;
  for (const auto& w : dataset.windows) {
    sum += w.values.colwise().sum();
    sum_sq += w.values.cwiseAbs2().colwise().sum();
    rows += static_cast<double>(w.values.rows());
  }
  const RowVectorXd mean = sum / rows;
  return ((sum_sq / rows).array() - mean.array().square()).max(0.0).sqrt().matrix();
}

MatrixXd augment_values(const MatrixXd& values, std::mt19937_64& rng, const model::AugmentConfig& config,
                        const RowVectorXd& feature_std) {
  MatrixXd out = values;
  if (config.jitter > 0.0) {
    if (feature_std.size() != values.cols())
      throw DimensionError("augment: feature_std " + shape_string(feature_std) + " does not match window " +
                           shape_string(values));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Eigen::Index i = 0; i < out.rows(); ++i)
      for (Eigen::Index j = 0; j < out.cols(); ++j) out(i, j) += config.jitter * feature_std(j) * normal(rng);
  }
  if (config.scale_range > 0.0) {
    std::uniform_real_distribution<double> scale(1.0 - config.scale_range, 1.0 + config.scale_range);
    out *= scale(rng);
  }
  return out;
}

Window augment(const Window& window, std::mt19937_64& rng, const model::AugmentConfig& config,
               const RowVectorXd& feature_std) {
  Window out = window;
  out.values = augment_values(window.values, rng, config, feature_std);
  return out;
}

namespace {
constexpr std::array<std::uint8_t, 4> kArchiveMagic = {'T', 'F', 'W', 'A'};
}

std::vector<std::uint8_t> encode_archive(const Dataset& dataset) {
  wire::ByteWriter w;
  w.raw(kArchiveMagic);
  w.u8(1);
  w.u16(static_cast<std::uint16_t>(dataset.n_classes));
  w.u32(static_cast<std::uint32_t>(dataset.size()));
  for (const auto& win : dataset.windows) {
    wire::write_tensor(w, NamedTensor{"window", 2, win.values});
    w.u16(static_cast<std::uint16_t>(win.label));
  }
  return w.take();
}

Dataset decode_archive(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || !std::equal(kArchiveMagic.begin(), kArchiveMagic.end(), bytes.begin()))
    throw FormatError("not a window archive (bad magic)");
  wire::ByteReader r(bytes.subspan(4));
  if (const auto v = r.u8(); v != 1) throw FormatError("unsupported window archive version " + std::to_string(v));
  Dataset d;
  d.n_classes = r.u16();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t = wire::read_tensor(r);
    if (t.rank != 2) throw FormatError("window record " + std::to_string(i) + " is not a matrix");
    Window w;
    w.values = std::move(t.value);
    w.label = r.u16();
    if (w.label >= d.n_classes)
      throw FormatError("window record " + std::to_string(i) + " has label " + std::to_string(w.label));
    if (!d.windows.empty() && (w.values.rows() != d.windows.front().values.rows() ||
                               w.values.cols() != d.windows.front().values.cols()))
      throw FormatError("window record " + std::to_string(i) + " changes window shape");
    d.windows.push_back(std::move(w));
  }
  if (!r.done()) throw FormatError("trailing bytes after window archive");
  return d;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw Error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_archive(const std::filesystem::path& path, const Dataset& dataset) {
  const auto bytes = encode_archive(dataset);
  write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

Dataset load_archive(const std::filesystem::path& path) {
  auto in = open_input(path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Dataset d = decode_archive(bytes);
  d.source = path.string();
  return d;
}

std::string manifest_csv(const Dataset& dataset) {
  std::ostringstream out;
  out << "class_id,count\n";
  const auto counts = dataset.class_counts();
  for (std::size_t c = 0; c < counts.size(); ++c) out << c << ',' << counts[c] << '\n';
  return out.str();
}

void write_manifest(const std::filesystem::path& path, const Dataset& dataset) {
  write_file_atomic(path, manifest_csv(dataset));
}

}  // namespace transfed::data
