#include "transfed/run_config.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace transfed {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  return s.substr(first, s.find_last_not_of(" \t\r\n") - first + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("config key '" + key + "': cannot parse '" + value + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true" || value == "on" || value == "yes") return true;
  if (value == "0" || value == "false" || value == "off" || value == "no") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + value + "'");
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string flag(bool b) { return b ? "true" : "false"; }

}  // namespace

std::uint16_t default_port() {
  if (const char* env = std::getenv("TRANSFED_PORT"); env && *env) {
    const auto p = parse_number<unsigned>("TRANSFED_PORT", env);
    if (p == 0 || p > 65535) throw ConfigError("TRANSFED_PORT must be in 1-65535");
    return static_cast<std::uint16_t>(p);
  }
  return 7878;
}

RunConfig::RunConfig() : port(default_port()) {
  rounds.clients = partition.clients;
  windowing.window_rows = model.window_rows;
}

void RunConfig::set(const std::string& raw_key, const std::string& raw_value) {
  const std::string key = trim(raw_key);
  const std::string value = trim(raw_value);
  auto i = [&] { return parse_number<int>(key, value); };
  auto d = [&] { return parse_number<double>(key, value); };
  auto b = [&] { return parse_bool(key, value); };

  if (key == "W") model.window_rows = windowing.window_rows = i();
  else if (key == "F") model.features = i();
  else if (key == "d_model") model.d_model = i();
  else if (key == "heads") model.heads = i();
  else if (key == "ffn_dim") model.ffn_dim = i();
  else if (key == "layers") model.layers = i();
  else if (key == "n_classes") model.n_classes = i();
  else if (key == "positional_encoding") model.positional_encoding = b();
  else if (key == "pooling") model.pooling = b();
  else if (key == "norm_eps") model.norm_eps = d();
  else if (key == "augment") model.augmentation.enabled = b();
  else if (key == "jitter") model.augmentation.jitter = d();
  else if (key == "scale_range") model.augmentation.scale_range = d();
  else if (key == "rounds") rounds.rounds = i();
  else if (key == "epochs") rounds.epochs = i();
  else if (key == "batch") rounds.batch_size = i();
  else if (key == "clients") rounds.clients = partition.clients = i();
  else if (key == "lr") rounds.adam.learning_rate = d();
  else if (key == "beta1") rounds.adam.beta1 = d();
  else if (key == "beta2") rounds.adam.beta2 = d();
  else if (key == "epsilon") rounds.adam.epsilon = d();
  else if (key == "weight_decay") rounds.adam.weight_decay = d();
  else if (key == "val_fraction") rounds.val_fraction = d();
  else if (key == "wire_precision") rounds.wire_precision = b();
  else if (key == "parallel") rounds.parallel = b();
  else if (key == "reduction") partition.reduction = d();
  else if (key == "force") partition.allow_any_reduction = b();
  else if (key == "mode") {
    if (value == "replicate_reduce") partition.mode = data::PartitionMode::replicate_reduce;
    else if (value == "disjoint_reduce") partition.mode = data::PartitionMode::disjoint_reduce;
    else throw ConfigError("config key 'mode': expected replicate_reduce or disjoint_reduce, got '" + value + "'");
  } else if (key == "reduced_classes") {
    partition.reduced_class.clear();
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!trim(item).empty()) partition.reduced_class.push_back(parse_number<int>(key, trim(item)));
  } else if (key == "frame_seconds") windowing.frame_seconds = d();
  else if (key == "stride") windowing.stride_rows = i();
  else if (key == "sample_rate") load.sample_rate_hz = d();
  else if (key == "max_malformed") load.max_malformed_fraction = d();
  else if (key == "format") {
    if (value != "own" && value != "wisdm") throw ConfigError("config key 'format': expected own or wisdm");
    format = value;
  } else if (key == "train_frac") split.train = d();
  else if (key == "val_frac") split.val = d();
  else if (key == "test_frac") split.test = d();
  else if (key == "host") host = value;
  else if (key == "port") {
    const int p = i();
    if (p < 0 || p > 65535) throw ConfigError("config key 'port' out of range");
    port = static_cast<std::uint16_t>(p);
  } else if (key == "handshake_timeout") handshake_timeout_s = d();
  else if (key == "io_timeout") io_timeout_s = d();
  else if (key == "retries") retries = i();
  else if (key == "retry_delay") retry_delay_s = d();
  else if (key == "seed") {
    seed = parse_number<std::uint64_t>(key, value);
    model.seed = rounds.seed = partition.seed = seed;
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

wire::KeyValues RunConfig::to_key_values() const {
  wire::KeyValues kv = network_key_values();
  kv["reduction"] = num(partition.reduction);
  kv["mode"] = partition.mode == data::PartitionMode::replicate_reduce ? "replicate_reduce" : "disjoint_reduce";
  std::string reduced;
  for (std::size_t k = 0; k < partition.reduced_class.size(); ++k)
    reduced += (k ? "," : "") + std::to_string(partition.reduced_class[k]);
  kv["reduced_classes"] = reduced;
  kv["force"] = flag(partition.allow_any_reduction);
  kv["frame_seconds"] = num(windowing.frame_seconds);
  kv["stride"] = std::to_string(windowing.stride_rows);
  kv["sample_rate"] = num(load.sample_rate_hz);
  kv["max_malformed"] = num(load.max_malformed_fraction);
  kv["format"] = format;
  kv["train_frac"] = num(split.train);
  kv["val_frac"] = num(split.val);
  kv["test_frac"] = num(split.test);
  kv["host"] = host;
  kv["port"] = std::to_string(port);
  kv["handshake_timeout"] = num(handshake_timeout_s);
  kv["io_timeout"] = num(io_timeout_s);
  kv["retries"] = std::to_string(retries);
  kv["retry_delay"] = num(retry_delay_s);
  kv["parallel"] = flag(rounds.parallel);
  return kv;
}

wire::KeyValues RunConfig::network_key_values() const {
  wire::KeyValues kv;
  kv["W"] = std::to_string(model.window_rows);
  kv["F"] = std::to_string(model.features);
  kv["d_model"] = std::to_string(model.d_model);
  kv["heads"] = std::to_string(model.heads);
  kv["ffn_dim"] = std::to_string(model.ffn_dim);
  kv["layers"] = std::to_string(model.layers);
  kv["n_classes"] = std::to_string(model.n_classes);
  kv["positional_encoding"] = flag(model.positional_encoding);
  kv["pooling"] = flag(model.pooling);
  kv["norm_eps"] = num(model.norm_eps);
  kv["augment"] = flag(model.augmentation.enabled);
  kv["jitter"] = num(model.augmentation.jitter);
  kv["scale_range"] = num(model.augmentation.scale_range);
  kv["rounds"] = std::to_string(rounds.rounds);
  kv["epochs"] = std::to_string(rounds.epochs);
  kv["batch"] = std::to_string(rounds.batch_size);
  kv["clients"] = std::to_string(rounds.clients);
  kv["lr"] = num(rounds.adam.learning_rate);
  kv["beta1"] = num(rounds.adam.beta1);
  kv["beta2"] = num(rounds.adam.beta2);
  kv["epsilon"] = num(rounds.adam.epsilon);
  kv["weight_decay"] = num(rounds.adam.weight_decay);
  kv["val_fraction"] = num(rounds.val_fraction);
  kv["wire_precision"] = flag(rounds.wire_precision);
  kv["seed"] = std::to_string(seed);
  return kv;
}

std::string RunConfig::get(const std::string& key) const {
  const auto kv = to_key_values();
  const auto it = kv.find(key);
  if (it == kv.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

std::string RunConfig::to_text() const {
  std::ostringstream out;
  out << "# resolved run configuration\n";
  for (const auto& [k, v] : to_key_values()) out << k << " = " << v << '\n';
  return out.str();
}

RunConfig RunConfig::from_key_values(const wire::KeyValues& kv) {
  RunConfig c;
  // Seed first so per-section seeds pick it up regardless of key order.
  if (auto it = kv.find("seed"); it != kv.end()) c.set("seed", it->second);
  for (const auto& [k, v] : kv)
    if (k != "seed") c.set(k, v);
  return c;
}

RunConfig RunConfig::parse_text(const std::string& text, const std::string& source) {
  wire::KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  try {
    return from_key_values(kv);
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw data::FileNotFound("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_text(ss.str(), path.string());
}

void RunConfig::validate() const {
  model.validate();
  rounds.validate();
  partition.validate(model.n_classes);
  if (std::abs(split.train + split.val + split.test - 1.0) > 1e-9)
    throw ConfigError("split fractions must sum to 1");
  if (windowing.window_rows != model.window_rows) throw ConfigError("windowing and model disagree on W");
}

}  // namespace transfed
