#pragma once

#include "transfed/data.hpp"
#include "transfed/fedcore.hpp"
#include "transfed/model.hpp"
#include "transfed/wire.hpp"

#include <cstdint>
#include <filesystem>
#include <string>

namespace transfed {

/// Every tunable of a run, addressable by a flat key. Files use one
/// `key = value` per line with `#` comments.
///
/// Keys: W F d_model heads ffn_dim layers n_classes positional_encoding pooling
/// norm_eps augment jitter scale_range | rounds epochs batch clients lr beta1
/// beta2 epsilon weight_decay val_fraction wire_precision parallel |
/// reduction mode reduced_classes force | frame_seconds stride sample_rate
/// format max_malformed | train_frac val_frac test_frac | host port
/// handshake_timeout io_timeout retries retry_delay | seed
struct RunConfig {
  model::ModelConfig model;
  fedcore::RoundConfig rounds;
  data::PartitionSpec partition;
  data::WindowingConfig windowing;
  data::SplitFractions split;
  data::LoadOptions load;
  std::string format = "own";
  std::string host = "127.0.0.1";
  std::uint16_t port = 7878;
  double handshake_timeout_s = 60.0;
  double io_timeout_s = 0.0;  // 0: no per-message limit
  int retries = 5;
  double retry_delay_s = 2.0;
  std::uint64_t seed = 1;

  RunConfig();

  /// Throws ConfigError for unknown keys or unparseable values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;

  /// Fully resolved key set, in a stable order.
  wire::KeyValues to_key_values() const;
  std::string to_text() const;

  /// Keys sent to clients in the CONFIG message.
  wire::KeyValues network_key_values() const;

  static RunConfig from_key_values(const wire::KeyValues& kv);
  static RunConfig parse_text(const std::string& text, const std::string& source = "config");
  static RunConfig from_file(const std::filesystem::path& path);

  void validate() const;
};

/// 7878, or TRANSFED_PORT when set.
std::uint16_t default_port();

}  // namespace transfed
