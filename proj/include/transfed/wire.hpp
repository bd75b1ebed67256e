#pragma once

// Bit-exact frame and payload codecs shared by the network protocol, parameter
// checkpoints and window archives. All integers are little-endian.
//
//   frame   : "TFD1" | version u8 (=1) | type u8 | round u32 | client_id u32
//             | payload_len u32 | payload
//   params  : tensor_count u32, then per tensor:
//             name_len u16 | UTF-8 name | rank u8 | dims u32 x rank
//             | values f32 x prod(dims)
//   update  : params payload | n_k u64
//   config  : UTF-8 "key=value" lines

#include "transfed/tensor.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace transfed::wire {

struct ProtocolError : FormatError {
  using FormatError::FormatError;
};

struct VersionError : ProtocolError {
  using ProtocolError::ProtocolError;
};

enum class MessageType : std::uint8_t {
  hello = 1,
  config = 2,
  global_params = 3,
  client_update = 4,
  round_done = 5,
  shutdown = 6,
  error = 7,
};

const char* to_string(MessageType type);

inline constexpr std::array<std::uint8_t, 4> kMagic = {'T', 'F', 'D', '1'};
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::size_t kHeaderSize = 18;
inline constexpr std::uint32_t kMaxPayload = 64u * 1024u * 1024u;

struct Message {
  MessageType type = MessageType::hello;
  std::uint32_t round = 0;
  std::uint32_t client_id = 0;
  std::vector<std::uint8_t> payload;

  friend bool operator==(const Message&, const Message&) = default;
};

struct FrameHeader {
  MessageType type;
  std::uint32_t round;
  std::uint32_t client_id;
  std::uint32_t payload_len;
};

std::vector<std::uint8_t> encode(const Message& msg);

/// Decodes exactly one frame occupying all of `bytes`.
Message decode(std::span<const std::uint8_t> bytes);

/// Validates magic, version, type and payload bound of an 18-byte header.
FrameHeader decode_header(std::span<const std::uint8_t> header);

// ---------------------------------------------------------------------------
// Little-endian primitives

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void raw(std::span<const std::uint8_t> data) { bytes_.insert(bytes_.end(), data.begin(), data.end()); }
  void str(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

  std::vector<std::uint8_t>& bytes() { return bytes_; }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  std::string str(std::size_t n);

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> take(std::size_t n);

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Payloads

void write_tensor(ByteWriter& out, const NamedTensor& tensor);
NamedTensor read_tensor(ByteReader& in);

std::vector<std::uint8_t> encode_params(const ParameterSet& params);
ParameterSet read_params(ByteReader& in);
/// Whole payload must be consumed.
ParameterSet decode_params(std::span<const std::uint8_t> payload);

struct UpdatePayload {
  ParameterSet params;
  std::uint64_t n_k = 0;
};

std::vector<std::uint8_t> encode_update(const ParameterSet& params, std::uint64_t n_k);
UpdatePayload decode_update(std::span<const std::uint8_t> payload);

using KeyValues = std::map<std::string, std::string>;

std::vector<std::uint8_t> encode_key_values(const KeyValues& kv);
KeyValues decode_key_values(std::span<const std::uint8_t> payload);

}  // namespace transfed::wire
