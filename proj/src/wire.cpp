#include "transfed/wire.hpp"

#include <algorithm>
#include <bit>
#include <cstring>

namespace transfed::wire {

const char* to_string(MessageType type) {
  switch (type) {
    case MessageType::hello: return "HELLO";
    case MessageType::config: return "CONFIG";
    case MessageType::global_params: return "GLOBAL_PARAMS";
    case MessageType::client_update: return "CLIENT_UPDATE";
    case MessageType::round_done: return "ROUND_DONE";
    case MessageType::shutdown: return "SHUTDOWN";
    case MessageType::error: return "ERROR";
  }
  return "UNKNOWN";
}

void ByteWriter::u16(std::uint16_t v) {
  for (int i = 0; i < 2; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

std::span<const std::uint8_t> ByteReader::take(std::size_t n) {
  if (n > remaining())
    throw ProtocolError("truncated buffer: need " + std::to_string(n) + " bytes at offset " +
                        std::to_string(pos_) + ", have " + std::to_string(remaining()));
  auto s = bytes_.subspan(pos_, n);
  pos_ += n;
  return s;
}

std::uint8_t ByteReader::u8() { return take(1)[0]; }

std::uint16_t ByteReader::u16() {
  auto b = take(2);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t ByteReader::u32() {
  auto b = take(4);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[static_cast<std::size_t>(i)];
  return v;
}

std::uint64_t ByteReader::u64() {
  auto b = take(8);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[static_cast<std::size_t>(i)];
  return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }

std::string ByteReader::str(std::size_t n) {
  auto b = take(n);
  return std::string(b.begin(), b.end());
}

std::vector<std::uint8_t> encode(const Message& msg) {
  if (msg.payload.size() > kMaxPayload)
    throw ProtocolError("payload of " + std::to_string(msg.payload.size()) + " bytes exceeds 64 MiB");
  ByteWriter w;
  w.raw(kMagic);
  w.u8(kVersion);
  w.u8(static_cast<std::uint8_t>(msg.type));
  w.u32(msg.round);
  w.u32(msg.client_id);
  w.u32(static_cast<std::uint32_t>(msg.payload.size()));
  w.raw(msg.payload);
  return w.take();
}

FrameHeader decode_header(std::span<const std::uint8_t> header) {
  if (header.size() < kHeaderSize)
    throw ProtocolError("truncated frame header: " + std::to_string(header.size()) + " bytes");
  if (!std::equal(kMagic.begin(), kMagic.end(), header.begin())) throw VersionError("bad frame magic");
  ByteReader r(header.subspan(4, kHeaderSize - 4));
  const std::uint8_t version = r.u8();
  if (version != kVersion) throw VersionError("unsupported frame version " + std::to_string(version));
  const std::uint8_t type = r.u8();
  if (type < 1 || type > 7) throw ProtocolError("unknown message type " + std::to_string(type));
  FrameHeader h{static_cast<MessageType>(type), r.u32(), r.u32(), r.u32()};
  if (h.payload_len > kMaxPayload)
    throw ProtocolError("frame advertises " + std::to_string(h.payload_len) + " payload bytes, limit is 64 MiB");
  return h;
}

Message decode(std::span<const std::uint8_t> bytes) {
  const FrameHeader h = decode_header(bytes);
  const std::size_t expected = kHeaderSize + h.payload_len;
  if (bytes.size() < expected)
    throw ProtocolError("truncated frame: " + std::to_string(bytes.size()) + " of " + std::to_string(expected) +
                        " bytes");
  if (bytes.size() > expected)
    throw ProtocolError("trailing bytes after frame: " + std::to_string(bytes.size() - expected));
  Message m;
  m.type = h.type;
  m.round = h.round;
  m.client_id = h.client_id;
  m.payload.assign(bytes.begin() + kHeaderSize, bytes.end());
  return m;
}

void write_tensor(ByteWriter& out, const NamedTensor& tensor) {
  if (tensor.name.size() > 0xFFFF) throw ProtocolError("tensor name too long");
  out.u16(static_cast<std::uint16_t>(tensor.name.size()));
  out.str(tensor.name);
  const auto dims = tensor.dims();
  out.u8(static_cast<std::uint8_t>(dims.size()));
  for (auto d : dims) out.u32(d);
  const auto* data = tensor.value.data();  // row-major
  for (Eigen::Index i = 0; i < tensor.value.size(); ++i) out.f32(static_cast<float>(data[i]));
}

NamedTensor read_tensor(ByteReader& in) {
  NamedTensor t;
  t.name = in.str(in.u16());
  t.rank = in.u8();
  if (t.rank != 1 && t.rank != 2)
    throw ProtocolError("tensor '" + t.name + "' has unsupported rank " + std::to_string(t.rank));
  std::uint64_t rows = 1;
  std::uint64_t cols = in.u32();
  if (t.rank == 2) {
    rows = cols;
    cols = in.u32();
  }
  if (rows == 0 || cols == 0) throw ProtocolError("tensor '" + t.name + "' has a zero dimension");
  if (rows * cols * 4 > in.remaining())
    throw ProtocolError("truncated tensor '" + t.name + "': needs " + std::to_string(rows * cols * 4) +
                        " bytes, have " + std::to_string(in.remaining()));
  t.value.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  auto* data = t.value.data();
  for (Eigen::Index i = 0; i < t.value.size(); ++i) data[i] = static_cast<double>(in.f32());
  return t;
}

std::vector<std::uint8_t> encode_params(const ParameterSet& params) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& t : params) write_tensor(w, t);
  return w.take();
}

ParameterSet read_params(ByteReader& in) {
  const std::uint32_t count = in.u32();
  // Smallest tensor encoding is 2 + 1 + 4 + 4 bytes.
  if (static_cast<std::uint64_t>(count) * 11 > in.remaining())
    throw ProtocolError("tensor count " + std::to_string(count) + " exceeds payload size");
  ParameterSet out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t = read_tensor(in);
    if (out.contains(t.name)) throw ProtocolError("duplicate tensor name '" + t.name + "'");
    out.add(std::move(t.name), std::move(t.value), t.rank);
  }
  return out;
}

ParameterSet decode_params(std::span<const std::uint8_t> payload) {
  ByteReader r(payload);
  ParameterSet p = read_params(r);
  if (!r.done()) throw ProtocolError("trailing bytes after parameter payload");
  return p;
}

std::vector<std::uint8_t> encode_update(const ParameterSet& params, std::uint64_t n_k) {
  ByteWriter w;
  w.raw(encode_params(params));
  w.u64(n_k);
  return w.take();
}

UpdatePayload decode_update(std::span<const std::uint8_t> payload) {
  ByteReader r(payload);
  UpdatePayload u;
  u.params = read_params(r);
  u.n_k = r.u64();
  if (!r.done()) throw ProtocolError("trailing bytes after update payload");
  return u;
}

std::vector<std::uint8_t> encode_key_values(const KeyValues& kv) {
  ByteWriter w;
  for (const auto& [k, v] : kv) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw ProtocolError("config entry '" + k + "' contains a reserved character");
    w.str(k);
    w.u8('=');
    w.str(v);
    w.u8('\n');
  }
  return w.take();
}

KeyValues decode_key_values(std::span<const std::uint8_t> payload) {
  KeyValues kv;
  std::string text(payload.begin(), payload.end());
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(start, end - start);
    start = end + 1;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0) throw ProtocolError("malformed config line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

}  // namespace transfed::wire
