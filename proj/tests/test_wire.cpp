#include "support.hpp"
#include "transfed/wire.hpp"

#include <doctest.h>

#include <random>

using namespace transfed;
using namespace transfed::wire;

namespace {

Message random_message(std::mt19937_64& rng) {
  Message m;
  m.type = static_cast<MessageType>(1 + rng() % 7);
  m.round = static_cast<std::uint32_t>(rng());
  m.client_id = static_cast<std::uint32_t>(rng());
  m.payload.resize(rng() % 300);
  for (auto& b : m.payload) b = static_cast<std::uint8_t>(rng());
  return m;
}

void put_u32(std::vector<std::uint8_t>& b, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[at + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(v >> (8 * i));
}

}  // namespace

TEST_CASE("frame layout is bit-exact") {
  Message m{MessageType::hello, 0x01020304, 3, {0xAA, 0xBB}};
  const auto b = encode(m);
  const std::vector<std::uint8_t> expected{'T', 'F', 'D', '1', 1, 1, 4, 3, 2, 1, 3, 0, 0, 0, 2, 0, 0, 0, 0xAA, 0xBB};
  CHECK(b == expected);
  CHECK(decode(b).client_id == 3);
}

TEST_CASE("random messages round trip") {
  std::mt19937_64 rng(77);
  for (int i = 0; i < 1000; ++i) {
    const auto m = random_message(rng);
    const auto bytes = encode(m);
    CHECK(bytes.size() == kHeaderSize + m.payload.size());
    CHECK(decode(bytes) == m);
    CHECK(encode(decode(bytes)) == bytes);
  }
}

TEST_CASE("malformed frames are rejected") {
  std::mt19937_64 rng(5);
  const auto good = encode(random_message(rng));
  for (std::size_t cut = 0; cut < good.size(); ++cut) {
    const std::vector<std::uint8_t> part(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut));
    CHECK_THROWS_AS(decode(part), ProtocolError);
  }
  auto trailing = good;
  trailing.push_back(0);
  CHECK_THROWS_AS(decode(trailing), ProtocolError);

  auto magic = good;
  magic[0] = 'X';
  CHECK_THROWS_AS(decode(magic), VersionError);
  auto version = good;
  version[4] = 2;
  CHECK_THROWS_AS(decode(version), VersionError);
  auto type = good;
  type[5] = 0;
  CHECK_THROWS_AS(decode(type), ProtocolError);
  type[5] = 8;
  CHECK_THROWS_AS(decode(type), ProtocolError);

  auto oversize = good;
  put_u32(oversize, 14, kMaxPayload + 1);
  CHECK_THROWS_AS(decode_header(std::span(oversize).first(kHeaderSize)), ProtocolError);
  CHECK_THROWS_AS(decode(oversize), ProtocolError);

  Message huge;
  huge.payload.resize(kMaxPayload + 1);
  CHECK_THROWS_AS(encode(huge), ProtocolError);
}

TEST_CASE("parameter payloads") {
  ParameterSet p;
  p.add("layer/kernel", MatrixXd::Constant(2, 3, 0.1));
  p.add("layer/bias", MatrixXd::Constant(1, 3, -2.5), 1);
  const auto bytes = encode_params(p);
  // count + (2 + 12 + 1 + 8 + 24) + (2 + 10 + 1 + 4 + 12)
  CHECK(bytes.size() == 4 + 47 + 29);
  const auto back = decode_params(bytes);
  CHECK(back.same_layout(p));
  CHECK(back[1].rank == 1);
  CHECK(back[0].value == p[0].value.cast<float>().cast<double>());
  CHECK(round_to_f32(p) == back);

  const auto update = encode_update(p, 1234567890123ull);
  const auto u = decode_update(update);
  CHECK(u.n_k == 1234567890123ull);
  CHECK(u.params == back);

  auto cut = bytes;
  cut.pop_back();
  CHECK_THROWS_AS(decode_params(cut), ProtocolError);
  auto extra = bytes;
  extra.push_back(0);
  CHECK_THROWS_AS(decode_params(extra), ProtocolError);
}

TEST_CASE("key-value payloads") {
  const KeyValues kv{{"W", "140"}, {"lr", "0.01"}, {"seed", "7"}};
  const auto bytes = encode_key_values(kv);
  CHECK(std::string(bytes.begin(), bytes.end()) == "W=140\nlr=0.01\nseed=7\n");
  CHECK(decode_key_values(bytes) == kv);
  const std::string bad = "novalue\n";
  CHECK_THROWS_AS(decode_key_values(std::vector<std::uint8_t>(bad.begin(), bad.end())), ProtocolError);
}
