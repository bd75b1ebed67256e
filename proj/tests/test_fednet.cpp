#include "support.hpp"
#include "transfed/fednet.hpp"

#include <doctest.h>

#include <future>
#include <thread>

using namespace transfed;
using namespace transfed::fednet;
using namespace std::chrono_literals;

namespace {

RunConfig small_run(int clients, int rounds) {
  RunConfig c;
  c.set("W", "6");
  c.set("F", "3");
  c.set("d_model", "4");
  c.set("heads", "2");
  c.set("layers", "1");
  c.set("n_classes", "3");
  c.set("clients", std::to_string(clients));
  c.set("rounds", std::to_string(rounds));
  c.set("epochs", "2");
  c.set("batch", "5");
  c.set("seed", "13");
  c.set("wire_precision", "true");
  c.port = 0;
  c.handshake_timeout_s = 20;
  return c;
}

std::vector<data::Dataset> client_data(int clients) {
  const auto ds = testing::gaussian_signatures(3, 8, 6, 3, 0.3, 77);
  data::PartitionSpec spec;
  spec.clients = clients;
  return data::partition_noniid(ds, spec);
}

ClientOptions options_for(const Server& s, int id, transport::TlsConfig tls = {}) {
  ClientOptions o;
  o.port = s.port();
  o.client_id = id;
  o.tls = tls;
  o.retries = 3;
  o.retry_delay = 50ms;
  return o;
}

double max_relative_gap(const ParameterSet& a, const ParameterSet& b) {
  double worst = 0;
  for (std::size_t t = 0; t < a.size(); ++t)
    for (Eigen::Index i = 0; i < a[t].value.size(); ++i) {
      const double x = a[t].value.data()[i], y = b[t].value.data()[i];
      const double scale = std::max(std::abs(x), std::abs(y));
      if (scale > 0) worst = std::max(worst, std::abs(x - y) / scale);
    }
  return worst;
}

struct Session {
  ServeResult result;
  std::vector<int> exits;
};

Session run_session(const RunConfig& cfg, const std::vector<data::Dataset>& parts, transport::TlsConfig server_tls = {},
                    transport::TlsConfig client_tls = {}) {
  Server server(cfg, server_tls);
  auto served = std::async(std::launch::async, [&] { return server.run(); });
  std::vector<std::future<int>> clients;
  for (int k = 0; k < static_cast<int>(parts.size()); ++k)
    clients.push_back(std::async(std::launch::async, [&, k] {
      return run_client(options_for(server, k, client_tls), parts[static_cast<std::size_t>(k)]);
    }));
  Session s;
  for (auto& c : clients) s.exits.push_back(c.get());
  s.result = served.get();
  return s;
}

}  // namespace

TEST_CASE("session state machine") {
  SessionState s(2);
  CHECK_FALSE(s.phase(0).has_value());
  CHECK_THROWS_AS(s.begin_round(1), wire::ProtocolError);
  s.connect(0);
  CHECK_THROWS_AS(s.connect(0), wire::ProtocolError);
  CHECK_THROWS_AS(s.connect(2), wire::ProtocolError);
  s.connect(1);
  CHECK(s.phase(1) == ClientPhase::connected);
  s.configure(0);
  CHECK_THROWS_AS(s.begin_round(1), wire::ProtocolError);
  s.configure(1);
  CHECK_THROWS_AS(s.begin_round(2), wire::ProtocolError);
  s.begin_round(1);
  CHECK(s.phase(0) == ClientPhase::training);

  ParameterSet p;
  p.add("w", MatrixXd::Constant(1, 2, 1.0), 1);
  CHECK_FALSE(s.ready());
  CHECK_THROWS_AS(s.aggregate(), wire::ProtocolError);
  CHECK_THROWS_AS(s.report({0, 2, p, 1}), wire::ProtocolError);
  s.report({0, 1, p, 1});
  CHECK_THROWS_AS(s.report({0, 1, p, 1}), wire::ProtocolError);
  // one of two reported: aggregation is still unreachable
  CHECK_FALSE(s.ready());
  CHECK_THROWS_AS(s.aggregate(), wire::ProtocolError);
  CHECK_THROWS_AS(s.begin_round(2), wire::ProtocolError);
  s.report({1, 1, p, 3});
  CHECK(s.ready());
  CHECK(s.aggregate() == p);
  s.begin_round(2);
  CHECK(s.updates().empty());
  CHECK_FALSE(s.ready());
}

TEST_CASE("loopback session reproduces the simulation") {
  const auto cfg = small_run(2, 1);
  const auto parts = client_data(2);
  const auto session = run_session(cfg, parts);
  CHECK(session.exits == std::vector<int>{0, 0});
  const auto sim = fedcore::run_simulation(cfg.model, cfg.rounds, parts, {});
  CHECK(max_relative_gap(session.result.global_params, sim.global_params) <= 1.2e-7);

  // n_k is each client's training-set size after its holdout
  REQUIRE(session.result.reported_counts.size() == 1);
  for (int k = 0; k < 2; ++k) {
    const auto local = fedcore::prepare_client(parts[static_cast<std::size_t>(k)], cfg.rounds.val_fraction,
                                               fedcore::split_seed(cfg.seed, k));
    CHECK(session.result.reported_counts[0][static_cast<std::size_t>(k)] == local.train.size());
  }
}

TEST_CASE("TLS is transparent") {
  const auto files = testing::make_test_certs(testing::scratch_dir("fednet_tls"));
  const auto cfg = small_run(2, 2);
  const auto parts = client_data(2);
  transport::TlsConfig server_tls{true, files.server_cert, files.server_key, files.ca, true};
  transport::TlsConfig client_tls{true, files.client_cert, files.client_key, files.ca, false};
  const auto plain = run_session(cfg, parts);
  const auto secure = run_session(cfg, parts, server_tls, client_tls);
  CHECK(secure.exits == std::vector<int>{0, 0});
  CHECK(secure.result.global_params == plain.result.global_params);

  SUBCASE("a client without a certificate is refused under mutual auth") {
    auto c = cfg;
    c.handshake_timeout_s = 3;
    Server server(c, server_tls);
    auto served = std::async(std::launch::async, [&] { return server.run(); });
    transport::TlsConfig anonymous{true, "", "", files.ca, false};
    auto o = options_for(server, 0, anonymous);
    o.retries = 1;
    CHECK(run_client(o, parts[0]) != 0);
    CHECK_THROWS(served.get());
  }
}

TEST_CASE("handshake timeout") {
  auto cfg = small_run(1, 1);
  cfg.handshake_timeout_s = 0.5;
  SUBCASE("nobody connects") {
    Server server(cfg);
    CHECK_THROWS_AS(server.run(), transport::TimeoutError);
  }
  SUBCASE("a client connects but never says HELLO") {
    Server server(cfg);
    auto served = std::async(std::launch::async, [&] { return server.run(); });
    auto silent = transport::connect("127.0.0.1", server.port(), {}, 3, 50ms);
    CHECK_THROWS_AS(served.get(), transport::TimeoutError);
  }
}

TEST_CASE("a client disconnecting mid-round aborts without aggregating") {
  const auto cfg = small_run(2, 2);
  const auto parts = client_data(2);
  Server server(cfg);
  auto served = std::async(std::launch::async, [&] { return server.run(); });
  auto good = std::async(std::launch::async, [&] { return run_client(options_for(server, 0), parts[0]); });
  {
    auto s = transport::connect("127.0.0.1", server.port(), {}, 3, 50ms);
    transport::send_message(s, {wire::MessageType::hello, 0, 1, {}});
    CHECK(transport::receive_message(s).type == wire::MessageType::config);
    CHECK(transport::receive_message(s).type == wire::MessageType::global_params);
    s.close();
  }
  try {
    served.get();
    FAIL("expected the round to abort");
  } catch (const fedcore::ClientFailure& e) {
    CHECK(e.client_id == 1);
  }
  CHECK(good.get() != 0);
}

TEST_CASE("client validates what the server sends") {
  const auto parts = client_data(1);
  transport::Listener listener("127.0.0.1", 0, {});
  auto fake_server = [&](const wire::KeyValues& kv, const ParameterSet& params) {
    auto s = listener.accept(transport::Clock::now() + 10s);
    const auto hello = transport::receive_message(s, 5000ms);
    CHECK(hello.type == wire::MessageType::hello);
    CHECK(hello.client_id == 0);
    transport::send_message(s, {wire::MessageType::config, 0, 0, wire::encode_key_values(kv)});
    try {
      transport::send_message(s, {wire::MessageType::global_params, 1, 0, wire::encode_params(params)});
    } catch (const transport::TransportError&) {
    }
    return transport::receive_message(s, 5000ms);
  };
  ClientOptions o;
  o.port = listener.port();
  o.retries = 3;
  o.retry_delay = 50ms;

  SUBCASE("shape-mismatched global parameters") {
    const auto cfg = small_run(1, 1);
    auto other = cfg.model;
    other.d_model = 6;
    other.heads = 3;
    auto reply = std::async(std::launch::async, fake_server, cfg.network_key_values(), model::init_params(other));
    CHECK(run_client(o, parts[0]) != 0);
    const auto msg = reply.get();
    CHECK(msg.type == wire::MessageType::error);
  }
  SUBCASE("configuration that does not fit the local data") {
    auto cfg = small_run(1, 1);
    cfg.set("W", "7");
    auto reply = std::async(std::launch::async, fake_server, cfg.network_key_values(), model::init_params(cfg.model));
    CHECK(run_client(o, parts[0]) != 0);
    CHECK(reply.get().type == wire::MessageType::error);
  }
}

TEST_CASE("unreachable server") {
  std::uint16_t port;
  {
    transport::Listener l("127.0.0.1", 0, {});
    port = l.port();
  }
  ClientOptions o;
  o.port = port;
  o.retries = 2;
  o.retry_delay = 20ms;
  CHECK(run_client(o, client_data(1)[0]) == 3);
}
