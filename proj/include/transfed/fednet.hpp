#pragma once

// Networked federated averaging: one aggregation server, K client workers.

#include "transfed/fedcore.hpp"
#include "transfed/run_config.hpp"
#include "transfed/transport.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

namespace transfed::fednet {

enum class ClientPhase { connected, configured, training, reported };

const char* to_string(ClientPhase phase);

/// Server-side bookkeeping. Aggregation is only reachable once every client
/// has reported for the current round.
class SessionState {
 public:
  explicit SessionState(int clients);

  void connect(int client_id);
  void configure(int client_id);
  /// Moves every client into `training` for `round`; all must be configured
  /// (first round) or reported (later rounds).
  void begin_round(int round);
  void report(fedcore::ClientUpdate update);
  bool ready() const;
  ParameterSet aggregate() const;

  int clients() const { return static_cast<int>(phase_.size()); }
  int round() const { return round_; }
  std::optional<ClientPhase> phase(int client_id) const;
  const std::vector<fedcore::ClientUpdate>& updates() const { return updates_; }

 private:
  void check_id(int client_id) const;
  std::vector<std::optional<ClientPhase>> phase_;
  std::vector<fedcore::ClientUpdate> updates_;
  int round_ = 0;
};

using Logger = std::function<void(const std::string&)>;

struct ServeResult {
  ParameterSet global_params;
  std::vector<ParameterSet> round_params;
  fedcore::TrainingHistory history;
  /// n_k reported by each client, per round.
  std::vector<std::vector<std::uint64_t>> reported_counts;
};

class Server {
 public:
  /// Binds immediately so the port is known before clients start.
  Server(RunConfig config, transport::TlsConfig tls = {});

  std::uint16_t port() const { return listener_.port(); }

  /// Runs the whole session. Any client failure aborts the current round
  /// without aggregating and rethrows. The final parameters are written to
  /// `checkpoint` when it is non-empty.
  ServeResult run(const data::Dataset& test_set = {}, const std::filesystem::path& checkpoint = {});

  void set_logger(Logger log) { log_ = std::move(log); }

 private:
  RunConfig config_;
  transport::Listener listener_;
  Logger log_;
};

struct ClientOptions {
  std::string host = "127.0.0.1";
  std::uint16_t port = 7878;
  int client_id = 0;
  transport::TlsConfig tls;
  int retries = 5;
  transport::Duration retry_delay = std::chrono::seconds(2);
  transport::Duration io_timeout = transport::Duration::zero();
  Logger log;
};

/// Returns 0 after a clean SHUTDOWN; nonzero after any error, having sent an
/// ERROR message when the server is still reachable.
int run_client(const ClientOptions& options, const data::Dataset& local);

}  // namespace transfed::fednet
