#include "transfed/fednet.hpp"

#include <future>

namespace transfed::fednet {

using transport::Clock;
using transport::Duration;
using wire::Message;
using wire::MessageType;
using wire::ProtocolError;

const char* to_string(ClientPhase phase) {
  switch (phase) {
    case ClientPhase::connected: return "connected";
    case ClientPhase::configured: return "configured";
    case ClientPhase::training: return "training";
    case ClientPhase::reported: return "reported";
  }
  return "?";
}

SessionState::SessionState(int clients) {
  if (clients < 1) throw ConfigError("session needs at least one client");
  phase_.resize(static_cast<std::size_t>(clients));
}

void SessionState::check_id(int client_id) const {
  if (client_id < 0 || client_id >= clients())
    throw ProtocolError("client id " + std::to_string(client_id) + " outside [0, " + std::to_string(clients()) + ")");
}

std::optional<ClientPhase> SessionState::phase(int client_id) const {
  check_id(client_id);
  return phase_[static_cast<std::size_t>(client_id)];
}

void SessionState::connect(int client_id) {
  check_id(client_id);
  auto& p = phase_[static_cast<std::size_t>(client_id)];
  if (p) throw ProtocolError("client " + std::to_string(client_id) + " connected twice");
  p = ClientPhase::connected;
}

void SessionState::configure(int client_id) {
  check_id(client_id);
  auto& p = phase_[static_cast<std::size_t>(client_id)];
  if (p != ClientPhase::connected)
    throw ProtocolError("client " + std::to_string(client_id) + " cannot be configured from its current state");
  p = ClientPhase::configured;
}

void SessionState::begin_round(int round) {
  if (round != round_ + 1)
    throw ProtocolError("round " + std::to_string(round) + " does not follow round " + std::to_string(round_));
  const ClientPhase needed = round_ == 0 ? ClientPhase::configured : ClientPhase::reported;
  for (std::size_t k = 0; k < phase_.size(); ++k)
    if (phase_[k] != needed)
      throw ProtocolError("client " + std::to_string(k) + " is not " + to_string(needed) + " before round " +
                          std::to_string(round));
  for (auto& p : phase_) p = ClientPhase::training;
  updates_.clear();
  round_ = round;
}

void SessionState::report(fedcore::ClientUpdate update) {
  check_id(update.client_id);
  auto& p = phase_[static_cast<std::size_t>(update.client_id)];
  if (p != ClientPhase::training)
    throw ProtocolError("unexpected update from client " + std::to_string(update.client_id));
  if (update.round != round_)
    throw ProtocolError("client " + std::to_string(update.client_id) + " reported round " +
                        std::to_string(update.round) + " during round " + std::to_string(round_));
  p = ClientPhase::reported;
  updates_.push_back(std::move(update));
}

bool SessionState::ready() const {
  if (round_ == 0) return false;
  for (const auto& p : phase_)
    if (p != ClientPhase::reported) return false;
  return true;
}

ParameterSet SessionState::aggregate() const {
  if (!ready())
    throw ProtocolError("round " + std::to_string(round_) + ": aggregation needs all " + std::to_string(clients()) +
                        " updates, have " + std::to_string(updates_.size()));
  return fedcore::fedavg(updates_);
}

namespace {

Duration seconds(double s) { return Duration(static_cast<Duration::rep>(s * 1000.0)); }

Duration remaining(Clock::time_point deadline) {
  const auto left = std::chrono::duration_cast<Duration>(deadline - Clock::now());
  return std::max(left, Duration(1));
}

Message make(MessageType type, int round, int client_id, std::vector<std::uint8_t> payload = {}) {
  return {type, static_cast<std::uint32_t>(round), static_cast<std::uint32_t>(client_id), std::move(payload)};
}

std::vector<std::uint8_t> text_payload(const std::string& s) { return {s.begin(), s.end()}; }

std::string payload_text(const Message& m) { return {m.payload.begin(), m.payload.end()}; }

}  // namespace

Server::Server(RunConfig config, transport::TlsConfig tls)
    : config_(std::move(config)), listener_(config_.host, config_.port, tls) {}

ServeResult Server::run(const data::Dataset& test_set, const std::filesystem::path& checkpoint) {
  auto log = [&](const std::string& s) {
    if (log_) log_(s);
  };
  config_.model.validate();
  config_.rounds.validate();
  const int K = config_.rounds.clients;
  SessionState state(K);
  std::vector<transport::Stream> streams(static_cast<std::size_t>(K));

  const auto deadline = Clock::now() + seconds(config_.handshake_timeout_s);
  for (int i = 0; i < K; ++i) {
    transport::Stream s = listener_.accept(deadline);
    const Message hello = transport::receive_message(s, remaining(deadline));
    if (hello.type != MessageType::hello)
      throw ProtocolError(std::string("expected HELLO, got ") + wire::to_string(hello.type));
    const int id = static_cast<int>(hello.client_id);
    state.connect(id);
    streams[static_cast<std::size_t>(id)] = std::move(s);
    log("client " + std::to_string(id) + " connected");
  }

  const auto config_payload = wire::encode_key_values(config_.network_key_values());
  for (int k = 0; k < K; ++k) {
    transport::send_message(streams[static_cast<std::size_t>(k)], make(MessageType::config, 0, k, config_payload));
    state.configure(k);
  }

  auto abort_all = [&](const std::string& why) {
    for (auto& s : streams) {
      if (!s.is_open()) continue;
      try {
        transport::send_message(s, make(MessageType::error, state.round(), 0, text_payload(why)));
      } catch (const std::exception&) {
      }
      s.close();
    }
  };

  ServeResult result;
  ParameterSet global = model::init_params(config_.model);
  model::Model evaluator(config_.model, global);
  const Duration io_timeout = seconds(config_.io_timeout_s);

  for (int round = 1; round <= config_.rounds.rounds; ++round) {
    state.begin_round(round);
    const auto params_payload = wire::encode_params(global);
    try {
      for (int k = 0; k < K; ++k)
        transport::send_message(streams[static_cast<std::size_t>(k)],
                                make(MessageType::global_params, round, k, params_payload));
    } catch (const std::exception& e) {
      log(std::string("round aborted: ") + e.what());
      abort_all(e.what());
      throw;
    }

    // One reader per client; state changes happen below, on this thread only.
    std::vector<std::future<Message>> readers;
    for (int k = 0; k < K; ++k)
      readers.push_back(std::async(std::launch::async, [&, k] {
        return transport::receive_message(streams[static_cast<std::size_t>(k)], io_timeout);
      }));
    std::vector<Message> replies;
    std::optional<fedcore::ClientFailure> failure;
    for (int k = 0; k < K; ++k) {
      try {
        replies.push_back(readers[static_cast<std::size_t>(k)].get());
      } catch (const std::exception& e) {
        if (!failure) failure.emplace(k, e.what());
        replies.emplace_back();
      }
    }
    std::vector<std::uint64_t> counts;
    for (int k = 0; k < K && !failure; ++k) {
      const Message& m = replies[static_cast<std::size_t>(k)];
      try {
        if (m.type == MessageType::error) throw ProtocolError("reported error: " + payload_text(m));
        if (m.type != MessageType::client_update)
          throw ProtocolError(std::string("expected CLIENT_UPDATE, got ") + wire::to_string(m.type));
        if (static_cast<int>(m.client_id) != k) throw ProtocolError("update carries client id " + std::to_string(m.client_id));
        auto update = wire::decode_update(m.payload);
        require_same_layout(global, update.params, "update from client " + std::to_string(k));
        counts.push_back(update.n_k);
        state.report({k, static_cast<int>(m.round), std::move(update.params), update.n_k});
      } catch (const std::exception& e) {
        failure.emplace(k, e.what());
      }
    }
    if (failure) {
      log("round " + std::to_string(round) + " aborted: " + failure->what());
      abort_all(failure->what());
      throw *failure;
    }

    global = state.aggregate();
    result.round_params.push_back(global);
    result.reported_counts.push_back(counts);
    fedcore::RoundRecord rec;
    rec.round = round;
    if (!test_set.empty()) {
      evaluator.set_params(global);
      const auto ev = fedcore::evaluate(evaluator, test_set);
      rec.has_test = true;
      rec.test_acc = ev.accuracy;
      rec.test_loss = ev.loss;
    }
    result.history.rounds.push_back(rec);
    log("round " + std::to_string(round) + " aggregated" +
        (rec.has_test ? ", test accuracy " + std::to_string(rec.test_acc) : std::string()));
    for (int k = 0; k < K; ++k)
      transport::send_message(streams[static_cast<std::size_t>(k)], make(MessageType::round_done, round, k));
  }

  for (int k = 0; k < K; ++k) {
    auto& s = streams[static_cast<std::size_t>(k)];
    transport::send_message(s, make(MessageType::shutdown, config_.rounds.rounds, k));
    s.close();
  }
  if (!checkpoint.empty()) model::save_checkpoint(checkpoint, global);
  result.global_params = std::move(global);
  return result;
}

int run_client(const ClientOptions& options, const data::Dataset& local) {
  auto log = [&](const std::string& s) {
    if (options.log) options.log("client " + std::to_string(options.client_id) + ": " + s);
  };
  const int id = options.client_id;
  transport::Stream stream;
  try {
    stream = transport::connect(options.host, options.port, options.tls, options.retries, options.retry_delay);
  } catch (const std::exception& e) {
    log(e.what());
    return 3;
  }

  int round = 0;
  try {
    transport::send_message(stream, make(MessageType::hello, 0, id));
    const Message cfg_msg = transport::receive_message(stream, options.io_timeout);
    if (cfg_msg.type != MessageType::config)
      throw ProtocolError(std::string("expected CONFIG, got ") + wire::to_string(cfg_msg.type));
    const RunConfig cfg = RunConfig::from_key_values(wire::decode_key_values(cfg_msg.payload));
    cfg.model.validate();
    if (local.n_classes != cfg.model.n_classes)
      throw ConfigError("local data has " + std::to_string(local.n_classes) + " classes, server expects " +
                        std::to_string(cfg.model.n_classes));
    for (const auto& w : local.windows)
      if (w.values.rows() != cfg.model.window_rows || w.values.cols() != cfg.model.features)
        throw DimensionError("local window " + shape_string(w.values.rows(), w.values.cols()) + ", server expects " +
                             shape_string(cfg.model.window_rows, cfg.model.features));

    const auto data = fedcore::prepare_client(local, cfg.rounds.val_fraction, fedcore::split_seed(cfg.seed, id));
    const ParameterSet layout = model::init_params(cfg.model);

    for (;;) {
      const Message m = transport::receive_message(stream, options.io_timeout);
      switch (m.type) {
        case MessageType::global_params: {
          round = static_cast<int>(m.round);
          const ParameterSet params = wire::decode_params(m.payload);
          require_same_layout(layout, params, "global parameters");
          fedcore::TrainingHistory history;
          const auto update =
              fedcore::local_round(params, data, cfg.model, cfg.rounds.train_options(id, round), id, round, history);
          transport::send_message(stream, make(MessageType::client_update, round, id,
                                               wire::encode_update(update.params, update.n_k)));
          if (!history.epochs.empty()) {
            const auto& last = history.epochs.back();
            log("round " + std::to_string(round) + " trained, n_k " + std::to_string(update.n_k) + ", loss " +
                std::to_string(last.train_loss));
          }
          break;
        }
        case MessageType::round_done:
          break;
        case MessageType::shutdown:
          stream.close();
          return 0;
        case MessageType::error:
          log("server error: " + payload_text(m));
          return 1;
        default:
          throw ProtocolError(std::string("unexpected ") + wire::to_string(m.type));
      }
    }
  } catch (const transport::TransportError& e) {
    log(e.what());
    return 1;
  } catch (const std::exception& e) {
    log(e.what());
    try {
      transport::send_message(stream, make(MessageType::error, round, id, text_payload(e.what())));
    } catch (const std::exception&) {
    }
    return 1;
  }
}

}  // namespace transfed::fednet
