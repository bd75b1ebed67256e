#pragma once

#include "transfed/data.hpp"
#include "transfed/model.hpp"
#include "transfed/numerics.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace transfed::fedcore {

struct TrainingAborted : Error {
  using Error::Error;
};

struct ClientFailure : Error {
  ClientFailure(int client, const std::string& what)
      : Error("client " + std::to_string(client) + ": " + what), client_id(client) {}
  int client_id;
};

/// A client's trained parameters and the number of training windows n_k.
struct ClientUpdate {
  int client_id = 0;
  int round = 1;
  ParameterSet params;
  std::uint64_t n_k = 0;
};

struct TrainOptions {
  int epochs = 100;
  int batch_size = 30;
  numerics::AdamConfig adam;
  std::uint64_t seed = 1;
};

struct RoundConfig {
  int rounds = 5;
  int epochs = 100;
  int batch_size = 30;
  int clients = 5;
  numerics::AdamConfig adam;
  std::uint64_t seed = 1;
  double val_fraction = 0.1;
  /// Round broadcast parameters and client updates through binary32, exactly
  /// as the network transport does.
  bool wire_precision = false;
  /// Run the K local rounds of a round on separate threads.
  bool parallel = true;

  void validate() const;
  TrainOptions train_options(int client_id, int round) const;
};

/// Training seed for a client in a round; client 0 in round 1 uses the base
/// seed unchanged so a one-client federation replays centralized training.
std::uint64_t client_seed(std::uint64_t base, int client_id, int round);
/// Seed of a client's fixed train/validation split.
std::uint64_t split_seed(std::uint64_t base, int client_id);

struct EpochRecord {
  int round = 0;
  int client = 0;
  int epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  bool has_val = false;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double val_ovr_acc = 0.0;  // mean one-vs-rest accuracy
};

struct RoundRecord {
  int round = 0;
  bool has_test = false;
  double test_acc = 0.0;
  double test_loss = 0.0;
};

struct TrainingHistory {
  std::vector<EpochRecord> epochs;
  std::vector<RoundRecord> rounds;

  /// `round,client,epoch,train_loss,train_acc,val_loss,val_acc,val_ovr_acc`;
  /// validation columns are empty when no validation set was used.
  std::string epochs_csv() const;
  /// `round,test_acc,test_loss`.
  std::string rounds_csv() const;
};

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<int> predictions;
};

Evaluation evaluate(model::Model& model, const data::Dataset& dataset);

/// Element-wise sum over clients (in client_id order) of (n_k / n) * params_k.
ParameterSet fedavg(const std::vector<ClientUpdate>& updates);

/// Trains `model` in place with minibatch Adam, appending one record per epoch.
void train_epochs(model::Model& model, const data::Dataset& train, const data::Dataset& val,
                  const TrainOptions& options, int round, int client, TrainingHistory& history);

struct ClientData {
  data::Dataset train;
  data::Dataset val;
};

/// Fixed per-client holdout; stratified whenever every class is present.
ClientData prepare_client(const data::Dataset& local, double val_fraction, std::uint64_t seed);

/// Starts from the broadcast parameters, trains, and reports n_k = |train|.
ClientUpdate local_round(const ParameterSet& global_params, const ClientData& local,
                         const model::ModelConfig& model_config, const TrainOptions& options, int client_id,
                         int round, TrainingHistory& history);

struct SimulationResult {
  ParameterSet global_params;
  std::vector<ParameterSet> round_params;
  TrainingHistory history;
};

/// In-process synchronous federated averaging over `partitions`, one per client.
SimulationResult run_simulation(const model::ModelConfig& model_config, const RoundConfig& round_config,
                                const std::vector<data::Dataset>& partitions, const data::Dataset& test_set);

struct CentralizedResult {
  model::Model model;
  TrainingHistory history;
};

CentralizedResult train_centralized(const model::ModelConfig& model_config, const data::Dataset& train,
                                    const data::Dataset& val, const TrainOptions& options);

}  // namespace transfed::fedcore
