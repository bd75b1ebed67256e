#include "transfed/fedcore.hpp"

#include "transfed/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <future>
#include <numeric>
#include <random>
#include <sstream>

namespace transfed::fedcore {

void RoundConfig::validate() const {
  if (rounds < 1) throw ConfigError("round config: rounds must be >= 1");
  if (epochs < 0) throw ConfigError("round config: epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("round config: batch size must be >= 1");
  if (clients < 1) throw ConfigError("round config: clients must be >= 1");
  if (val_fraction < 0.0 || val_fraction >= 1.0) throw ConfigError("round config: val_fraction must be in [0, 1)");
}

TrainOptions RoundConfig::train_options(int client_id, int round) const {
  return {epochs, batch_size, adam, client_seed(seed, client_id, round)};
}

std::uint64_t client_seed(std::uint64_t base, int client_id, int round) {
  return base + 1000003ull * static_cast<std::uint64_t>(client_id) + 7919ull * static_cast<std::uint64_t>(round - 1);
}

std::uint64_t split_seed(std::uint64_t base, int client_id) {
  return base ^ (0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(client_id + 1));
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

std::string TrainingHistory::epochs_csv() const {
  std::ostringstream out;
  out << "round,client,epoch,train_loss,train_acc,val_loss,val_acc,val_ovr_acc\n";
  for (const auto& e : epochs) {
    out << e.round << ',' << e.client << ',' << e.epoch << ',' << fmt(e.train_loss) << ',' << fmt(e.train_acc);
    if (e.has_val)
      out << ',' << fmt(e.val_loss) << ',' << fmt(e.val_acc) << ',' << fmt(e.val_ovr_acc);
    else
      out << ",,,";
    out << '\n';
  }
  return out.str();
}

std::string TrainingHistory::rounds_csv() const {
  std::ostringstream out;
  out << "round,test_acc,test_loss\n";
  for (const auto& r : rounds) {
    out << r.round << ',';
    if (r.has_test)
      out << fmt(r.test_acc) << ',' << fmt(r.test_loss);
    else
      out << ',';
    out << '\n';
  }
  return out.str();
}

Evaluation evaluate(model::Model& model, const data::Dataset& dataset) {
  Evaluation ev;
  if (dataset.empty()) return ev;
  const auto inputs = dataset.inputs();
  const auto labels = dataset.labels();
  constexpr std::size_t chunk = 64;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < inputs.size(); start += chunk) {
    const std::size_t n = std::min(chunk, inputs.size() - start);
    const MatrixXd probs = model.forward(std::span<const MatrixXd>(inputs).subspan(start, n));
    const auto part = std::span<const int>(labels).subspan(start, n);
    loss_sum += numerics::cross_entropy(probs, part) * static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const int p = model::argmax(probs.row(static_cast<Eigen::Index>(i)));
      ev.predictions.push_back(p);
      if (p == part[i]) ++correct;
    }
  }
  ev.loss = loss_sum / static_cast<double>(inputs.size());
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(inputs.size());
  return ev;
}

ParameterSet fedavg(const std::vector<ClientUpdate>& updates) {
  if (updates.empty()) throw ConfigError("fedavg: no client updates");
  std::vector<const ClientUpdate*> ordered;
  for (const auto& u : updates) ordered.push_back(&u);
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const ClientUpdate* a, const ClientUpdate* b) { return a->client_id < b->client_id; });

  const ClientUpdate& first = *ordered.front();
  std::uint64_t n = 0;
  for (const auto* u : ordered) {
    if (u->round != first.round)
      throw ConfigError("fedavg: mixed rounds " + std::to_string(first.round) + " and " + std::to_string(u->round));
    if (u->n_k == 0) throw ConfigError("fedavg: client " + std::to_string(u->client_id) + " reports n_k = 0");
    require_same_layout(first.params, u->params, "fedavg client " + std::to_string(u->client_id));
    n += u->n_k;
  }

  // Accumulating offsets from the first client keeps identical inputs exact;
  // the result is clamped to the client envelope to absorb rounding.
  ParameterSet out = first.params;
  for (std::size_t t = 0; t < out.size(); ++t) {
    const MatrixXd& base = first.params[t].value;
    MatrixXd acc = MatrixXd::Zero(base.rows(), base.cols());
    MatrixXd lo = base, hi = base;
    for (const auto* u : ordered) {
      const MatrixXd& p = u->params[t].value;
      const double weight = static_cast<double>(u->n_k) / static_cast<double>(n);
      acc += weight * (p - base);
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    out[t].value = (base + acc).cwiseMax(lo).cwiseMin(hi);
  }
  return out;
}

void train_epochs(model::Model& model, const data::Dataset& train, const data::Dataset& val,
                  const TrainOptions& options, int round, int client, TrainingHistory& history) {
  if (train.empty()) throw TrainingAborted("empty training set");
  if (options.batch_size < 1) throw ConfigError("batch size must be >= 1");
  const auto& aug = model.config().augmentation;
  const bool augmenting = aug.enabled && (aug.jitter > 0.0 || aug.scale_range > 0.0);
  const RowVectorXd stddev = augmenting ? data::feature_std(train) : RowVectorXd();

  numerics::AdamState adam = numerics::AdamState::for_params(model.params(), options.adam);
  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<MatrixXd> batch;
  std::vector<int> labels;

  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(options.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(options.batch_size));
      batch.clear();
      labels.clear();
      for (std::size_t i = start; i < end; ++i) {
        const auto& w = train.windows[order[i]];
        batch.push_back(augmenting ? data::augment_values(w.values, rng, aug, stddev) : w.values);
        labels.push_back(w.label);
      }
      auto step = model.loss_and_gradients(batch, labels);
      if (!std::isfinite(step.loss))
        throw TrainingAborted("non-finite loss at round " + std::to_string(round) + ", epoch " +
                              std::to_string(epoch) + ", batch starting at " + std::to_string(start));
      numerics::adam_step(model.params(), step.grads, adam);
      loss_sum += step.loss * static_cast<double>(end - start);
      for (std::size_t i = 0; i < labels.size(); ++i)
        if (model::argmax(step.probs.row(static_cast<Eigen::Index>(i))) == labels[i]) ++correct;
    }
    EpochRecord rec;
    rec.round = round;
    rec.client = client;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(train.size());
    if (!val.empty()) {
      const Evaluation ev = evaluate(model, val);
      rec.has_val = true;
      rec.val_loss = ev.loss;
      rec.val_acc = ev.accuracy;
      const auto labels_val = val.labels();
      rec.val_ovr_acc =
          metrics::per_class(metrics::confusion(ev.predictions, labels_val, model.config().n_classes))
              .mean_one_vs_rest_accuracy;
    }
    history.epochs.push_back(rec);
  }
}

ClientData prepare_client(const data::Dataset& local, double val_fraction, std::uint64_t seed) {
  if (local.empty()) throw TrainingAborted("empty local dataset");
  if (val_fraction <= 0.0) return {local, data::Dataset{{}, local.n_classes, local.source, local.client_id}};
  const auto counts = local.class_counts();
  const bool stratify = std::none_of(counts.begin(), counts.end(), [](std::size_t c) { return c == 0; });
  auto parts = data::split(local, {1.0 - val_fraction, val_fraction, 0.0}, seed, stratify);
  parts.train.client_id = parts.val.client_id = local.client_id;
  return {std::move(parts.train), std::move(parts.val)};
}

ClientUpdate local_round(const ParameterSet& global_params, const ClientData& local,
                         const model::ModelConfig& model_config, const TrainOptions& options, int client_id,
                         int round, TrainingHistory& history) {
  model::Model m(model_config, global_params);
  train_epochs(m, local.train, local.val, options, round, client_id, history);
  return {client_id, round, m.params(), static_cast<std::uint64_t>(local.train.size())};
}

SimulationResult run_simulation(const model::ModelConfig& model_config, const RoundConfig& rc,
                                const std::vector<data::Dataset>& partitions, const data::Dataset& test_set) {
  rc.validate();
  if (partitions.size() != static_cast<std::size_t>(rc.clients))
    throw ConfigError("run_simulation: " + std::to_string(partitions.size()) + " partitions for " +
                      std::to_string(rc.clients) + " clients");
  std::vector<ClientData> clients;
  for (int k = 0; k < rc.clients; ++k) {
    try {
      clients.push_back(prepare_client(partitions[static_cast<std::size_t>(k)], rc.val_fraction, split_seed(rc.seed, k)));
    } catch (const std::exception& e) {
      throw ClientFailure(k, e.what());
    }
  }

  SimulationResult result;
  ParameterSet global = model::init_params(model_config);
  model::Model evaluator(model_config, global);

  for (int round = 1; round <= rc.rounds; ++round) {
    const ParameterSet broadcast = rc.wire_precision ? round_to_f32(global) : global;
    std::vector<ClientUpdate> updates(static_cast<std::size_t>(rc.clients));
    std::vector<TrainingHistory> local_history(static_cast<std::size_t>(rc.clients));
    auto work = [&](int k) {
      const auto idx = static_cast<std::size_t>(k);
      try {
        updates[idx] = local_round(broadcast, clients[idx], model_config, rc.train_options(k, round), k, round,
                                   local_history[idx]);
      } catch (const std::exception& e) {
        throw ClientFailure(k, e.what());
      }
      if (rc.wire_precision) updates[idx].params = round_to_f32(updates[idx].params);
    };
    if (rc.parallel && rc.clients > 1) {
      std::vector<std::future<void>> jobs;
      for (int k = 0; k < rc.clients; ++k) jobs.push_back(std::async(std::launch::async, work, k));
      // Barrier: every client finishes (or fails) before aggregation.
      for (auto& j : jobs) j.wait();
      for (auto& j : jobs) j.get();
    } else {
      for (int k = 0; k < rc.clients; ++k) work(k);
    }
    for (auto& h : local_history)
      result.history.epochs.insert(result.history.epochs.end(), h.epochs.begin(), h.epochs.end());

    global = fedavg(updates);
    result.round_params.push_back(global);

    RoundRecord rec;
    rec.round = round;
    if (!test_set.empty()) {
      evaluator.set_params(global);
      const Evaluation ev = evaluate(evaluator, test_set);
      rec.has_test = true;
      rec.test_acc = ev.accuracy;
      rec.test_loss = ev.loss;
    }
    result.history.rounds.push_back(rec);
  }
  result.global_params = std::move(global);
  return result;
}

CentralizedResult train_centralized(const model::ModelConfig& model_config, const data::Dataset& train,
                                    const data::Dataset& val, const TrainOptions& options) {
  CentralizedResult r{model::build(model_config), {}};
  train_epochs(r.model, train, val, options, 1, 0, r.history);
  return r;
}

}  // namespace transfed::fedcore
