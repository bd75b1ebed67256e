#include "oracles.hpp"
#include "support.hpp"
#include "transfed/fedcore.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>

using namespace transfed;
using namespace transfed::fedcore;
using testing::random_matrix;

namespace {

ParameterSet scalars(std::initializer_list<double> values) {
  ParameterSet p;
  MatrixXd m(1, static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (double v : values) m(0, i++) = v;
  p.add("w", m, 1);
  return p;
}

model::ModelConfig small_config(int classes = 3) {
  model::ModelConfig c;
  c.window_rows = 6;
  c.features = 3;
  c.d_model = 4;
  c.heads = 2;
  c.layers = 1;
  c.n_classes = classes;
  return c;
}

ParameterSet random_params(const model::ModelConfig& c, std::mt19937_64& rng) {
  ParameterSet p = model::init_params(c);
  for (auto& t : p) t.value = random_matrix(t.value.rows(), t.value.cols(), rng);
  return p;
}

bool same_history(const TrainingHistory& a, const TrainingHistory& b) {
  if (a.epochs.size() != b.epochs.size()) return false;
  for (std::size_t i = 0; i < a.epochs.size(); ++i) {
    const auto& x = a.epochs[i];
    const auto& y = b.epochs[i];
    if (x.round != y.round || x.client != y.client || x.epoch != y.epoch || x.train_loss != y.train_loss ||
        x.train_acc != y.train_acc || x.has_val != y.has_val || x.val_loss != y.val_loss || x.val_acc != y.val_acc)
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("fedavg examples") {
  CHECK(fedavg({{0, 1, scalars({1, 3}), 5}, {1, 1, scalars({3, 5}), 5}}).at("w") == scalars({2, 4}).at("w"));
  CHECK(fedavg({{0, 1, scalars({0}), 1}, {1, 1, scalars({4}), 3}}).at("w")(0, 0) == 3.0);
  const auto single = scalars({0.1, -7.3, 1e-300});
  CHECK(fedavg({{0, 1, single, 17}}) == single);
}

TEST_CASE("fedavg algebra") {
  std::mt19937_64 rng(42);
  const auto cfg = small_config();
  for (int trial = 0; trial < 50; ++trial) {
    const int K = 1 + static_cast<int>(rng() % 6);
    std::vector<ClientUpdate> updates;
    for (int k = 0; k < K; ++k) updates.push_back({k, 2, random_params(cfg, rng), 1 + rng() % 1000});
    const auto agg = fedavg(updates);
    const auto oracle = testing::weighted_mean_oracle(updates);
    for (std::size_t t = 0; t < agg.size(); ++t) {
      CHECK((agg[t].value - oracle[t].value).cwiseAbs().maxCoeff() <= 1e-12);
      MatrixXd lo = updates[0].params[t].value, hi = lo;
      for (const auto& u : updates) {
        lo = lo.cwiseMin(u.params[t].value);
        hi = hi.cwiseMax(u.params[t].value);
      }
      CHECK((agg[t].value.array() >= lo.array()).all());
      CHECK((agg[t].value.array() <= hi.array()).all());
    }

    // linearity
    const double c = 0.5 + static_cast<double>(rng() % 100) / 10.0;
    auto scaled = updates;
    for (auto& u : scaled)
      for (auto& t : u.params) t.value *= c;
    const auto agg_scaled = fedavg(scaled);
    for (std::size_t t = 0; t < agg.size(); ++t)
      CHECK((agg_scaled[t].value - c * agg[t].value).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, c));

    // identical params are returned exactly
    auto same = updates;
    for (auto& u : same) u.params = updates[0].params;
    CHECK(fedavg(same) == updates[0].params);

    // client order does not matter
    auto reversed = updates;
    std::reverse(reversed.begin(), reversed.end());
    CHECK(fedavg(reversed) == agg);
  }
}

TEST_CASE("fedavg rejects inconsistent updates") {
  CHECK_THROWS(fedavg({}));
  CHECK_THROWS(fedavg({{0, 1, scalars({1}), 1}, {1, 2, scalars({1}), 1}}));
  CHECK_THROWS(fedavg({{0, 1, scalars({1}), 1}, {1, 1, scalars({1, 2}), 1}}));
  CHECK_THROWS(fedavg({{0, 1, scalars({1}), 0}}));
}

TEST_CASE("local rounds") {
  const auto cfg = small_config();
  const auto ds = testing::gaussian_signatures(3, 8, 6, 3, 0.3, 1);
  const auto data = prepare_client(ds, 0.25, 9);
  CHECK(data.train.size() + data.val.size() == ds.size());
  CHECK(data.val.size() == 6);
  const auto global = model::init_params(cfg);
  TrainingHistory h;
  SUBCASE("zero epochs returns the broadcast params") {
    const auto u = local_round(global, data, cfg, {0, 30, {}, 1}, 2, 1, h);
    CHECK(u.params == global);
    CHECK(u.n_k == data.train.size());
    CHECK(u.client_id == 2);
  }
  SUBCASE("fixed seed is bit-identical") {
    TrainingHistory h2;
    const auto a = local_round(global, data, cfg, {3, 5, {}, 11}, 0, 1, h);
    const auto b = local_round(global, data, cfg, {3, 5, {}, 11}, 0, 1, h2);
    CHECK(a.params == b.params);
    CHECK(same_history(h, h2));
    CHECK(h.epochs.size() == 3);
    CHECK(h.epochs.back().has_val);
    for (const auto& e : h.epochs) {
      CHECK(e.train_acc >= 0.0);
      CHECK(e.train_acc <= 1.0);
    }
  }
  SUBCASE("non-finite loss aborts") {
    auto broken = data;
    broken.train.windows[0].values(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(local_round(global, broken, cfg, {1, 30, {}, 1}, 0, 1, h), TrainingAborted);
  }
  SUBCASE("empty data") {
    CHECK_THROWS_AS(prepare_client(data::Dataset{{}, 3, "", 0}, 0.1, 1), TrainingAborted);
  }
}

TEST_CASE("centralized training") {
  const auto cfg = small_config();
  const auto ds = testing::gaussian_signatures(3, 10, 6, 3, 0.2, 2);
  TrainOptions opt{1, 30, {}, 5};
  SUBCASE("first epoch lowers the loss") {
    model::Model m = model::build(cfg);
    const double before = evaluate(m, ds).loss;
    auto noaug = cfg;
    noaug.augmentation.enabled = false;
    auto r = train_centralized(noaug, ds, {}, opt);
    CHECK(evaluate(r.model, ds).loss < before);
    CHECK_FALSE(r.history.epochs[0].has_val);
  }
  SUBCASE("same seed, same history") {
    opt.epochs = 3;
    const auto a = train_centralized(cfg, ds, ds, opt);
    const auto b = train_centralized(cfg, ds, ds, opt);
    CHECK(same_history(a.history, b.history));
    CHECK(a.model.params() == b.model.params());
  }
}

TEST_CASE("one-client federation replays centralized training") {
  auto cfg = small_config();
  const auto ds = testing::gaussian_signatures(3, 12, 6, 3, 0.3, 3);
  RoundConfig rc;
  rc.rounds = 1;
  rc.epochs = 4;
  rc.batch_size = 7;
  rc.clients = 1;
  rc.seed = 21;
  cfg.seed = 21;
  const auto sim = run_simulation(cfg, rc, {ds}, {});
  const auto data = prepare_client(ds, rc.val_fraction, split_seed(rc.seed, 0));
  const auto central = train_centralized(cfg, data.train, data.val, rc.train_options(0, 1));
  CHECK(sim.global_params == central.model.params());
  CHECK(same_history(sim.history, central.history));
}

TEST_CASE("simulation is reproducible and thread-independent") {
  const auto cfg = small_config();
  const auto ds = testing::gaussian_signatures(3, 10, 6, 3, 0.3, 4);
  data::PartitionSpec spec;
  spec.clients = 2;
  const auto parts = data::partition_noniid(ds, spec);
  RoundConfig rc;
  rc.rounds = 2;
  rc.epochs = 2;
  rc.clients = 2;
  const auto a = run_simulation(cfg, rc, parts, ds);
  const auto b = run_simulation(cfg, rc, parts, ds);
  rc.parallel = false;
  const auto c = run_simulation(cfg, rc, parts, ds);
  CHECK(a.global_params == b.global_params);
  CHECK(a.global_params == c.global_params);
  CHECK(same_history(a.history, b.history));
  CHECK(a.round_params.size() == 2);
  CHECK(a.round_params.back() == a.global_params);
  REQUIRE(a.history.rounds.size() == 2);
  CHECK(a.history.rounds[1].has_test);
  CHECK(a.history.epochs.size() == 2 * 2 * 2);
}

TEST_CASE("client failures carry the client id") {
  const auto cfg = small_config();
  const auto ds = testing::gaussian_signatures(3, 5, 6, 3, 0.3, 4);
  RoundConfig rc;
  rc.rounds = 1;
  rc.epochs = 1;
  rc.clients = 2;
  try {
    run_simulation(cfg, rc, {ds, data::Dataset{{}, 3, "", 1}}, {});
    FAIL("expected a client failure");
  } catch (const ClientFailure& e) {
    CHECK(e.client_id == 1);
  }
  CHECK_THROWS_AS(run_simulation(cfg, rc, {ds}, {}), ConfigError);
}

TEST_CASE("history csv") {
  TrainingHistory h;
  h.epochs.push_back({1, 0, 1, 0.5, 0.25, false, 0, 0, 0});
  h.epochs.push_back({1, 0, 2, 0.25, 0.5, true, 0.75, 0.125, 0.5});
  h.rounds.push_back({1, true, 0.875, 0.5});
  CHECK(h.epochs_csv() ==
        "round,client,epoch,train_loss,train_acc,val_loss,val_acc,val_ovr_acc\n"
        "1,0,1,0.5,0.25,,,\n"
        "1,0,2,0.25,0.5,0.75,0.125,0.5\n");
  CHECK(h.rounds_csv() == "round,test_acc,test_loss\n1,0.875,0.5\n");
}

TEST_CASE("seeds") {
  CHECK(client_seed(17, 0, 1) == 17);
  CHECK(client_seed(17, 1, 1) != client_seed(17, 0, 2));
  CHECK(split_seed(17, 0) != split_seed(17, 1));
}
