// transfed: preprocess, partition, train, simulate, serve, client, eval.

#include "transfed/data.hpp"
#include "transfed/fedcore.hpp"
#include "transfed/fednet.hpp"
#include "transfed/metrics.hpp"
#include "transfed/model.hpp"
#include "transfed/run_config.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace transfed;

namespace {

// Exit codes: 0 success, 1 stage failure, 2 missing input file.
struct StageError : std::runtime_error {
  StageError(int code, const std::string& what) : std::runtime_error(what), code(code) {}
  int code;
};

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;  // key=value
  std::optional<std::uint64_t> seed;
  std::string render = "none";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_file, "key = value configuration file");
  cmd->add_option("--set", c.overrides, "override one configuration key (key=value), repeatable");
  cmd->add_option("--seed", c.seed, "global seed");
  cmd->add_option("--render", c.render, "print results as ASCII tables")->check(CLI::IsMember({"none", "text"}));
}

void require_file(const fs::path& p) {
  if (!fs::exists(p)) throw data::FileNotFound("no such file: " + p.string());
}

/// Defaults, then the config file, then command-specific flags, then --set.
RunConfig resolve(const Common& c, const std::map<std::string, std::string>& flags) {
  RunConfig cfg;
  if (!c.config_file.empty()) {
    require_file(c.config_file);
    cfg = RunConfig::from_file(c.config_file);
  }
  if (c.seed) cfg.set("seed", std::to_string(*c.seed));
  for (const auto& [k, v] : flags) cfg.set(k, v);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

void write_resolved(const fs::path& dir, const RunConfig& cfg) {
  fs::create_directories(dir);
  data::write_file_atomic(dir / "run_config.txt", cfg.to_text());
}

std::vector<std::string> class_names(const RunConfig& cfg) {
  const auto& names = cfg.format == "wisdm" ? data::wisdm_class_names() : data::own_class_names();
  if (static_cast<int>(names.size()) == cfg.model.n_classes) return names;
  return {};
}

void print_counts(const std::vector<data::Dataset>& sets, int n_classes) {
  std::printf("%-8s", "class");
  for (std::size_t k = 0; k < sets.size(); ++k) std::printf(" %9s", ("client" + std::to_string(k)).c_str());
  std::printf("\n");
  std::vector<std::vector<std::size_t>> counts;
  for (const auto& s : sets) counts.push_back(s.class_counts());
  for (int c = 0; c < n_classes; ++c) {
    std::printf("%-8d", c);
    for (const auto& cc : counts) std::printf(" %9zu", cc[static_cast<std::size_t>(c)]);
    std::printf("\n");
  }
}

void print_rounds(const fedcore::TrainingHistory& h) {
  std::printf("%-6s %10s %10s\n", "round", "test_acc", "test_loss");
  for (const auto& r : h.rounds)
    if (r.has_test) std::printf("%-6d %10.4f %10.4f\n", r.round, r.test_acc, r.test_loss);
}

void print_last_epochs(const fedcore::TrainingHistory& h, std::size_t n) {
  std::printf("%-6s %-6s %-6s %10s %10s %10s %10s\n", "round", "client", "epoch", "loss", "acc", "val_loss", "val_acc");
  const std::size_t start = h.epochs.size() > n ? h.epochs.size() - n : 0;
  for (std::size_t i = start; i < h.epochs.size(); ++i) {
    const auto& e = h.epochs[i];
    std::printf("%-6d %-6d %-6d %10.4f %10.4f", e.round, e.client, e.epoch, e.train_loss, e.train_acc);
    if (e.has_val) std::printf(" %10.4f %10.4f", e.val_loss, e.val_acc);
    std::printf("\n");
  }
}

data::Dataset load_windows(const fs::path& p, const RunConfig& cfg) {
  data::Dataset d = data::load_archive(p);
  if (d.n_classes != cfg.model.n_classes)
    throw ConfigError(p.string() + " has " + std::to_string(d.n_classes) + " classes but n_classes is " +
                      std::to_string(cfg.model.n_classes));
  return d;
}

transport::TlsConfig tls_config(const std::string& cert, const std::string& key, const std::string& ca, bool server) {
  transport::TlsConfig t;
  t.enabled = !cert.empty() || !ca.empty();
  t.cert = cert;
  t.key = key;
  t.ca = ca;
  t.require_peer_cert = server && !ca.empty();
  for (const auto& f : {cert, key, ca})
    if (!f.empty()) require_file(f);
  return t;
}

fednet::Logger stderr_logger() {
  return [](const std::string& s) { std::fprintf(stderr, "%s\n", s.c_str()); };
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"transformer HAR classifier with federated averaging"};
  app.require_subcommand(1);

  std::string stage;
  Common common;
  std::map<std::string, std::string> flags;
  auto flag = [&](CLI::App* cmd, const std::string& name, const std::string& key, const std::string& help) {
    cmd->add_option_function<std::string>(name, [&flags, key](const std::string& v) { flags[key] = v; }, help);
  };

  // preprocess
  std::string input, out;
  auto* pre = app.add_subcommand("preprocess", "raw recordings to a window archive and class manifest");
  pre->add_option("--input", input, "raw data file")->required();
  flag(pre, "--format", "format", "own or wisdm");
  pre->add_option("--out", out, "output archive (.tfw)")->required();
  flag(pre, "--window-rows", "W", "rows per window");
  flag(pre, "--frame-seconds", "frame_seconds", "seconds averaged into one row");
  flag(pre, "--stride", "stride", "rows between window starts (0: half a window)");
  flag(pre, "--sample-rate", "sample_rate", "raw sample rate in Hz (0: format default)");
  add_common(pre, common);

  // partition
  std::string windows, out_dir;
  auto* part = app.add_subcommand("partition", "non-IID client archives");
  part->add_option("--windows", windows, "window archive")->required();
  flag(part, "--clients", "clients", "number of clients K");
  flag(part, "--reduction", "reduction", "fraction removed from each client's reduced class");
  flag(part, "--mode", "mode", "replicate_reduce or disjoint_reduce");
  part->add_option("--out-dir", out_dir, "output directory")->required();
  bool force = false;
  part->add_flag("--force", force, "allow a reduction outside 0.40-0.50");
  add_common(part, common);

  // train
  std::string train_path, val_path, test_path;
  auto* train = app.add_subcommand("train", "centralized training");
  train->add_option("--train", train_path, "training archive")->required();
  train->add_option("--val", val_path, "validation archive (default: holdout of --train)");
  train->add_option("--out-dir", out_dir, "output directory")->required();
  flag(train, "--epochs", "epochs", "epochs");
  flag(train, "--batch", "batch", "batch size");
  flag(train, "--lr", "lr", "learning rate");
  add_common(train, common);

  // simulate
  std::vector<std::string> partitions;
  std::string partitions_dir;
  auto* sim = app.add_subcommand("simulate", "in-process federated averaging");
  sim->add_option("--partitions", partitions, "client archives in client order");
  sim->add_option("--partitions-dir", partitions_dir, "directory holding client_<k>.tfw");
  sim->add_option("--test", test_path, "test archive evaluated after each round");
  sim->add_option("--out-dir", out_dir, "output directory")->required();
  flag(sim, "--rounds", "rounds", "rounds r_total");
  flag(sim, "--epochs", "epochs", "local epochs per round");
  flag(sim, "--clients", "clients", "number of clients K");
  add_common(sim, common);

  // serve
  std::string tls_cert, tls_key, tls_ca;
  auto* serve = app.add_subcommand("serve", "aggregation server");
  flag(serve, "--host", "host", "bind address");
  flag(serve, "--port", "port", "port (default 7878 or $TRANSFED_PORT)");
  flag(serve, "--clients", "clients", "number of clients K");
  flag(serve, "--rounds", "rounds", "rounds r_total");
  flag(serve, "--handshake-timeout", "handshake_timeout", "seconds to wait for all HELLOs");
  serve->add_option("--test", test_path, "test archive evaluated after each round");
  serve->add_option("--out-dir", out_dir, "output directory")->required();
  add_common(serve, common);

  // client
  std::string data_path;
  int client_id = 0;
  auto* client = app.add_subcommand("client", "federated client worker");
  flag(client, "--host", "host", "server address");
  flag(client, "--port", "port", "server port (default 7878 or $TRANSFED_PORT)");
  client->add_option("--data", data_path, "local window archive")->required();
  client->add_option("--client-id", client_id, "client id in [0, K)")->required();
  flag(client, "--retries", "retries", "connection attempts");
  flag(client, "--retry-delay", "retry_delay", "seconds between attempts");
  add_common(client, common);

  for (auto* cmd : {serve, client}) {
    cmd->add_option("--tls-cert", tls_cert, "PEM certificate");
    cmd->add_option("--tls-key", tls_key, "PEM private key");
    cmd->add_option("--tls-ca", tls_ca, "PEM CA bundle used to verify the peer");
  }

  // eval
  std::string checkpoint, format = "text";
  auto* eval = app.add_subcommand("eval", "metrics report from a checkpoint and an archive");
  eval->add_option("--checkpoint", checkpoint, "parameter checkpoint (.tfp)")->required();
  eval->add_option("--windows", windows, "window archive")->required();
  eval->add_option("--out-dir", out_dir, "output directory")->required();
  eval->add_option("--report", format, "report format")->check(CLI::IsMember({"text", "csv"}));
  add_common(eval, common);

  CLI11_PARSE(app, argc, argv);
  stage = app.get_subcommands().front()->get_name();

  try {
    if (force) flags["force"] = "true";
    RunConfig cfg = resolve(common, flags);

    if (stage == "preprocess") {
      require_file(input);
      const auto series =
          cfg.format == "wisdm" ? data::load_wisdm(input, cfg.load) : data::load_own_csv(input, cfg.load);
      if (series.malformed_rows > 0)
        std::fprintf(stderr, "preprocess: skipped %zu malformed rows\n", series.malformed_rows);
      std::vector<std::string> warnings;
      const auto ds = data::make_windows(series, cfg.windowing, &warnings);
      for (const auto& w : warnings) std::fprintf(stderr, "preprocess: %s\n", w.c_str());
      const fs::path out_path(out);
      if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
      data::save_archive(out_path, ds);
      fs::path manifest = out_path;
      manifest.replace_extension(".manifest.csv");
      data::write_manifest(manifest, ds);
      cfg.model.n_classes = ds.n_classes;
      write_resolved(out_path.has_parent_path() ? out_path.parent_path() : fs::path("."), cfg);
      std::printf("%zu windows, %d classes -> %s\n", ds.size(), ds.n_classes, out.c_str());
      if (common.render == "text") print_counts({ds}, ds.n_classes);

    } else if (stage == "partition") {
      require_file(windows);
      const auto ds = data::load_archive(windows);
      cfg.partition.validate(ds.n_classes);
      const auto parts = data::partition_noniid(ds, cfg.partition);
      fs::create_directories(out_dir);
      for (std::size_t k = 0; k < parts.size(); ++k) {
        const fs::path base = fs::path(out_dir) / ("client_" + std::to_string(k));
        data::save_archive(base.string() + ".tfw", parts[k]);
        data::write_manifest(base.string() + ".manifest.csv", parts[k]);
      }
      write_resolved(out_dir, cfg);
      print_counts(parts, ds.n_classes);

    } else if (stage == "train") {
      require_file(train_path);
      const auto ds = load_windows(train_path, cfg);
      cfg.model.validate();
      fedcore::ClientData data;
      if (!val_path.empty()) {
        require_file(val_path);
        data = {ds, load_windows(val_path, cfg)};
      } else {
        // Same holdout a one-client simulation would use.
        data = fedcore::prepare_client(ds, cfg.rounds.val_fraction, fedcore::split_seed(cfg.seed, 0));
      }
      const auto result = fedcore::train_centralized(cfg.model, data.train, data.val, cfg.rounds.train_options(0, 1));
      fs::create_directories(out_dir);
      model::save_checkpoint(fs::path(out_dir) / "model.tfp", result.model.params());
      data::write_file_atomic(fs::path(out_dir) / "history.csv", result.history.epochs_csv());
      write_resolved(out_dir, cfg);
      if (common.render == "text") print_last_epochs(result.history, 10);

    } else if (stage == "simulate") {
      if (!partitions_dir.empty())
        for (int k = 0; k < cfg.rounds.clients; ++k)
          partitions.push_back((fs::path(partitions_dir) / ("client_" + std::to_string(k) + ".tfw")).string());
      if (partitions.empty()) throw ConfigError("simulate needs --partitions or --partitions-dir");
      std::vector<data::Dataset> sets;
      for (const auto& p : partitions) {
        require_file(p);
        sets.push_back(load_windows(p, cfg));
      }
      cfg.set("clients", std::to_string(sets.size()));
      data::Dataset test;
      if (!test_path.empty()) {
        require_file(test_path);
        test = load_windows(test_path, cfg);
      }
      const auto result = fedcore::run_simulation(cfg.model, cfg.rounds, sets, test);
      fs::create_directories(out_dir);
      for (std::size_t r = 0; r < result.round_params.size(); ++r)
        model::save_checkpoint(fs::path(out_dir) / ("round_" + std::to_string(r + 1) + ".tfp"), result.round_params[r]);
      model::save_checkpoint(fs::path(out_dir) / "model.tfp", result.global_params);
      data::write_file_atomic(fs::path(out_dir) / "history.csv", result.history.epochs_csv());
      data::write_file_atomic(fs::path(out_dir) / "rounds.csv", result.history.rounds_csv());
      write_resolved(out_dir, cfg);
      if (common.render == "text") print_rounds(result.history);

    } else if (stage == "serve") {
      data::Dataset test;
      if (!test_path.empty()) {
        require_file(test_path);
        test = load_windows(test_path, cfg);
      }
      fs::create_directories(out_dir);
      write_resolved(out_dir, cfg);
      fednet::Server server(cfg, tls_config(tls_cert, tls_key, tls_ca, true));
      server.set_logger(stderr_logger());
      std::fprintf(stderr, "listening on %s:%u\n", cfg.host.c_str(), server.port());
      const auto result = server.run(test, fs::path(out_dir) / "model.tfp");
      data::write_file_atomic(fs::path(out_dir) / "rounds.csv", result.history.rounds_csv());
      if (common.render == "text") print_rounds(result.history);

    } else if (stage == "client") {
      require_file(data_path);
      const auto local = data::load_archive(data_path);
      fednet::ClientOptions opt;
      opt.host = cfg.host;
      opt.port = cfg.port;
      opt.client_id = client_id;
      opt.tls = tls_config(tls_cert, tls_key, tls_ca, false);
      opt.retries = cfg.retries;
      opt.retry_delay = transport::Duration(static_cast<long>(cfg.retry_delay_s * 1000.0));
      opt.io_timeout = transport::Duration(static_cast<long>(cfg.io_timeout_s * 1000.0));
      opt.log = stderr_logger();
      return fednet::run_client(opt, local);

    } else if (stage == "eval") {
      require_file(checkpoint);
      require_file(windows);
      const auto ds = load_windows(windows, cfg);
      model::Model m(cfg.model, model::load_checkpoint(checkpoint, cfg.model));
      const auto ev = fedcore::evaluate(m, ds);
      const auto cm = metrics::confusion(ev.predictions, ds.labels(), cfg.model.n_classes);
      const auto mc = metrics::per_class(cm);
      const auto names = class_names(cfg);
      fs::create_directories(out_dir);
      data::write_file_atomic(fs::path(out_dir) / "report.txt",
                              metrics::render_report(cm, mc, metrics::ReportFormat::text, names));
      data::write_file_atomic(fs::path(out_dir) / "metrics.csv",
                              metrics::render_report(cm, mc, metrics::ReportFormat::csv, names));
      data::write_file_atomic(fs::path(out_dir) / "confusion.csv", metrics::confusion_csv(cm));
      write_resolved(out_dir, cfg);
      std::fputs(metrics::render_report(cm, mc, format == "csv" ? metrics::ReportFormat::csv : metrics::ReportFormat::text,
                                        names)
                     .c_str(),
                 stdout);
      if (common.render == "text") std::fputs(metrics::confusion_csv(cm).c_str(), stdout);
    }
  } catch (const data::FileNotFound& e) {
    std::fprintf(stderr, "transfed %s: %s\n", stage.c_str(), e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "transfed %s: %s\n", stage.c_str(), e.what());
    return 1;
  }
  return 0;
}
