#pragma once

// Experiment configuration: one JSON document with dataset, model, training
// and output sections. Unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "bench.hpp"
#include "train.hpp"

namespace lpvlfr {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct DatasetSection {
  std::string benchmark;  // "nl-msd", or empty when CSV paths are given
  std::uint64_t seed = 1;
  std::optional<double> noise_variance;
  std::optional<double> snr_db;
  std::filesystem::path train, val, test;

  bool uses_benchmark() const noexcept { return !benchmark.empty(); }
};

struct OutputSection {
  std::filesystem::path dir;  // empty: resolved by the caller
  bool emit_plot_data = false;
};

struct ExperimentConfig {
  DatasetSection dataset;
  TrainConfig training;
  OutputSection output;

  void validate() const {
    if (dataset.uses_benchmark()) {
      if (dataset.benchmark != "nl-msd") throw ConfigError("unknown benchmark '" + dataset.benchmark + "'");
      if (dataset.noise_variance && dataset.snr_db)
        throw ConfigError("dataset: give at most one of noise_variance and snr_db");
    } else {
      if (dataset.train.empty() || dataset.val.empty())
        throw ConfigError("dataset: need either 'benchmark' or both 'train' and 'val' paths");
      for (const auto* p : {&dataset.train, &dataset.val, &dataset.test})
        if (!p->empty() && !std::filesystem::exists(*p)) throw ConfigError("dataset file not found: " + p->string());
    }
    try {
      training.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items())
    if (!ok.count(k)) throw ConfigError("config: unknown key '" + where + "." + k + "'");
}

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config: '" + where + "." + key + "' has the wrong type");
  }
}

inline MsdProtocol msd_protocol(const DatasetSection& ds) {
  MsdProtocol proto;
  if (ds.noise_variance) proto.noise = NoiseSpec::variance(*ds.noise_variance);
  if (ds.snr_db) proto.noise = NoiseSpec::snr(*ds.snr_db);
  return proto;
}

}  // namespace detail

/// Parses a config document. Relative dataset paths resolve against `base`.
inline ExperimentConfig parse_experiment(const nlohmann::json& doc, const std::filesystem::path& base = {}) {
  using detail::read_opt;
  ExperimentConfig cfg;
  detail::check_keys(doc, "", {"dataset", "model", "training", "output"});
  if (doc.contains("dataset")) {
    const auto& d = doc["dataset"];
    detail::check_keys(d, "dataset", {"benchmark", "seed", "noise_variance", "snr_db", "train", "val", "test"});
    read_opt(d, "benchmark", cfg.dataset.benchmark, "dataset");
    read_opt(d, "seed", cfg.dataset.seed, "dataset");
    double v = 0.0;
    if (d.contains("noise_variance")) {
      read_opt(d, "noise_variance", v, "dataset");
      cfg.dataset.noise_variance = v;
    }
    if (d.contains("snr_db")) {
      read_opt(d, "snr_db", v, "dataset");
      cfg.dataset.snr_db = v;
    }
    for (auto [key, slot] : {std::pair{"train", &cfg.dataset.train}, std::pair{"val", &cfg.dataset.val},
                             std::pair{"test", &cfg.dataset.test}}) {
      std::string s;
      read_opt(d, key, s, "dataset");
      if (!s.empty()) *slot = std::filesystem::path(s).is_absolute() ? std::filesystem::path(s) : base / s;
    }
  }
  TrainConfig& t = cfg.training;
  if (doc.contains("model")) {
    const auto& m = doc["model"];
    detail::check_keys(m, "model", {"mode", "n_x", "n_p", "eta", "hidden", "epsilon", "scheduling"});
    std::string mode = to_string(t.mode), sched = to_string(t.scheduling);
    read_opt(m, "mode", mode, "model");
    try {
      t.mode = parse_dependency(mode);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    read_opt(m, "scheduling", sched, "model");
    if (sched != "network" && sched != "exogenous") throw ConfigError("model.scheduling must be network|exogenous");
    t.scheduling = sched == "network" ? SchedulingKind::network : SchedulingKind::exogenous;
    read_opt(m, "n_x", t.n_x, "model");
    read_opt(m, "hidden", t.hidden, "model");
    read_opt(m, "epsilon", t.epsilon, "model");
    const bool has_eta = m.contains("eta");
    read_opt(m, "eta", t.eta, "model");
    if (m.contains("n_p")) {
      std::size_t np = 0;
      read_opt(m, "n_p", np, "model");
      if (!has_eta) t.eta.assign(np, 1);
      if (t.eta.size() != np) throw ConfigError("model: eta length must equal n_p");
    }
  }
  if (doc.contains("training")) {
    const auto& tr = doc["training"];
    detail::check_keys(tr, "training",
                       {"adam_epochs", "lbfgs_epochs", "adam_step", "adam_betas", "adam_eps", "lbfgs_memory",
                        "reg_rho", "restarts", "seed", "normalize_data", "jobs"});
    read_opt(tr, "adam_epochs", t.adam_epochs, "training");
    read_opt(tr, "lbfgs_epochs", t.lbfgs_epochs, "training");
    read_opt(tr, "adam_step", t.adam_step, "training");
    if (tr.contains("adam_betas")) {
      std::vector<double> b;
      read_opt(tr, "adam_betas", b, "training");
      if (b.size() != 2) throw ConfigError("training.adam_betas must have two entries");
      t.adam_beta1 = b[0];
      t.adam_beta2 = b[1];
    }
    read_opt(tr, "adam_eps", t.adam_eps, "training");
    read_opt(tr, "lbfgs_memory", t.lbfgs_memory, "training");
    read_opt(tr, "reg_rho", t.reg_rho, "training");
    read_opt(tr, "restarts", t.restarts, "training");
    read_opt(tr, "seed", t.seed, "training");
    read_opt(tr, "normalize_data", t.normalize_data, "training");
    read_opt(tr, "jobs", t.jobs, "training");
  }
  if (doc.contains("output")) {
    const auto& o = doc["output"];
    detail::check_keys(o, "output", {"dir", "emit_plot_data"});
    std::string dir;
    read_opt(o, "dir", dir, "output");
    if (!dir.empty()) cfg.output.dir = dir;
    read_opt(o, "emit_plot_data", cfg.output.emit_plot_data, "output");
  }
  return cfg;
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  }
  return parse_experiment(doc, path.parent_path());
}

/// Echo of the effective configuration.
inline nlohmann::ordered_json to_json(const ExperimentConfig& cfg) {
  nlohmann::ordered_json j;
  const auto& d = cfg.dataset;
  if (d.uses_benchmark()) {
    j["dataset"] = {{"benchmark", d.benchmark}, {"seed", d.seed}};
    if (d.noise_variance) j["dataset"]["noise_variance"] = *d.noise_variance;
    if (d.snr_db) j["dataset"]["snr_db"] = *d.snr_db;
  } else {
    j["dataset"] = {{"train", d.train.string()}, {"val", d.val.string()}};
    if (!d.test.empty()) j["dataset"]["test"] = d.test.string();
  }
  const auto& t = cfg.training;
  j["model"] = {{"mode", to_string(t.mode)}, {"n_x", t.n_x},        {"n_p", t.eta.size()},
                {"eta", t.eta},              {"hidden", t.hidden},  {"epsilon", t.epsilon},
                {"scheduling", to_string(t.scheduling)}};
  j["training"] = {{"adam_epochs", t.adam_epochs},
                   {"lbfgs_epochs", t.lbfgs_epochs},
                   {"adam_step", t.adam_step},
                   {"adam_betas", {t.adam_beta1, t.adam_beta2}},
                   {"adam_eps", t.adam_eps},
                   {"lbfgs_memory", t.lbfgs_memory},
                   {"reg_rho", t.reg_rho},
                   {"restarts", t.restarts},
                   {"seed", t.seed},
                   {"normalize_data", t.normalize_data},
                   {"jobs", t.jobs}};
  j["output"] = {{"dir", cfg.output.dir.string()}, {"emit_plot_data", cfg.output.emit_plot_data}};
  return j;
}

struct ExperimentData {
  Dataset train, val;
  std::optional<Dataset> test;
};

inline Dataset generate_split(const DatasetSection& ds, Split split) {
  return generate_msd_dataset(split, ds.seed, detail::msd_protocol(ds));
}

inline ExperimentData load_data(const ExperimentConfig& cfg) {
  const auto& d = cfg.dataset;
  ExperimentData out;
  if (d.uses_benchmark()) {
    out.train = generate_split(d, Split::train);
    out.val = generate_split(d, Split::val);
    out.test = generate_split(d, Split::test);
    return out;
  }
  out.train = read_dataset(d.train);
  const ChannelCounts cc{out.train.n_u(), out.train.n_d(), out.train.n_y()};
  out.val = read_dataset(d.val, cc);
  if (!d.test.empty()) out.test = read_dataset(d.test, cc);
  return out;
}

}  // namespace lpvlfr
