#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "maso/config.hpp"
#include "maso/run.hpp"

namespace maso::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kDivergence = 3 };

struct TrainOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> iterations;
  std::optional<std::string> out;
};

inline RunConfig apply_overrides(RunConfig cfg, const TrainOverrides& o) {
  if (o.seed) cfg.seed = *o.seed;
  if (o.iterations) cfg.trainer.iterations = *o.iterations;
  if (o.out) cfg.run.out = *o.out;
  return cfg;
}

// Loads and validates a config, printing every violation.
inline std::optional<RunConfig> load_checked(const std::string& path, std::ostream& err) {
  RunConfig cfg;
  try {
    cfg = load_run_config(path);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return std::nullopt;
  }
  auto report = validate_run_config(cfg);
  if (!report.ok()) {
    err << "config error: " << report.violations.size() << " violation(s)\n" << report.to_string();
    return std::nullopt;
  }
  return cfg;
}

template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const DivergenceError& e) {
    err << "divergence: " << e.what() << '\n';
    return kDivergence;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

inline void print_eval(std::ostream& out, const EvalResult& e, bool looped) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s = %.6f", e.metric_name.c_str(), e.metric);
  out << buf;
  if (looped) {
    std::snprintf(buf, sizeof buf, "  used_turns = %.4f", e.used_turns);
    out << buf;
  }
  out << "  tasks = " << e.tasks << "  failed = " << e.failed << '\n';
}

inline int cmd_train(const std::string& config_path, const TrainOverrides& overrides, std::ostream& out,
                     std::ostream& err) {
  auto loaded = load_checked(config_path, err);
  if (!loaded) return kConfigError;
  const RunConfig cfg = apply_overrides(*loaded, overrides);
  return guarded(err, [&] {
    auto report = validate_run_config(cfg);
    if (!report.ok()) throw ConfigError(report.to_string());
    RunSummary s = train_loop(cfg);
    const bool looped = !cfg.workflow.loops.empty();
    out << "run " << cfg.run.out << " seed " << cfg.seed << " iterations " << s.iterations << '\n';
    out << "baseline: ";
    print_eval(out, s.baseline, looped);
    out << "best (iteration " << s.best.iteration << "): ";
    print_eval(out, s.best, looped);
    out << "final: ";
    print_eval(out, s.final, looped);
    return kOk;
  });
}

inline int cmd_eval(const std::string& config_path, const std::string& ckpt_dir, std::ostream& out,
                    std::ostream& err) {
  auto cfg = load_checked(config_path, err);
  if (!cfg) return kConfigError;
  return guarded(err, [&] {
    Runner runner(*cfg);
    load_checkpoints(ckpt_dir, runner.workers());
    EvalResult e = runner.evaluate(0);
    print_eval(out, e, !cfg->workflow.loops.empty());
    return kOk;
  });
}

// Renders one trajectory from a log and re-checks each step's reward total
// against its weighted components. Returns kFailure when a check fails.
inline int cmd_inspect(const std::string& log_path, const std::string& id, std::ostream& out, std::ostream& err) {
  std::ifstream in(log_path);
  if (!in) {
    err << "error: cannot open log '" << log_path << "'\n";
    return kFailure;
  }
  std::vector<nlohmann::json> steps;
  std::optional<nlohmann::json> fin;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      err << "error: malformed log line " << lineno << '\n';
      return kFailure;
    }
    if (!j.contains("traj") || j["traj"] != id) continue;
    if (j.value("final", false)) {
      fin = j;
    } else {
      steps.push_back(std::move(j));
    }
  }
  if (steps.empty() && !fin) {
    err << "error: unknown trajectory id '" << id << "'\n";
    return kFailure;
  }

  int mismatches = 0;
  char buf[256];
  out << "trajectory " << id << '\n';
  for (const auto& s : steps) {
    const std::string role = s.value("role", "");
    const bool tool = s.value("kind", "agent") == "tool";
    std::snprintf(buf, sizeof buf, "  t=%-3d %-12s %-8s turn=%d  ", s.value("t", 0), role.c_str(),
                  tool ? "[tool]" : ("[" + s.value("model", "") + "]").c_str(), s.value("turn", 0));
    out << buf;
    if (tool) {
      if (s.contains("score")) {
        std::snprintf(buf, sizeof buf, "verifier s=%.4f", s["score"].get<double>());
        out << buf;
      } else {
        out << "tool call";
      }
    } else {
      out << '"' << s.value("text", "") << '"';
      if (!s.value("format_ok", true)) out << "  (malformed)";
    }
    if (s.contains("parents") && !s["parents"].empty()) out << "  parents=" << s["parents"].dump();
    out << '\n';
    if (s.contains("reward")) {
      const auto& r = s["reward"];
      const auto& w = s["lambda"];
      const double n = r.value("node", 0.0), t = r.value("turn", 0.0), j = r.value("traj", 0.0);
      const double total = r.value("total", 0.0);
      const double expect = w[0].get<double>() * n + w[1].get<double>() * t + w[2].get<double>() * j;
      std::snprintf(buf, sizeof buf, "         reward node=%+.4f turn=%+.4f traj=%+.4f total=%+.4f", n, t, j, total);
      out << buf;
      if (std::abs(expect - total) > 1e-9 * std::max(1.0, std::abs(expect))) {
        std::snprintf(buf, sizeof buf, "  !! arithmetic mismatch: weighted sum %.6f", expect);
        out << buf;
        ++mismatches;
      }
      out << '\n';
    }
  }
  if (fin) {
    const auto& f = *fin;
    if (!f.value("answer", "").empty()) out << "  answer: " << f.value("answer", "") << '\n';
    if (!f.value("program", "").empty()) out << "  program: " << f.value("program", "") << '\n';
    if (f.contains("scores") && !f["scores"].empty()) {
      out << "  verifier rounds:";
      for (std::size_t i = 0; i < f["scores"].size(); ++i) {
        std::snprintf(buf, sizeof buf, " s_%zu=%.4f", i, f["scores"][i].get<double>());
        out << buf;
      }
      out << '\n';
    }
    out << "  used_turns=" << f.value("used_turns", 0) << " done=" << f.value("done", false)
        << " failed=" << f.value("failed", false) << '\n';
  }
  if (mismatches) {
    out << "reward arithmetic: " << mismatches << " mismatch(es)\n";
    return kFailure;
  }
  out << "reward arithmetic: ok\n";
  return kOk;
}

// Writes the run's metrics as plain CSV (comment header dropped).
inline int cmd_export_metrics(const std::string& run_dir, const std::string& format, std::ostream& out,
                              std::ostream& err) {
  if (format != "csv") {
    err << "config error: unsupported format '" << format << "'\n";
    return kConfigError;
  }
  std::ifstream in(std::filesystem::path(run_dir) / "metrics.csv");
  if (!in) {
    err << "error: no metrics.csv in " << run_dir << '\n';
    return kFailure;
  }
  std::string line;
  while (std::getline(in, line))
    if (!line.starts_with("#")) out << line << '\n';
  return kOk;
}

// Writes the environment's knowledge base or code tasks as text.
inline int cmd_export_dataset(const std::string& config_path, std::ostream& out, std::ostream& err) {
  auto cfg = load_checked(config_path, err);
  if (!cfg) return kConfigError;
  return guarded(err, [&] {
    make_environment(*cfg)->export_dataset(out);
    return kOk;
  });
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"maso: multi-agent workflow optimization"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  std::string config, ckpt, log, id, run_dir, format = "csv";
  TrainOverrides ov;
  std::uint64_t seed = 0;
  int iterations = 0;
  std::string out_dir;

  auto* train = app.add_subcommand("train", "train the mapped models of a run config");
  train->add_option("--config", config, "run config file")->required();
  auto* seed_opt = train->add_option("--seed", seed, "run seed override");
  auto* iter_opt = train->add_option("--iterations", iterations, "iteration count override");
  auto* out_opt = train->add_option("--out", out_dir, "output directory override");

  auto* eval = app.add_subcommand("eval", "greedy evaluation of checkpoints on the held-out split");
  eval->add_option("--config", config, "run config file")->required();
  eval->add_option("--ckpt", ckpt, "checkpoint directory")->required();

  auto* inspect = app.add_subcommand("inspect", "render one trajectory from a log");
  inspect->add_option("--log", log, "trajectory log")->required();
  inspect->add_option("--id", id, "trajectory id")->required();

  auto* exportm = app.add_subcommand("export-metrics", "print a run's metrics");
  exportm->add_option("--run", run_dir, "run output directory")->required();
  exportm->add_option("--format", format, "output format (csv)");

  auto* exportd = app.add_subcommand("export-dataset", "print the generated tasks of a run config");
  exportd->add_option("--config", config, "run config file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }

  if (*train) {
    if (*seed_opt) ov.seed = seed;
    if (*iter_opt) ov.iterations = iterations;
    if (*out_opt) ov.out = out_dir;
    return cmd_train(config, ov, out, err);
  }
  if (*eval) return cmd_eval(config, ckpt, out, err);
  if (*inspect) return cmd_inspect(log, id, out, err);
  if (*exportd) return cmd_export_dataset(config, out, err);
  return cmd_export_metrics(run_dir, format, out, err);
}

}  // namespace maso::cli
