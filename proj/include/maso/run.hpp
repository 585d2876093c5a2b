#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "maso/buffers.hpp"
#include "maso/config.hpp"
#include "maso/controller.hpp"
#include "maso/envs.hpp"
#include "maso/rewards.hpp"
#include "maso/trainer.hpp"

namespace maso {

struct EvalResult {
  int iteration = 0;
  std::string metric_name;  // eval_f1 or eval_all_passed
  double metric = 0.0;
  double used_turns = 0.0;  // mean, 0 for loop-free workflows
  std::size_t tasks = 0;
  std::size_t failed = 0;
  bool operator==(const EvalResult&) const = default;
};

struct IterationReport {
  int iteration = 0;
  std::vector<UpdateMetrics> updates;
  std::vector<ModelId> skipped;  // models without enough fragments
  std::size_t trajectories = 0;
  std::size_t failed = 0;
  std::size_t fragments = 0;
  std::optional<EvalResult> eval;
};

struct RunSummary {
  std::uint64_t seed = 0;
  int iterations = 0;
  std::string metric_name;
  EvalResult baseline;
  EvalResult best;
  EvalResult final;
  std::vector<EvalResult> evals;
  double max_first_ratio_dev = 0.0;  // over every update of the run
  std::size_t updates = 0;
};

struct TrainOptions {
  bool write_outputs = true;
  std::function<void(const IterationReport&)> on_iteration;
};

// A configured run: environment, worker groups, and the task schedule.
class Runner {
 public:
  explicit Runner(RunConfig cfg) : cfg_(std::move(cfg)) {
    auto report = validate_run_config(cfg_);
    if (!report.ok()) throw ConfigError("invalid run config:\n" + report.to_string());
    env_ = make_environment(cfg_);
    const FeatureSpec spec = feature_spec_for(cfg_, *env_);
    for (const auto& m : cfg_.models) workers_.add(m, spec, trainer_for(cfg_, m), cfg_.run.buffer_capacity);
  }

  const RunConfig& config() const { return cfg_; }
  const Environment& env() const { return *env_; }
  WorkerPool& workers() { return workers_; }

  bool code_family() const { return cfg_.env.kind == EnvKind::kCode; }
  std::string metric_name() const { return code_family() ? "eval_all_passed" : "eval_f1"; }

  // Trajectory slots of one training iteration. The task order is a seeded
  // permutation of the train split, re-drawn every pass through it.
  std::vector<RolloutTask> schedule(int iteration) const {
    const std::size_t n = env_->size(Split::kTrain);
    std::vector<RolloutTask> out;
    for (std::size_t j = 0; j < cfg_.trainer.rollout_size; ++j) {
      const std::size_t g = static_cast<std::size_t>(iteration - 1) * cfg_.trainer.rollout_size + j;
      const std::size_t pass = g / n;
      if (pass != cached_pass_ || perm_.empty()) {
        perm_ = Rng(mix_seed({cfg_.seed, 0x7a5c, pass})).permutation(n);
        cached_pass_ = pass;
      }
      out.push_back({TaskRef{Split::kTrain, perm_[g % n]},
                     TrajectoryId{cfg_.seed, static_cast<std::uint64_t>(iteration), j, false}});
    }
    return out;
  }

  // Greedy decoding on the held-out split. QA reports mean final-answer F1; the
  // code family reports the fraction of tasks whose last verification passed.
  EvalResult evaluate(int iteration, std::vector<TrajectoryRecord>* records = nullptr) {
    std::vector<RolloutTask> tasks;
    for (std::size_t i = 0; i < env_->size(Split::kEval); ++i)
      tasks.push_back({TaskRef{Split::kEval, i}, TrajectoryId{cfg_.seed, static_cast<std::uint64_t>(iteration), i, true}});
    auto recs = run_rollout(tasks, cfg_.workflow, cfg_.mapping, workers_, *env_, cfg_.run.concurrency,
                            ExecutionOptions{Decoding::kGreedy, false});
    EvalResult r;
    r.iteration = iteration;
    r.metric_name = metric_name();
    r.tasks = recs.size();
    double turns = 0.0;
    for (const auto& rec : recs) {
      if (rec.failed) {
        ++r.failed;
        continue;
      }
      if (code_family()) {
        r.metric += !rec.verifier_scores.empty() && rec.verifier_scores.back() >= 1.0 ? 1.0 : 0.0;
      } else {
        r.metric += answer_f1(rec.candidate_answer, env_->gold(rec.task), env_->vocab());
      }
      turns += rec.used_turns;
    }
    if (r.tasks) {
      r.metric /= static_cast<double>(r.tasks);
      r.used_turns = turns / static_cast<double>(r.tasks);
    }
    if (records) *records = std::move(recs);
    return r;
  }

  // One rollout/assemble/batch/update/sync iteration.
  IterationReport iterate(int iteration, std::vector<TrajectoryRecord>* records = nullptr) {
    IterationReport rep;
    rep.iteration = iteration;
    auto recs = run_rollout(schedule(iteration), cfg_.workflow, cfg_.mapping, workers_, *env_, cfg_.run.concurrency);
    rep.trajectories = recs.size();
    for (auto& rec : recs) {
      if (rec.failed) {
        ++rep.failed;
        for (const auto& m : workers_.ids()) workers_.at(m).discard(rec.id);
        continue;
      }
      rep.fragments += assemble_and_commit(rec, cfg_.rewards, cfg_.workflow, workers_, cfg_.mapping, *env_);
    }
    for (const auto& m : workers_.ids()) {
      WorkerGroup& w = workers_.at(m);
      std::size_t usable = 0;
      for (const auto& f : w.buffer.snapshot()) usable += f.complete && !f.trajectory_failed;
      if (usable == 0 || usable < cfg_.run.min_fragments) {
        // Stale fragments are not carried into the next iteration.
        w.buffer.clear();
        rep.skipped.push_back(m);
        continue;
      }
      const std::uint64_t seed = mix_seed({cfg_.seed, static_cast<std::uint64_t>(iteration), digest_of(m)});
      ReadyBatch batch = build_ready_batch(w.buffer, cfg_.run.min_fragments, seed);
      rep.updates.push_back(update(w.model, batch, w.config, mix_seed({seed, 1})));
      w.model.sync();
    }
    if (records) *records = std::move(recs);
    return rep;
  }

  static std::uint64_t digest_of(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return h;
  }

 private:
  RunConfig cfg_;
  std::unique_ptr<Environment> env_;
  WorkerPool workers_;
  mutable std::vector<std::size_t> perm_;
  mutable std::size_t cached_pass_ = 0;
};

namespace detail {

inline std::string csv_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

inline void write_checkpoints(const std::filesystem::path& dir, WorkerPool& workers) {
  std::filesystem::create_directories(dir);
  for (const auto& m : workers.ids()) {
    std::ofstream out(dir / (m + ".ckpt"));
    write_checkpoint(out, workers.at(m).model);
    if (!out) throw Error("cannot write checkpoint in " + dir.string());
  }
}

inline nlohmann::json eval_json(const EvalResult& e) {
  return {{"iteration", e.iteration}, {"metric", e.metric}, {"used_turns", e.used_turns},
          {"tasks", e.tasks}, {"failed", e.failed}};
}

}  // namespace detail

// Loads `<dir>/<model>.ckpt` for every declared model.
inline void load_checkpoints(const std::filesystem::path& dir, WorkerPool& workers) {
  for (const auto& m : workers.ids()) {
    std::ifstream in(dir / (m + ".ckpt"));
    if (!in) throw ConfigError("missing checkpoint for model '" + m + "' in " + dir.string());
    read_checkpoint(in, workers.at(m).model);
  }
}

// Iteration 0 is the untrained evaluation; iterations 1..N train. Outputs go to
// cfg.run.out: metrics.csv, trajectories.log, ckpt/, summary.json, resolved.cfg.
inline RunSummary train_loop(const RunConfig& cfg, const TrainOptions& opts = {}) {
  Runner runner(cfg);
  namespace fs = std::filesystem;
  const fs::path out_dir = cfg.run.out;
  const auto agent_roles = cfg.workflow.agent_roles();
  const std::string seed_line = "# maso " + std::string(kVersion) + " seed=" + std::to_string(cfg.seed);

  std::ofstream metrics, log;
  if (opts.write_outputs) {
    fs::create_directories(out_dir);
    std::ofstream resolved(out_dir / "resolved.cfg");
    resolved << seed_line << '\n' << serialize_run_config(cfg);
    metrics.open(out_dir / "metrics.csv");
    metrics << seed_line << '\n' << "iteration,model_id,policy_loss,value_loss,clip_fraction,approx_kl,entropy";
    for (const auto& r : agent_roles) metrics << ",reward_" << r;
    metrics << ',' << runner.metric_name() << ",eval_used_turns\n";
    log.open(out_dir / "trajectories.log");
    write_log_header(log, cfg.seed);
  }

  auto write_rows = [&](int iteration, const std::vector<UpdateMetrics>& ups, const std::optional<EvalResult>& ev) {
    if (!opts.write_outputs) return;
    auto eval_cols = [&] {
      return ev ? "," + detail::csv_double(ev->metric) + "," + detail::csv_double(ev->used_turns) : std::string(",,");
    };
    for (const auto& m : cfg.models) {
      metrics << iteration << ',' << m;
      const UpdateMetrics* u = nullptr;
      for (const auto& x : ups)
        if (x.model == m) u = &x;
      if (u) {
        metrics << ',' << detail::csv_double(u->policy_loss) << ',' << detail::csv_double(u->value_loss) << ','
                << detail::csv_double(u->clip_fraction) << ',' << detail::csv_double(u->approx_kl) << ','
                << detail::csv_double(u->entropy);
      } else {
        metrics << ",,,,,";
      }
      for (const auto& r : agent_roles) {
        metrics << ',';
        if (u)
          if (auto it = u->role_reward.find(r); it != u->role_reward.end()) metrics << detail::csv_double(it->second);
      }
      metrics << eval_cols() << '\n';
    }
  };

  RunSummary summary;
  summary.seed = cfg.seed;
  summary.iterations = cfg.trainer.iterations;
  summary.metric_name = runner.metric_name();

  EvalResult baseline = runner.evaluate(0);
  summary.baseline = summary.best = summary.final = baseline;
  summary.evals.push_back(baseline);
  write_rows(0, {}, baseline);
  if (opts.write_outputs) {
    detail::write_checkpoints(out_dir / "ckpt" / "iter_000000", runner.workers());
    detail::write_checkpoints(out_dir / "ckpt" / "best", runner.workers());
  }
  if (opts.on_iteration) {
    IterationReport r;
    r.eval = baseline;
    opts.on_iteration(r);
  }

  const int n = cfg.trainer.iterations;
  for (int it = 1; it <= n; ++it) {
    std::vector<TrajectoryRecord> recs;
    const bool log_now = opts.write_outputs && cfg.run.log_every > 0 && it % cfg.run.log_every == 0;
    IterationReport rep = runner.iterate(it, log_now ? &recs : nullptr);
    for (const auto& u : rep.updates) {
      summary.max_first_ratio_dev = std::max(summary.max_first_ratio_dev, u.first_minibatch_max_ratio_dev);
      ++summary.updates;
    }
    if (log_now)
      for (const auto& r : recs) write_trajectory(log, r, runner.env().vocab());
    const bool eval_now = it == n || (cfg.run.eval_every > 0 && it % cfg.run.eval_every == 0);
    if (eval_now) {
      rep.eval = runner.evaluate(it);
      summary.evals.push_back(*rep.eval);
      summary.final = *rep.eval;
      if (rep.eval->metric > summary.best.metric) {
        summary.best = *rep.eval;
        if (opts.write_outputs) detail::write_checkpoints(out_dir / "ckpt" / "best", runner.workers());
      }
    }
    write_rows(it, rep.updates, rep.eval);
    if (opts.write_outputs && cfg.run.checkpoint_every > 0 && it % cfg.run.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "iter_%06d", it);
      detail::write_checkpoints(out_dir / "ckpt" / name, runner.workers());
    }
    if (opts.on_iteration) opts.on_iteration(rep);
  }

  if (opts.write_outputs) {
    detail::write_checkpoints(out_dir / "ckpt" / "final", runner.workers());
    nlohmann::json s;
    s["maso"] = std::string(kVersion);
    s["seed"] = cfg.seed;
    s["iterations"] = n;
    s["metric"] = summary.metric_name;
    s["baseline"] = detail::eval_json(summary.baseline);
    s["best"] = detail::eval_json(summary.best);
    s["final"] = detail::eval_json(summary.final);
    s["updates"] = summary.updates;
    s["max_first_ratio_dev"] = summary.max_first_ratio_dev;
    std::ofstream(out_dir / "summary.json") << s.dump(2) << '\n';
  }
  return summary;
}

}  // namespace maso
