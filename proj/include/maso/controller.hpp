#pragma once

#include <atomic>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "maso/buffers.hpp"
#include "maso/common.hpp"
#include "maso/envs.hpp"
#include "maso/formats.hpp"
#include "maso/policy.hpp"
#include "maso/rewards.hpp"
#include "maso/rng.hpp"
#include "maso/trainer.hpp"
#include "maso/trajectory.hpp"
#include "maso/workflow.hpp"

namespace maso {

// Generation tensors of one agent step, held by the serving worker group until
// the trajectory is assembled.
struct StagedStep {
  RoleId role;
  Tokens observation;
  Tokens output;
  std::vector<double> logprobs;
  std::vector<double> values;
};

class WorkerGroup {
 public:
  WorkerGroup(ModelId id, FeatureSpec spec, TrainerConfig config,
              std::size_t capacity = kDefaultBufferCapacity)
      : model(id, std::move(spec)), buffer(id, capacity), config(config) {}

  ModelInstance model;
  ModelBuffer buffer;
  TrainerConfig config;

  const ModelId& id() const { return model.id(); }

  void stage(const TrajectoryId& traj, std::size_t step, StagedStep s) {
    std::lock_guard lock(mu_);
    if (!staging_.emplace(std::pair{traj, step}, std::move(s)).second)
      throw ContractError("step " + traj.str() + "/" + std::to_string(step) + " staged twice");
  }

  std::optional<StagedStep> take(const TrajectoryId& traj, std::size_t step) {
    std::lock_guard lock(mu_);
    auto it = staging_.find({traj, step});
    if (it == staging_.end()) return std::nullopt;
    StagedStep s = std::move(it->second);
    staging_.erase(it);
    return s;
  }

  // Drops every staged step of `traj`; returns how many were dropped.
  std::size_t discard(const TrajectoryId& traj) {
    std::lock_guard lock(mu_);
    std::size_t n = 0;
    for (auto it = staging_.begin(); it != staging_.end();) {
      if (it->first.first == traj) {
        it = staging_.erase(it);
        ++n;
      } else {
        ++it;
      }
    }
    return n;
  }

  std::size_t staged() const {
    std::lock_guard lock(mu_);
    return staging_.size();
  }

 private:
  std::map<std::pair<TrajectoryId, std::size_t>, StagedStep> staging_;
  mutable std::mutex mu_;
};

// Exactly one worker group per model id.
class WorkerPool {
 public:
  WorkerGroup& add(ModelId id, FeatureSpec spec, TrainerConfig config,
                   std::size_t capacity = kDefaultBufferCapacity) {
    if (groups_.contains(id)) throw ConfigError("model '" + id + "' declared twice");
    auto g = std::make_unique<WorkerGroup>(id, std::move(spec), config, capacity);
    auto& ref = *g;
    groups_.emplace(std::move(id), std::move(g));
    return ref;
  }

  WorkerGroup& at(const ModelId& id) {
    auto it = groups_.find(id);
    if (it == groups_.end()) throw RoutingError("no worker group serves model '" + id + "'");
    return *it->second;
  }
  const WorkerGroup& at(const ModelId& id) const { return const_cast<WorkerPool*>(this)->at(id); }

  bool contains(const ModelId& id) const { return groups_.contains(id); }
  std::size_t size() const { return groups_.size(); }

  std::vector<ModelId> ids() const {
    std::vector<ModelId> out;
    for (const auto& [id, g] : groups_) out.push_back(id);
    return out;
  }

  std::vector<const ModelBuffer*> buffers() const {
    std::vector<const ModelBuffer*> out;
    for (const auto& [id, g] : groups_) out.push_back(&g->buffer);
    return out;
  }

 private:
  std::map<ModelId, std::unique_ptr<WorkerGroup>> groups_;
};

struct ExecutionOptions {
  Decoding decoding = Decoding::kSample;
  bool stage = true;  // keep generation tensors for training
};

inline std::uint64_t invocation_seed(const TrajectoryId& id, std::size_t step) {
  return mix_seed({id.run_seed, id.epoch, id.task, id.eval ? 1u : 0u, step});
}

namespace detail {

inline int turn_before(const WorkflowGraph& graph, const WorkflowState& state, const RoleId& role) {
  const auto* loop = graph.loop_of(role);
  if (!loop) return 0;
  const auto& lc = state.control.loops.at(loop->id);
  return lc.status == LoopStatus::kPending ? 1 : lc.turn;
}

}  // namespace detail

// Walks the graph until done. Roles ready together are rendered from the same
// state and applied in declaration order.
inline TrajectoryRecord run_trajectory(TaskRef task, const TrajectoryId& id, const WorkflowGraph& graph,
                                       const AgentModelMapping& mapping, WorkerPool& workers,
                                       const Environment& env, const ExecutionOptions& opts = {}) {
  TrajectoryRecord rec;
  rec.id = id;
  rec.task = task;
  const Vocabulary& vocab = env.vocab();
  WorkflowState state = make_state(graph, env.task_input(task));
  std::map<RoleId, std::size_t> last_step;
  std::size_t guard = 4 * graph.roles.size() + 8;
  for (const auto& l : graph.loops) guard += 2 * l.body.size() * static_cast<std::size_t>(l.max_turns);

  auto fail = [&](const std::string& why) {
    rec.failed = true;
    rec.failure = why;
    for (const auto& mid : workers.ids()) workers.at(mid).discard(id);
  };

  try {
    while (!state.control.done) {
      if (rec.steps.size() > guard) throw ContractError("workflow exceeded its step bound");
      const std::vector<RoleId> ready = frontier(graph, state);
      if (ready.empty()) throw ConfigError("deadlocked workflow graph: empty frontier before done");

      struct Pending {
        StepRecord step;
        ToolResult tools;
        std::optional<StagedStep> staged;
      };
      std::vector<Pending> pending;
      const std::size_t base = rec.steps.size();
      for (std::size_t i = 0; i < ready.size(); ++i) {
        const RoleSpec& spec = graph.role(ready[i]);
        Pending p;
        StepRecord& s = p.step;
        s.t = base + i + 1;
        s.role = spec.id;
        s.kind = spec.kind;
        s.turn = detail::turn_before(graph, state, spec.id);
        s.observation = render_observation(spec, state, vocab);
        s.observation_digest = digest(s.observation);
        if (spec.is_agent()) {
          s.model = route(mapping, spec.id);
          WorkerGroup& w = workers.at(s.model);
          PolicyOutput out;
          {
            auto lease = w.model.lease();
            Rng rng(invocation_seed(id, s.t));
            out = sample(w.model, s.observation, spec.id, rng, spec.max_output_tokens, opts.decoding);
          }
          s.output = out.tokens;
          s.format_ok = format_valid(spec, s.output, FormatContext{vocab, state.scratchpad});
          s.end_only = content_of(s.output).empty() && terminated(s.output);
          if (opts.stage)
            p.staged = StagedStep{spec.id, s.observation, out.tokens, std::move(out.logprobs),
                                  std::move(out.values)};
        } else {
          for (const auto& tool : spec.tool_refs) {
            ToolResult r = env.run_tool(tool, spec, state, task);
            for (auto& [k, v] : r.set) p.tools.set[k] = std::move(v);
            for (auto& [k, v] : r.append) p.tools.append[k] = std::move(v);
            if (r.score) p.tools.score = r.score;
          }
          s.tool_score = p.tools.score;
        }
        pending.push_back(std::move(p));
      }

      for (auto& p : pending) {
        if (state.control.done || !detail::ready(graph, state, p.step.role)) continue;
        StepRecord& s = p.step;
        s.t = rec.steps.size() + 1;
        for (const auto& e : graph.edges)
          if (e.target == s.role)
            if (auto it = last_step.find(e.source); it != last_step.end()) s.parents.push_back(it->second);
        // A repeated turn starts after the previous turn's last body role.
        if (const auto* loop = graph.loop_of(s.role); loop && s.turn > 1 && s.role == loop->body.front())
          if (auto it = last_step.find(loop->body.back()); it != last_step.end()) s.parents.push_back(it->second);
        std::sort(s.parents.begin(), s.parents.end());
        s.parents.erase(std::unique(s.parents.begin(), s.parents.end()), s.parents.end());

        const RoleSpec& spec = graph.role(s.role);
        state = transition(graph, std::move(state), s.role, spec.is_agent() ? s.output : Tokens{}, p.tools);
        if (spec.is_agent() && spec.output_schema == OutputSchema::kAnswerSpan) {
          s.answer_index = rec.intermediate_answers.size();
          rec.intermediate_answers.push_back(content_of(s.output));
        }
        if (s.tool_score) rec.verifier_scores.push_back(*s.tool_score);
        if (p.staged) workers.at(s.model).stage(id, s.t, std::move(*p.staged));
        last_step[s.role] = s.t;
        rec.steps.push_back(std::move(s));
      }
    }
  } catch (const ToolError& e) {
    fail(std::string("tool failure: ") + e.what());
    return rec;
  } catch (...) {
    for (const auto& mid : workers.ids()) workers.at(mid).discard(id);
    throw;
  }
  rec.done = true;
  rec.candidate_answer = state.scratchpad["answer"];
  rec.final_program = state.scratchpad["program"];
  rec.used_turns = used_turns(graph, state);
  return rec;
}

struct RolloutTask {
  TaskRef task;
  TrajectoryId id;
};

struct RolloutHooks {
  // Called with the number of trajectories in flight right after one starts.
  std::function<void(int)> on_start;
};

// Runs up to `concurrency_limit` trajectories at once. Results follow task
// order; an exception in one trajectory becomes a failed record.
inline std::vector<TrajectoryRecord> run_rollout(const std::vector<RolloutTask>& tasks, const WorkflowGraph& graph,
                                                 const AgentModelMapping& mapping, WorkerPool& workers,
                                                 const Environment& env, std::size_t concurrency_limit,
                                                 const ExecutionOptions& opts = {}, const RolloutHooks& hooks = {}) {
  if (concurrency_limit < 1) throw ContractError("concurrency_limit must be at least 1");
  std::vector<TrajectoryRecord> out(tasks.size());
  std::atomic<std::size_t> next{0};
  std::atomic<int> in_flight{0};
  std::mutex hook_mu;

  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      const int now = in_flight.fetch_add(1) + 1;
      if (hooks.on_start) {
        std::lock_guard lock(hook_mu);
        hooks.on_start(now);
      }
      try {
        out[i] = run_trajectory(tasks[i].task, tasks[i].id, graph, mapping, workers, env, opts);
      } catch (const std::exception& e) {
        out[i] = TrajectoryRecord{};
        out[i].id = tasks[i].id;
        out[i].task = tasks[i].task;
        out[i].failed = true;
        out[i].failure = e.what();
      }
      in_flight.fetch_sub(1);
    }
  };

  const std::size_t n_threads = std::min(concurrency_limit, tasks.size());
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t k = 0; k < n_threads; ++k) pool.emplace_back(worker);
  }
  return out;
}

// Fills every agent step's reward slots and commits one fragment per agent
// step to the serving model's buffer. Returns the number of fragments.
inline std::size_t assemble_and_commit(TrajectoryRecord& record, const RewardSpec& spec, const WorkflowGraph& graph,
                                       WorkerPool& workers, const AgentModelMapping& mapping,
                                       const Environment& env) {
  if (record.failed || !record.done) throw ContractError("cannot assemble incomplete trajectory");
  if (reward_family_for(graph.family) != spec.family)
    throw ContractError(std::string("reward family ") + to_string(spec.family) + " does not grade workflow " +
                        to_string(graph.family));
  for (const auto& s : record.steps)
    if (s.reward) throw ContractError("trajectory " + record.id.str() + " already assembled");

  const RewardAssignment a = assign_rewards(record, spec, env.gold(record.task), env.vocab());
  std::vector<Fragment> fragments;
  for (auto& s : record.steps) {
    if (s.kind != RoleKind::kAgent) continue;
    s.reward = a.by_step.at(s.t);
    s.weights = spec.weights_for(s.role);
    auto staged = workers.at(s.model).take(record.id, s.t);
    if (!staged) throw ContractError("no staged tensors for " + record.id.str() + "/" + std::to_string(s.t));
    Fragment f;
    f.trajectory = record.id;
    f.step = s.t;
    f.role = s.role;
    f.observation = std::move(staged->observation);
    f.output = std::move(staged->output);
    f.logprobs = std::move(staged->logprobs);
    f.values = std::move(staged->values);
    f.reward = s.reward->total;
    fragments.push_back(std::move(f));
  }
  for (auto& f : fragments) {
    const ModelId& m = route(mapping, f.role);
    commit(workers.at(m).buffer, std::move(f), mapping);
  }
  return fragments.size();
}

// ---------------------------------------------------------------------------
// Trajectory log: one JSON object per line. A header line, then per
// trajectory its step lines and a closing line with terminal outputs.

inline void write_log_header(std::ostream& out, std::uint64_t seed) {
  nlohmann::json h{{"maso_log", std::string(kVersion)}, {"seed", seed}};
  out << h.dump() << '\n';
}

inline void write_trajectory(std::ostream& out, const TrajectoryRecord& rec, const Vocabulary& vocab) {
  for (const auto& s : rec.steps) {
    nlohmann::json j;
    j["traj"] = rec.id.str();
    j["t"] = s.t;
    j["role"] = s.role;
    j["kind"] = to_string(s.kind);
    j["model"] = s.model;
    j["turn"] = s.turn;
    j["obs_digest"] = s.observation_digest;
    j["output"] = s.output;
    j["text"] = vocab.decode(s.output);
    j["format_ok"] = s.format_ok;
    if (s.tool_score) j["score"] = *s.tool_score;
    if (s.reward) {
      j["reward"] = {{"node", s.reward->node}, {"turn", s.reward->turn}, {"traj", s.reward->traj},
                     {"total", s.reward->total}};
      j["lambda"] = {s.weights.node, s.weights.turn, s.weights.traj};
    }
    j["parents"] = s.parents;
    out << j.dump() << '\n';
  }
  nlohmann::json fin;
  fin["traj"] = rec.id.str();
  fin["final"] = true;
  fin["answer"] = vocab.decode(rec.candidate_answer);
  fin["program"] = vocab.decode(rec.final_program);
  fin["scores"] = rec.verifier_scores;
  std::vector<std::string> inter;
  for (const auto& a : rec.intermediate_answers) inter.push_back(vocab.decode(a));
  fin["intermediate"] = inter;
  fin["used_turns"] = rec.used_turns;
  fin["done"] = rec.done;
  fin["failed"] = rec.failed;
  if (rec.failed) fin["failure"] = rec.failure;
  out << fin.dump() << '\n';
}

}  // namespace maso
