#pragma once

#include <compare>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "maso/common.hpp"
#include "maso/envs.hpp"
#include "maso/workflow.hpp"

namespace maso {

// (run seed, epoch, task slot). Evaluation trajectories carry the eval flag so
// they never collide with training ids of the same epoch.
struct TrajectoryId {
  std::uint64_t run_seed = 0;
  std::uint64_t epoch = 0;
  std::uint64_t task = 0;
  bool eval = false;

  std::string str() const {
    return std::to_string(run_seed) + (eval ? ".v" : ".e") + std::to_string(epoch) + ".t" +
           std::to_string(task);
  }

  static std::optional<TrajectoryId> parse(const std::string& s) {
    TrajectoryId id;
    unsigned long long a = 0, b = 0, c = 0;
    char kind = 0;
    int consumed = 0;
    if (std::sscanf(s.c_str(), "%llu.%c%llu.t%llu%n", &a, &kind, &b, &c, &consumed) != 4 ||
        consumed != static_cast<int>(s.size()) || (kind != 'e' && kind != 'v'))
      return std::nullopt;
    id.run_seed = a;
    id.epoch = b;
    id.task = c;
    id.eval = kind == 'v';
    return id;
  }

  auto operator<=>(const TrajectoryId&) const = default;
};

struct RewardWeights {
  double node = 1.0;
  double turn = 1.0;
  double traj = 1.0;
  bool operator==(const RewardWeights&) const = default;
};

struct RewardComponents {
  double node = 0.0;
  double turn = 0.0;
  double traj = 0.0;
  double total = 0.0;
  bool operator==(const RewardComponents&) const = default;
};

// One executed role. Per-token log-probabilities and value estimates stay with
// the worker group that served the step; the record only holds control data.
struct StepRecord {
  std::size_t t = 0;
  RoleId role;
  RoleKind kind = RoleKind::kAgent;
  ModelId model;  // empty for tool steps
  std::uint64_t observation_digest = 0;
  Tokens observation;
  Tokens output;
  int turn = 0;  // 1-based loop turn, 0 outside loops
  bool format_ok = true;
  bool end_only = false;  // output was just <end>
  std::optional<double> tool_score;
  std::optional<std::size_t> answer_index;  // position in intermediate_answers
  std::optional<RewardComponents> reward;
  RewardWeights weights;
  std::vector<std::size_t> parents;
};

struct TrajectoryRecord {
  TrajectoryId id;
  TaskRef task;
  std::vector<StepRecord> steps;
  Tokens candidate_answer;
  Tokens final_program;
  std::vector<double> verifier_scores;
  std::vector<Tokens> intermediate_answers;  // a_0..a_T, in production order
  bool done = false;
  bool failed = false;
  std::string failure;
  int used_turns = 0;

  std::size_t agent_steps() const {
    std::size_t n = 0;
    for (const auto& s : steps)
      if (s.kind == RoleKind::kAgent) ++n;
    return n;
  }
};

}  // namespace maso
