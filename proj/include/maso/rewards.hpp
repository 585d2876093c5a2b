#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "maso/formats.hpp"
#include "maso/trajectory.hpp"
#include "maso/vocab.hpp"

namespace maso {

enum class RewardFamily { kSharedFinalF1, kTurnwiseMASK, kVerifyDelta };

inline const char* to_string(RewardFamily f) {
  switch (f) {
    case RewardFamily::kSharedFinalF1: return "SharedFinalF1";
    case RewardFamily::kTurnwiseMASK: return "TurnwiseMASK";
    case RewardFamily::kVerifyDelta: return "VerifyDelta";
  }
  return "?";
}

inline RewardFamily parse_reward_family(std::string_view s) {
  static constexpr RewardFamily all[] = {RewardFamily::kSharedFinalF1, RewardFamily::kTurnwiseMASK,
                                         RewardFamily::kVerifyDelta};
  return detail::parse_enum(s, all, "reward family");
}

// Reward family each workflow family is graded with.
inline RewardFamily reward_family_for(Family f) {
  switch (f) {
    case Family::kA:
    case Family::kB: return RewardFamily::kSharedFinalF1;
    case Family::kC: return RewardFamily::kTurnwiseMASK;
    case Family::kD: return RewardFamily::kVerifyDelta;
  }
  return RewardFamily::kSharedFinalF1;
}

inline constexpr double kDefaultFormatPenalty = -0.5;

struct RewardSpec {
  RewardFamily family = RewardFamily::kSharedFinalF1;
  std::map<RoleId, RewardWeights> weights;  // roles not listed use (1, 1, 1)
  double format_penalty = kDefaultFormatPenalty;

  RewardWeights weights_for(const RoleId& role) const {
    auto it = weights.find(role);
    return it == weights.end() ? RewardWeights{} : it->second;
  }

  bool operator==(const RewardSpec&) const = default;
};

struct RewardAssignment {
  std::map<std::size_t, RewardComponents> by_step;
};

inline double combine(double node, double turn, double traj, const RewardWeights& w = {}) {
  return w.node * node + w.turn * turn + w.traj * traj;
}

// ---------------------------------------------------------------------------
// Normalized answer F1: lowercase, punctuation removed, articles dropped,
// multiset token overlap.

inline std::vector<std::string> normalize_answer(const std::vector<std::string>& tokens) {
  std::vector<std::string> out;
  for (const auto& tok : tokens) {
    std::string w;
    for (unsigned char c : tok)
      if (!std::ispunct(c) && !std::isspace(c)) w += static_cast<char>(std::tolower(c));
    if (w.empty() || w == "a" || w == "an" || w == "the") continue;
    out.push_back(std::move(w));
  }
  return out;
}

inline double answer_f1(const std::vector<std::string>& pred, const std::vector<std::string>& gold) {
  auto p = normalize_answer(pred);
  auto g = normalize_answer(gold);
  if (p.empty() || g.empty()) return 0.0;
  std::map<std::string, int> counts;
  for (const auto& w : g) ++counts[w];
  int common = 0;
  for (const auto& w : p) {
    auto it = counts.find(w);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  const double precision = static_cast<double>(common) / static_cast<double>(p.size());
  const double recall = static_cast<double>(common) / static_cast<double>(g.size());
  return canonical_score(2.0 * precision * recall / (precision + recall));
}

inline double answer_f1(const Tokens& pred, const Tokens& gold, const Vocabulary& vocab) {
  return answer_f1(vocab.surfaces(pred), vocab.surfaces(gold));
}

inline double format_penalty(const RoleSpec& role, const Tokens& output, const FormatContext& ctx,
                             double penalty = kDefaultFormatPenalty) {
  return format_valid(role, output, ctx) ? 0.0 : penalty;
}

namespace detail {

inline void check_assignable(const TrajectoryRecord& record, const RewardSpec& spec, RewardFamily want) {
  if (spec.family != want)
    throw ContractError(std::string("reward family ") + to_string(spec.family) + " cannot grade with " +
                        to_string(want));
  if (!record.done || record.failed) throw ContractError("cannot assemble incomplete trajectory");
}

inline RewardComponents make_components(const RewardSpec& spec, const StepRecord& step, double turn,
                                        double traj) {
  RewardComponents c;
  c.node = step.format_ok ? 0.0 : spec.format_penalty;
  c.turn = turn;
  c.traj = traj;
  c.total = combine(c.node, c.turn, c.traj, spec.weights_for(step.role));
  return c;
}

}  // namespace detail

// Every agent step shares the final-answer F1; format penalties are node-level.
inline RewardAssignment assign_shared_final(const TrajectoryRecord& record, const RewardSpec& spec,
                                            const Tokens& gold, const Vocabulary& vocab) {
  detail::check_assignable(record, spec, RewardFamily::kSharedFinalF1);
  if (record.intermediate_answers.empty()) throw ContractError("trajectory has no candidate answer");
  const double f1 = answer_f1(record.candidate_answer, gold, vocab);
  RewardAssignment out;
  for (const auto& s : record.steps)
    if (s.kind == RoleKind::kAgent) out.by_step[s.t] = detail::make_components(spec, s, 0.0, f1);
  return out;
}

// Turn-level rewards. Answer-producing steps get the absolute F1 of the answer
// they produced; other loop roles get the improvement of their turn's answer
// over the previous one; a step that ended the loop with <end> gets 0.
inline RewardAssignment assign_mask(const TrajectoryRecord& record, const RewardSpec& spec,
                                    const Tokens& gold, const Vocabulary& vocab) {
  detail::check_assignable(record, spec, RewardFamily::kTurnwiseMASK);
  if (record.intermediate_answers.empty()) throw ContractError("trajectory has no intermediate answers");
  std::vector<double> f1;
  for (const auto& a : record.intermediate_answers) f1.push_back(answer_f1(a, gold, vocab));

  std::map<int, std::size_t> answer_of_turn;
  for (const auto& s : record.steps)
    if (s.answer_index && s.turn > 0) answer_of_turn[s.turn] = *s.answer_index;

  RewardAssignment out;
  for (const auto& s : record.steps) {
    if (s.kind != RoleKind::kAgent) continue;
    double task = 0.0;
    if (s.answer_index) {
      task = f1.at(*s.answer_index);
    } else if (s.turn > 0 && !s.end_only) {
      if (auto it = answer_of_turn.find(s.turn); it != answer_of_turn.end()) {
        const std::size_t cur = it->second;
        task = f1[cur] - (cur > 0 ? f1[cur - 1] : 0.0);
      }
    }
    out.by_step[s.t] = detail::make_components(spec, s, task, 0.0);
  }
  return out;
}

// Verifier-score rewards. Round r is loop turn r + 1. Agent steps before the
// round's verifier are credited with s_r - s_{r-1} (s_0 for round 0); steps
// after it (the reflector) with the next round's improvement s_{r+1} - s_r.
inline RewardAssignment assign_verify_delta(const TrajectoryRecord& record, const RewardSpec& spec) {
  detail::check_assignable(record, spec, RewardFamily::kVerifyDelta);
  if (record.verifier_scores.empty()) throw ContractError("trajectory has no verifier score");
  std::vector<double> s;
  for (double x : record.verifier_scores) s.push_back(canonical_score(x));
  std::map<int, std::size_t> verifier_step;
  for (const auto& st : record.steps)
    if (st.tool_score && st.turn > 0) verifier_step.emplace(st.turn, st.t);
  auto round_gain = [&](std::size_t r) {
    if (r >= s.size()) return 0.0;
    return r == 0 ? s[0] : s[r] - s[r - 1];
  };

  RewardAssignment out;
  for (const auto& st : record.steps) {
    if (st.kind != RoleKind::kAgent) continue;
    double task = 0.0;
    if (st.turn > 0) {
      const auto round = static_cast<std::size_t>(st.turn - 1);
      auto v = verifier_step.find(st.turn);
      const bool after_verifier = v != verifier_step.end() && st.t > v->second;
      task = round_gain(after_verifier ? round + 1 : round);
    }
    out.by_step[st.t] = detail::make_components(spec, st, task, 0.0);
  }
  return out;
}

inline RewardAssignment assign_rewards(const TrajectoryRecord& record, const RewardSpec& spec,
                                       const Tokens& gold, const Vocabulary& vocab) {
  switch (spec.family) {
    case RewardFamily::kSharedFinalF1: return assign_shared_final(record, spec, gold, vocab);
    case RewardFamily::kTurnwiseMASK: return assign_mask(record, spec, gold, vocab);
    case RewardFamily::kVerifyDelta: return assign_verify_delta(record, spec);
  }
  return {};
}

// Discounted sum over agent steps, gamma^(t-1) on step index t.
inline double aggregate_return(const RewardAssignment& assignment, const TrajectoryRecord& record,
                               double gamma) {
  double total = 0.0;
  for (const auto& s : record.steps) {
    if (s.kind != RoleKind::kAgent) continue;
    auto it = assignment.by_step.find(s.t);
    if (it == assignment.by_step.end()) throw ContractError("assignment misses an agent step");
    total += std::pow(gamma, static_cast<double>(s.t) - 1.0) * it->second.total;
  }
  return total;
}

}  // namespace maso
