#pragma once

#include <cmath>

#include "maso/buffers.hpp"
#include "maso/rewards.hpp"
#include "support.hpp"

namespace maso::testing {

// A_t = sum_l (gamma lambda)^l delta_{t+l}, straight from the definition.
inline std::vector<double> gae_double_sum(const std::vector<double>& r, const std::vector<double>& v, double terminal,
                                          double gamma, double lambda) {
  const std::size_t n = r.size();
  std::vector<double> a(n, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t l = 0; t + l < n; ++l) {
      const std::size_t k = t + l;
      const double next = k + 1 < n ? v[k + 1] : terminal;
      const double delta = r[k] + gamma * next - v[k];
      a[t] += std::pow(gamma * lambda, static_cast<double>(l)) * delta;
    }
  }
  return a;
}

inline StepRecord agent_step(std::size_t t, const RoleId& role, int turn = 0) {
  StepRecord s;
  s.t = t;
  s.role = role;
  s.kind = RoleKind::kAgent;
  s.model = "m1";
  s.turn = turn;
  return s;
}

inline StepRecord tool_step(std::size_t t, const RoleId& role, int turn = 0) {
  StepRecord s = agent_step(t, role, turn);
  s.kind = RoleKind::kTool;
  s.model.clear();
  return s;
}

// plan, then per turn search / retrieve / summary / update / answer. A turn
// equal to `end_turn` stops at a search step that emitted only <end>.
inline TrajectoryRecord mask_record(const std::vector<Tokens>& answers, int end_turn = 0) {
  TrajectoryRecord r;
  std::size_t t = 0;
  r.steps.push_back(agent_step(++t, "plan"));
  r.steps.back().answer_index = 0;
  r.intermediate_answers.push_back(answers[0]);
  for (std::size_t turn = 1; turn < answers.size() + (end_turn ? 1 : 0); ++turn) {
    const int tn = static_cast<int>(turn);
    r.steps.push_back(agent_step(++t, "search", tn));
    if (tn == end_turn) {
      r.steps.back().end_only = true;
      break;
    }
    r.steps.push_back(tool_step(++t, "retrieve", tn));
    r.steps.push_back(agent_step(++t, "summary", tn));
    r.steps.push_back(agent_step(++t, "update", tn));
    r.steps.push_back(agent_step(++t, "answer", tn));
    r.steps.back().answer_index = r.intermediate_answers.size();
    r.intermediate_answers.push_back(answers[turn]);
  }
  r.candidate_answer = r.intermediate_answers.back();
  r.used_turns = end_turn ? end_turn : static_cast<int>(answers.size()) - 1;
  r.done = true;
  return r;
}

// Rounds of planner / coder / verify, a reflector between rounds.
inline TrajectoryRecord verify_record(const std::vector<double>& scores) {
  TrajectoryRecord r;
  std::size_t t = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const int turn = static_cast<int>(i) + 1;
    r.steps.push_back(agent_step(++t, "planner", turn));
    r.steps.push_back(agent_step(++t, "coder", turn));
    r.steps.push_back(tool_step(++t, "verify", turn));
    r.steps.back().tool_score = scores[i];
    if (i + 1 < scores.size()) r.steps.push_back(agent_step(++t, "reflector", turn));
  }
  r.verifier_scores = scores;
  r.used_turns = static_cast<int>(scores.size());
  r.done = true;
  return r;
}

inline FeatureSpec small_spec(std::size_t vocab = 5) { return FeatureSpec{vocab, {"alpha", "beta"}}; }

inline ModelInstance random_model(std::uint64_t seed, double scale = 0.5, std::size_t vocab = 5) {
  ModelInstance m("m1", small_spec(vocab));
  Rng rng(seed);
  randomize(m.params(), rng, scale);
  m.sync();
  return m;
}

inline AgentModelMapping single_mapping() {
  AgentModelMapping m;
  m.assignments = {{"alpha", "m1"}, {"beta", "m1"}};
  return m;
}

// Rows sampled from the model's behavior snapshot, rewarded by `reward`.
template <class RewardFn>
inline ReadyBatch sampled_batch(const ModelInstance& m, std::uint64_t seed, std::size_t rows, RewardFn reward) {
  ModelBuffer buf(m.id());
  Rng rng(seed);
  for (std::size_t i = 0; i < rows; ++i) {
    const RoleId role = i % 2 ? "beta" : "alpha";
    Tokens obs{static_cast<TokenId>(2 + rng.below(m.spec().vocab_size - 2))};
    auto out = sample(m, obs, role, rng, 4);
    Fragment f;
    f.trajectory = TrajectoryId{1, 0, i, false};
    f.step = 1;
    f.role = role;
    f.observation = obs;
    f.output = out.tokens;
    f.logprobs = out.logprobs;
    f.values = out.values;
    f.reward = reward(out.tokens, rng);
    commit(buf, std::move(f), single_mapping());
  }
  return build_ready_batch(buf, 1, seed + 1);
}

inline std::vector<std::size_t> all_rows(const ReadyBatch& b) {
  std::vector<std::size_t> rows(b.rows);
  for (std::size_t i = 0; i < b.rows; ++i) rows[i] = i;
  return rows;
}

// Flat view over policy then value parameters.
inline double& param_at(Params& p, std::size_t i) {
  return i < p.policy.size() ? p.policy[i] : p.value[i - p.policy.size()];
}
inline double grad_at(const Params& p, std::size_t i) {
  return i < p.policy.size() ? p.policy[i] : p.value[i - p.policy.size()];
}

}  // namespace maso::testing
