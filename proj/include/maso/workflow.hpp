#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <vector>

#include "maso/common.hpp"
#include "maso/vocab.hpp"

namespace maso {

enum class RoleKind { kAgent, kTool };

enum class OutputSchema {
  kQueryList,
  kEvidenceSubset,
  kAnswerSpan,
  kKnowledgeUpdate,
  kProgram,
  kPlanText,
  kReflectionText,
};

enum class ConditionTag { kAlways, kOnEndToken, kOnVerifierPass, kOnLoopExhausted };

enum class StopCondition { kEndToken, kTokenLimit };

// What ends a loop before its turn bound.
enum class LoopEnd { kNone, kEndToken, kVerifierPass };

// Workflow family tag; ties graph, reward family and environment together.
enum class Family { kA, kB, kC, kD };

enum class Regime { kFullShared, kPartialShared, kFullSeparate };

// ---------------------------------------------------------------------------
// Names used by the config file and the logs.

inline const char* to_string(RoleKind k) { return k == RoleKind::kAgent ? "agent" : "tool"; }

inline const char* to_string(OutputSchema s) {
  switch (s) {
    case OutputSchema::kQueryList: return "query-list";
    case OutputSchema::kEvidenceSubset: return "evidence-subset";
    case OutputSchema::kAnswerSpan: return "answer-span";
    case OutputSchema::kKnowledgeUpdate: return "knowledge-update";
    case OutputSchema::kProgram: return "program";
    case OutputSchema::kPlanText: return "plan-text";
    case OutputSchema::kReflectionText: return "reflection-text";
  }
  return "?";
}

inline const char* to_string(ConditionTag t) {
  switch (t) {
    case ConditionTag::kAlways: return "always";
    case ConditionTag::kOnEndToken: return "on-end-token";
    case ConditionTag::kOnVerifierPass: return "on-verifier-pass";
    case ConditionTag::kOnLoopExhausted: return "on-loop-exhausted";
  }
  return "?";
}

inline const char* to_string(StopCondition s) {
  return s == StopCondition::kEndToken ? "end-token" : "token-limit";
}

inline const char* to_string(LoopEnd e) {
  switch (e) {
    case LoopEnd::kNone: return "none";
    case LoopEnd::kEndToken: return "end-token";
    case LoopEnd::kVerifierPass: return "verifier-pass";
  }
  return "?";
}

inline const char* to_string(Family f) {
  switch (f) {
    case Family::kA: return "A";
    case Family::kB: return "B";
    case Family::kC: return "C";
    case Family::kD: return "D";
  }
  return "?";
}

inline const char* to_string(Regime r) {
  switch (r) {
    case Regime::kFullShared: return "FullShared";
    case Regime::kPartialShared: return "PartialShared";
    case Regime::kFullSeparate: return "FullSeparate";
  }
  return "?";
}

namespace detail {
template <typename E, std::size_t N>
E parse_enum(std::string_view text, const E (&values)[N], const char* what) {
  for (E v : values)
    if (text == to_string(v)) return v;
  throw ConfigError(std::string("unknown ") + what + " '" + std::string(text) + "'");
}
}  // namespace detail

inline RoleKind parse_role_kind(std::string_view s) {
  static constexpr RoleKind all[] = {RoleKind::kAgent, RoleKind::kTool};
  return detail::parse_enum(s, all, "role kind");
}
inline OutputSchema parse_output_schema(std::string_view s) {
  static constexpr OutputSchema all[] = {
      OutputSchema::kQueryList,       OutputSchema::kEvidenceSubset, OutputSchema::kAnswerSpan,
      OutputSchema::kKnowledgeUpdate, OutputSchema::kProgram,        OutputSchema::kPlanText,
      OutputSchema::kReflectionText};
  return detail::parse_enum(s, all, "output schema");
}
inline ConditionTag parse_condition_tag(std::string_view s) {
  static constexpr ConditionTag all[] = {ConditionTag::kAlways, ConditionTag::kOnEndToken,
                                         ConditionTag::kOnVerifierPass,
                                         ConditionTag::kOnLoopExhausted};
  return detail::parse_enum(s, all, "condition tag");
}
inline StopCondition parse_stop_condition(std::string_view s) {
  static constexpr StopCondition all[] = {StopCondition::kEndToken, StopCondition::kTokenLimit};
  return detail::parse_enum(s, all, "stop condition");
}
inline LoopEnd parse_loop_end(std::string_view s) {
  static constexpr LoopEnd all[] = {LoopEnd::kNone, LoopEnd::kEndToken, LoopEnd::kVerifierPass};
  return detail::parse_enum(s, all, "loop end rule");
}
inline Family parse_family(std::string_view s) {
  static constexpr Family all[] = {Family::kA, Family::kB, Family::kC, Family::kD};
  return detail::parse_enum(s, all, "workflow family");
}

// ---------------------------------------------------------------------------
// Graph types.

struct RoleSpec {
  RoleId id;
  RoleKind kind = RoleKind::kAgent;
  std::vector<std::string> observation_fields;
  std::optional<OutputSchema> output_schema;  // agents only
  std::vector<std::string> tool_refs;         // tools this role may call
  std::map<std::string, std::string> tool_args;
  int max_output_tokens = 8;
  StopCondition stop = StopCondition::kEndToken;

  bool is_agent() const { return kind == RoleKind::kAgent; }
  bool operator==(const RoleSpec&) const = default;
};

struct Edge {
  RoleId source;
  RoleId target;
  ConditionTag tag = ConditionTag::kAlways;
  bool operator==(const Edge&) const = default;
};

// A bounded loop. Repetition is implicit: body edges stay acyclic and the body
// restarts from its heads once every body role completed in the current turn.
// The turn-end role is where the turn bound is checked; body roles after it run
// only when the loop continues.
struct LoopSpec {
  std::string id;
  std::vector<RoleId> body;
  int max_turns = 1;
  LoopEnd end = LoopEnd::kNone;
  RoleId end_role;  // role whose output (end-token) or score (verifier-pass) ends the loop
  RoleId turn_end;  // defaults to the last body role

  const RoleId& boundary() const { return turn_end.empty() ? body.back() : turn_end; }
  bool contains(const RoleId& r) const { return std::find(body.begin(), body.end(), r) != body.end(); }
  bool operator==(const LoopSpec&) const = default;
};

struct WorkflowGraph {
  Family family = Family::kA;
  std::vector<RoleSpec> roles;
  std::vector<Edge> edges;
  std::vector<LoopSpec> loops;
  RoleId entry;
  RoleId terminal;

  const RoleSpec* find(const RoleId& id) const {
    for (const auto& r : roles)
      if (r.id == id) return &r;
    return nullptr;
  }

  const RoleSpec& role(const RoleId& id) const {
    if (const auto* r = find(id)) return *r;
    throw ContractError("unknown role '" + id + "'");
  }

  const LoopSpec* loop_of(const RoleId& id) const {
    for (const auto& l : loops)
      if (l.contains(id)) return &l;
    return nullptr;
  }

  std::vector<RoleId> agent_roles() const {
    std::vector<RoleId> out;
    for (const auto& r : roles)
      if (r.is_agent()) out.push_back(r.id);
    return out;
  }

  bool operator==(const WorkflowGraph&) const = default;
};

struct AgentModelMapping {
  std::map<RoleId, ModelId> assignments;
  bool operator==(const AgentModelMapping&) const = default;
};

// ---------------------------------------------------------------------------
// Validation.

struct Violation {
  std::string rule;
  std::string element;
};

struct ValidationReport {
  std::vector<Violation> violations;

  bool ok() const { return violations.empty(); }

  bool has(std::string_view rule) const {
    return std::any_of(violations.begin(), violations.end(),
                       [&](const Violation& v) { return v.rule == rule; });
  }

  void add(std::string rule, std::string element) {
    violations.push_back({std::move(rule), std::move(element)});
  }

  void merge(const ValidationReport& other) {
    violations.insert(violations.end(), other.violations.begin(), other.violations.end());
  }

  std::string to_string() const {
    std::string out;
    for (const auto& v : violations) out += v.rule + ": " + v.element + "\n";
    return out;
  }
};

// Registries the graph and mapping are checked against.
struct ValidationContext {
  std::set<std::string> tools = {"retrieve", "verify"};
  std::optional<std::set<ModelId>> models;  // defaults to the mapping's image
};

inline ValidationReport validate(const WorkflowGraph& graph, const AgentModelMapping& mapping,
                                 const ValidationContext& ctx = {}) {
  ValidationReport report;
  std::set<RoleId> ids;
  for (const auto& r : graph.roles) {
    if (!ids.insert(r.id).second) report.add("duplicate role", r.id);
    if (r.is_agent()) {
      if (r.max_output_tokens < 1) report.add("agent output bound", r.id);
      if (!r.output_schema) report.add("missing output schema", r.id);
    } else {
      if (r.output_schema) report.add("tool has trainable output", r.id);
      if (r.tool_refs.empty()) report.add("tool role without tool", r.id);
    }
    for (const auto& t : r.tool_refs)
      if (!ctx.tools.contains(t)) report.add("unresolved tool", r.id + ":" + t);
  }
  if (!ids.contains(graph.entry)) report.add("unknown entry", graph.entry);
  if (!ids.contains(graph.terminal)) report.add("unknown terminal", graph.terminal);

  std::map<RoleId, std::vector<RoleId>> succ;
  std::map<RoleId, int> indegree;
  for (const auto& id : ids) indegree[id] = 0;
  for (const auto& e : graph.edges) {
    bool known = ids.contains(e.source) && ids.contains(e.target);
    if (!known) {
      report.add("unknown edge endpoint", e.source + "->" + e.target);
      continue;
    }
    succ[e.source].push_back(e.target);
    ++indegree[e.target];
    if (e.target == graph.entry) report.add("entry has incoming edge", e.source + "->" + e.target);
    const auto* ls = graph.loop_of(e.source);
    if (ls && ls == graph.loop_of(e.target) && e.tag != ConditionTag::kAlways)
      report.add("conditional edge inside loop", e.source + "->" + e.target);
  }

  // Loop repetition is implicit, so the unrolled graph is acyclic exactly when
  // the declared edges are.
  {
    auto deg = indegree;
    std::queue<RoleId> ready;
    for (const auto& [id, d] : deg)
      if (d == 0) ready.push(id);
    std::size_t seen = 0;
    while (!ready.empty()) {
      auto id = ready.front();
      ready.pop();
      ++seen;
      for (const auto& n : succ[id])
        if (--deg[n] == 0) ready.push(n);
    }
    if (seen != ids.size()) {
      for (const auto& [id, d] : deg)
        if (d > 0) report.add("unrolled cycle", id);
    }
  }

  if (ids.contains(graph.entry)) {
    std::set<RoleId> reached{graph.entry};
    std::queue<RoleId> q;
    q.push(graph.entry);
    while (!q.empty()) {
      auto id = q.front();
      q.pop();
      for (const auto& n : succ[id])
        if (reached.insert(n).second) q.push(n);
    }
    for (const auto& r : graph.roles)
      if (!reached.contains(r.id)) report.add("unreachable role", r.id);
    if (ids.contains(graph.terminal) && !reached.contains(graph.terminal))
      report.add("terminal unreachable", graph.terminal);
  }

  std::set<RoleId> in_loops;
  for (const auto& l : graph.loops) {
    if (l.max_turns < 1) report.add("loop turn bound", l.id);
    if (l.body.empty()) {
      report.add("empty loop body", l.id);
      continue;
    }
    for (const auto& r : l.body) {
      if (!ids.contains(r)) report.add("unknown loop role", l.id + ":" + r);
      if (!in_loops.insert(r).second) report.add("overlapping loops", l.id + ":" + r);
    }
    if (!l.contains(l.boundary())) report.add("loop turn end outside body", l.id);
    if (l.end != LoopEnd::kNone && !l.contains(l.end_role))
      report.add("loop end role outside body", l.id + ":" + l.end_role);
    if (l.end == LoopEnd::kEndToken) {
      const auto* r = graph.find(l.end_role);
      if (r && !r->is_agent()) report.add("end-token role is a tool", l.end_role);
    }
  }

  std::set<ModelId> image;
  for (const auto& [role, model] : mapping.assignments) {
    image.insert(model);
    const auto* r = graph.find(role);
    if (!r) {
      report.add("unknown mapped role", role);
    } else if (!r->is_agent()) {
      report.add("mapped tool role", role);
    }
  }
  for (const auto& r : graph.roles)
    if (r.is_agent() && !mapping.assignments.contains(r.id)) report.add("unmapped agent role", r.id);
  const auto& models = ctx.models ? *ctx.models : image;
  for (const auto& m : image)
    if (!models.contains(m)) report.add("unknown model", m);
  return report;
}

// ---------------------------------------------------------------------------
// Execution state.

enum class LoopStatus { kPending, kActive, kExited };
enum class LoopExit { kNone, kBound, kEndToken, kVerifierPass };

struct LoopControl {
  LoopStatus status = LoopStatus::kPending;
  int turn = 0;  // 1-based index of the current (or last) turn
  LoopExit exit = LoopExit::kNone;
  std::set<RoleId> completed_this_turn;
  bool operator==(const LoopControl&) const = default;
};

struct ControlState {
  std::set<RoleId> completed;        // roles outside loops
  std::set<RoleId> end_fired;        // roles outside loops whose output was only <end>
  std::set<RoleId> verifier_passed;  // tool roles outside loops that scored 1
  std::map<std::string, LoopControl> loops;
  bool done = false;
  bool operator==(const ControlState&) const = default;
};

using Scratchpad = std::map<std::string, Tokens>;

struct WorkflowState {
  Tokens task_input;
  Scratchpad scratchpad;
  ControlState control;
  bool operator==(const WorkflowState&) const = default;
};

// Keyed values produced by a tool role. `append` values are joined onto the
// existing field with <sep>; `set` values replace it.
struct ToolResult {
  std::map<std::string, Tokens> set;
  std::map<std::string, Tokens> append;
  std::optional<double> score;
};

inline WorkflowState make_state(const WorkflowGraph& graph, Tokens task_input) {
  WorkflowState s;
  s.scratchpad["task"] = task_input;
  s.task_input = std::move(task_input);
  for (const auto& r : graph.roles)
    for (const auto& f : r.observation_fields) s.scratchpad.try_emplace(f);
  for (const auto& l : graph.loops) s.control.loops[l.id];
  return s;
}

inline int used_turns(const WorkflowGraph& graph, const WorkflowState& state) {
  if (graph.loops.empty()) return 0;
  return state.control.loops.at(graph.loops.front().id).turn;
}

namespace detail {

inline bool edge_satisfied(const WorkflowGraph& graph, const WorkflowState& state, const Edge& e) {
  const auto* src_loop = graph.loop_of(e.source);
  const auto* dst_loop = graph.loop_of(e.target);
  if (src_loop && src_loop == dst_loop) {
    return state.control.loops.at(src_loop->id).completed_this_turn.contains(e.source);
  }
  if (src_loop) {
    const auto& lc = state.control.loops.at(src_loop->id);
    if (lc.status != LoopStatus::kExited) return false;
    switch (e.tag) {
      case ConditionTag::kAlways:
      case ConditionTag::kOnLoopExhausted: return true;
      case ConditionTag::kOnEndToken: return lc.exit == LoopExit::kEndToken;
      case ConditionTag::kOnVerifierPass: return lc.exit == LoopExit::kVerifierPass;
    }
    return false;
  }
  const auto& c = state.control;
  if (!c.completed.contains(e.source)) return false;
  switch (e.tag) {
    case ConditionTag::kAlways:
    case ConditionTag::kOnLoopExhausted: return true;
    case ConditionTag::kOnEndToken: return c.end_fired.contains(e.source);
    case ConditionTag::kOnVerifierPass: return c.verifier_passed.contains(e.source);
  }
  return false;
}

inline bool ready(const WorkflowGraph& graph, const WorkflowState& state, const RoleId& role) {
  if (const auto* loop = graph.loop_of(role)) {
    const auto& lc = state.control.loops.at(loop->id);
    if (lc.status == LoopStatus::kExited || lc.completed_this_turn.contains(role)) return false;
  } else if (state.control.completed.contains(role)) {
    return false;
  }
  for (const auto& e : graph.edges)
    if (e.target == role && !edge_satisfied(graph, state, e)) return false;
  return true;
}

}  // namespace detail

// Roles whose predecessors have completed under the current condition tags and
// loop counters, in declaration order. Empty while not done means deadlock.
inline std::vector<RoleId> frontier(const WorkflowGraph& graph, const WorkflowState& state) {
  if (state.control.done) throw ContractError("frontier of a finished workflow state");
  std::vector<RoleId> out;
  for (const auto& r : graph.roles)
    if (detail::ready(graph, state, r.id)) out.push_back(r.id);
  return out;
}

// Passage segments in `passages` are `<id> key value...`, separated by <sep>.
inline Tokens select_passages(const Tokens& passages, const Tokens& cited) {
  std::vector<Tokens> picked;
  for (const auto& seg : split_sep(passages)) {
    if (seg.empty()) continue;
    if (std::find(cited.begin(), cited.end(), seg.front()) != cited.end()) picked.push_back(seg);
  }
  return join_sep(picked);
}

namespace detail {
inline void append_field(Tokens& field, const Tokens& extra) {
  if (extra.empty()) return;
  if (!field.empty()) field.push_back(Vocabulary::kSep);
  field.insert(field.end(), extra.begin(), extra.end());
}
}  // namespace detail

// Applies one role's output (agents) or tool results (tools) to the state.
// Malformed agent output is parsed best-effort; the format check is separate.
inline WorkflowState transition(const WorkflowGraph& graph, WorkflowState state, const RoleId& role,
                                const Tokens& output, const ToolResult& tool_results = {}) {
  const RoleSpec& spec = graph.role(role);
  if (!detail::ready(graph, state, role) || state.control.done)
    throw ContractError("role '" + role + "' is not on the frontier");

  auto& pad = state.scratchpad;
  bool end_only = false;
  if (spec.is_agent()) {
    Tokens content = content_of(output);
    end_only = content.empty() && terminated(output);
    switch (*spec.output_schema) {
      case OutputSchema::kQueryList: {
        std::vector<Tokens> queries;
        for (auto& q : split_sep(content))
          if (!q.empty()) queries.push_back(std::move(q));
        Tokens joined = join_sep(queries);
        detail::append_field(pad["queries"], joined);
        pad["last_queries"] = joined;
        break;
      }
      case OutputSchema::kEvidenceSubset:
        detail::append_field(pad["evidence"], select_passages(pad["passages"], content));
        break;
      case OutputSchema::kAnswerSpan: pad["answer"] = content; break;
      case OutputSchema::kKnowledgeUpdate: pad["knowledge"] = content; break;
      case OutputSchema::kProgram: pad["program"] = content; break;
      case OutputSchema::kPlanText: pad["plan"] = content; break;
      case OutputSchema::kReflectionText: pad["reflection"] = content; break;
    }
  } else {
    if (!output.empty())
      throw ContractError("tool role '" + role + "' produces tool results, not policy output");
    for (const auto& [k, v] : tool_results.set) pad[k] = v;
    for (const auto& [k, v] : tool_results.append) detail::append_field(pad[k], v);
  }
  const bool passed = tool_results.score && *tool_results.score >= 1.0;

  auto& control = state.control;
  if (const auto* loop = graph.loop_of(role)) {
    auto& lc = control.loops.at(loop->id);
    if (lc.status == LoopStatus::kPending) {
      lc.status = LoopStatus::kActive;
      lc.turn = 1;
    }
    lc.completed_this_turn.insert(role);
    LoopExit exit = LoopExit::kNone;
    if (role == loop->end_role && loop->end == LoopEnd::kEndToken && end_only) {
      exit = LoopExit::kEndToken;
    } else if (role == loop->end_role && loop->end == LoopEnd::kVerifierPass && passed) {
      exit = LoopExit::kVerifierPass;
    } else if (role == loop->boundary() && lc.turn >= loop->max_turns) {
      exit = LoopExit::kBound;
    }
    if (exit != LoopExit::kNone) {
      lc.status = LoopStatus::kExited;
      lc.exit = exit;
      if (loop->contains(graph.terminal)) control.done = true;
    } else if (lc.completed_this_turn.size() == loop->body.size()) {
      ++lc.turn;
      lc.completed_this_turn.clear();
    }
  } else {
    control.completed.insert(role);
    if (end_only) control.end_fired.insert(role);
    if (passed) control.verifier_passed.insert(role);
    if (role == graph.terminal) control.done = true;
  }
  return state;
}

// Role observation: identity token, then each observation field's tokens,
// fields separated by <sep>.
inline Tokens render_observation(const RoleSpec& role, const WorkflowState& state,
                                 const Vocabulary& vocab) {
  Tokens obs{vocab.role_token(role.id)};
  for (std::size_t i = 0; i < role.observation_fields.size(); ++i) {
    if (i) obs.push_back(Vocabulary::kSep);
    auto it = state.scratchpad.find(role.observation_fields[i]);
    if (it == state.scratchpad.end())
      throw ContractError("scratchpad field '" + role.observation_fields[i] + "' missing");
    obs.insert(obs.end(), it->second.begin(), it->second.end());
  }
  return obs;
}

// ---------------------------------------------------------------------------
// Sharing regime and routing.

inline Regime regime(const AgentModelMapping& mapping) {
  std::set<ModelId> image;
  for (const auto& [role, model] : mapping.assignments) image.insert(model);
  if (image.size() <= 1) return Regime::kFullShared;
  if (image.size() == mapping.assignments.size()) return Regime::kFullSeparate;
  return Regime::kPartialShared;
}

inline const ModelId& route(const AgentModelMapping& mapping, const RoleId& role) {
  auto it = mapping.assignments.find(role);
  if (it == mapping.assignments.end())
    throw ContractError("role '" + role + "' is not a mapped agent role");
  return it->second;
}

}  // namespace maso
