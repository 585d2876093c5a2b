#pragma once

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "maso/common.hpp"
#include "maso/envs.hpp"
#include "maso/rewards.hpp"
#include "maso/trainer.hpp"
#include "maso/workflow.hpp"

namespace maso {

// Run configuration. The file format is one `section.key = value` entry per
// line, `#` comments, and `[a, b, c]` lists.

enum class EnvKind { kQa, kCode };

inline const char* to_string(EnvKind k) { return k == EnvKind::kQa ? "qa" : "code"; }

inline EnvKind parse_env_kind(std::string_view s) {
  static constexpr EnvKind all[] = {EnvKind::kQa, EnvKind::kCode};
  return detail::parse_enum(s, all, "environment kind");
}

struct EnvConfig {
  EnvKind kind = EnvKind::kQa;
  QaConfig qa;
  CodeConfig code;
  bool operator==(const EnvConfig&) const = default;
};

struct RunSettings {
  std::string out = "runs/default";
  int eval_every = 10;
  int checkpoint_every = 0;  // 0: only best and final
  int log_every = 1;         // trajectory log cadence in iterations; 0 disables
  std::size_t concurrency = 1;
  std::size_t min_fragments = 1;
  std::size_t buffer_capacity = kDefaultBufferCapacity;
  bool operator==(const RunSettings&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 1;
  WorkflowGraph workflow;
  std::vector<ModelId> models;
  std::map<ModelId, std::map<std::string, std::string>> model_overrides;
  AgentModelMapping mapping;
  RewardSpec rewards;
  TrainerConfig trainer;
  EnvConfig env;
  RunSettings run;

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) return out;
    start = pos + 1;
  }
}

inline std::vector<std::string> parse_list(const std::string& key, const std::string& v) {
  if (v.size() < 2 || v.front() != '[' || v.back() != ']') throw ConfigError(key + ": expected a [list]");
  const std::string inner = trim(std::string_view(v).substr(1, v.size() - 2));
  if (inner.empty()) return {};
  auto items = split(inner, ',');
  for (const auto& it : items)
    if (it.empty()) throw ConfigError(key + ": empty list item");
  return items;
}

inline double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0' || errno == ERANGE || !std::isfinite(x))
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  return x;
}

inline long long parse_int(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  const long long x = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || *end != '\0' || errno == ERANGE) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return x;
}

inline std::size_t parse_count(const std::string& key, const std::string& v) {
  const long long x = parse_int(key, v);
  if (x < 0) throw ConfigError(key + ": must be non-negative");
  return static_cast<std::size_t>(x);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(key + ": expected true or false");
}

inline std::string fmt_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::string fmt_list(const std::vector<std::string>& items) {
  std::string s = "[";
  for (std::size_t i = 0; i < items.size(); ++i) s += (i ? ", " : "") + items[i];
  return s + "]";
}

}  // namespace detail

// Sets one trainer field by its config key; throws on unknown keys.
inline void set_trainer_field(TrainerConfig& t, const std::string& field, const std::string& v) {
  using namespace detail;
  const std::string key = "trainer." + field;
  if (field == "gamma") t.gamma = parse_double(key, v);
  else if (field == "gae_lambda") t.gae_lambda = parse_double(key, v);
  else if (field == "clip_epsilon") t.clip_epsilon = parse_double(key, v);
  else if (field == "learning_rate") t.learning_rate = parse_double(key, v);
  else if (field == "epochs_per_batch") t.epochs_per_batch = static_cast<int>(parse_int(key, v));
  else if (field == "minibatch_size") t.minibatch_size = parse_count(key, v);
  else if (field == "value_coef") t.value_coef = parse_double(key, v);
  else if (field == "entropy_coef") t.entropy_coef = parse_double(key, v);
  else if (field == "max_grad_norm") t.max_grad_norm = parse_double(key, v);
  else if (field == "iterations") t.iterations = static_cast<int>(parse_int(key, v));
  else if (field == "rollout_size") t.rollout_size = parse_count(key, v);
  else if (field == "normalize_advantages") t.normalize_advantages = parse_bool(key, v);
  else throw ConfigError("unknown trainer field '" + field + "'");
}

inline std::vector<std::pair<std::string, std::string>> trainer_fields(const TrainerConfig& t) {
  using detail::fmt_double;
  return {{"gamma", fmt_double(t.gamma)},
          {"gae_lambda", fmt_double(t.gae_lambda)},
          {"clip_epsilon", fmt_double(t.clip_epsilon)},
          {"learning_rate", fmt_double(t.learning_rate)},
          {"epochs_per_batch", std::to_string(t.epochs_per_batch)},
          {"minibatch_size", std::to_string(t.minibatch_size)},
          {"value_coef", fmt_double(t.value_coef)},
          {"entropy_coef", fmt_double(t.entropy_coef)},
          {"max_grad_norm", fmt_double(t.max_grad_norm)},
          {"iterations", std::to_string(t.iterations)},
          {"rollout_size", std::to_string(t.rollout_size)},
          {"normalize_advantages", t.normalize_advantages ? "true" : "false"}};
}

// Trainer settings of one model: run defaults plus its overrides.
inline TrainerConfig trainer_for(const RunConfig& cfg, const ModelId& model) {
  TrainerConfig t = cfg.trainer;
  if (auto it = cfg.model_overrides.find(model); it != cfg.model_overrides.end())
    for (const auto& [k, v] : it->second) set_trainer_field(t, k, v);
  return t;
}

inline RunConfig parse_run_config(std::istream& in) {
  using namespace detail;
  std::map<std::string, std::string> kv;
  std::vector<std::string> order;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(std::string_view(t).substr(0, eq));
    std::string val = trim(std::string_view(t).substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    if (!kv.emplace(key, val).second)
      throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    order.push_back(key);
  }

  RunConfig cfg;
  auto take = [&](const std::string& key) -> std::optional<std::string> {
    auto it = kv.find(key);
    if (it == kv.end()) return std::nullopt;
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  auto require = [&](const std::string& key) {
    auto v = take(key);
    if (!v) throw ConfigError("missing required key '" + key + "'");
    return *v;
  };

  // run
  if (auto v = take("run.seed")) cfg.seed = static_cast<std::uint64_t>(parse_count("run.seed", *v));
  if (auto v = take("run.out")) cfg.run.out = *v;
  if (auto v = take("run.eval_every")) cfg.run.eval_every = static_cast<int>(parse_int("run.eval_every", *v));
  if (auto v = take("run.checkpoint_every"))
    cfg.run.checkpoint_every = static_cast<int>(parse_int("run.checkpoint_every", *v));
  if (auto v = take("run.log_every")) cfg.run.log_every = static_cast<int>(parse_int("run.log_every", *v));
  if (auto v = take("run.concurrency")) cfg.run.concurrency = parse_count("run.concurrency", *v);
  if (auto v = take("run.min_fragments")) cfg.run.min_fragments = parse_count("run.min_fragments", *v);
  if (auto v = take("run.buffer_capacity")) cfg.run.buffer_capacity = parse_count("run.buffer_capacity", *v);

  // workflow
  WorkflowGraph& g = cfg.workflow;
  g.family = parse_family(require("workflow.family"));
  g.entry = require("workflow.entry");
  g.terminal = require("workflow.terminal");
  for (const auto& id : parse_list("workflow.roles", require("workflow.roles"))) {
    RoleSpec r;
    r.id = id;
    const std::string p = "role." + id + ".";
    if (auto v = take(p + "kind")) r.kind = parse_role_kind(*v);
    if (auto v = take(p + "observe")) r.observation_fields = parse_list(p + "observe", *v);
    if (auto v = take(p + "schema")) r.output_schema = parse_output_schema(*v);
    if (auto v = take(p + "max_tokens")) r.max_output_tokens = static_cast<int>(parse_int(p + "max_tokens", *v));
    if (auto v = take(p + "stop")) r.stop = parse_stop_condition(*v);
    if (auto v = take(p + "tools")) r.tool_refs = parse_list(p + "tools", *v);
    if (auto v = take(p + "args")) {
      for (const auto& item : parse_list(p + "args", *v)) {
        const auto e = item.find('=');
        if (e == std::string::npos) throw ConfigError(p + "args: expected name=value, got '" + item + "'");
        r.tool_args[trim(std::string_view(item).substr(0, e))] = trim(std::string_view(item).substr(e + 1));
      }
    }
    g.roles.push_back(std::move(r));
  }
  if (auto v = take("workflow.edges")) {
    for (const auto& item : parse_list("workflow.edges", *v)) {
      Edge e;
      std::string body = item;
      if (auto at = body.find('@'); at != std::string::npos) {
        e.tag = parse_condition_tag(trim(std::string_view(body).substr(at + 1)));
        body = trim(std::string_view(body).substr(0, at));
      }
      const auto arrow = body.find("->");
      if (arrow == std::string::npos) throw ConfigError("workflow.edges: expected 'a -> b', got '" + item + "'");
      e.source = trim(std::string_view(body).substr(0, arrow));
      e.target = trim(std::string_view(body).substr(arrow + 2));
      g.edges.push_back(std::move(e));
    }
  }
  if (auto v = take("workflow.loops")) {
    for (const auto& id : parse_list("workflow.loops", *v)) {
      LoopSpec l;
      l.id = id;
      const std::string p = "loop." + id + ".";
      l.body = parse_list(p + "body", require(p + "body"));
      if (auto m = take(p + "max_turns")) l.max_turns = static_cast<int>(parse_int(p + "max_turns", *m));
      if (auto m = take(p + "end")) {
        const auto colon = m->find(':');
        l.end = parse_loop_end(trim(std::string_view(*m).substr(0, colon)));
        if (l.end != LoopEnd::kNone) {
          if (colon == std::string::npos) throw ConfigError(p + "end: expected rule:role");
          l.end_role = trim(std::string_view(*m).substr(colon + 1));
        }
      }
      if (auto m = take(p + "turn_end")) l.turn_end = *m;
      g.loops.push_back(std::move(l));
    }
  }

  // models and mapping
  cfg.models = parse_list("models", require("models"));
  for (const auto& m : cfg.models) {
    const std::string p = "model." + m + ".";
    for (auto it = kv.begin(); it != kv.end();) {
      if (it->first.starts_with(p)) {
        const std::string field = it->first.substr(p.size());
        TrainerConfig probe;
        set_trainer_field(probe, field, it->second);
        cfg.model_overrides[m][field] = it->second;
        it = kv.erase(it);
      } else {
        ++it;
      }
    }
  }
  for (auto it = kv.begin(); it != kv.end();) {
    if (it->first.starts_with("mapping.")) {
      cfg.mapping.assignments[it->first.substr(8)] = it->second;
      it = kv.erase(it);
    } else {
      ++it;
    }
  }

  // rewards
  cfg.rewards.family = reward_family_for(g.family);
  if (auto v = take("rewards.family")) cfg.rewards.family = parse_reward_family(*v);
  if (auto v = take("rewards.format_penalty")) cfg.rewards.format_penalty = parse_double("rewards.format_penalty", *v);
  for (auto it = kv.begin(); it != kv.end();) {
    if (it->first.starts_with("rewards.lambda.")) {
      const std::string role = it->first.substr(15);
      auto w = parse_list(it->first, it->second);
      if (w.size() != 3) throw ConfigError(it->first + ": expected [node, turn, traj]");
      cfg.rewards.weights[role] = {parse_double(it->first, w[0]), parse_double(it->first, w[1]),
                                   parse_double(it->first, w[2])};
      it = kv.erase(it);
    } else {
      ++it;
    }
  }

  // trainer
  for (auto it = kv.begin(); it != kv.end();) {
    if (it->first.starts_with("trainer.")) {
      set_trainer_field(cfg.trainer, it->first.substr(8), it->second);
      it = kv.erase(it);
    } else {
      ++it;
    }
  }

  // env
  EnvConfig& env = cfg.env;
  env.kind = parse_env_kind(require("env.kind"));
  if (env.kind == EnvKind::kQa) {
    QaConfig& q = env.qa;
    if (auto v = take("env.seed")) q.seed = parse_count("env.seed", *v);
    if (auto v = take("env.train")) q.train = parse_count("env.train", *v);
    if (auto v = take("env.eval")) q.eval = parse_count("env.eval", *v);
    if (auto v = take("env.facts")) q.facts = parse_count("env.facts", *v);
    if (auto v = take("env.hop_mix")) q.hop_mix = parse_double("env.hop_mix", *v);
    if (auto v = take("env.fillers")) q.fillers = parse_count("env.fillers", *v);
    if (auto v = take("env.value_words")) q.value_words = parse_count("env.value_words", *v);
    if (auto v = take("env.value_len")) q.value_len = parse_count("env.value_len", *v);
    if (auto v = take("env.top_k")) q.top_k = parse_count("env.top_k", *v);
  } else {
    CodeConfig& c = env.code;
    if (auto v = take("env.seed")) c.seed = parse_count("env.seed", *v);
    if (auto v = take("env.train")) c.train = parse_count("env.train", *v);
    if (auto v = take("env.eval")) c.eval = parse_count("env.eval", *v);
    if (auto v = take("env.max_target_len")) c.max_target_len = parse_count("env.max_target_len", *v);
    if (auto v = take("env.tests")) c.tests = parse_count("env.tests", *v);
    if (auto v = take("env.max_input")) c.max_input = parse_int("env.max_input", *v);
    if (auto v = take("env.number_min")) c.number_min = parse_int("env.number_min", *v);
    if (auto v = take("env.number_max")) c.number_max = parse_int("env.number_max", *v);
  }

  if (!kv.empty()) {
    for (const auto& k : order)
      if (kv.contains(k)) throw ConfigError("unknown or misplaced key '" + k + "'");
  }
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  return parse_run_config(in);
}

inline std::string serialize_run_config(const RunConfig& cfg) {
  using namespace detail;
  std::ostringstream o;
  const WorkflowGraph& g = cfg.workflow;
  o << "run.seed = " << cfg.seed << '\n';
  o << "run.out = " << cfg.run.out << '\n';
  o << "run.eval_every = " << cfg.run.eval_every << '\n';
  o << "run.checkpoint_every = " << cfg.run.checkpoint_every << '\n';
  o << "run.log_every = " << cfg.run.log_every << '\n';
  o << "run.concurrency = " << cfg.run.concurrency << '\n';
  o << "run.min_fragments = " << cfg.run.min_fragments << '\n';
  o << "run.buffer_capacity = " << cfg.run.buffer_capacity << "\n\n";

  o << "workflow.family = " << to_string(g.family) << '\n';
  o << "workflow.entry = " << g.entry << '\n';
  o << "workflow.terminal = " << g.terminal << '\n';
  std::vector<std::string> ids, edges, loops;
  for (const auto& r : g.roles) ids.push_back(r.id);
  for (const auto& e : g.edges)
    edges.push_back(e.source + " -> " + e.target +
                    (e.tag == ConditionTag::kAlways ? "" : std::string(" @ ") + to_string(e.tag)));
  for (const auto& l : g.loops) loops.push_back(l.id);
  o << "workflow.roles = " << fmt_list(ids) << '\n';
  o << "workflow.edges = " << fmt_list(edges) << '\n';
  o << "workflow.loops = " << fmt_list(loops) << "\n\n";
  for (const auto& r : g.roles) {
    const std::string p = "role." + r.id + ".";
    o << p << "kind = " << to_string(r.kind) << '\n';
    o << p << "observe = " << fmt_list(r.observation_fields) << '\n';
    if (r.output_schema) o << p << "schema = " << to_string(*r.output_schema) << '\n';
    o << p << "max_tokens = " << r.max_output_tokens << '\n';
    o << p << "stop = " << to_string(r.stop) << '\n';
    o << p << "tools = " << fmt_list(r.tool_refs) << '\n';
    std::vector<std::string> args;
    for (const auto& [k, v] : r.tool_args) args.push_back(k + "=" + v);
    o << p << "args = " << fmt_list(args) << '\n';
  }
  for (const auto& l : g.loops) {
    const std::string p = "loop." + l.id + ".";
    o << p << "body = " << fmt_list(l.body) << '\n';
    o << p << "max_turns = " << l.max_turns << '\n';
    o << p << "end = " << to_string(l.end) << (l.end == LoopEnd::kNone ? "" : ":" + l.end_role) << '\n';
    if (!l.turn_end.empty()) o << p << "turn_end = " << l.turn_end << '\n';
  }
  o << '\n';

  o << "models = " << fmt_list(cfg.models) << '\n';
  for (const auto& [m, ov] : cfg.model_overrides)
    for (const auto& [k, v] : ov) o << "model." << m << '.' << k << " = " << v << '\n';
  for (const auto& [role, model] : cfg.mapping.assignments) o << "mapping." << role << " = " << model << '\n';
  o << '\n';

  o << "rewards.family = " << to_string(cfg.rewards.family) << '\n';
  o << "rewards.format_penalty = " << fmt_double(cfg.rewards.format_penalty) << '\n';
  for (const auto& [role, w] : cfg.rewards.weights)
    o << "rewards.lambda." << role << " = "
      << fmt_list({fmt_double(w.node), fmt_double(w.turn), fmt_double(w.traj)}) << '\n';
  o << '\n';

  for (const auto& [k, v] : trainer_fields(cfg.trainer)) o << "trainer." << k << " = " << v << '\n';
  o << '\n';

  o << "env.kind = " << to_string(cfg.env.kind) << '\n';
  if (cfg.env.kind == EnvKind::kQa) {
    const QaConfig& q = cfg.env.qa;
    o << "env.seed = " << q.seed << '\n' << "env.train = " << q.train << '\n' << "env.eval = " << q.eval << '\n';
    o << "env.facts = " << q.facts << '\n' << "env.hop_mix = " << fmt_double(q.hop_mix) << '\n';
    o << "env.fillers = " << q.fillers << '\n' << "env.value_words = " << q.value_words << '\n';
    o << "env.value_len = " << q.value_len << '\n' << "env.top_k = " << q.top_k << '\n';
  } else {
    const CodeConfig& c = cfg.env.code;
    o << "env.seed = " << c.seed << '\n' << "env.train = " << c.train << '\n' << "env.eval = " << c.eval << '\n';
    o << "env.max_target_len = " << c.max_target_len << '\n' << "env.tests = " << c.tests << '\n';
    o << "env.max_input = " << c.max_input << '\n' << "env.number_min = " << c.number_min << '\n';
    o << "env.number_max = " << c.number_max << '\n';
  }
  return o.str();
}

// Semantic checks beyond syntax: graph and mapping well-formedness, family
// consistency across sections, and value ranges.
inline ValidationReport validate_run_config(const RunConfig& cfg) {
  ValidationContext ctx;
  ctx.tools = cfg.env.kind == EnvKind::kQa ? std::set<std::string>{"retrieve"} : std::set<std::string>{"verify"};
  std::set<ModelId> models;
  ValidationReport report;
  for (const auto& m : cfg.models)
    if (!models.insert(m).second) report.add("duplicate model", m);
  ctx.models = models;
  report.merge(validate(cfg.workflow, cfg.mapping, ctx));

  if (cfg.rewards.family != reward_family_for(cfg.workflow.family))
    report.add("reward family mismatch", std::string(to_string(cfg.rewards.family)) + " for workflow " +
                                             to_string(cfg.workflow.family));
  const bool code_family = cfg.workflow.family == Family::kD;
  if (code_family != (cfg.env.kind == EnvKind::kCode))
    report.add("environment family mismatch", std::string(to_string(cfg.env.kind)) + " for workflow " +
                                                  to_string(cfg.workflow.family));
  if (!(cfg.rewards.format_penalty <= 0.0)) report.add("format penalty sign", detail::fmt_double(cfg.rewards.format_penalty));
  for (const auto& [role, w] : cfg.rewards.weights) {
    const RoleSpec* r = cfg.workflow.find(role);
    if (!r || !r->is_agent()) report.add("weights for non-agent role", role);
    if (!std::isfinite(w.node) || !std::isfinite(w.turn) || !std::isfinite(w.traj)) report.add("non-finite weight", role);
  }
  for (const auto& [m, ov] : cfg.model_overrides)
    if (!models.contains(m)) report.add("overrides for unknown model", m);
  try {
    cfg.trainer.check();
    for (const auto& m : cfg.models) trainer_for(cfg, m).check();
  } catch (const ConfigError& e) {
    report.add("trainer setting", e.what());
  }
  if (cfg.run.concurrency < 1) report.add("run setting", "run.concurrency must be at least 1");
  if (cfg.run.eval_every < 0 || cfg.run.checkpoint_every < 0 || cfg.run.log_every < 0)
    report.add("run setting", "cadences must be non-negative");
  return report;
}

inline std::unique_ptr<Environment> make_environment(const RunConfig& cfg) {
  if (cfg.env.kind == EnvKind::kQa) return std::make_unique<QaEnvironment>(cfg.env.qa, cfg.workflow);
  return std::make_unique<CodeEnvironment>(cfg.env.code, cfg.workflow);
}

// Every model sees the same feature layout: the full vocabulary and one slot
// per agent role, so parameter shapes do not depend on the sharing regime.
inline FeatureSpec feature_spec_for(const RunConfig& cfg, const Environment& env) {
  return FeatureSpec{env.vocab().size(), cfg.workflow.agent_roles()};
}

}  // namespace maso
