#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "maso/common.hpp"
#include "maso/rng.hpp"
#include "maso/vocab.hpp"
#include "maso/workflow.hpp"

namespace maso {

enum class Split { kTrain, kEval };

struct TaskRef {
  Split split = Split::kTrain;
  std::size_t index = 0;
  bool operator==(const TaskRef&) const = default;
};

// A task family plus the tools its workflows call. Implementations are pure
// after construction and safe to share across threads.
class Environment {
 public:
  virtual ~Environment() = default;
  virtual const Vocabulary& vocab() const = 0;
  virtual std::size_t size(Split split) const = 0;
  virtual Tokens task_input(TaskRef task) const = 0;
  // Gold answer for QA tasks; empty for verifier-graded tasks.
  virtual Tokens gold(TaskRef task) const = 0;
  virtual std::set<std::string> tool_names() const = 0;
  virtual ToolResult run_tool(const std::string& tool, const RoleSpec& role,
                              const WorkflowState& state, TaskRef task) const = 0;
  virtual void export_dataset(std::ostream& out) const = 0;
};

inline std::string arg_or(const RoleSpec& role, const std::string& key, std::string fallback) {
  auto it = role.tool_args.find(key);
  return it == role.tool_args.end() ? fallback : it->second;
}

// ===========================================================================
// Retrieval QA.

struct Fact {
  TokenId key = 0;
  Tokens value;
};

struct KnowledgeBase {
  std::vector<Fact> facts;
  std::uint64_t seed = 0;

  std::size_t size() const { return facts.size(); }

  std::optional<std::size_t> find(TokenId key) const {
    for (std::size_t i = 0; i < facts.size(); ++i)
      if (facts[i].key == key) return i;
    return std::nullopt;
  }

  Tokens fact_tokens(std::size_t i) const {
    Tokens out{facts[i].key};
    out.insert(out.end(), facts[i].value.begin(), facts[i].value.end());
    return out;
  }
};

struct QATask {
  std::size_t id = 0;
  Tokens question;
  Tokens gold;
  int hop_count = 1;
  std::vector<std::size_t> chain;  // fact indices, question fact first
};

struct QaConfig {
  std::uint64_t seed = 7;
  std::size_t facts = 32;
  std::size_t train = 200;
  std::size_t eval = 50;
  double hop_mix = 0.0;  // fraction of two-hop tasks
  std::size_t fillers = 4;
  std::size_t value_words = 12;
  std::size_t value_len = 1;  // max words in a terminal fact's value
  std::size_t top_k = 4;
  bool operator==(const QaConfig&) const = default;
};

struct QaDataset {
  KnowledgeBase kb;
  std::vector<QATask> train;
  std::vector<QATask> eval;
};

// Registers the QA surfaces and generates a knowledge base plus disjoint
// train/eval task splits, all determined by `cfg.seed`.
inline QaDataset make_qa_dataset(const QaConfig& cfg, Vocabulary& vocab) {
  if (cfg.facts < 1 || cfg.value_words < 1 || cfg.value_len < 1 || cfg.fillers < 1)
    throw ConfigError("qa dataset needs facts, value words and fillers");
  if (cfg.hop_mix < 0.0 || cfg.hop_mix > 1.0) throw ConfigError("hop_mix must lie in [0,1]");
  const std::size_t n = cfg.train + cfg.eval;
  if (n < 1) throw ConfigError("qa dataset needs at least one task");
  if (cfg.fillers * cfg.fillers * cfg.facts < n)
    throw ConfigError("vocabulary too small for the requested number of distinct questions");

  std::vector<TokenId> keys, words, fillers;
  for (std::size_t i = 0; i < cfg.facts; ++i)
    keys.push_back(vocab.add("k" + std::to_string(i), TokenClass::kWord));
  for (std::size_t i = 0; i < cfg.value_words; ++i)
    words.push_back(vocab.add("w" + std::to_string(i), TokenClass::kWord));
  for (std::size_t i = 0; i < cfg.fillers; ++i)
    fillers.push_back(vocab.add("f" + std::to_string(i), TokenClass::kWord));

  QaDataset ds;
  ds.kb.seed = cfg.seed;
  Rng rng(mix_seed({cfg.seed, 0x6b62}));
  std::size_t bridges = 0;
  if (cfg.hop_mix > 0.0) {
    bridges = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg.hop_mix * cfg.facts / 2.0)));
    bridges = std::min(bridges, cfg.facts - 1);
  }
  if (cfg.hop_mix > 0.0 && bridges == 0) throw ConfigError("two-hop tasks need at least two facts");
  const std::size_t terminals = cfg.facts - bridges;
  for (std::size_t i = 0; i < cfg.facts; ++i) {
    Fact f{keys[i], {}};
    if (i >= terminals) {
      f.value.push_back(keys[rng.below(terminals)]);
    } else {
      const std::size_t len = 1 + rng.below(cfg.value_len);
      std::vector<std::size_t> pick = rng.permutation(words.size());
      for (std::size_t w = 0; w < len && w < pick.size(); ++w) f.value.push_back(words[pick[w]]);
    }
    ds.kb.facts.push_back(std::move(f));
  }

  std::set<Tokens> seen;
  const std::size_t max_tries = 1000 * n + 1000;
  std::size_t tries = 0;
  std::vector<QATask> tasks;
  while (tasks.size() < n) {
    if (++tries > max_tries) throw ConfigError("vocabulary too small for the requested number of distinct questions");
    const bool two_hop = bridges > 0 && rng.uniform() < cfg.hop_mix;
    const std::size_t fact = two_hop ? terminals + rng.below(bridges) : rng.below(terminals);
    Tokens q{fillers[rng.below(fillers.size())], fillers[rng.below(fillers.size())], keys[fact]};
    if (!seen.insert(q).second) continue;
    QATask t;
    t.id = tasks.size();
    t.question = q;
    t.hop_count = two_hop ? 2 : 1;
    t.chain.push_back(fact);
    if (two_hop) {
      auto next = ds.kb.find(ds.kb.facts[fact].value.front());
      t.chain.push_back(*next);
      t.gold = ds.kb.facts[*next].value;
    } else {
      t.gold = ds.kb.facts[fact].value;
    }
    tasks.push_back(std::move(t));
  }
  ds.train.assign(tasks.begin(), tasks.begin() + static_cast<std::ptrdiff_t>(cfg.train));
  ds.eval.assign(tasks.begin() + static_cast<std::ptrdiff_t>(cfg.train), tasks.end());
  for (std::size_t i = 0; i < ds.eval.size(); ++i) ds.eval[i].id = i;
  return ds;
}

struct Passage {
  std::size_t fact = 0;
  Tokens tokens;  // key followed by value
};

// Facts whose key occurs in the query come first (query order), then seeded
// distractors; exactly min(k, |kb|) passages.
inline std::vector<Passage> retrieve(const KnowledgeBase& kb, const Tokens& query, std::size_t k) {
  if (k < 1) throw ContractError("retrieve needs k >= 1");
  std::vector<Passage> out;
  std::set<std::size_t> used;
  for (TokenId t : query) {
    if (out.size() == k) break;
    if (auto f = kb.find(t); f && used.insert(*f).second) out.push_back({*f, kb.fact_tokens(*f)});
  }
  Rng rng(mix_seed({kb.seed, digest(query), 0x7265}));
  for (std::size_t i : rng.permutation(kb.size())) {
    if (out.size() >= k) break;
    if (used.insert(i).second) out.push_back({i, kb.fact_tokens(i)});
  }
  return out;
}

class QaEnvironment final : public Environment {
 public:
  // Registers role tokens for every graph role, then the QA surfaces. Passage
  // id tokens exist only when some role cites passages.
  QaEnvironment(const QaConfig& cfg, const WorkflowGraph& graph) : cfg_(cfg) {
    for (const auto& r : graph.roles) vocab_.add_role(r.id);
    data_ = make_qa_dataset(cfg, vocab_);
    bool cites = false;
    std::size_t retrievers = 0;
    for (const auto& r : graph.roles) {
      if (r.output_schema == OutputSchema::kEvidenceSubset) cites = true;
      for (const auto& t : r.tool_refs)
        if (t == "retrieve") ++retrievers;
    }
    if (cites)
      for (std::size_t i = 0; i < retrievers * cfg.top_k; ++i)
        passage_ids_.push_back(vocab_.add("P" + std::to_string(i), TokenClass::kPassage));
  }

  const Vocabulary& vocab() const override { return vocab_; }
  const QaDataset& data() const { return data_; }
  const QaConfig& config() const { return cfg_; }

  std::size_t size(Split s) const override { return split(s).size(); }

  const QATask& task(TaskRef t) const { return split(t.split).at(t.index); }

  Tokens task_input(TaskRef t) const override { return task(t).question; }
  Tokens gold(TaskRef t) const override { return task(t).gold; }

  std::set<std::string> tool_names() const override { return {"retrieve"}; }

  // Arguments: slot (query index and passage-id block, default 0), source
  // (scratchpad field holding queries, default last_queries), mode
  // (append|set on the passages field, default append).
  ToolResult run_tool(const std::string& tool, const RoleSpec& role, const WorkflowState& state,
                      TaskRef) const override {
    if (tool != "retrieve") throw ToolError("qa environment has no tool '" + tool + "'");
    const std::size_t slot = std::stoul(arg_or(role, "slot", "0"));
    const std::string source = arg_or(role, "source", "last_queries");
    const std::string mode = arg_or(role, "mode", "append");
    Tokens query;
    if (auto it = state.scratchpad.find(source); it != state.scratchpad.end()) {
      auto qs = split_sep(it->second);
      if (slot < qs.size()) query = qs[slot];
    }
    std::vector<Tokens> segments;
    auto hits = retrieve(data_.kb, query, cfg_.top_k);
    for (std::size_t i = 0; i < hits.size(); ++i) {
      Tokens seg;
      if (!passage_ids_.empty()) {
        const std::size_t pid = slot * cfg_.top_k + i;
        if (pid >= passage_ids_.size()) throw ToolError("retrieval slot beyond passage ids");
        seg.push_back(passage_ids_[pid]);
      }
      seg.insert(seg.end(), hits[i].tokens.begin(), hits[i].tokens.end());
      segments.push_back(std::move(seg));
    }
    ToolResult r;
    if (mode == "set") {
      r.set["passages"] = join_sep(segments);
    } else {
      r.append["passages"] = join_sep(segments);
    }
    return r;
  }

  void export_dataset(std::ostream& out) const override {
    out << "# maso " << kVersion << " seed=" << cfg_.seed << " kind=qa\n";
    for (std::size_t i = 0; i < data_.kb.size(); ++i)
      out << "fact " << i << ' ' << vocab_.decode(data_.kb.fact_tokens(i)) << '\n';
    auto dump = [&](const char* name, const std::vector<QATask>& ts) {
      for (const auto& t : ts)
        out << "task " << name << ' ' << t.id << " hop=" << t.hop_count << " q=" << vocab_.decode(t.question)
            << " gold=" << vocab_.decode(t.gold) << '\n';
    };
    dump("train", data_.train);
    dump("eval", data_.eval);
  }

 private:
  const std::vector<QATask>& split(Split s) const { return s == Split::kTrain ? data_.train : data_.eval; }

  QaConfig cfg_;
  Vocabulary vocab_;
  QaDataset data_;
  std::vector<TokenId> passage_ids_;
};

// ===========================================================================
// Verifier-graded program synthesis on a loop-free stack machine.

enum class Op : std::uint8_t { kPushInput, kPush1, kPush2, kAdd, kSub, kMul, kReturn };

inline constexpr Op kAllOps[] = {Op::kPushInput, Op::kPush1, Op::kPush2, Op::kAdd,
                                 Op::kSub,       Op::kMul,   Op::kReturn};
inline constexpr std::size_t kMaxProgramLength = 8;

inline const char* to_string(Op op) {
  switch (op) {
    case Op::kPushInput: return "PUSH_INPUT";
    case Op::kPush1: return "PUSH_1";
    case Op::kPush2: return "PUSH_2";
    case Op::kAdd: return "ADD";
    case Op::kSub: return "SUB";
    case Op::kMul: return "MUL";
    case Op::kReturn: return "RETURN";
  }
  return "?";
}

// Runs until RETURN. Empty stack start; SUB/ADD/MUL pop b then a and push a op b.
// nullopt on stack underflow or a missing RETURN.
inline std::optional<std::int64_t> execute(std::span<const Op> program, std::int64_t input) {
  std::vector<std::int64_t> stack;
  for (Op op : program) {
    switch (op) {
      case Op::kPushInput: stack.push_back(input); break;
      case Op::kPush1: stack.push_back(1); break;
      case Op::kPush2: stack.push_back(2); break;
      case Op::kReturn:
        if (stack.empty()) return std::nullopt;
        return stack.back();
      default: {
        if (stack.size() < 2) return std::nullopt;
        const std::int64_t b = stack.back();
        stack.pop_back();
        const std::int64_t a = stack.back();
        stack.pop_back();
        stack.push_back(op == Op::kAdd ? a + b : op == Op::kSub ? a - b : a * b);
      }
    }
  }
  return std::nullopt;
}

struct TestCase {
  std::int64_t input = 0;
  std::int64_t expected = 0;
};

struct CodeTask {
  std::size_t id = 0;
  std::vector<Op> target;
  std::vector<TestCase> tests;
  Tokens prompt;
};

struct VerifierResult {
  double score = 0.0;
  std::vector<bool> passed;
  Tokens feedback;  // (input, expected, actual) of the first failing test
};

struct CodeConfig {
  std::uint64_t seed = 11;
  std::size_t train = 200;
  std::size_t eval = 50;
  std::size_t max_target_len = 4;
  std::size_t tests = 4;
  std::int64_t max_input = 7;
  std::int64_t number_min = -16;
  std::int64_t number_max = 64;
  bool operator==(const CodeConfig&) const = default;
};

// Token ids of the code surfaces inside a vocabulary.
struct CodeTokens {
  TokenId ops[7] = {};
  std::int64_t number_min = 0;
  std::vector<TokenId> numbers;  // number_min..number_max
  TokenId number_overflow = 0;
  std::vector<TokenId> inputs;  // 0..max_input
  TokenId crash = 0;

  static CodeTokens register_in(Vocabulary& vocab, const CodeConfig& cfg) {
    CodeTokens t;
    for (Op op : kAllOps) t.ops[static_cast<int>(op)] = vocab.add(to_string(op), TokenClass::kInstruction);
    t.number_min = cfg.number_min;
    for (std::int64_t v = cfg.number_min; v <= cfg.number_max; ++v)
      t.numbers.push_back(vocab.add("n" + std::to_string(v), TokenClass::kNumber));
    t.number_overflow = vocab.add("n?", TokenClass::kNumber);
    for (std::int64_t v = 0; v <= cfg.max_input; ++v)
      t.inputs.push_back(vocab.add("x" + std::to_string(v), TokenClass::kNumber));
    t.crash = vocab.add("crash", TokenClass::kWord);
    return t;
  }

  TokenId number(std::int64_t v) const {
    const std::int64_t i = v - number_min;
    if (i < 0 || i >= static_cast<std::int64_t>(numbers.size())) return number_overflow;
    return numbers[static_cast<std::size_t>(i)];
  }

  TokenId input(std::int64_t v) const { return inputs.at(static_cast<std::size_t>(v)); }

  std::optional<Op> op_of(TokenId t) const {
    for (Op op : kAllOps)
      if (ops[static_cast<int>(op)] == t) return op;
    return std::nullopt;
  }

  Tokens encode(std::span<const Op> program) const {
    Tokens out;
    for (Op op : program) out.push_back(ops[static_cast<int>(op)]);
    return out;
  }
};

// Instructions up to and including the first RETURN. nullopt when a token
// before it is not an instruction, when RETURN is missing, or when the
// program is longer than the machine allows.
inline std::optional<std::vector<Op>> parse_program(const Tokens& tokens, const CodeTokens& ct) {
  std::vector<Op> prog;
  for (TokenId t : tokens) {
    auto op = ct.op_of(t);
    if (!op) return std::nullopt;
    prog.push_back(*op);
    if (prog.size() > kMaxProgramLength) return std::nullopt;
    if (*op == Op::kReturn) return prog;
  }
  return std::nullopt;
}

inline VerifierResult verify(const CodeTask& task, const Tokens& program, const CodeTokens& ct) {
  VerifierResult r;
  auto parsed = parse_program(program, ct);
  std::size_t n_pass = 0;
  for (const auto& tc : task.tests) {
    std::optional<std::int64_t> got;
    if (parsed) got = execute(*parsed, tc.input);
    const bool ok = got && *got == tc.expected;
    r.passed.push_back(ok);
    if (ok) {
      ++n_pass;
    } else if (r.feedback.empty()) {
      r.feedback = {ct.input(tc.input), ct.number(tc.expected), got ? ct.number(*got) : ct.crash};
    }
  }
  r.score = task.tests.empty()
                ? 0.0
                : canonical_score(static_cast<double>(n_pass) / static_cast<double>(task.tests.size()));
  return r;
}

inline std::vector<CodeTask> make_code_dataset(const CodeConfig& cfg, const CodeTokens& ct) {
  if (cfg.max_target_len < 2 || cfg.max_target_len > kMaxProgramLength)
    throw ConfigError("max_target_len must lie in [2, 8]");
  if (cfg.tests < 4) throw ConfigError("code tasks need at least 4 tests");
  if (cfg.max_input + 1 < static_cast<std::int64_t>(cfg.tests))
    throw ConfigError("not enough distinct test inputs");
  const std::size_t n = cfg.train + cfg.eval;
  Rng rng(mix_seed({cfg.seed, 0x636f}));
  std::set<Tokens> seen;
  std::vector<CodeTask> tasks;
  std::size_t tries = 0;
  while (tasks.size() < n) {
    if (++tries > 1000 * n + 1000) throw ConfigError("could not generate enough distinct code tasks");
    const std::size_t len = 2 + rng.below(cfg.max_target_len - 1);
    std::vector<Op> prog;
    for (std::size_t i = 0; i + 1 < len; ++i) prog.push_back(kAllOps[rng.below(6)]);
    prog.push_back(Op::kReturn);
    if (!execute(prog, 0)) continue;  // underflow does not depend on the input
    std::vector<std::size_t> inputs = rng.permutation(static_cast<std::size_t>(cfg.max_input + 1));
    inputs.resize(cfg.tests);
    CodeTask t;
    t.target = prog;
    for (std::size_t in : inputs) {
      const auto x = static_cast<std::int64_t>(in);
      t.tests.push_back({x, *execute(prog, x)});
    }
    std::vector<Tokens> parts;
    for (const auto& tc : t.tests) parts.push_back({ct.input(tc.input), ct.number(tc.expected)});
    t.prompt = join_sep(parts);
    if (!seen.insert(t.prompt).second) continue;
    t.id = tasks.size();
    tasks.push_back(std::move(t));
  }
  return tasks;
}

class CodeEnvironment final : public Environment {
 public:
  CodeEnvironment(const CodeConfig& cfg, const WorkflowGraph& graph) : cfg_(cfg) {
    for (const auto& r : graph.roles) vocab_.add_role(r.id);
    tokens_ = CodeTokens::register_in(vocab_, cfg);
    auto all = make_code_dataset(cfg, tokens_);
    train_.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(cfg.train));
    eval_.assign(all.begin() + static_cast<std::ptrdiff_t>(cfg.train), all.end());
    for (std::size_t i = 0; i < eval_.size(); ++i) eval_[i].id = i;
  }

  const Vocabulary& vocab() const override { return vocab_; }
  const CodeTokens& tokens() const { return tokens_; }
  const CodeConfig& config() const { return cfg_; }
  std::size_t size(Split s) const override { return split(s).size(); }
  const CodeTask& task(TaskRef t) const { return split(t.split).at(t.index); }
  Tokens task_input(TaskRef t) const override { return task(t).prompt; }
  Tokens gold(TaskRef) const override { return {}; }
  std::set<std::string> tool_names() const override { return {"verify"}; }

  // Reads the `program` field; writes `feedback` and reports the pass rate.
  ToolResult run_tool(const std::string& tool, const RoleSpec&, const WorkflowState& state,
                      TaskRef t) const override {
    if (tool != "verify") throw ToolError("code environment has no tool '" + tool + "'");
    Tokens program;
    if (auto it = state.scratchpad.find("program"); it != state.scratchpad.end()) program = it->second;
    VerifierResult v = verify(task(t), program, tokens_);
    ToolResult r;
    r.set["feedback"] = v.feedback;
    r.score = v.score;
    return r;
  }

  void export_dataset(std::ostream& out) const override {
    out << "# maso " << kVersion << " seed=" << cfg_.seed << " kind=code\n";
    auto dump = [&](const char* name, const std::vector<CodeTask>& ts) {
      for (const auto& t : ts) {
        out << "task " << name << ' ' << t.id << " target=" << vocab_.decode(tokens_.encode(t.target))
            << " tests=";
        for (std::size_t i = 0; i < t.tests.size(); ++i)
          out << (i ? "," : "") << t.tests[i].input << ':' << t.tests[i].expected;
        out << '\n';
      }
    };
    dump("train", train_);
    dump("eval", eval_);
  }

 private:
  const std::vector<CodeTask>& split(Split s) const { return s == Split::kTrain ? train_ : eval_; }

  CodeConfig cfg_;
  Vocabulary vocab_;
  CodeTokens tokens_;
  std::vector<CodeTask> train_;
  std::vector<CodeTask> eval_;
};

}  // namespace maso
