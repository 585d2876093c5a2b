// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails. Tolerances are fixed here, not configurable.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "maso/cli.hpp"
#include "maso/run.hpp"
#include "fixtures.hpp"
#include "scripted.hpp"

using namespace maso;
using namespace maso::testing;
namespace fs = std::filesystem;

namespace {

constexpr double kGaeTolerance = 1e-10;
constexpr double kGaeSeconds = 1.0;
constexpr double kFdStep = 1e-5;
constexpr double kFdTolerance = 1e-4;
constexpr double kFdFloor = 1e-6;
constexpr double kFdSeconds = 30.0;
constexpr std::size_t kFdMaxParams = 200;
constexpr std::size_t kRegimeTrajectories = 1000;
constexpr double kLearnGainQa = 0.30;
constexpr double kLearnGainCode = 0.25;
constexpr double kQaSeconds = 300.0;
constexpr double kCodeSeconds = 600.0;
constexpr std::size_t kMaxVocab = 64;
constexpr double kRatioTolerance = 1e-12;

struct Outcome {
  bool pass = false;
  std::string detail;
};

// Largest first-minibatch ratio deviation seen by any training run so far.
double g_ratio_dev = 0.0;
std::size_t g_ratio_updates = 0;
int g_ratio_runs = 0;
int g_failures = 0;

void note_run(double dev, std::size_t updates) {
  g_ratio_dev = std::max(g_ratio_dev, dev);
  g_ratio_updates += updates;
  ++g_ratio_runs;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

template <class F>
void criterion(int n, const char* what, F body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++g_failures;
  std::printf("[%s] AC%d %s (%s; %.2fs)\n", o.pass ? "PASS" : "FAIL", n, what, o.detail.c_str(), secs);
  std::fflush(stdout);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<RolloutTask> train_tasks(std::size_t n, std::size_t env_size) {
  std::vector<RolloutTask> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({TaskRef{Split::kTrain, i % env_size}, TrajectoryId{1, 1, i, false}});
  return out;
}

// ---------------------------------------------------------------------------

Outcome gae_matches_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(1001);
  const double gammas[] = {0.9, 0.99, 1.0};
  const double lambdas[] = {0.0, 0.5, 0.95, 1.0};
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 1 + rng.below(16);
    const double gamma = gammas[rng.below(3)], lambda = lambdas[rng.below(4)];
    std::vector<double> r(n), v(n);
    for (auto& x : r) x = 4.0 * rng.uniform() - 2.0;
    for (auto& x : v) x = 4.0 * rng.uniform() - 2.0;
    const auto got = gae(r, v, 0.0, gamma, lambda);
    const auto want = gae_double_sum(r, v, 0.0, gamma, lambda);
    for (std::size_t t = 0; t < n; ++t) {
      worst = std::max(worst, std::abs(got.advantages[t] - want[t]));
      worst = std::max(worst, std::abs(got.returns[t] - (want[t] + v[t])));
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= kGaeTolerance && secs < kGaeSeconds, fmt("1000 instances, max abs err %.3g", worst)};
}

Outcome gradients_match_finite_differences() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::size_t params = 0;
  for (std::uint64_t b = 0; b < 100; ++b) {
    auto m = random_model(5000 + b);
    params = m.params().size();
    auto batch = sampled_batch(m, b, 6, [](const Tokens&, Rng& rng) { return 2.0 * rng.uniform() - 0.5; });
    prepare_batch(batch, TrainerConfig{});
    Rng jitter(b + 77);
    for (std::size_t i = 0; i < batch.mask.size(); ++i)
      if (batch.mask[i]) batch.old_logprobs[i] += 0.3 * (2.0 * jitter.uniform() - 1.0);
    const auto feats = batch_features(m.spec(), batch);
    const auto rows = all_rows(batch);
    const double ent = 0.01;
    const auto pl = ppo_policy_loss(m.spec(), m.params(), batch, feats, rows, 0.2, ent);
    const auto vl = value_loss(m.spec(), m.params(), batch, feats, rows, 0.5);
    Params p = m.params();
    for (std::size_t i = 0; i < p.size(); ++i) {
      double& x = param_at(p, i);
      const double x0 = x;
      x = x0 + kFdStep;
      const double pu = ppo_policy_loss(m.spec(), p, batch, feats, rows, 0.2, ent).loss;
      const double vu = value_loss(m.spec(), p, batch, feats, rows, 0.5).loss;
      x = x0 - kFdStep;
      const double pd = ppo_policy_loss(m.spec(), p, batch, feats, rows, 0.2, ent).loss;
      const double vd = value_loss(m.spec(), p, batch, feats, rows, 0.5).loss;
      x = x0;
      worst = std::max(worst, relative_error(grad_at(pl.grad, i), (pu - pd) / (2 * kFdStep), kFdFloor));
      worst = std::max(worst, relative_error(grad_at(vl.grad, i), (vu - vd) / (2 * kFdStep), kFdFloor));
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= kFdTolerance && params <= kFdMaxParams && secs < kFdSeconds,
          fmt("100 batches, %zu params, max rel err %.3g", params, worst)};
}

// Workflow B under one mapping: rollouts, assembly, then the routing audit.
bool audit_regime(const RunConfig& cfg, Regime want, std::string& detail) {
  Runner runner(cfg);
  auto recs = run_rollout(train_tasks(kRegimeTrajectories, runner.env().size(Split::kTrain)), cfg.workflow,
                          cfg.mapping, runner.workers(), runner.env(), 4);
  std::size_t expected = 0, failed = 0;
  for (auto& rec : recs) {
    if (rec.failed) {
      ++failed;
      continue;
    }
    for (const auto& s : rec.steps) expected += s.kind == RoleKind::kAgent;
    assemble_and_commit(rec, cfg.rewards, cfg.workflow, runner.workers(), cfg.mapping, runner.env());
  }
  const auto report = audit_routing(recs, cfg.mapping, runner.workers().buffers());
  std::size_t stored = 0;
  for (const auto& [id, a] : report.models) stored += a.fragments;
  bool ok = report.clean() && stored == expected && regime(cfg.mapping) == want && failed == 0;
  if (want == Regime::kFullShared) {
    const auto frags = runner.workers().at("shared").buffer.snapshot();
    ok = ok && frags.size() == expected;
    for (const auto& f : frags) ok = ok && recs.at(f.trajectory.task).steps.at(f.step - 1).role == f.role;
  }
  detail += fmt("%s %zu/%zu clean=%d; ", to_string(want), stored, expected, report.clean() ? 1 : 0);
  return ok;
}

Outcome routing_audits_clean() {
  const RunConfig base = load_config("workflow_b.cfg");
  RunConfig shared = base;
  shared.models = {"shared"};
  for (auto& [role, model] : shared.mapping.assignments) model = "shared";
  shared.model_overrides.clear();
  RunConfig separate = base;
  separate.models = {"m_decompose", "m_evidence_0", "m_evidence_1", "m_answer"};
  separate.mapping.assignments["evidence_0"] = "m_evidence_0";
  separate.mapping.assignments["evidence_1"] = "m_evidence_1";
  separate.model_overrides.clear();

  std::string detail;
  bool ok = true;
  ok &= audit_regime(base, Regime::kPartialShared, detail);
  ok &= audit_regime(shared, Regime::kFullShared, detail);
  ok &= audit_regime(separate, Regime::kFullSeparate, detail);
  detail.resize(detail.size() - 2);
  return {ok, detail};
}

std::map<std::string, std::vector<double>> totals_by_role(const TrajectoryRecord& r, const RewardAssignment& a) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& s : r.steps)
    if (s.kind == RoleKind::kAgent) out[s.role].push_back(a.by_step.at(s.t).total);
  return out;
}

double sum(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

Outcome marginal_rewards_telescope() {
  const RewardSpec mask{RewardFamily::kTurnwiseMASK, {}, -0.5};
  const RewardSpec verify{RewardFamily::kVerifyDelta, {}, -0.5};
  Vocabulary vocab;
  std::vector<TokenId> pool;
  for (int i = 0; i < 8; ++i) pool.push_back(vocab.add("w" + std::to_string(i), TokenClass::kWord));

  Rng rng(4004);
  std::size_t mask_bad = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    Tokens gold;
    const std::size_t gold_len = 1 + rng.below(3);
    for (std::size_t i = 0; i < gold_len; ++i) gold.push_back(pool[rng.below(4)]);
    std::vector<Tokens> answers;
    const std::size_t turns = 1 + rng.below(3);
    for (std::size_t i = 0; i <= turns; ++i) {
      Tokens a;
      const std::size_t len = 1 + rng.below(4);
      for (std::size_t j = 0; j < len; ++j) a.push_back(pool[rng.below(pool.size())]);
      answers.push_back(a);
    }
    const int end_turn = rng.uniform() < 0.3 ? static_cast<int>(turns) + 1 : 0;
    const auto rec = mask_record(answers, end_turn);
    auto by = totals_by_role(rec, assign_mask(rec, mask, gold, vocab));
    const double target = answer_f1(answers.back(), gold, vocab) - answer_f1(answers.front(), gold, vocab);
    for (const char* role : {"search", "summary", "update"}) mask_bad += sum(by[role]) != target;
  }

  std::size_t sequences = 0, verify_bad = 0;
  std::vector<double> s;
  auto check = [&] {
    ++sequences;
    const auto rec = verify_record(s);
    auto by = totals_by_role(rec, assign_verify_delta(rec, verify));
    const double last = s.back();
    verify_bad += sum(by["planner"]) != last;
    verify_bad += sum(by["coder"]) != last;
    verify_bad += by["planner"][0] + sum(by["reflector"]) != last;
  };
  auto grid = [](int k) { return canonical_score(k / 100.0); };
  for (int a = 0; a <= 100; ++a) {
    s = {grid(a)};
    check();
    for (int b = 0; b <= 100; ++b) {
      s = {grid(a), grid(b)};
      check();
      for (int c = 0; c <= 100; ++c) {
        s = {grid(a), grid(b), grid(c)};
        check();
      }
    }
  }
  return {mask_bad == 0 && verify_bad == 0 && sequences == 1040603,
          fmt("C: 1000 sequences, %zu mismatches; D: %zu sequences, %zu mismatches", mask_bad, sequences, verify_bad)};
}

Outcome end_on_pass() {
  const auto cfg = load_config("workflow_d.cfg");
  const auto pass = run_scripted_coder(cfg, true);
  const auto fail = run_scripted_coder(cfg, false);
  std::size_t pass_bad = 0, fail_bad = 0;
  for (const auto& r : pass)
    pass_bad += r.failed || r.used_turns != 1 || r.verifier_scores.size() != 1 || r.verifier_scores.back() != 1.0;
  for (const auto& r : fail) fail_bad += r.failed || r.used_turns != 3 || r.verifier_scores.back() >= 1.0;
  return {pass_bad == 0 && fail_bad == 0 && pass.size() == 250 && fail.size() == 250,
          fmt("correct coder: %zu/%zu stop after turn 1; wrong coder: %zu/%zu use 3 turns", pass.size() - pass_bad,
              pass.size(), fail.size() - fail_bad, fail.size())};
}

// Verify loop where only the coder acts: one round, so the reflector after
// the turn end never runs. Sharing it with the coder must not matter.
RunConfig single_active_role(const fs::path& out, bool shared) {
  RunConfig cfg = load_config("workflow_d.cfg");
  auto& g = cfg.workflow;
  std::erase_if(g.roles, [](const RoleSpec& r) { return r.id == "planner"; });
  for (auto& r : g.roles)
    if (r.id == "coder") r.observation_fields = {"task", "feedback"};
  g.edges = {Edge{"coder", "verify"}, Edge{"verify", "reflector"}};
  g.loops.front().body = {"coder", "verify", "reflector"};
  g.loops.front().max_turns = 1;
  g.entry = "coder";
  cfg.mapping.assignments = {{"coder", "m1"}, {"reflector", shared ? "m1" : "m2"}};
  cfg.models = shared ? std::vector<ModelId>{"m1"} : std::vector<ModelId>{"m1", "m2"};
  cfg.model_overrides.clear();
  cfg.trainer.iterations = 8;
  cfg.trainer.rollout_size = 32;
  cfg.run.eval_every = 4;
  cfg.run.out = out.string();
  return cfg;
}

Outcome single_role_sharing_is_neutral() {
  const auto dir = scratch_dir("acceptance_ac6");
  const auto shared = single_active_role(dir / "shared", true);
  const auto separate = single_active_role(dir / "separate", false);
  if (regime(shared.mapping) != Regime::kFullShared || regime(separate.mapping) != Regime::kFullSeparate)
    return {false, "unexpected regimes"};
  const auto a = train_loop(shared);
  const auto b = train_loop(separate);
  const std::string log_a = read_file(dir / "shared" / "trajectories.log");
  const std::string log_b = read_file(dir / "separate" / "trajectories.log");
  const std::string ck_a = read_file(dir / "shared" / "ckpt" / "final" / "m1.ckpt");
  const std::string ck_b = read_file(dir / "separate" / "ckpt" / "final" / "m1.ckpt");
  const std::string init = read_file(dir / "shared" / "ckpt" / "iter_000000" / "m1.ckpt");
  const bool reflector_idle = log_a.find("\"role\":\"reflector\"") == std::string::npos;
  const bool trained = !ck_a.empty() && ck_a != init && a.updates > 0;
  const bool ok = !log_a.empty() && log_a == log_b && ck_a == ck_b && reflector_idle && trained && a.final == b.final;
  return {ok, fmt("log %zu bytes %s, m1 checkpoint %s, %zu updates, reflector idle=%d", log_a.size(),
                  log_a == log_b ? "identical" : "differs", ck_a == ck_b ? "identical" : "differs", a.updates,
                  reflector_idle ? 1 : 0)};
}

struct LearnStats {
  double gain = 0.0;
  double base_turns = 0.0;
  double best_turns = 0.0;
  double seconds = 0.0;
  std::string per_seed;
};

LearnStats learn_over_seeds(const char* config) {
  LearnStats st;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    RunConfig cfg = load_config(config);
    cfg.seed = seed;
    const auto s = train_loop(cfg, TrainOptions{false, {}});
    note_run(s.max_first_ratio_dev, s.updates);
    st.gain += (s.final.metric - s.baseline.metric) / 5.0;
    st.base_turns += s.baseline.used_turns / 5.0;
    st.best_turns += s.best.used_turns / 5.0;
    st.per_seed += fmt("%s%.2f->%.2f", seed > 1 ? " " : "", s.baseline.metric, s.final.metric);
  }
  st.seconds = seconds_since(t0);
  return st;
}

Outcome qa_learns() {
  const auto cfg = load_config("workflow_a.cfg");
  const Runner probe(cfg);
  const std::size_t vocab = probe.env().vocab().size();
  const bool setup = vocab <= kMaxVocab && cfg.env.qa.facts == 32 && probe.env().size(Split::kTrain) == 200 &&
                     probe.env().size(Split::kEval) == 50 && cfg.models.size() == 2 &&
                     regime(cfg.mapping) == Regime::kFullSeparate && cfg.trainer.iterations == 300;
  if (!setup) return {false, fmt("workflow A setup out of range (vocab %zu)", vocab)};
  const auto st = learn_over_seeds("workflow_a.cfg");
  return {st.gain >= kLearnGainQa && st.seconds <= kQaSeconds,
          fmt("mean eval_f1 gain %.3f over 5 seeds [%s], vocab %zu", st.gain, st.per_seed.c_str(), vocab)};
}

Outcome code_learns() {
  const auto cfg = load_config("workflow_d.cfg");
  const Runner probe(cfg);
  const bool setup = cfg.env.code.max_target_len <= 4 && probe.env().size(Split::kTrain) == 200 &&
                     probe.env().size(Split::kEval) == 50 && cfg.trainer.iterations == 500;
  if (!setup) return {false, "workflow D setup out of range"};
  const auto st = learn_over_seeds("workflow_d.cfg");
  return {st.gain >= kLearnGainCode && st.best_turns < st.base_turns && st.seconds <= kCodeSeconds,
          fmt("mean eval_all_passed gain %.3f over 5 seeds [%s], used_turns %.2f -> %.2f at best", st.gain,
              st.per_seed.c_str(), st.base_turns, st.best_turns)};
}

Outcome runs_are_reproducible() {
  const auto dir = scratch_dir("acceptance_ac9");
  std::vector<fs::path> runs;
  for (int limit : {1, 8}) {
    RunConfig cfg = load_config("workflow_c.cfg");
    cfg.trainer.iterations = 10;
    cfg.run.concurrency = limit;
    cfg.run.eval_every = 5;
    cfg.run.checkpoint_every = 5;
    const fs::path cfg_path = dir / ("c" + std::to_string(limit) + ".cfg");
    std::ofstream(cfg_path) << serialize_run_config(cfg);
    for (int rep = 0; rep < 2; ++rep) {
      const fs::path out = dir / fmt("run_c%d_%d", limit, rep);
      std::ostringstream sink;
      const int code = cli::cmd_train(cfg_path.string(), cli::TrainOverrides{{}, {}, out.string()}, sink, sink);
      if (code != cli::kOk) return {false, fmt("train exited with %d: %s", code, sink.str().c_str())};
      const auto summary = nlohmann::json::parse(read_file(out / "summary.json"));
      note_run(summary["max_first_ratio_dev"].get<double>(), summary["updates"].get<std::size_t>());
      runs.push_back(out);
    }
  }
  // Every regular file except the resolved config, which records the limit.
  auto artifacts = [](const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
      if (e.is_regular_file() && e.path().filename() != "resolved.cfg")
        files[fs::relative(e.path(), root).string()] = read_file(e.path());
    return files;
  };
  const auto ref = artifacts(runs[0]);
  const bool same_limit = artifacts(runs[1]) == ref && artifacts(runs[3]) == artifacts(runs[2]);
  const bool across = artifacts(runs[2]) == ref;
  return {same_limit && across && ref.contains("trajectories.log") && ref.contains("metrics.csv"),
          fmt("%zu files per run; repeat runs %s; limit 1 vs 8 %s", ref.size(), same_limit ? "identical" : "differ",
              across ? "identical" : "differ")};
}

Outcome first_minibatch_on_policy() {
  return {g_ratio_runs > 0 && g_ratio_updates > 0 && g_ratio_dev <= kRatioTolerance,
          fmt("max |ratio - 1| %.3g over %zu updates in %d runs", g_ratio_dev, g_ratio_updates, g_ratio_runs)};
}

}  // namespace

int main() {
  criterion(1, "GAE matches the double-sum definition", gae_matches_oracle);
  criterion(2, "policy and value gradients match finite differences", gradients_match_finite_differences);
  criterion(3, "routing audit is clean under all three sharing regimes", routing_audits_clean);
  criterion(4, "marginal rewards telescope exactly", marginal_rewards_telescope);
  criterion(5, "verify loop ends on pass and runs to the bound otherwise", end_on_pass);
  criterion(6, "sharing a single active role changes nothing", single_role_sharing_is_neutral);
  criterion(7, "workflow A learns", qa_learns);
  criterion(8, "workflow D learns and uses fewer turns", code_learns);
  criterion(9, "training runs are byte-reproducible", runs_are_reproducible);
  criterion(10, "first minibatch is exactly on-policy", first_minibatch_on_policy);
  std::printf("%d of 10 criteria failed\n", g_failures);
  return g_failures == 0 ? 0 : 1;
}
