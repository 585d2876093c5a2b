#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "maso/policy.hpp"
#include "support.hpp"

using namespace maso;
using maso::testing::randomize;
using maso::testing::relative_error;

namespace {

FeatureSpec small_spec(std::size_t vocab = 6) { return FeatureSpec{vocab, {"alpha", "beta"}}; }

ModelInstance random_model(std::uint64_t seed, double scale = 1.0, std::size_t vocab = 6) {
  ModelInstance m("m1", small_spec(vocab));
  Rng rng(seed);
  randomize(m.params(), rng, scale);
  m.sync();
  return m;
}

}  // namespace

TEST(Sample, ZeroParamsAreUniform) {
  ModelInstance m("m1", small_spec());
  Rng rng(1);
  auto out = sample(m, {3, 4}, "alpha", rng, 8);
  ASSERT_FALSE(out.tokens.empty());
  for (double lp : out.logprobs) EXPECT_DOUBLE_EQ(lp, -std::log(6.0));
  EXPECT_EQ(out.tokens.size(), out.logprobs.size());
  EXPECT_EQ(out.tokens.size(), out.values.size());
}

TEST(Sample, SaturatedEndLogit) {
  ModelInstance m("m1", small_spec());
  const auto& spec = m.spec();
  m.params().policy[spec.bias_index() * spec.vocab_size + Vocabulary::kEnd] = 1e6;
  m.sync();
  Rng rng(1);
  auto out = sample(m, {3}, "beta", rng, 5);
  ASSERT_EQ(out.tokens, Tokens{Vocabulary::kEnd});
  EXPECT_NEAR(out.logprobs[0], 0.0, 1e-12);
  EXPECT_FALSE(out.truncated);
}

TEST(Sample, DeterministicForFixedSeed) {
  auto a = random_model(5);
  auto b = random_model(5);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng r1(seed), r2(seed);
    EXPECT_EQ(sample(a, {3, 4, 5}, "alpha", r1, 6), sample(b, {3, 4, 5}, "alpha", r2, 6));
  }
}

TEST(Sample, TruncatesAtMaxLen) {
  ModelInstance m("m1", small_spec());
  m.params().policy[m.spec().bias_index() * 6 + 4] = 50.0;  // token 4 always
  m.sync();
  Rng rng(2);
  auto out = sample(m, {3}, "alpha", rng, 3);
  EXPECT_EQ(out.tokens, (Tokens{4, 4, 4}));
  EXPECT_TRUE(out.truncated);
}

TEST(Sample, NonFiniteParamsAreHardFailure) {
  ModelInstance m("m1", small_spec());
  m.params().policy[0] = std::nan("");
  m.sync();
  Rng rng(1);
  EXPECT_THROW(sample(m, {0}, "alpha", rng, 2), DivergenceError);
  EXPECT_THROW(sample(m, {0}, "alpha", rng, 0), ContractError);
}

TEST(Softmax, NormalizedForRandomObservations) {
  auto m = random_model(9, 3.0);
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    Tokens obs;
    for (std::size_t i = 0; i < 1 + rng.below(6); ++i) obs.push_back(static_cast<TokenId>(rng.below(6)));
    Tokens prefix;
    for (std::size_t i = 0; i < rng.below(4); ++i) prefix.push_back(static_cast<TokenId>(rng.below(6)));
    auto f = make_features(m.spec(), obs, rng.below(2), prefix);
    auto lp = compute_logits(m.spec(), m.params(), f);
    log_softmax(lp);
    double sum = 0.0;
    for (double x : lp) sum += std::exp(x);
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Logprobs, ReproduceSampledValuesExactly) {
  auto m = random_model(11, 2.0);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    auto out = sample(m, {2, 3, 3}, "beta", rng, 5);
    EXPECT_EQ(logprobs(m, {2, 3, 3}, "beta", out.tokens), out.logprobs);
    EXPECT_EQ(logprobs(m, {2, 3, 3}, "beta", out.tokens, ParamSource::kBehavior), out.logprobs);
  }
}

TEST(Logprobs, ZeroParamsAndErrors) {
  ModelInstance m("m1", small_spec());
  for (double lp : logprobs(m, {1}, "alpha", {3, 4, 1})) EXPECT_DOUBLE_EQ(lp, -std::log(6.0));
  EXPECT_THROW(logprobs(m, {1}, "alpha", {6}), ContractError);
  EXPECT_THROW(logprobs(m, {1}, "alpha", {}), ContractError);
  EXPECT_THROW(logprobs(m, {1}, "gamma", {3}), ContractError);
}

TEST(Logprobs, AscentStepIncreasesLogprob) {
  auto m = random_model(13);
  const Tokens obs{2, 5};
  const Tokens toks{3, 4, Vocabulary::kEnd};
  const auto before = logprobs(m, obs, "alpha", toks);
  std::vector<double> grad(m.params().policy.size(), 0.0);
  const auto& spec = m.spec();
  for (std::size_t pos = 0; pos < toks.size(); ++pos) {
    auto f = make_features(spec, obs, spec.role_slot("alpha"), std::span<const TokenId>(toks.data(), pos));
    auto lp = compute_logits(spec, m.params(), f);
    log_softmax(lp);
    add_logprob_grad(spec, f, lp, toks[pos], 1.0, grad);
  }
  for (std::size_t i = 0; i < grad.size(); ++i) m.params().policy[i] += 1e-3 * grad[i];
  const auto after = logprobs(m, obs, "alpha", toks);
  double sb = 0.0, sa = 0.0;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    sb += before[i];
    sa += after[i];
  }
  EXPECT_GT(sa, sb);
}

// d/dW of the summed teacher-forced log-probability against central finite
// differences on a 78-parameter model.
TEST(Logprobs, GradientMatchesFiniteDifferences) {
  const std::size_t vocab = 5;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto m = random_model(100 + seed, 1.0, vocab);
    ASSERT_LE(m.params().size(), 200u);
    const auto& spec = m.spec();
    Rng rng(seed);
    Tokens obs{static_cast<TokenId>(rng.below(vocab)), static_cast<TokenId>(rng.below(vocab))};
    Tokens toks;
    for (int i = 0; i < 3; ++i) toks.push_back(static_cast<TokenId>(rng.below(vocab)));
    const RoleId role = seed % 2 ? "alpha" : "beta";

    std::vector<double> grad(m.params().policy.size(), 0.0);
    for (std::size_t pos = 0; pos < toks.size(); ++pos) {
      auto f = make_features(spec, obs, spec.role_slot(role), std::span<const TokenId>(toks.data(), pos));
      auto lp = compute_logits(spec, m.params(), f);
      log_softmax(lp);
      add_logprob_grad(spec, f, lp, toks[pos], 1.0, grad);
    }
    auto total = [&] {
      double s = 0.0;
      for (double x : logprobs(m, obs, role, toks)) s += x;
      return s;
    };
    const double h = 1e-5;
    for (std::size_t i = 0; i < grad.size(); ++i) {
      double& w = m.params().policy[i];
      const double w0 = w;
      w = w0 + h;
      const double up = total();
      w = w0 - h;
      const double down = total();
      w = w0;
      const double fd = (up - down) / (2.0 * h);
      EXPECT_LT(relative_error(grad[i], fd, 1e-6), 1e-4) << "param " << i << " analytic " << grad[i] << " fd " << fd;
    }
  }
}

TEST(Entropy, GradientMatchesFiniteDifferences) {
  auto m = random_model(77, 1.0, 5);
  const auto& spec = m.spec();
  auto f = make_features(spec, Tokens{1, 2}, 0, Tokens{3});
  auto entropy = [&] {
    auto lp = compute_logits(spec, m.params(), f);
    log_softmax(lp);
    return entropy_of(lp);
  };
  std::vector<double> grad(m.params().policy.size(), 0.0);
  {
    auto lp = compute_logits(spec, m.params(), f);
    log_softmax(lp);
    add_entropy_grad(spec, f, lp, 1.0, grad);
  }
  const double h = 1e-5;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    double& w = m.params().policy[i];
    const double w0 = w;
    w = w0 + h;
    const double up = entropy();
    w = w0 - h;
    const double down = entropy();
    w = w0;
    EXPECT_LT(relative_error(grad[i], (up - down) / (2.0 * h), 1e-6), 1e-4) << "param " << i;
  }
}

TEST(Value, LinearInFeatures) {
  ModelInstance m("m1", small_spec());
  EXPECT_EQ(value(m, {1, 2}, "alpha"), 0.0);
  m.params().value[4] = 1.0;
  EXPECT_EQ(value(m, {4, 3, 4}, "alpha"), 2.0);

  Rng rng(3);
  randomize(m.params(), rng, 1.0);
  const auto& spec = m.spec();
  const double diff = value(m, {1, 5}, "alpha") - value(m, {1, 5}, "beta");
  const double expect = m.params().value[spec.role_offset() + 0] - m.params().value[spec.role_offset() + 1];
  EXPECT_NEAR(diff, expect, 1e-15);
}

TEST(Sync, SnapshotsAndVersions) {
  auto m = random_model(21);
  const auto v0 = m.behavior().version;
  auto s1 = sync(m);
  auto s2 = sync(m);
  EXPECT_EQ(s1.version, v0 + 1);
  EXPECT_EQ(s2.version, v0 + 2);
  EXPECT_EQ(*s1.params, *s2.params);
  EXPECT_EQ(logprobs(m, {1}, "alpha", {2, 3}, ParamSource::kBehavior), logprobs(m, {1}, "alpha", {2, 3}));
}

TEST(Sync, UpdateWithoutSyncKeepsOldSnapshot) {
  auto m = random_model(22);
  Rng r1(8);
  const auto before = sample(m, {1, 2}, "beta", r1, 4);
  const auto version = m.behavior().version;
  for (double& w : m.params().policy) w += 0.5;
  m.params().policy[m.spec().bias_index() * 6 + 3] += 10.0;
  Rng r2(8);
  EXPECT_EQ(sample(m, {1, 2}, "beta", r2, 4), before);
  EXPECT_EQ(m.behavior().version, version);
  EXPECT_NE(*m.behavior().params, m.params());
  m.sync();
  Rng r3(8);
  EXPECT_NE(sample(m, {1, 2}, "beta", r3, 4), before);
}

TEST(Sync, RefusedWhileRolloutInFlight) {
  auto m = random_model(23);
  {
    auto lease = m.lease();
    EXPECT_EQ(m.in_flight(), 1);
    EXPECT_THROW(m.sync(), ContractError);
  }
  EXPECT_EQ(m.in_flight(), 0);
  EXPECT_NO_THROW(m.sync());
}

TEST(Checkpoint, RoundTripsBitExactly) {
  auto m = random_model(31, 1.7);
  Params g = Params::zeros(m.spec());
  Rng rng(4);
  randomize(g, rng, 0.3);
  adam_step(m.params(), m.adam(), g, {});
  adam_step(m.params(), m.adam(), g, {});

  std::stringstream ss;
  write_checkpoint(ss, m);
  std::string header;
  std::getline(std::stringstream(ss.str()), header);
  EXPECT_EQ(header, "maso-ckpt v1 m1 15 6");

  ModelInstance restored("m1", small_spec());
  read_checkpoint(ss, restored);
  EXPECT_EQ(restored.params(), m.params());
  EXPECT_EQ(restored.adam(), m.adam());
  EXPECT_EQ(*restored.behavior().params, m.params());

  std::stringstream again;
  write_checkpoint(again, restored);
  std::stringstream first;
  write_checkpoint(first, m);
  EXPECT_EQ(again.str(), first.str());
}

TEST(Checkpoint, RejectsMismatches) {
  auto m = random_model(32);
  std::stringstream ss;
  write_checkpoint(ss, m);
  ModelInstance other("m2", small_spec());
  std::stringstream copy1(ss.str());
  EXPECT_THROW(read_checkpoint(copy1, other), ConfigError);
  ModelInstance wide("m1", small_spec(7));
  std::stringstream copy2(ss.str());
  EXPECT_THROW(read_checkpoint(copy2, wide), ConfigError);
  std::stringstream truncated(ss.str().substr(0, ss.str().size() / 2));
  ModelInstance same("m1", small_spec());
  EXPECT_THROW(read_checkpoint(truncated, same), ConfigError);
}

TEST(Adam, BiasCorrectedFirstStep) {
  FeatureSpec spec{2, {"r"}};
  Params p = Params::zeros(spec);
  AdamState st{Params::zeros(spec), Params::zeros(spec), 0};
  Params g = Params::zeros(spec);
  g.value[0] = 0.25;
  g.value[1] = -4.0;
  adam_step(p, st, g, {});
  // First bias-corrected step is lr * g / (|g| + eps).
  EXPECT_NEAR(p.value[0], -3e-3 * 0.25 / (0.25 + 1e-8), 1e-15);
  EXPECT_NEAR(p.value[1], 3e-3 * 4.0 / (4.0 + 1e-8), 1e-15);
  EXPECT_EQ(p.value[2], 0.0);
  EXPECT_EQ(st.step, 1);
}
