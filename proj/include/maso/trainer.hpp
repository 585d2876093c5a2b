#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "maso/buffers.hpp"
#include "maso/common.hpp"
#include "maso/policy.hpp"
#include "maso/rng.hpp"

namespace maso {

struct TrainerConfig {
  double gamma = 1.0;
  double gae_lambda = 0.95;
  double clip_epsilon = 0.2;
  double learning_rate = 3e-3;
  int epochs_per_batch = 4;
  std::size_t minibatch_size = 64;
  double value_coef = 0.5;
  double entropy_coef = 0.0;
  double max_grad_norm = 1.0;
  int iterations = 0;
  std::size_t rollout_size = 32;
  bool normalize_advantages = true;

  void check() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("trainer.gamma must lie in (0,1]");
    if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw ConfigError("trainer.gae_lambda must lie in [0,1]");
    if (!(clip_epsilon > 0.0)) throw ConfigError("trainer.clip_epsilon must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("trainer.learning_rate must be positive");
    if (epochs_per_batch < 1) throw ConfigError("trainer.epochs_per_batch must be positive");
    if (minibatch_size < 1) throw ConfigError("trainer.minibatch_size must be positive");
    if (!(value_coef >= 0.0) || !(entropy_coef >= 0.0)) throw ConfigError("trainer coefficients must be non-negative");
    if (!(max_grad_norm > 0.0)) throw ConfigError("trainer.max_grad_norm must be positive");
    if (iterations < 0) throw ConfigError("trainer.iterations must be non-negative");
    if (rollout_size < 1) throw ConfigError("trainer.rollout_size must be positive");
  }

  bool operator==(const TrainerConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Generalized advantage estimation, by backward recursion
// A_t = delta_t + gamma * lambda * A_{t+1}.

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

inline GaeResult gae(std::span<const double> rewards, std::span<const double> values, double terminal_value,
                     double gamma, double lambda) {
  if (rewards.size() != values.size()) throw ContractError("gae: rewards and values differ in length");
  if (rewards.empty()) throw ContractError("gae: empty sequence");
  auto fin = [](double x) { return std::isfinite(x); };
  if (!std::all_of(rewards.begin(), rewards.end(), fin) || !std::all_of(values.begin(), values.end(), fin) ||
      !std::isfinite(terminal_value) || !std::isfinite(gamma) || !std::isfinite(lambda))
    throw ContractError("gae: non-finite input");
  const std::size_t n = rewards.size();
  GaeResult out{std::vector<double>(n), std::vector<double>(n)};
  double next_value = terminal_value;
  double acc = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    const double delta = rewards[i] + gamma * next_value - values[i];
    acc = delta + gamma * lambda * acc;
    out.advantages[i] = acc;
    out.returns[i] = acc + values[i];
    next_value = values[i];
  }
  return out;
}

// Fills advantages and returns per row (terminal value 0), then normalizes the
// advantages over all real tokens of the batch.
inline void prepare_batch(ReadyBatch& batch, const TrainerConfig& cfg) {
  for (std::size_t r = 0; r < batch.rows; ++r) {
    const std::size_t len = batch.lengths[r];
    if (len == 0) continue;
    const std::size_t base = batch.at(r, 0);
    auto res = gae(std::span<const double>(batch.rewards.data() + base, len),
                   std::span<const double>(batch.values.data() + base, len), 0.0, cfg.gamma, cfg.gae_lambda);
    std::copy(res.advantages.begin(), res.advantages.end(), batch.advantages.begin() + base);
    std::copy(res.returns.begin(), res.returns.end(), batch.returns.begin() + base);
  }
  if (!cfg.normalize_advantages) return;
  const std::size_t n = batch.real_tokens();
  if (n == 0) return;
  double mean = 0.0;
  for (std::size_t i = 0; i < batch.mask.size(); ++i)
    if (batch.mask[i]) mean += batch.advantages[i];
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t i = 0; i < batch.mask.size(); ++i)
    if (batch.mask[i]) var += (batch.advantages[i] - mean) * (batch.advantages[i] - mean);
  const double sd = std::max(std::sqrt(var / static_cast<double>(n)), 1e-8);
  for (std::size_t i = 0; i < batch.mask.size(); ++i)
    batch.advantages[i] = batch.mask[i] ? (batch.advantages[i] - mean) / sd : 0.0;
}

// Per-position features of every batch row; they depend only on the batch.
using BatchFeatures = std::vector<std::vector<SparseFeatures>>;

inline BatchFeatures batch_features(const FeatureSpec& spec, const ReadyBatch& batch) {
  BatchFeatures out(batch.rows);
  for (std::size_t r = 0; r < batch.rows; ++r) {
    const std::size_t slot = spec.role_slot(batch.roles[r]);
    std::span<const TokenId> row(batch.tokens.data() + batch.at(r, 0), batch.lengths[r]);
    for (std::size_t c = 0; c < batch.lengths[r]; ++c)
      out[r].push_back(make_features(spec, batch.observations[r], slot, row.first(c)));
  }
  return out;
}

struct PolicyLoss {
  double loss = 0.0;
  Params grad;
  std::size_t tokens = 0;
  double clip_fraction = 0.0;
  double mean_ratio = 0.0;
  double max_ratio = 0.0;
  double max_ratio_dev = 0.0;  // max |ratio - 1|
  double entropy = 0.0;
};

// Clipped surrogate over the real tokens of `rows`:
// loss = -mean(min(r A, clip(r, 1-eps, 1+eps) A)) - entropy_coef * mean(H).
inline PolicyLoss ppo_policy_loss(const FeatureSpec& spec, const Params& params, const ReadyBatch& batch,
                                  const BatchFeatures& feats, std::span<const std::size_t> rows,
                                  double clip_epsilon, double entropy_coef = 0.0) {
  PolicyLoss out;
  out.grad = Params::zeros(spec);
  for (std::size_t r : rows) out.tokens += batch.lengths[r];
  if (out.tokens == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(out.tokens);
  std::size_t clipped = 0;
  double ratio_sum = 0.0;
  for (std::size_t r : rows) {
    for (std::size_t c = 0; c < batch.lengths[r]; ++c) {
      const std::size_t cell = batch.at(r, c);
      const SparseFeatures& f = feats[r][c];
      std::vector<double> lp = compute_logits(spec, params, f);
      log_softmax(lp);
      const TokenId tok = batch.tokens[cell];
      const double ratio = std::exp(lp[tok] - batch.old_logprobs[cell]);
      if (!std::isfinite(ratio)) throw DivergenceError("non-finite PPO ratio");
      const double adv = batch.advantages[cell];
      const double lo = 1.0 - clip_epsilon;
      const double hi = 1.0 + clip_epsilon;
      const double clipped_ratio = std::clamp(ratio, lo, hi);
      const double unclipped_obj = ratio * adv;
      const double clipped_obj = clipped_ratio * adv;
      if (clipped_ratio != ratio) ++clipped;
      ratio_sum += ratio;
      out.max_ratio = std::max(out.max_ratio, ratio);
      out.max_ratio_dev = std::max(out.max_ratio_dev, std::abs(ratio - 1.0));
      if (unclipped_obj <= clipped_obj) {
        out.loss -= unclipped_obj * inv_n;
        // d(-r A)/dW = -A r dlogp/dW
        add_logprob_grad(spec, f, lp, tok, -adv * ratio * inv_n, out.grad.policy);
      } else {
        out.loss -= clipped_obj * inv_n;
      }
      const double h = entropy_of(lp);
      out.entropy += h * inv_n;
      if (entropy_coef != 0.0) {
        out.loss -= entropy_coef * h * inv_n;
        add_entropy_grad(spec, f, lp, -entropy_coef * inv_n, out.grad.policy);
      }
    }
  }
  out.clip_fraction = static_cast<double>(clipped) * inv_n;
  out.mean_ratio = ratio_sum * inv_n;
  return out;
}

struct ValueLoss {
  double loss = 0.0;
  Params grad;
  std::size_t tokens = 0;
};

// value_coef * mean((V - R)^2) over the real tokens of `rows`.
inline ValueLoss value_loss(const FeatureSpec& spec, const Params& params, const ReadyBatch& batch,
                            const BatchFeatures& feats, std::span<const std::size_t> rows, double value_coef) {
  ValueLoss out;
  out.grad = Params::zeros(spec);
  for (std::size_t r : rows) out.tokens += batch.lengths[r];
  if (out.tokens == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(out.tokens);
  for (std::size_t r : rows) {
    for (std::size_t c = 0; c < batch.lengths[r]; ++c) {
      const SparseFeatures& f = feats[r][c];
      const double err = dot_value(params, f) - batch.returns[batch.at(r, c)];
      out.loss += value_coef * err * err * inv_n;
      const double g = 2.0 * value_coef * err * inv_n;
      for (const auto& [i, x] : f) out.grad.value[i] += g * x;
    }
  }
  if (!std::isfinite(out.loss)) throw DivergenceError("non-finite value loss");
  return out;
}

struct UpdateMetrics {
  ModelId model;
  std::size_t rows = 0;
  std::size_t tokens = 0;
  std::size_t minibatches = 0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double mean_ratio = 0.0;
  double max_ratio = 0.0;
  double clip_fraction = 0.0;
  double approx_kl = 0.0;
  double entropy = 0.0;
  double grad_norm = 0.0;
  double first_minibatch_max_ratio_dev = 0.0;
  std::map<RoleId, double> role_reward;  // mean fragment reward per role
};

// Mean k3 estimate of KL(behavior || current) over the batch's real tokens.
inline double approx_kl(const FeatureSpec& spec, const Params& params, const ReadyBatch& batch,
                        const BatchFeatures& feats) {
  double kl = 0.0;
  std::size_t n = 0;
  for (std::size_t r = 0; r < batch.rows; ++r) {
    for (std::size_t c = 0; c < batch.lengths[r]; ++c) {
      std::vector<double> lp = compute_logits(spec, params, feats[r][c]);
      log_softmax(lp);
      const std::size_t cell = batch.at(r, c);
      const double log_ratio = lp[batch.tokens[cell]] - batch.old_logprobs[cell];
      kl += std::exp(log_ratio) - 1.0 - log_ratio;
      ++n;
    }
  }
  return n ? kl / static_cast<double>(n) : 0.0;
}

// Epochs of shuffled minibatch steps on policy plus value loss. Does not sync
// the behavior snapshot. On divergence the model is restored and the error
// rethrown.
inline UpdateMetrics update(ModelInstance& model, ReadyBatch& batch, const TrainerConfig& cfg,
                            std::uint64_t shuffle_seed) {
  cfg.check();
  const FeatureSpec& spec = model.spec();
  const Params saved_params = model.params();
  const AdamState saved_adam = model.adam();

  UpdateMetrics m;
  m.model = model.id();
  m.rows = batch.rows;
  {
    std::map<RoleId, std::size_t> counts;
    for (std::size_t r = 0; r < batch.rows; ++r) {
      m.role_reward[batch.roles[r]] += batch.fragment_rewards[r];
      ++counts[batch.roles[r]];
    }
    for (auto& [role, sum] : m.role_reward) sum /= static_cast<double>(counts[role]);
  }
  if (batch.rows == 0) return m;

  try {
    prepare_batch(batch, cfg);
    m.tokens = batch.real_tokens();
    const BatchFeatures feats = batch_features(spec, batch);
    const AdamSettings adam{cfg.learning_rate, 0.9, 0.999, 1e-8};
    Rng rng(shuffle_seed);
    bool first = true;
    for (int epoch = 0; epoch < cfg.epochs_per_batch; ++epoch) {
      const std::vector<std::size_t> order = rng.permutation(batch.rows);
      for (std::size_t start = 0; start < order.size(); start += cfg.minibatch_size) {
        std::span<const std::size_t> rows(order.data() + start,
                                          std::min(cfg.minibatch_size, order.size() - start));
        PolicyLoss pl = ppo_policy_loss(spec, model.params(), batch, feats, rows, cfg.clip_epsilon,
                                        cfg.entropy_coef);
        ValueLoss vl = value_loss(spec, model.params(), batch, feats, rows, cfg.value_coef);
        if (!std::isfinite(pl.loss) || !std::isfinite(vl.loss)) throw DivergenceError("non-finite loss");
        if (first) {
          m.first_minibatch_max_ratio_dev = pl.max_ratio_dev;
          first = false;
        }
        Params grad = std::move(pl.grad);
        for (std::size_t i = 0; i < grad.value.size(); ++i) grad.value[i] += vl.grad.value[i];
        double sq = 0.0;
        for (double g : grad.policy) sq += g * g;
        for (double g : grad.value) sq += g * g;
        const double norm = std::sqrt(sq);
        if (!std::isfinite(norm)) throw DivergenceError("non-finite gradient");
        if (norm > cfg.max_grad_norm) {
          const double s = cfg.max_grad_norm / norm;
          for (double& g : grad.policy) g *= s;
          for (double& g : grad.value) g *= s;
        }
        adam_step(model.params(), model.adam(), grad, adam);
        if (!model.params().all_finite()) throw DivergenceError("non-finite parameters after update");

        ++m.minibatches;
        m.policy_loss += pl.loss;
        m.value_loss += vl.loss;
        m.clip_fraction += pl.clip_fraction;
        m.mean_ratio += pl.mean_ratio;
        m.max_ratio = std::max(m.max_ratio, pl.max_ratio);
        m.entropy += pl.entropy;
        m.grad_norm += norm;
      }
    }
    const double k = static_cast<double>(m.minibatches);
    m.policy_loss /= k;
    m.value_loss /= k;
    m.clip_fraction /= k;
    m.mean_ratio /= k;
    m.entropy /= k;
    m.grad_norm /= k;
    m.approx_kl = approx_kl(spec, model.params(), batch, feats);
  } catch (const DivergenceError&) {
    model.params() = saved_params;
    model.adam() = saved_adam;
    throw;
  }
  return m;
}

}  // namespace maso
