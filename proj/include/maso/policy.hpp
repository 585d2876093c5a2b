#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <memory>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "maso/common.hpp"
#include "maso/rng.hpp"
#include "maso/vocab.hpp"

namespace maso {

// Feature layout: [observation bag | generated-prefix bag | role one-hot | bias].
struct FeatureSpec {
  std::size_t vocab_size = 0;
  std::vector<RoleId> roles;

  std::size_t dim() const { return 2 * vocab_size + roles.size() + 1; }
  std::size_t prefix_offset() const { return vocab_size; }
  std::size_t role_offset() const { return 2 * vocab_size; }
  std::size_t bias_index() const { return 2 * vocab_size + roles.size(); }

  std::size_t role_slot(const RoleId& role) const {
    auto it = std::find(roles.begin(), roles.end(), role);
    if (it == roles.end()) throw ContractError("role '" + role + "' has no feature slot");
    return static_cast<std::size_t>(it - roles.begin());
  }

  bool operator==(const FeatureSpec&) const = default;
};

// Sorted (index, value) pairs with unique indices.
using SparseFeatures = std::vector<std::pair<std::uint32_t, double>>;

inline SparseFeatures make_features(const FeatureSpec& spec, std::span<const TokenId> observation,
                                    std::size_t role_slot, std::span<const TokenId> prefix) {
  std::vector<std::uint32_t> idx;
  idx.reserve(observation.size() + prefix.size() + 2);
  for (TokenId t : observation) {
    if (t >= spec.vocab_size) throw ContractError("observation token outside vocabulary");
    idx.push_back(t);
  }
  for (TokenId t : prefix) {
    if (t >= spec.vocab_size) throw ContractError("prefix token outside vocabulary");
    idx.push_back(static_cast<std::uint32_t>(spec.prefix_offset() + t));
  }
  idx.push_back(static_cast<std::uint32_t>(spec.role_offset() + role_slot));
  idx.push_back(static_cast<std::uint32_t>(spec.bias_index()));
  std::sort(idx.begin(), idx.end());
  SparseFeatures f;
  for (auto i : idx) {
    if (!f.empty() && f.back().first == i) {
      f.back().second += 1.0;
    } else {
      f.emplace_back(i, 1.0);
    }
  }
  return f;
}

struct Params {
  std::vector<double> policy;  // dim x vocab, row-major by feature
  std::vector<double> value;   // dim

  static Params zeros(const FeatureSpec& spec) {
    return {std::vector<double>(spec.dim() * spec.vocab_size, 0.0),
            std::vector<double>(spec.dim(), 0.0)};
  }

  std::size_t size() const { return policy.size() + value.size(); }

  bool all_finite() const {
    auto fin = [](double x) { return std::isfinite(x); };
    return std::all_of(policy.begin(), policy.end(), fin) &&
           std::all_of(value.begin(), value.end(), fin);
  }

  bool operator==(const Params&) const = default;
};

// Adaptive moment estimation state for one parameter set.
struct AdamState {
  Params m;
  Params v;
  std::int64_t step = 0;
  bool operator==(const AdamState&) const = default;
};

struct AdamSettings {
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

inline void adam_step(Params& params, AdamState& state, const Params& grad, const AdamSettings& s) {
  ++state.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(state.step));
  auto apply = [&](std::vector<double>& p, std::vector<double>& m, std::vector<double>& v,
                   const std::vector<double>& g) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (g[i] == 0.0 && m[i] == 0.0 && v[i] == 0.0) continue;
      m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
      v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
      p[i] -= s.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + s.epsilon);
    }
  };
  apply(params.policy, state.m.policy, state.v.policy, grad.policy);
  apply(params.value, state.m.value, state.v.value, grad.value);
}

struct ReferenceSnapshot {
  std::shared_ptr<const Params> params;
  std::uint64_t version = 0;
};

class ModelInstance;

// Marks a rollout in flight against a model; sync refuses to run meanwhile.
class RolloutLease {
 public:
  explicit RolloutLease(const std::atomic<int>& counter)
      : counter_(const_cast<std::atomic<int>*>(&counter)) {
    counter_->fetch_add(1);
  }
  RolloutLease(const RolloutLease&) = delete;
  RolloutLease& operator=(const RolloutLease&) = delete;
  ~RolloutLease() { counter_->fetch_sub(1); }

 private:
  std::atomic<int>* counter_;
};

// Trainable parameters plus the frozen behavior snapshot used for sampling.
class ModelInstance {
 public:
  ModelInstance(ModelId id, FeatureSpec spec)
      : id_(std::move(id)),
        spec_(std::move(spec)),
        params_(Params::zeros(spec_)),
        adam_{Params::zeros(spec_), Params::zeros(spec_), 0},
        behavior_{std::make_shared<const Params>(params_), 0} {}

  ModelInstance(const ModelInstance& o)
      : id_(o.id_), spec_(o.spec_), params_(o.params_), adam_(o.adam_), behavior_(o.behavior_) {}

  ModelInstance& operator=(const ModelInstance& o) {
    id_ = o.id_;
    spec_ = o.spec_;
    params_ = o.params_;
    adam_ = o.adam_;
    behavior_ = o.behavior_;
    return *this;
  }

  const ModelId& id() const { return id_; }
  const FeatureSpec& spec() const { return spec_; }
  Params& params() { return params_; }
  const Params& params() const { return params_; }
  AdamState& adam() { return adam_; }
  const AdamState& adam() const { return adam_; }
  const ReferenceSnapshot& behavior() const { return behavior_; }

  RolloutLease lease() const { return RolloutLease(in_flight_); }
  int in_flight() const { return in_flight_.load(); }

  // Replaces the behavior snapshot with a frozen copy of the current params.
  ReferenceSnapshot sync() {
    if (in_flight_.load() != 0)
      throw ContractError("sync of model '" + id_ + "' during an active rollout");
    behavior_ = {std::make_shared<const Params>(params_), behavior_.version + 1};
    return behavior_;
  }

 private:
  ModelId id_;
  FeatureSpec spec_;
  Params params_;
  AdamState adam_;
  ReferenceSnapshot behavior_;
  std::atomic<int> in_flight_{0};
};

inline ReferenceSnapshot sync(ModelInstance& model) { return model.sync(); }

enum class ParamSource { kCurrent, kBehavior };
enum class Decoding { kSample, kGreedy };

inline const Params& select_params(const ModelInstance& model, ParamSource src) {
  return src == ParamSource::kCurrent ? model.params() : *model.behavior().params;
}

inline std::vector<double> compute_logits(const FeatureSpec& spec, const Params& params,
                                          const SparseFeatures& f) {
  const std::size_t v = spec.vocab_size;
  std::vector<double> z(v, 0.0);
  for (const auto& [i, c] : f) {
    const double* row = params.policy.data() + static_cast<std::size_t>(i) * v;
    for (std::size_t j = 0; j < v; ++j) z[j] += c * row[j];
  }
  for (double x : z)
    if (!std::isfinite(x)) throw DivergenceError("non-finite logits");
  return z;
}

// In-place log-softmax; returns nothing, `z` becomes log-probabilities.
inline void log_softmax(std::vector<double>& z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double x : z) sum += std::exp(x - mx);
  const double lse = mx + std::log(sum);
  for (double& x : z) x -= lse;
}

inline double dot_value(const Params& params, const SparseFeatures& f) {
  double out = 0.0;
  for (const auto& [i, c] : f) out += c * params.value[i];
  return out;
}

struct PolicyOutput {
  Tokens tokens;
  std::vector<double> logprobs;
  std::vector<double> values;
  bool truncated = false;
  bool operator==(const PolicyOutput&) const = default;
};

// Autoregressive generation from the behavior snapshot. Every recorded
// log-probability is the exact log-softmax entry of the emitted token.
inline PolicyOutput sample(const ModelInstance& model, const Tokens& observation, const RoleId& role,
                           Rng& rng, int max_len, Decoding decoding = Decoding::kSample) {
  if (max_len < 1) throw ContractError("max_len must be positive");
  const auto& spec = model.spec();
  const Params& params = *model.behavior().params;
  const std::size_t slot = spec.role_slot(role);
  PolicyOutput out;
  for (int pos = 0; pos < max_len; ++pos) {
    SparseFeatures f = make_features(spec, observation, slot, out.tokens);
    std::vector<double> lp = compute_logits(spec, params, f);
    log_softmax(lp);
    TokenId choice = 0;
    if (decoding == Decoding::kGreedy) {
      choice = static_cast<TokenId>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    } else {
      const double u = rng.uniform();
      double acc = 0.0;
      choice = static_cast<TokenId>(lp.size() - 1);
      for (std::size_t j = 0; j < lp.size(); ++j) {
        acc += std::exp(lp[j]);
        if (u < acc) {
          choice = static_cast<TokenId>(j);
          break;
        }
      }
    }
    out.tokens.push_back(choice);
    out.logprobs.push_back(lp[choice]);
    out.values.push_back(dot_value(params, f));
    if (choice == Vocabulary::kEnd) return out;
  }
  out.truncated = true;
  return out;
}

// Teacher-forced log-probabilities of `tokens`.
inline std::vector<double> logprobs(const ModelInstance& model, const Tokens& observation,
                                    const RoleId& role, const Tokens& tokens,
                                    ParamSource src = ParamSource::kCurrent) {
  if (tokens.empty()) throw ContractError("logprobs of an empty token sequence");
  const auto& spec = model.spec();
  for (TokenId t : tokens)
    if (t >= spec.vocab_size) throw ContractError("token outside vocabulary");
  const Params& params = select_params(model, src);
  const std::size_t slot = spec.role_slot(role);
  std::vector<double> out;
  out.reserve(tokens.size());
  for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
    SparseFeatures f =
        make_features(spec, observation, slot, std::span<const TokenId>(tokens.data(), pos));
    std::vector<double> lp = compute_logits(spec, params, f);
    log_softmax(lp);
    out.push_back(lp[tokens[pos]]);
  }
  return out;
}

// Value of the observation before any token is generated.
inline double value(const ModelInstance& model, const Tokens& observation, const RoleId& role,
                    ParamSource src = ParamSource::kCurrent) {
  const auto& spec = model.spec();
  SparseFeatures f = make_features(spec, observation, spec.role_slot(role), {});
  return dot_value(select_params(model, src), f);
}

// grad_policy += scale * d log p(token) / dW, given p = softmax(W^T f).
inline void add_logprob_grad(const FeatureSpec& spec, const SparseFeatures& f,
                             std::span<const double> logp, TokenId token, double scale,
                             std::vector<double>& grad_policy) {
  const std::size_t v = spec.vocab_size;
  std::vector<double> dz(v);
  for (std::size_t j = 0; j < v; ++j) dz[j] = -std::exp(logp[j]);
  dz[token] += 1.0;
  for (const auto& [i, c] : f) {
    double* row = grad_policy.data() + static_cast<std::size_t>(i) * v;
    const double s = scale * c;
    for (std::size_t j = 0; j < v; ++j) row[j] += s * dz[j];
  }
}

inline double entropy_of(std::span<const double> logp) {
  double h = 0.0;
  for (double l : logp) h -= std::exp(l) * l;
  return h;
}

// grad_policy += scale * dH / dW for the entropy H of softmax(W^T f).
inline void add_entropy_grad(const FeatureSpec& spec, const SparseFeatures& f,
                             std::span<const double> logp, double scale,
                             std::vector<double>& grad_policy) {
  const std::size_t v = spec.vocab_size;
  const double h = entropy_of(logp);
  std::vector<double> dz(v);
  for (std::size_t j = 0; j < v; ++j) dz[j] = -std::exp(logp[j]) * (logp[j] + h);
  for (const auto& [i, c] : f) {
    double* row = grad_policy.data() + static_cast<std::size_t>(i) * v;
    const double s = scale * c;
    for (std::size_t j = 0; j < v; ++j) row[j] += s * dz[j];
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: `maso-ckpt v1 <model_id> <feat_dim> <vocab_size>`, then the
// policy matrix one feature row per line, the value vector, the optimizer step
// count, and the optimizer moments in the same layout.

namespace detail {

inline void write_row(std::ostream& out, const double* data, std::size_t n) {
  char buf[40];
  for (std::size_t i = 0; i < n; ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", data[i]);
    if (i) out << ' ';
    out << buf;
  }
  out << '\n';
}

inline void write_params(std::ostream& out, const Params& p, const FeatureSpec& spec) {
  for (std::size_t r = 0; r < spec.dim(); ++r)
    write_row(out, p.policy.data() + r * spec.vocab_size, spec.vocab_size);
  write_row(out, p.value.data(), p.value.size());
}

inline void read_values(std::istream& in, std::vector<double>& dst) {
  std::string tok;
  for (double& x : dst) {
    if (!(in >> tok)) throw ConfigError("checkpoint truncated");
    char* end = nullptr;
    x = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0') throw ConfigError("bad checkpoint value '" + tok + "'");
  }
}

inline void read_params(std::istream& in, Params& p) {
  read_values(in, p.policy);
  read_values(in, p.value);
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const ModelInstance& model) {
  const auto& spec = model.spec();
  out << "maso-ckpt v1 " << model.id() << ' ' << spec.dim() << ' ' << spec.vocab_size << '\n';
  detail::write_params(out, model.params(), spec);
  out << model.adam().step << '\n';
  detail::write_params(out, model.adam().m, spec);
  detail::write_params(out, model.adam().v, spec);
}

// Restores parameters and optimizer state into a model with a matching spec;
// the behavior snapshot is synced to the restored parameters.
inline void read_checkpoint(std::istream& in, ModelInstance& model) {
  std::string magic, ver, id;
  std::size_t dim = 0, vocab = 0;
  if (!(in >> magic >> ver >> id >> dim >> vocab) || magic != "maso-ckpt" || ver != "v1")
    throw ConfigError("not a maso checkpoint");
  if (id != model.id()) throw ConfigError("checkpoint is for model '" + id + "'");
  if (dim != model.spec().dim() || vocab != model.spec().vocab_size)
    throw ConfigError("checkpoint dimensions do not match model '" + id + "'");
  Params p = Params::zeros(model.spec());
  AdamState a{Params::zeros(model.spec()), Params::zeros(model.spec()), 0};
  detail::read_params(in, p);
  if (!(in >> a.step)) throw ConfigError("checkpoint truncated");
  detail::read_params(in, a.m);
  detail::read_params(in, a.v);
  model.params() = std::move(p);
  model.adam() = std::move(a);
  model.sync();
}

}  // namespace maso
