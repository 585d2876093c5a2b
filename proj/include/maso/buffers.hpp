#pragma once

#include <cmath>
#include <map>
#include <mutex>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "maso/common.hpp"
#include "maso/rng.hpp"
#include "maso/trajectory.hpp"
#include "maso/workflow.hpp"

namespace maso {

inline constexpr std::size_t kDefaultBufferCapacity = 65536;

// One agent invocation's training record, held by the serving model's buffer.
struct Fragment {
  TrajectoryId trajectory;
  std::size_t step = 0;
  RoleId role;
  Tokens observation;
  Tokens output;
  std::vector<double> logprobs;  // behavior snapshot, per output token
  std::vector<double> values;    // per output position
  double reward = 0.0;
  bool complete = true;
  bool trajectory_failed = false;
};

class ModelBuffer {
 public:
  explicit ModelBuffer(ModelId model, std::size_t capacity = kDefaultBufferCapacity)
      : model_(std::move(model)), capacity_(capacity) {}

  const ModelId& model_id() const { return model_; }
  std::size_t capacity() const { return capacity_; }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return fragments_.size();
  }

  std::vector<Fragment> snapshot() const {
    std::lock_guard lock(mu_);
    return fragments_;
  }

  // Drops every held fragment; returns how many were dropped.
  std::size_t clear() {
    std::lock_guard lock(mu_);
    const std::size_t n = fragments_.size();
    fragments_.clear();
    return n;
  }

  // Flags every held fragment of `id` so batch construction drops it.
  void mark_failed(const TrajectoryId& id) {
    std::lock_guard lock(mu_);
    for (auto& f : fragments_)
      if (f.trajectory == id) f.trajectory_failed = true;
  }

 private:
  friend std::size_t commit(ModelBuffer&, Fragment, const AgentModelMapping&);
  friend struct ReadyBatch build_ready_batch(ModelBuffer&, std::size_t, std::uint64_t);
  friend void commit_unchecked(ModelBuffer&, Fragment);

  ModelId model_;
  std::size_t capacity_;
  std::vector<Fragment> fragments_;
  mutable std::mutex mu_;
};

// Appends `fragment` after checking that its role is served by this buffer's
// model. Returns the new size.
inline std::size_t commit(ModelBuffer& buffer, Fragment fragment, const AgentModelMapping& mapping) {
  auto it = mapping.assignments.find(fragment.role);
  if (it == mapping.assignments.end() || it->second != buffer.model_)
    throw RoutingError("fragment " + fragment.trajectory.str() + "/" + std::to_string(fragment.step) +
                       " of role '" + fragment.role + "' offered to buffer of '" + buffer.model_ + "'");
  if (fragment.output.size() != fragment.logprobs.size() || fragment.output.size() != fragment.values.size())
    throw ContractError("fragment token, log-prob and value lengths differ");
  if (!std::isfinite(fragment.reward)) throw ContractError("fragment reward is not finite");
  std::lock_guard lock(buffer.mu_);
  if (buffer.fragments_.size() >= buffer.capacity_)
    throw ContractError("buffer of '" + buffer.model_ + "' is at capacity");
  buffer.fragments_.push_back(std::move(fragment));
  return buffer.fragments_.size();
}

// Bypasses the routing check; only for fault-injection tests of the audit.
inline void commit_unchecked(ModelBuffer& buffer, Fragment fragment) {
  std::lock_guard lock(buffer.mu_);
  buffer.fragments_.push_back(std::move(fragment));
}

// Padded, reward-aligned, shuffled batch for one model. Matrices are
// row-major rows x cols.
struct ReadyBatch {
  ModelId model;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<TokenId> tokens;
  std::vector<std::uint8_t> mask;
  std::vector<double> old_logprobs;
  std::vector<double> values;
  std::vector<double> rewards;
  std::vector<double> advantages;
  std::vector<double> returns;
  std::vector<RoleId> roles;
  std::vector<Tokens> observations;
  std::vector<std::size_t> lengths;
  std::vector<TrajectoryId> trajectories;
  std::vector<std::size_t> steps;
  std::vector<double> fragment_rewards;
  std::vector<std::size_t> permutation;  // row i came from valid fragment permutation[i]

  std::size_t at(std::size_t r, std::size_t c) const { return r * cols + c; }

  std::size_t real_tokens() const {
    std::size_t n = 0;
    for (auto m : mask) n += m;
    return n;
  }

  bool operator==(const ReadyBatch&) const = default;
};

// Drains the buffer into a batch. Fragments of failed trajectories are dropped;
// each fragment's scalar reward sits on its last real token.
inline ReadyBatch build_ready_batch(ModelBuffer& buffer, std::size_t min_fragments,
                                    std::uint64_t shuffle_seed) {
  std::vector<Fragment> valid;
  {
    std::lock_guard lock(buffer.mu_);
    std::size_t n_valid = 0;
    for (const auto& f : buffer.fragments_)
      if (f.complete && !f.trajectory_failed) ++n_valid;
    if (n_valid < std::max<std::size_t>(1, min_fragments))
      throw ContractError("buffer of '" + buffer.model_ + "' holds " + std::to_string(n_valid) +
                          " usable fragments, need " + std::to_string(min_fragments));
    for (auto& f : buffer.fragments_)
      if (f.complete && !f.trajectory_failed) valid.push_back(std::move(f));
    buffer.fragments_.clear();
  }

  ReadyBatch b;
  b.model = buffer.model_;
  b.rows = valid.size();
  for (const auto& f : valid) b.cols = std::max(b.cols, f.output.size());
  const std::size_t cells = b.rows * b.cols;
  b.tokens.assign(cells, Vocabulary::kPad);
  b.mask.assign(cells, 0);
  b.old_logprobs.assign(cells, 0.0);
  b.values.assign(cells, 0.0);
  b.rewards.assign(cells, 0.0);
  b.advantages.assign(cells, 0.0);
  b.returns.assign(cells, 0.0);

  Rng rng(shuffle_seed);
  b.permutation = rng.permutation(valid.size());
  for (std::size_t r = 0; r < b.rows; ++r) {
    const Fragment& f = valid[b.permutation[r]];
    const std::size_t len = f.output.size();
    for (std::size_t c = 0; c < len; ++c) {
      b.tokens[b.at(r, c)] = f.output[c];
      b.mask[b.at(r, c)] = 1;
      b.old_logprobs[b.at(r, c)] = f.logprobs[c];
      b.values[b.at(r, c)] = f.values[c];
    }
    if (len > 0) b.rewards[b.at(r, len - 1)] = f.reward;
    b.roles.push_back(f.role);
    b.observations.push_back(f.observation);
    b.lengths.push_back(len);
    b.trajectories.push_back(f.trajectory);
    b.steps.push_back(f.step);
    b.fragment_rewards.push_back(f.reward);
  }
  return b;
}

// ---------------------------------------------------------------------------
// End-to-end routing audit.

struct ModelAudit {
  std::size_t fragments = 0;
  std::size_t misrouted = 0;
  std::size_t missing = 0;
  std::size_t duplicates = 0;
};

struct AuditDefect {
  std::string kind;  // misrouted | missing | duplicate
  ModelId model;
  TrajectoryId trajectory;
  std::size_t step = 0;
};

struct AuditReport {
  std::map<ModelId, ModelAudit> models;
  std::vector<AuditDefect> defects;

  bool clean() const { return defects.empty(); }

  std::size_t count(std::string_view kind) const {
    std::size_t n = 0;
    for (const auto& d : defects) n += d.kind == kind;
    return n;
  }
};

inline AuditReport audit_routing(std::span<const TrajectoryRecord> records, const AgentModelMapping& mapping,
                                 std::span<const ModelBuffer* const> buffers) {
  AuditReport report;
  std::map<std::pair<TrajectoryId, std::size_t>, int> seen;
  for (const ModelBuffer* buf : buffers) {
    auto& audit = report.models[buf->model_id()];
    for (const auto& f : buf->snapshot()) {
      ++audit.fragments;
      auto it = mapping.assignments.find(f.role);
      if (it == mapping.assignments.end() || it->second != buf->model_id()) {
        ++audit.misrouted;
        report.defects.push_back({"misrouted", buf->model_id(), f.trajectory, f.step});
      }
      if (++seen[{f.trajectory, f.step}] == 2) {
        ++audit.duplicates;
        report.defects.push_back({"duplicate", buf->model_id(), f.trajectory, f.step});
      }
    }
  }
  for (const auto& rec : records) {
    if (rec.failed) continue;
    for (const auto& s : rec.steps) {
      if (s.kind != RoleKind::kAgent) continue;
      if (!seen.contains({rec.id, s.t})) {
        auto it = mapping.assignments.find(s.role);
        ModelId m = it == mapping.assignments.end() ? ModelId{} : it->second;
        ++report.models[m].missing;
        report.defects.push_back({"missing", m, rec.id, s.t});
      }
    }
  }
  return report;
}

}  // namespace maso
