#pragma once

#include <algorithm>

#include "maso/vocab.hpp"
#include "maso/workflow.hpp"

namespace maso {

// What a format validator may look at besides the output itself.
struct FormatContext {
  const Vocabulary& vocab;
  const Scratchpad& scratchpad;  // state the role observed
};

namespace detail {

inline bool only_content_tokens(const Tokens& tokens, const Vocabulary& vocab, bool allow_sep) {
  return std::all_of(tokens.begin(), tokens.end(), [&](TokenId t) {
    if (!vocab.contains(t)) return false;
    if (t == Vocabulary::kSep) return allow_sep;
    return !vocab.is_reserved(t);
  });
}

inline bool valid_query_list(const Tokens& content, const Vocabulary& vocab) {
  if (content.empty() || !only_content_tokens(content, vocab, true)) return false;
  for (const auto& q : split_sep(content))
    if (q.empty()) return false;
  return true;
}

inline bool valid_evidence(const Tokens& content, const FormatContext& ctx) {
  if (content.empty()) return false;
  Tokens retrieved;
  if (auto it = ctx.scratchpad.find("passages"); it != ctx.scratchpad.end()) {
    for (const auto& seg : split_sep(it->second))
      if (!seg.empty()) retrieved.push_back(seg.front());
  }
  return std::all_of(content.begin(), content.end(), [&](TokenId t) {
    return ctx.vocab.contains(t) && ctx.vocab.token_class(t) == TokenClass::kPassage &&
           std::find(retrieved.begin(), retrieved.end(), t) != retrieved.end();
  });
}

}  // namespace detail

// True when `output` is a terminated, well-formed instance of `schema`.
inline bool format_valid(OutputSchema schema, const Tokens& output, const FormatContext& ctx) {
  if (!terminated(output)) return false;
  const Tokens content = content_of(output);
  const auto& vocab = ctx.vocab;
  switch (schema) {
    case OutputSchema::kQueryList: return detail::valid_query_list(content, vocab);
    case OutputSchema::kEvidenceSubset: return detail::valid_evidence(content, ctx);
    case OutputSchema::kAnswerSpan:
      return !content.empty() && detail::only_content_tokens(content, vocab, false);
    case OutputSchema::kKnowledgeUpdate:
      return !content.empty() && detail::only_content_tokens(content, vocab, true);
    case OutputSchema::kProgram:
      return !content.empty() && std::all_of(content.begin(), content.end(), [&](TokenId t) {
               return vocab.contains(t) && vocab.token_class(t) == TokenClass::kInstruction;
             });
    case OutputSchema::kPlanText:
    case OutputSchema::kReflectionText: return detail::only_content_tokens(content, vocab, false);
  }
  return false;
}

inline bool format_valid(const RoleSpec& role, const Tokens& output, const FormatContext& ctx) {
  if (!role.is_agent() || !role.output_schema)
    throw ContractError("format check on non-agent role '" + role.id + "'");
  return format_valid(*role.output_schema, output, ctx);
}

}  // namespace maso
