#pragma once

#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "maso/common.hpp"

namespace maso {

enum class TokenClass : std::uint8_t {
  kReserved,
  kRole,
  kPassage,
  kInstruction,
  kWord,
  kNumber,
};

// Dense token space shared by every model of a run. Ids 0..2 are the reserved
// control tokens; role-identity tokens are also reserved (never valid content).
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kEnd = 1;
  static constexpr TokenId kSep = 2;

  Vocabulary() {
    add("<pad>", TokenClass::kReserved);
    add("<end>", TokenClass::kReserved);
    add("<sep>", TokenClass::kReserved);
  }

  // Idempotent for an existing surface of the same class.
  TokenId add(std::string surface, TokenClass cls) {
    if (auto it = ids_.find(surface); it != ids_.end()) {
      if (classes_[it->second] != cls) {
        throw ConfigError("token '" + surface + "' registered with two classes");
      }
      return it->second;
    }
    auto id = static_cast<TokenId>(surfaces_.size());
    ids_.emplace(surface, id);
    surfaces_.push_back(std::move(surface));
    classes_.push_back(cls);
    return id;
  }

  TokenId add_role(const RoleId& role) { return add(role_surface(role), TokenClass::kRole); }

  static std::string role_surface(const RoleId& role) { return "<role:" + role + ">"; }

  std::optional<TokenId> find(std::string_view surface) const {
    if (auto it = ids_.find(std::string(surface)); it != ids_.end()) return it->second;
    return std::nullopt;
  }

  TokenId id(std::string_view surface) const {
    if (auto t = find(surface)) return *t;
    throw ContractError("unknown token '" + std::string(surface) + "'");
  }

  TokenId role_token(const RoleId& role) const { return id(role_surface(role)); }

  const std::string& surface(TokenId t) const {
    if (t >= surfaces_.size()) throw ContractError("token id out of range");
    return surfaces_[t];
  }

  TokenClass token_class(TokenId t) const {
    if (t >= classes_.size()) throw ContractError("token id out of range");
    return classes_[t];
  }

  bool contains(TokenId t) const { return t < surfaces_.size(); }

  bool is_reserved(TokenId t) const {
    auto c = token_class(t);
    return c == TokenClass::kReserved || c == TokenClass::kRole;
  }

  std::size_t size() const { return surfaces_.size(); }

  std::vector<std::string> surfaces(const Tokens& tokens) const {
    std::vector<std::string> out;
    out.reserve(tokens.size());
    for (TokenId t : tokens) out.push_back(surface(t));
    return out;
  }

  std::string decode(const Tokens& tokens) const {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (i) out += ' ';
      out += surface(tokens[i]);
    }
    return out;
  }

  // Whitespace-separated surfaces; every surface must already be registered.
  Tokens encode(std::string_view text) const {
    std::istringstream in{std::string(text)};
    Tokens out;
    for (std::string w; in >> w;) out.push_back(id(w));
    return out;
  }

 private:
  std::vector<std::string> surfaces_;
  std::vector<TokenClass> classes_;
  std::unordered_map<std::string, TokenId> ids_;
};

// Tokens before the first <end>; the whole output when it was truncated.
inline Tokens content_of(const Tokens& output) {
  Tokens out;
  for (TokenId t : output) {
    if (t == Vocabulary::kEnd) break;
    out.push_back(t);
  }
  return out;
}

inline bool terminated(const Tokens& output) {
  for (TokenId t : output)
    if (t == Vocabulary::kEnd) return true;
  return false;
}

// Splits on <sep>; empty segments are kept so callers can reject them.
inline std::vector<Tokens> split_sep(const Tokens& tokens) {
  std::vector<Tokens> parts(1);
  for (TokenId t : tokens) {
    if (t == Vocabulary::kSep) {
      parts.emplace_back();
    } else {
      parts.back().push_back(t);
    }
  }
  return parts;
}

inline Tokens join_sep(const std::vector<Tokens>& parts) {
  Tokens out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out.push_back(Vocabulary::kSep);
    out.insert(out.end(), parts[i].begin(), parts[i].end());
  }
  return out;
}

}  // namespace maso
