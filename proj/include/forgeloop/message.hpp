#pragma once

#include <optional>
#include <string>
#include <string_view>

namespace forgeloop {

enum class Role { System, User, Assistant };

inline std::string_view to_string(Role role) {
  switch (role) {
  case Role::System:
    return "system";
  case Role::User:
    return "user";
  case Role::Assistant:
    return "assistant";
  }
  return "user";
}

inline std::optional<Role> role_from_string(std::string_view name) {
  if (name == "system") {
    return Role::System;
  }
  if (name == "user") {
    return Role::User;
  }
  if (name == "assistant") {
    return Role::Assistant;
  }
  return std::nullopt;
}

struct Message {
  Role role = Role::User;
  std::string content;

  bool operator==(const Message &) const = default;
};

} // namespace forgeloop
