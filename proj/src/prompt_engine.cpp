#include "forgeloop/prompt_engine.hpp"

#include "forgeloop/response_parser.hpp"
#include "forgeloop/snippet_store.hpp"
#include "forgeloop/util.hpp"
#include "forgeloop_default_templates.hpp"

#include <algorithm>
#include <numeric>

namespace forgeloop::prompts {

namespace fs = std::filesystem;

PromptTemplateSet PromptTemplateSet::defaults() {
  PromptTemplateSet set;
  set.system_instructions = std::string(generated::kSystemTemplate);
  set.output_template = std::string(generated::kOutputTemplate);
  set.record_template = std::string(generated::kRecordTemplate);
  set.empty_template = std::string(generated::kEmptyTemplate);
  return set;
}

PromptTemplateSet PromptTemplateSet::load(const fs::path &dir) {
  auto set = defaults();
  auto read_into = [&](const char *name, std::string &target) {
    const auto path = dir / name;
    if (fs::exists(path)) {
      auto content = util::read_file(path);
      if (!content) {
        throw StorageFailure(path, "unreadable template");
      }
      target = std::move(*content);
    }
  };
  read_into("system.txt", set.system_instructions);
  read_into("output.txt", set.output_template);
  read_into("record.txt", set.record_template);
  read_into("empty.txt", set.empty_template);
  return set;
}

Facts builtin_facts() {
  std::string tags;
  for (const auto &[tag, kind] : parser::default_tag_map()) {
    if (kind == parser::BlockKind::ShellCommand) {
      tags += tags.empty() ? tag : ", " + tag;
    }
  }
  return {
      {"session_dir", "."},
      {"snippet_path", snippets::latest_relpath("python").generic_string()},
      {"marker", std::string(parser::kDefaultPauseMarker)},
      {"shell_tags", tags},
  };
}

std::string render_template(std::string_view tmpl, const Facts &facts) {
  std::string out;
  out.reserve(tmpl.size());
  std::size_t pos = 0;
  while (pos < tmpl.size()) {
    const auto open = tmpl.find("{{", pos);
    if (open == std::string_view::npos) {
      out.append(tmpl.substr(pos));
      break;
    }
    const auto close = tmpl.find("}}", open + 2);
    if (close == std::string_view::npos) {
      out.append(tmpl.substr(pos));
      break;
    }
    out.append(tmpl.substr(pos, open - pos));
    const auto name = util::trim(tmpl.substr(open + 2, close - open - 2));
    const auto it = facts.find(name);
    if (it == facts.end()) {
      throw MissingTemplateVariable(name);
    }
    out.append(it->second);
    pos = close + 2;
  }
  return out;
}

std::vector<Message> render_initial(std::string_view task, const PromptTemplateSet &templates,
                                    const Facts &env_facts) {
  if (util::is_blank(task)) {
    throw std::invalid_argument("task must not be blank");
  }
  auto facts = builtin_facts();
  for (const auto &[k, v] : env_facts) {
    facts[k] = v;
  }
  return {
      Message{Role::System, render_template(templates.system_instructions, facts)},
      Message{Role::User, std::string(task)},
  };
}

std::string elision_marker(std::size_t removed_bytes) {
  return "\xE2\x80\xA6[truncated " + std::to_string(removed_bytes) + " bytes]\xE2\x80\xA6";
}

std::string elide_middle(std::string_view text, std::size_t budget) {
  if (text.size() <= budget) {
    return std::string(text);
  }
  // The marker length depends on the removed count, which depends on the marker.
  std::size_t keep = 0;
  for (int i = 0; i < 4; ++i) {
    const auto marker_len = elision_marker(text.size() - keep).size();
    keep = budget > marker_len ? budget - marker_len : 0;
  }
  auto head = util::utf8_floor(text, keep / 2);
  auto tail_start = text.size() - (keep - keep / 2);
  while (tail_start < text.size() && (static_cast<unsigned char>(text[tail_start]) & 0xc0) == 0x80) {
    ++tail_start;
  }
  std::string out(text.substr(0, head));
  out += elision_marker(tail_start - head);
  out.append(text.substr(tail_start));
  return out;
}

std::vector<std::size_t> allocate_budget(const std::vector<std::size_t> &sizes, std::size_t budget) {
  std::vector<std::size_t> alloc(sizes.size(), 0);
  std::vector<std::size_t> order(sizes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return sizes[a] < sizes[b]; });
  std::size_t remaining = budget;
  std::size_t left = sizes.size();
  for (const auto idx : order) {
    const auto share = remaining / left;
    alloc[idx] = std::min(sizes[idx], share);
    remaining -= alloc[idx];
    --left;
  }
  return alloc;
}

std::string status_line(const exec::ExecutionRecord &record) {
  using exec::VerdictKind;
  switch (record.verdict.kind) {
  case VerdictKind::Ran:
    return "ran, exit " + std::to_string(record.exit_status.value_or(-1));
  case VerdictKind::Denied:
    return "denied by policy rule '" + record.verdict.rule_id + "', not run";
  case VerdictKind::NeedsApprovalTimedOut:
    return "not run, approval was not given in time";
  case VerdictKind::TimedOut:
    return "timed out after " + std::to_string(record.duration_ms) + " ms, process killed";
  case VerdictKind::SpawnFailed:
    return "could not be started";
  }
  return "unknown";
}

Message render_step(const std::vector<exec::ExecutionRecord> &records, const PromptTemplateSet &templates) {
  if (records.empty()) {
    throw std::invalid_argument("render_step requires at least one execution record");
  }
  std::vector<std::size_t> sizes;
  for (const auto &r : records) {
    sizes.push_back(r.stdout_text.size());
    sizes.push_back(r.stderr_text.size());
  }
  const auto alloc = allocate_budget(sizes, templates.truncation_budget);

  std::string rendered_records;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto &r = records[i];
    auto out = elide_middle(r.stdout_text, alloc[2 * i]);
    auto err = elide_middle(r.stderr_text, alloc[2 * i + 1]);
    if (r.stdout_truncated) {
      out += "\n(output capped at capture limit)";
    }
    if (r.stderr_truncated) {
      err += "\n(output capped at capture limit)";
    }
    const Facts facts{
        {"ordinal", std::to_string(i)},
        {"command", r.request.command},
        {"shell", r.request.shell_tag},
        {"status", status_line(r)},
        {"stdout", out},
        {"stderr", err},
    };
    rendered_records += render_template(templates.record_template, facts);
  }
  return Message{Role::User, render_template(templates.output_template, Facts{{"records", rendered_records}})};
}

Message render_resume(std::string_view human_input, const PromptTemplateSet &) {
  if (util::is_blank(human_input)) {
    throw std::invalid_argument("human input must not be blank");
  }
  return Message{Role::User, std::string(human_input)};
}

Message render_empty(const PromptTemplateSet &templates) {
  return Message{Role::User, render_template(templates.empty_template, builtin_facts())};
}

} // namespace forgeloop::prompts
