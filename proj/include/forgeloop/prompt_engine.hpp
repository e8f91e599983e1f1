#pragma once

#include "forgeloop/executor.hpp"
#include "forgeloop/message.hpp"

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace forgeloop::prompts {

class MissingTemplateVariable : public std::runtime_error {
public:
  explicit MissingTemplateVariable(std::string name)
      : std::runtime_error("missing template variable: " + name), name_(std::move(name)) {}
  const std::string &name() const noexcept { return name_; }

private:
  std::string name_;
};

// Every template uses {{name}} placeholders.
struct PromptTemplateSet {
  std::string system_instructions;
  std::string output_template; // {{records}}
  std::string record_template; // {{ordinal}} {{command}} {{shell}} {{status}} {{stdout}} {{stderr}}
  std::string empty_template;
  std::size_t truncation_budget = 8192; // bytes of captured stream text per rendered prompt

  static PromptTemplateSet defaults();
  // Reads system.txt, output.txt, record.txt, empty.txt; absent files keep the default.
  static PromptTemplateSet load(const std::filesystem::path &dir);
};

using Facts = std::map<std::string, std::string, std::less<>>;

// Facts the engine always knows; caller-supplied facts take precedence.
Facts builtin_facts();

std::string render_template(std::string_view tmpl, const Facts &facts);

// [system, user(task)]. Throws std::invalid_argument on a blank task.
std::vector<Message> render_initial(std::string_view task, const PromptTemplateSet &templates, const Facts &env_facts);

// Throws std::invalid_argument on an empty record list.
Message render_step(const std::vector<exec::ExecutionRecord> &records, const PromptTemplateSet &templates);

// Throws std::invalid_argument on blank input.
Message render_resume(std::string_view human_input, const PromptTemplateSet &templates);

Message render_empty(const PromptTemplateSet &templates);

std::string elision_marker(std::size_t removed_bytes);

// Keeps head and tail around an elision marker so the result fits in budget bytes.
std::string elide_middle(std::string_view text, std::size_t budget);

// Water-filling split of budget across streams of the given sizes.
std::vector<std::size_t> allocate_budget(const std::vector<std::size_t> &sizes, std::size_t budget);

std::string status_line(const exec::ExecutionRecord &record);

} // namespace forgeloop::prompts
