#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

namespace forgeloop {

enum class Status { AwaitingTask, Stepping, AwaitingHuman, Failed, Closed };

enum class PauseReason { MarkerRequested, NoActionableOutput, ApprovalPending, MaxStepsReached, Interrupted };

std::string_view to_string(Status status);
std::optional<Status> status_from_string(std::string_view name);
std::string_view to_string(PauseReason reason);
std::optional<PauseReason> pause_reason_from_string(std::string_view name);

struct SessionState {
  std::string session_id;
  Status status = Status::AwaitingTask;
  std::optional<PauseReason> pause_reason; // set iff status == AwaitingHuman
  std::string failure_cause;               // set iff status == Failed
  std::optional<std::string> task;
  // Steps taken in the whole session; also names snippet archive entries.
  std::size_t step_index = 0;
  // step_index at the most recent human input; max_steps bounds step_index - turn_start.
  std::size_t turn_start = 0;
  std::size_t max_steps = 30;
  std::filesystem::path session_dir;
  std::optional<std::string> scenario;

  std::size_t steps_this_turn() const noexcept { return step_index - turn_start; }
  bool accepts_input() const noexcept {
    return status == Status::AwaitingTask || status == Status::Failed ||
           (status == Status::AwaitingHuman && pause_reason != PauseReason::ApprovalPending);
  }
  bool operator==(const SessionState &) const = default;
};

// AwaitingTask->Stepping, Stepping->Stepping, Stepping->AwaitingHuman,
// AwaitingHuman->Stepping, Failed->Stepping, any->Failed, any->Closed.
bool transition_allowed(Status from, Status to);

} // namespace forgeloop
