#include "forgeloop/session_state.hpp"

namespace forgeloop {

std::string_view to_string(Status status) {
  switch (status) {
  case Status::AwaitingTask:
    return "awaiting_task";
  case Status::Stepping:
    return "stepping";
  case Status::AwaitingHuman:
    return "awaiting_human";
  case Status::Failed:
    return "failed";
  case Status::Closed:
    return "closed";
  }
  return "failed";
}

std::optional<Status> status_from_string(std::string_view name) {
  for (auto s : {Status::AwaitingTask, Status::Stepping, Status::AwaitingHuman, Status::Failed, Status::Closed}) {
    if (to_string(s) == name) {
      return s;
    }
  }
  return std::nullopt;
}

std::string_view to_string(PauseReason reason) {
  switch (reason) {
  case PauseReason::MarkerRequested:
    return "marker_requested";
  case PauseReason::NoActionableOutput:
    return "no_actionable_output";
  case PauseReason::ApprovalPending:
    return "approval_pending";
  case PauseReason::MaxStepsReached:
    return "max_steps_reached";
  case PauseReason::Interrupted:
    return "interrupted";
  }
  return "interrupted";
}

std::optional<PauseReason> pause_reason_from_string(std::string_view name) {
  for (auto r : {PauseReason::MarkerRequested, PauseReason::NoActionableOutput, PauseReason::ApprovalPending,
                 PauseReason::MaxStepsReached, PauseReason::Interrupted}) {
    if (to_string(r) == name) {
      return r;
    }
  }
  return std::nullopt;
}

bool transition_allowed(Status from, Status to) {
  if (from == Status::Closed) {
    return false;
  }
  if (to == Status::Failed || to == Status::Closed) {
    return true;
  }
  switch (from) {
  case Status::AwaitingTask:
    return to == Status::Stepping;
  case Status::Stepping:
    return to == Status::Stepping || to == Status::AwaitingHuman;
  case Status::AwaitingHuman:
  case Status::Failed:
    return to == Status::Stepping;
  case Status::Closed:
    return false;
  }
  return false;
}

} // namespace forgeloop
