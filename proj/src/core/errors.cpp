#include "defog/errors.hpp"

namespace defog {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::InvalidInput: return "invalid_input";
    case ErrorKind::Config: return "config";
    case ErrorKind::Format: return "format";
    case ErrorKind::Io: return "io";
    case ErrorKind::Numerical: return "numerical";
    case ErrorKind::Protocol: return "protocol";
    case ErrorKind::InvalidWindow: return "invalid_window";
    case ErrorKind::InsufficientData: return "insufficient_data";
    case ErrorKind::UndefinedSteadyState: return "undefined_steady_state";
  }
  return "unknown";
}

}  // namespace defog
