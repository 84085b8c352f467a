#include "mfr/error.hpp"

namespace mfr {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::dimension: return "dimension error";
    case ErrorKind::empty_axis: return "empty-axis error";
    case ErrorKind::degenerate_batch: return "degenerate-batch error";
    case ErrorKind::invalid_probability: return "invalid-probability error";
    case ErrorKind::label: return "label error";
    case ErrorKind::patch_size: return "patch-size error";
    case ErrorKind::non_finite_gradient: return "non-finite-gradient error";
    case ErrorKind::empty_input: return "empty-input error";
    case ErrorKind::config: return "config error";
    case ErrorKind::checkpoint_format: return "checkpoint-format error";
    case ErrorKind::io: return "I/O error";
    case ErrorKind::degenerate_landmarks: return "degenerate-landmarks error";
    case ErrorKind::out_of_bounds: return "out-of-bounds error";
    case ErrorKind::duplicate_id: return "duplicate-id error";
    case ErrorKind::parse: return "parse error";
    case ErrorKind::data: return "data error";
    case ErrorKind::range: return "range error";
    case ErrorKind::vocabulary: return "vocabulary error";
  }
  return "error";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

}  // namespace mfr
