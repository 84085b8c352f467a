#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mfr {

enum class ErrorKind {
  dimension,
  empty_axis,
  degenerate_batch,
  invalid_probability,
  label,
  patch_size,
  non_finite_gradient,
  empty_input,
  config,
  checkpoint_format,
  io,
  degenerate_landmarks,
  out_of_bounds,
  duplicate_id,
  parse,
  data,
  range,
  vocabulary,
};

std::string_view to_string(ErrorKind kind);

// Every recoverable failure in the library is reported through this type;
// callers that care about the category switch on kind().
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

}  // namespace mfr
