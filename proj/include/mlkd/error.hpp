// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mlkd {

enum class ErrorKind {
  contract,
  numeric,
  parameter,
  shape,
  degenerate_input,
  distribution,
  capability,
  spec,
  data,
  format,
  config,
  label,
  augmentation,
  subsample,
  split,
};

const char* to_string(ErrorKind kind) noexcept;

/// Every failure raised by the library carries a machine-readable kind; the
/// CLI maps it to an exit code and an `error[<kind>]` prefix.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

}  // namespace mlkd
