// SPDX-License-Identifier: Apache-2.0
#include "mlkd/error.hpp"

namespace mlkd {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::contract: return "contract";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::parameter: return "parameter";
    case ErrorKind::shape: return "shape";
    case ErrorKind::degenerate_input: return "degenerate";
    case ErrorKind::distribution: return "distribution";
    case ErrorKind::capability: return "capability";
    case ErrorKind::spec: return "spec";
    case ErrorKind::data: return "data";
    case ErrorKind::format: return "format";
    case ErrorKind::config: return "config";
    case ErrorKind::label: return "label";
    case ErrorKind::augmentation: return "augmentation";
    case ErrorKind::subsample: return "subsample";
    case ErrorKind::split: return "split";
  }
  return "unknown";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(message), kind_(kind) {}

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

}  // namespace mlkd
