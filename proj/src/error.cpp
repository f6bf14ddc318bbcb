#include "fpm/error.hpp"

namespace fpm {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Size: return "size";
    case ErrorKind::Config: return "config";
    case ErrorKind::Domain: return "domain";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Format: return "format";
    case ErrorKind::Io: return "io";
    case ErrorKind::Contract: return "contract";
  }
  return "unknown";
}

}  // namespace fpm
