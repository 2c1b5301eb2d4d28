#pragma once

#include <stdexcept>
#include <string>

namespace mamc {

// Every failure surfaced by the library derives from Error so callers (CLI,
// service) can map categories to exit codes and HTTP statuses.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IngestionError : public Error { using Error::Error; };
class FormatError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class ShapeError : public Error { using Error::Error; };
class SizeError : public Error { using Error::Error; };
class MaskError : public Error { using Error::Error; };
class IntegrityError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };

// Raised when training produces a non-finite loss term.
class NumericError : public Error { using Error::Error; };

// Remote oracle failures. Transport errors are retryable, protocol errors are not.
class TransportError : public Error { using Error::Error; };
class ProtocolError : public Error { using Error::Error; };

}  // namespace mamc
