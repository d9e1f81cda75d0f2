#pragma once

#include <stdexcept>
#include <string>

namespace persuasion {

// Root of every error this library throws. Callers that only care about
// "something in the pipeline failed" catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad configuration or input files (CLI exit code 1).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A caller violated an operation's precondition.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

// Backend transport failure, or a non-retryable HTTP status.
class BackendError : public Error {
 public:
  explicit BackendError(const std::string& what, int status = 0,
                        std::string body_excerpt = {})
      : Error(what), status_(status), body_(std::move(body_excerpt)) {}

  int status() const noexcept { return status_; }
  const std::string& body_excerpt() const noexcept { return body_; }

 private:
  int status_;
  std::string body_;
};

// The backend does not advertise the capability an operation needs.
class CapabilityError : public Error {
 public:
  explicit CapabilityError(std::string capability)
      : Error("backend lacks capability: " + capability),
        capability_(std::move(capability)) {}

  const std::string& capability() const noexcept { return capability_; }

 private:
  std::string capability_;
};

// The backend answered, but not in the shape we need (e.g. no logprobs).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// Model output could not be parsed (e.g. no "Final Answer:" line).
class ParseError : public Error {
 public:
  using Error::Error;
};

// Cyclic or otherwise malformed tree structure.
class StructuralError : public Error {
 public:
  using Error::Error;
};

// Argument outside the mathematical domain of a function.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Model fit cannot proceed (e.g. only one label class).
class DegenerateFitError : public Error {
 public:
  using Error::Error;
};

}  // namespace persuasion
