#pragma once

#include <stdexcept>
#include <string>

namespace halludet {

// Input or configuration violates a documented contract. CLI exit code 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed JSON / TOML / binary input. Carries the byte offset when known.
class ParseError : public ValidationError {
 public:
  ParseError(const std::string& what, std::size_t byte_offset)
      : ValidationError(what + " (at byte " + std::to_string(byte_offset) + ")"),
        byte_offset_(byte_offset) {}
  std::size_t byte_offset() const noexcept { return byte_offset_; }

 private:
  std::size_t byte_offset_;
};

// Malformed safetensors container.
class FormatError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Transport or HTTP failure after retries. CLI exit code 2.
class EndpointError : public std::runtime_error {
 public:
  EndpointError(const std::string& what, int http_status = 0)
      : std::runtime_error(what), http_status_(http_status) {}
  int http_status() const noexcept { return http_status_; }

 private:
  int http_status_;
};

// The endpoint answered, but not in the shape we expect.
class ProtocolError : public EndpointError {
 public:
  using EndpointError::EndpointError;
};

// A completion did not contain a yes/no verdict.
class UnparseableAnswer : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// logprob mode but neither answer token appears among the alternatives.
class ProbabilityUnavailable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Sampling mode produced no parsable sample.
class UndecidedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace halludet
