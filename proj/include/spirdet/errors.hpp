#pragma once

#include <stdexcept>
#include <string>

namespace spirdet {

// Bad runtime data fed to an op (shape mismatch, indivisible dims, ...).
struct InvalidInput : std::runtime_error {
  explicit InvalidInput(const std::string& msg) : std::runtime_error("invalid input: " + msg) {}
};

// Bad learned/derived parameters (e.g. non-positive BN variance).
struct InvalidParameter : std::runtime_error {
  explicit InvalidParameter(const std::string& msg) : std::runtime_error("invalid parameter: " + msg) {}
};

// Structurally inconsistent parameter sets (branch shape disagreement, ...).
struct InvalidStructure : std::runtime_error {
  explicit InvalidStructure(const std::string& msg) : std::runtime_error("invalid structure: " + msg) {}
};

// Rejected model configuration; carries the offending field name.
struct InvalidConfig : std::runtime_error {
  std::string field;
  InvalidConfig(std::string field_, const std::string& msg)
      : std::runtime_error("invalid config [" + field_ + "]: " + msg), field(std::move(field_)) {}
};

// Malformed serialized data; carries the byte offset where parsing failed.
struct FormatError : std::runtime_error {
  long long offset;
  FormatError(long long offset_, const std::string& msg)
      : std::runtime_error("format error at byte " + std::to_string(offset_) + ": " + msg),
        offset(offset_) {}
};

// Backward pass reached an op with no registered adjoint.
struct UnsupportedOp : std::runtime_error {
  explicit UnsupportedOp(const std::string& op)
      : std::runtime_error("unsupported op in backward pass: " + op) {}
};

}  // namespace spirdet
