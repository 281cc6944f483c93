// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace mstar {

/// Bad input data or configuration (CLI exit code 2).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss or another numerical abort (CLI exit code 3).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class FormatErrc {
  bad_magic,
  bad_version,
  truncated,
  trailing_bytes,
  manifest_mismatch,
  missing_file,
};

class FormatError : public DataError {
 public:
  FormatError(FormatErrc code, const std::string& what) : DataError(what), code_(code) {}
  FormatErrc code() const { return code_; }

 private:
  FormatErrc code_;
};

/// A training loop observed a change in a tensor that must stay frozen.
class FrozenParameterError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace mstar
