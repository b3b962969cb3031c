#pragma once

#include <stdexcept>
#include <string>

namespace sceneiqa {

// Base of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input file (manifest, features, predictions, checkpoint).
class ParseError : public Error {
 public:
  using Error::Error;
};

// Input parsed fine but violates an invariant or precondition.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Checkpoint format tag or version does not match this build.
class VersionError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace sceneiqa
