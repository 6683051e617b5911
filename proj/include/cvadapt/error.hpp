#pragma once

#include <stdexcept>
#include <string>

namespace cvadapt {

/// Base class for every error raised by the library. The message is the
/// user-facing diagnostic; the CLI prints it verbatim.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised by the trainer when the E-step produced no valid pseudo-label for
/// too many consecutive iterations.
class CollapseError : public Error {
 public:
  using Error::Error;
};

}  // namespace cvadapt
