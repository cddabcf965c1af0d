#pragma once

#include <stdexcept>
#include <string>

namespace saemx {

// bad user input: malformed config, unknown model id, invalid CLI usage
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// malformed data or config file; message carries file/line context
struct ParseError : ConfigError {
  explicit ParseError(const std::string& msg) : ConfigError(msg) {}
};

// a computation broke down (singular covariance, non-finite update, ...);
// message carries iteration/subject context where available
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace saemx
