#pragma once

#include <stdexcept>
#include <string>

namespace vtgrasp {

// Every library failure carries a short machine-readable category that the
// CLI prints verbatim.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& message)
      : std::runtime_error(message), category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& m) : Error("dimension", m) {}
};

struct GeometryError : Error {
  explicit GeometryError(const std::string& m) : Error("geometry-mismatch", m) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error("numeric", m) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};

struct IoError : Error {
  explicit IoError(const std::string& m) : Error("io", m) {}
};

struct StateMachineError : Error {
  explicit StateMachineError(const std::string& m) : Error("state-machine", m) {}
};

}  // namespace vtgrasp
