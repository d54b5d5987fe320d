#pragma once

#include <stdexcept>
#include <string>

namespace pyror {

/// Invalid architecture or training configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Shape inference or shape agreement failure; carries the offending node id.
class ShapeError : public std::runtime_error {
 public:
  ShapeError(const std::string& msg, int node_id)
      : std::runtime_error(msg), node_id_(node_id) {}
  int node_id() const { return node_id_; }

 private:
  int node_id_;
};

/// File format or I/O failure (checkpoints, graph JSON, dataset files).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite value detected during execution or training divergence.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace pyror
