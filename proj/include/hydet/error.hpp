#pragma once

#include <stdexcept>
#include <string>

namespace hydet {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or arguments to an op.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf detected in checked mode, or a non-finite training loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid model, training or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

enum class DatasetErrc {
  missing_root,
  bad_manifest,
  bad_class_file,
  class_out_of_range,
  malformed_label,
  empty_split,
  undecodable_image,
};

class DatasetError : public Error {
 public:
  DatasetError(DatasetErrc code, const std::string& what) : Error(what), code_(code) {}
  DatasetErrc code() const noexcept { return code_; }

 private:
  DatasetErrc code_;
};

enum class CheckpointErrc {
  io,
  bad_magic,
  version_mismatch,
  truncated,
  integrity,
  config_mismatch,
  shape_mismatch,
  missing_tensor,
};

class CheckpointError : public Error {
 public:
  CheckpointError(CheckpointErrc code, const std::string& what) : Error(what), code_(code) {}
  CheckpointErrc code() const noexcept { return code_; }

 private:
  CheckpointErrc code_;
};

}  // namespace hydet
