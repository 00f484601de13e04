#pragma once

#include <stdexcept>
#include <string>

namespace tak {

// Shared error hierarchy. Every failure mode the library reports is a typed
// exception deriving from Error, so callers (and the CLI) can map them to
// exit codes without string matching.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class LabelError : public Error {
 public:
  using Error::Error;
};

class NormalizationError : public Error {
 public:
  using Error::Error;
};

class UnknownClass : public Error {
 public:
  using Error::Error;
};

class GenerationFailed : public Error {
 public:
  GenerationFailed(const std::string& class_name, const std::string& why)
      : Error("generation failed for class '" + class_name + "': " + why),
        class_name_(class_name) {}
  const std::string& class_name() const { return class_name_; }

 private:
  std::string class_name_;
};

class ValidationRejected : public Error {
 public:
  ValidationRejected(const std::string& class_name)
      : Error("all claims rejected for class '" + class_name + "'"),
        class_name_(class_name) {}
  const std::string& class_name() const { return class_name_; }

 private:
  std::string class_name_;
};

class SchemaError : public Error {
 public:
  SchemaError(const std::string& pointer, const std::string& why)
      : Error("schema violation at " + pointer + ": " + why), pointer_(pointer) {}
  const std::string& pointer() const { return pointer_; }

 private:
  std::string pointer_;
};

class DuplicateClass : public Error {
 public:
  explicit DuplicateClass(int class_id)
      : Error("duplicate class_id " + std::to_string(class_id)), class_id_(class_id) {}
  int class_id() const { return class_id_; }

 private:
  int class_id_;
};

class EncodingFailed : public Error {
 public:
  using Error::Error;
};

class MissingHead : public Error {
 public:
  explicit MissingHead(int class_id)
      : Error("no head parameters for class " + std::to_string(class_id)),
        class_id_(class_id) {}
  int class_id() const { return class_id_; }

 private:
  int class_id_;
};

class AlignmentSkipped : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

class PlacementFailed : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class EmptyMask : public Error {
 public:
  using Error::Error;
};

class UndefinedSurface : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace tak
