#pragma once

#include <stdexcept>
#include <string>

namespace instrgen {

// Base class for every error raised by the library. Callers that only care
// about failure vs. success catch this; the CLI maps it to a nonzero exit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define INSTRGEN_DEFINE_ERROR(Name)                                  \
  class Name : public Error {                                        \
   public:                                                           \
    explicit Name(const std::string& what) : Error(#Name ": " + what) {} \
  }

INSTRGEN_DEFINE_ERROR(UnknownImage);
INSTRGEN_DEFINE_ERROR(ManifestMismatch);
INSTRGEN_DEFINE_ERROR(InvalidFeatures);
INSTRGEN_DEFINE_ERROR(FeatureArityMismatch);
INSTRGEN_DEFINE_ERROR(ShapeMismatch);
INSTRGEN_DEFINE_ERROR(LengthExceeded);
INSTRGEN_DEFINE_ERROR(EmptyCorpus);
INSTRGEN_DEFINE_ERROR(BatchTooSmall);
INSTRGEN_DEFINE_ERROR(BeamTooSmall);
INSTRGEN_DEFINE_ERROR(ScorerUnavailable);
INSTRGEN_DEFINE_ERROR(CorruptCheckpoint);
INSTRGEN_DEFINE_ERROR(EmptyReferences);
INSTRGEN_DEFINE_ERROR(MissingAttributes);
INSTRGEN_DEFINE_ERROR(BadRatios);
INSTRGEN_DEFINE_ERROR(DanglingImageId);
INSTRGEN_DEFINE_ERROR(MissingPrerequisite);
INSTRGEN_DEFINE_ERROR(ConfigError);
INSTRGEN_DEFINE_ERROR(IoError);

#undef INSTRGEN_DEFINE_ERROR

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("ParseError at line " + std::to_string(line) + ": " + what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class CoverageGap : public Error {
 public:
  CoverageGap(std::string missing_id, const std::string& what)
      : Error("CoverageGap: " + what), missing_(std::move(missing_id)) {}
  const std::string& missing_sample() const noexcept { return missing_; }

 private:
  std::string missing_;
};

}  // namespace instrgen
