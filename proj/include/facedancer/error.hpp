// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace facedancer {

// Error classes map onto process exit codes used by the command-line tool.
enum class ErrorKind : int {
  Usage = 1,
  MissingArtifact = 2,
  Data = 3,
  Numerical = 4,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string name, const std::string& what)
      : std::runtime_error(what), kind_(kind), name_(std::move(name)) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& name() const noexcept { return name_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
  std::string name_;
};

#define FACEDANCER_DEFINE_ERROR(Name, Kind)                     \
  class Name : public Error {                                   \
   public:                                                      \
    explicit Name(const std::string& what)                      \
        : Error(ErrorKind::Kind, #Name, what) {}                \
  }

FACEDANCER_DEFINE_ERROR(UsageError, Usage);
FACEDANCER_DEFINE_ERROR(UnknownKey, Usage);
FACEDANCER_DEFINE_ERROR(IndexOutOfRange, Usage);

FACEDANCER_DEFINE_ERROR(CheckpointNotFound, MissingArtifact);
FACEDANCER_DEFINE_ERROR(FileNotFound, MissingArtifact);
FACEDANCER_DEFINE_ERROR(MissingMargin, MissingArtifact);

FACEDANCER_DEFINE_ERROR(ShapeMismatch, Data);
FACEDANCER_DEFINE_ERROR(ConfigMismatch, Data);
FACEDANCER_DEFINE_ERROR(ResolutionMismatch, Data);
FACEDANCER_DEFINE_ERROR(DegenerateLandmarks, Data);
FACEDANCER_DEFINE_ERROR(EmptyDataset, Data);
FACEDANCER_DEFINE_ERROR(InsufficientIdentities, Data);
FACEDANCER_DEFINE_ERROR(EmptyGallery, Data);
FACEDANCER_DEFINE_ERROR(EmptyDistribution, Data);
FACEDANCER_DEFINE_ERROR(EmptyBlock, Data);
FACEDANCER_DEFINE_ERROR(CheckpointCorrupt, Data);
FACEDANCER_DEFINE_ERROR(ParseError, Data);
FACEDANCER_DEFINE_ERROR(NoData, Data);
FACEDANCER_DEFINE_ERROR(ImageIOError, Data);

FACEDANCER_DEFINE_ERROR(ZeroVector, Numerical);
FACEDANCER_DEFINE_ERROR(NonFiniteLoss, Numerical);
FACEDANCER_DEFINE_ERROR(NonPSDCovariance, Numerical);

#undef FACEDANCER_DEFINE_ERROR

}  // namespace facedancer
