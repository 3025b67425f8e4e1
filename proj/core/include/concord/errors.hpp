#pragma once

#include <stdexcept>
#include <string>

namespace concord {

// Base class for all toolkit errors. `kind()` returns the stable error name
// used in diagnostics and tests.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define CONCORD_DEFINE_ERROR(Name)                              \
  class Name : public Error {                                   \
   public:                                                      \
    explicit Name(const std::string& what) : Error(#Name, what) {} \
  }

// seqcloud
CONCORD_DEFINE_ERROR(MissingPose);
CONCORD_DEFINE_ERROR(DegeneratePose);
CONCORD_DEFINE_ERROR(RangeExceedsSequence);
CONCORD_DEFINE_ERROR(TruncatedFile);
CONCORD_DEFINE_ERROR(LabelCountMismatch);
CONCORD_DEFINE_ERROR(BoundaryFrame);
CONCORD_DEFINE_ERROR(InvalidSequence);

// stindex
CONCORD_DEFINE_ERROR(UnalignedSequence);
CONCORD_DEFINE_ERROR(RangeExceedsIndex);

// featnet
CONCORD_DEFINE_ERROR(EmptyNeighborhood);
CONCORD_DEFINE_ERROR(RangeMismatch);
CONCORD_DEFINE_ERROR(ConfidenceOutOfRange);
CONCORD_DEFINE_ERROR(NonFiniteLoss);
CONCORD_DEFINE_ERROR(InvalidModel);

// concordance fusion
CONCORD_DEFINE_ERROR(EmptyTeacherSet);
CONCORD_DEFINE_ERROR(LengthMismatch);
CONCORD_DEFINE_ERROR(PointCountMismatch);
CONCORD_DEFINE_ERROR(DuplicateSequence);

// detfuse
CONCORD_DEFINE_ERROR(DegenerateBox);

// evalkit
CONCORD_DEFINE_ERROR(EmptyMatrix);
CONCORD_DEFINE_ERROR(SchemaMismatch);

// synthlab
CONCORD_DEFINE_ERROR(MissingGroundTruth);

// pipeline
CONCORD_DEFINE_ERROR(ConfigError);
CONCORD_DEFINE_ERROR(DataError);
CONCORD_DEFINE_ERROR(StaleInput);

#undef CONCORD_DEFINE_ERROR

}  // namespace concord
