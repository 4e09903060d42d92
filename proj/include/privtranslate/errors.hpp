#pragma once

#include <stdexcept>
#include <string>

namespace privtranslate {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NotFoundError : Error { using Error::Error; };
struct EmptyDatasetError : Error { using Error::Error; };
struct InvalidDomainError : Error { using Error::Error; };
struct InvalidArgumentError : Error { using Error::Error; };
struct TooFewGroupsError : Error { using Error::Error; };
struct InvalidSpecError : Error { using Error::Error; };
struct ShapeError : Error { using Error::Error; };
struct TooFewSamplesError : Error { using Error::Error; };
struct UnsupportedModelError : Error { using Error::Error; };
struct InvalidConfigError : Error { using Error::Error; };
struct CorruptCheckpointError : Error { using Error::Error; };
struct TooFewClassesError : Error { using Error::Error; };
struct EmptyClassError : Error { using Error::Error; };
struct MismatchedReportsError : Error { using Error::Error; };
struct EmptyGalleryError : Error { using Error::Error; };
struct NoReverseGeneratorError : Error { using Error::Error; };
struct FrozenViolationError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };
struct StageRefusedError : Error { using Error::Error; };

}  // namespace privtranslate
