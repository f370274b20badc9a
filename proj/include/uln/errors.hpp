#pragma once

#include <stdexcept>
#include <string>

namespace uln {

// Error taxonomy shared by every module. Each subclass corresponds to one
// failure class a caller may want to handle separately.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define ULN_DEFINE_ERROR(Name)          \
  class Name : public Error {           \
   public:                              \
    using Error::Error;                 \
  }

ULN_DEFINE_ERROR(ParseError);
ULN_DEFINE_ERROR(ValidationError);
ULN_DEFINE_ERROR(LookupError);
ULN_DEFINE_ERROR(ConfigError);
ULN_DEFINE_ERROR(NumericError);
ULN_DEFINE_ERROR(ShapeError);
ULN_DEFINE_ERROR(InfeasibleEpisodeError);
ULN_DEFINE_ERROR(SurgeryError);
ULN_DEFINE_ERROR(InvariantError);
ULN_DEFINE_ERROR(DependencyError);
ULN_DEFINE_ERROR(LoadError);

#undef ULN_DEFINE_ERROR

}  // namespace uln
