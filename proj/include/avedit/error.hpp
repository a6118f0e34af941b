#pragma once

#include <stdexcept>
#include <string>

namespace avedit {

// Root of every error raised by the library. `kind()` is a stable, machine
// readable tag that the CLI reports alongside the message.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define AVEDIT_ERROR_TYPE(Name, Tag) \
  class Name : public Error {        \
   public:                           \
    explicit Name(const std::string& what) : Error(Tag, what) {} \
  }

AVEDIT_ERROR_TYPE(ValidationError, "validation");
AVEDIT_ERROR_TYPE(DimensionError, "dimension_mismatch");
AVEDIT_ERROR_TYPE(ContractError, "contract_violation");
AVEDIT_ERROR_TYPE(MissingFileError, "missing_file");
AVEDIT_ERROR_TYPE(ManifestError, "malformed_manifest");
AVEDIT_ERROR_TYPE(SizeMismatchError, "size_mismatch");
AVEDIT_ERROR_TYPE(IoError, "io");
AVEDIT_ERROR_TYPE(StageError, "stage_order");
AVEDIT_ERROR_TYPE(ConfigError, "config");
AVEDIT_ERROR_TYPE(NumericError, "non_finite");
AVEDIT_ERROR_TYPE(ProtocolError, "protocol");

#undef AVEDIT_ERROR_TYPE

}  // namespace avedit
