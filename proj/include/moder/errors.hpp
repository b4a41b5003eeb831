#pragma once

#include <stdexcept>
#include <string>

namespace moder {

/// Error categories map onto CLI exit codes (see cli.hpp).
enum class ErrorCategory { Contract, Dimension, Domain, Lookup, Usage, Format, Io, Divergence, UndefinedMetric, Config };

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what) : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

#define MODER_DEFINE_ERROR(Name, Category)                                      \
  class Name : public Error {                                                   \
   public:                                                                      \
    explicit Name(const std::string& what) : Error(ErrorCategory::Category, what) {} \
  };

MODER_DEFINE_ERROR(ContractError, Contract)
MODER_DEFINE_ERROR(DimensionError, Dimension)
MODER_DEFINE_ERROR(DomainError, Domain)
MODER_DEFINE_ERROR(LookupError, Lookup)
MODER_DEFINE_ERROR(UsageError, Usage)
MODER_DEFINE_ERROR(FormatError, Format)
MODER_DEFINE_ERROR(IoError, Io)
MODER_DEFINE_ERROR(DivergenceError, Divergence)
MODER_DEFINE_ERROR(UndefinedMetricError, UndefinedMetric)
MODER_DEFINE_ERROR(ConfigError, Config)

#undef MODER_DEFINE_ERROR

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractError(message);
}

}  // namespace moder
