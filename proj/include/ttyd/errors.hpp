#pragma once

#include <stdexcept>
#include <string>

namespace ttyd {

// Invalid configuration or incompatible shapes/architectures.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Batch statistics requested on fewer than two rows.
class DegenerateBatchError : public std::runtime_error {
 public:
  explicit DegenerateBatchError(const std::string& what)
      : std::runtime_error(what) {}
};

// A metric whose value is undefined for the given input (e.g. mIoU of an
// empty evaluation set, Spearman of constant ranks).
class UndefinedMetricError : public std::runtime_error {
 public:
  explicit UndefinedMetricError(const std::string& what)
      : std::runtime_error(what) {}
};

// KL divergence with a zero prior entry where the predicted mass is positive.
class InfiniteDivergenceError : public std::runtime_error {
 public:
  explicit InfiniteDivergenceError(const std::string& what)
      : std::runtime_error(what) {}
};

}  // namespace ttyd
