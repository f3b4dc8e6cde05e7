#ifndef IBIT_ERRORS_HPP_
#define IBIT_ERRORS_HPP_

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ibit {

class DimensionError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
  public:
    using std::out_of_range::out_of_range;
};

class ConfigError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

class FormatError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class StateError : public std::logic_error {
  public:
    using std::logic_error::logic_error;
};

// Raised when an iterative procedure produces a non-finite value.
class TrainingError : public std::runtime_error {
  public:
    TrainingError(const std::string &what, std::size_t step)
        : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

    std::size_t step() const noexcept { return step_; }

  private:
    std::size_t step_;
};

} // namespace ibit

#endif // IBIT_ERRORS_HPP_
