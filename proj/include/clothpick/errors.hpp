#ifndef CLOTHPICK_ERRORS_HPP
#define CLOTHPICK_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace clothpick {

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Bad user configuration: unknown keys, out-of-range values, impossible cloth placement.
class ConfigError : public Error {
public:
  using Error::Error;
};

// A caller violated an operation's precondition.
class ContractError : public Error {
public:
  using Error::Error;
};

// Non-finite particle state after an integration step. Retry with a smaller dt.
class SimulationDivergence : public Error {
public:
  using Error::Error;
};

// Non-finite tensor in the latent model; the message names the tensor or loss term.
class NumericError : public Error {
public:
  using Error::Error;
};

class LifecycleError : public Error {
public:
  using Error::Error;
};

// Initial-state generation could not reach the requested tier or coverage band.
class GenerationError : public Error {
public:
  using Error::Error;
};

class PlanningError : public Error {
public:
  using Error::Error;
};

// Malformed or truncated dataset/checkpoint files.
class FormatError : public Error {
public:
  using Error::Error;
};

class UndefinedNiError : public Error {
public:
  using Error::Error;
};

} // namespace clothpick

#endif
