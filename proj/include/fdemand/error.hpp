#pragma once

#include <stdexcept>
#include <string>

namespace fdemand {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A documented precondition was violated by the caller.
class ContractViolation : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Density, likelihood or linear-algebra failure (singular matrix, non-finite value).
class NumericalFailure : public Error {
public:
    using Error::Error;
};

/// A mixture component lost (almost) all of its mass during EM.
class DegenerateComponent : public NumericalFailure {
public:
    DegenerateComponent(int component, double mass, int restarts = 0)
        : NumericalFailure("degenerate mixture component " + std::to_string(component) +
                           " (mass " + std::to_string(mass) + ", restarts " +
                           std::to_string(restarts) + ")"),
          component_(component), mass_(mass), restarts_(restarts) {}

    int component() const noexcept { return component_; }
    double mass() const noexcept { return mass_; }
    int restarts() const noexcept { return restarts_; }

private:
    int component_;
    double mass_;
    int restarts_;
};

/// Silhouette is undefined when every observation carries the same label.
class UndefinedSilhouette : public ContractViolation {
public:
    using ContractViolation::ContractViolation;
};

/// Not enough history to fit a forecasting model.
class InsufficientHistory : public ContractViolation {
public:
    using ContractViolation::ContractViolation;
};

} // namespace fdemand
