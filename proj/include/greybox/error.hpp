#pragma once

#include <stdexcept>
#include <string>

namespace greybox {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent user input (shapes, files, parameter bounds).
class InputError : public Error {
public:
    using Error::Error;
};

class ShapeError : public InputError {
public:
    using InputError::InputError;
};

/// A transfer function was evaluated on (or numerically at) one of its poles.
class EvaluationAtPoleError : public Error {
public:
    using Error::Error;
};

/// Repeated or clustered eigenvalues; residues at the cluster are not separable.
class DegenerateSpectrumError : public Error {
public:
    using Error::Error;
};

class NoPoleError : public Error {
public:
    using Error::Error;
};

/// Network topology problems (isolated node, disconnected graph).
class TopologyError : public Error {
public:
    using Error::Error;
};

/// Ill-posed interconnection or a failed assembly self-check.
class AssemblyError : public Error {
public:
    using Error::Error;
};

class EquilibriumError : public Error {
public:
    using Error::Error;
};

/// Impedance form requested for a model whose admittance cannot be inverted.
class OrientationError : public Error {
public:
    using Error::Error;
};

class SensitivityError : public Error {
public:
    using Error::Error;
};

/// Post-perturbation eigenvalue could not be matched unambiguously.
class MatchingError : public Error {
public:
    using Error::Error;
};

class FitError : public Error {
public:
    using Error::Error;
};

}  // namespace greybox
