#pragma once

#include <stdexcept>
#include <string>

namespace cctr {

// Root of every error this library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class RankError : public Error {
 public:
  using Error::Error;
};

// Softmax over a slice whose entries are all -inf.
class DegenerateRowError : public Error {
 public:
  using Error::Error;
};

// Finite-difference probe produced a non-finite objective.
class ProbeError : public Error {
 public:
  using Error::Error;
};

class LabelError : public Error {
 public:
  using Error::Error;
};

// Not enough timestamps to build a shuffled negative.
class NegativeSamplingError : public Error {
 public:
  using Error::Error;
};

class UndefinedTauError : public Error {
 public:
  using Error::Error;
};

// Bad magic, version, truncated payload or non-finite values in a file.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace cctr
