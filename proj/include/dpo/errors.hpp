#pragma once

#include <stdexcept>
#include <string>

namespace dpo {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidInput : public Error {
 public:
  using Error::Error;
};

class IllegalTransition : public Error {
 public:
  using Error::Error;
};

class IllegalQuery : public Error {
 public:
  using Error::Error;
};

class EnumerationTooLarge : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or gradient during an optimization step.
class TrainingDivergence : public Error {
 public:
  using Error::Error;
};

// Non-finite model output during a forward evaluation.
class ModelDivergence : public Error {
 public:
  using Error::Error;
};

class InternalInvariant : public Error {
 public:
  using Error::Error;
};

class NotReady : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace dpo
