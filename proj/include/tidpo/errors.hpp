#pragma once

#include <stdexcept>
#include <string>

namespace tidpo {

// Base class for every error thrown by this library. Catching tidpo::Error
// is enough to intercept anything we raise on purpose.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define TIDPO_DEFINE_ERROR(NAME)         \
  struct NAME : Error {                  \
    using Error::Error;                  \
  };

// Autodiff / tensor plumbing.
TIDPO_DEFINE_ERROR(ShapeMismatch)    // operand shapes incompatible for an op
TIDPO_DEFINE_ERROR(NonFinite)        // an op produced NaN or +-inf
TIDPO_DEFINE_ERROR(NotScalarRoot)    // backward() called on a non-scalar
TIDPO_DEFINE_ERROR(InvalidArgument)  // bad index, size, or enum value

// Model / sequence handling.
TIDPO_DEFINE_ERROR(SequenceTooLong)   // exceeds max_seq_len
TIDPO_DEFINE_ERROR(SequenceTooShort)  // empty prompt/response where forbidden
TIDPO_DEFINE_ERROR(ConfigMismatch)    // incompatible model configurations
TIDPO_DEFINE_ERROR(CheckpointIOError) // unreadable/corrupt checkpoint file

// Losses / data.
TIDPO_DEFINE_ERROR(LengthMismatch)  // weight vector length != token count
TIDPO_DEFINE_ERROR(EmptyAnchor)     // anchor generation produced no tokens
TIDPO_DEFINE_ERROR(SpecInfeasible)  // corpus spec cannot be satisfied
TIDPO_DEFINE_ERROR(ParseError)      // malformed corpus file (message carries line)
TIDPO_DEFINE_ERROR(NonFiniteLoss)   // training loss became NaN/inf

TIDPO_DEFINE_ERROR(IoError)         // generic file read/write failure

// Verification harness.
TIDPO_DEFINE_ERROR(UntrainedInput)      // both models indistinguishable from ref
TIDPO_DEFINE_ERROR(DegenerateVariance)  // correlation of a constant column
TIDPO_DEFINE_ERROR(TooFewSamples)       // statistical check given too little data

#undef TIDPO_DEFINE_ERROR

}  // namespace tidpo
