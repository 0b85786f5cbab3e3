#pragma once

#include <stdexcept>
#include <string>

namespace faceflow {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor rank/size disagreement.
struct ShapeError : Error {
    using Error::Error;
};
// Parameter outside its documented interval.
struct DomainError : Error {
    using Error::Error;
};
// Missing key: expression class, bucket, tensor name.
struct LookupError : Error {
    using Error::Error;
};
// NaN/Inf where finite values are required.
struct NumericError : Error {
    using Error::Error;
};
// Text token id outside the vocabulary.
struct VocabError : Error {
    using Error::Error;
};
// Filesystem or file-format problem.
struct IoError : Error {
    using Error::Error;
};
// Inconsistent run configuration.
struct ConfigError : Error {
    using Error::Error;
};

}  // namespace faceflow
