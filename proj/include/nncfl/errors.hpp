#pragma once

#include <stdexcept>
#include <string>

namespace nncfl {

// Root of every error raised by the library. Callers that only need to know
// "something in nncfl failed" catch this.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ArgumentError : public Error {
public:
    using Error::Error;
};

// Shapes that cannot be combined (matmul inner dims, tensor alignment).
class DimensionError : public Error {
public:
    using Error::Error;
};

// Malformed user data: out-of-range token ids, non-finite values.
class InputError : public Error {
public:
    using Error::Error;
};

// Non-finite loss or gradient during training.
class NumericError : public Error {
public:
    using Error::Error;
};

// Entropy-coded payload cannot be decoded (truncated, trailing bytes).
class DecodeError : public Error {
public:
    using Error::Error;
};

// Container or file header is not something we understand.
class FormatError : public Error {
public:
    using Error::Error;
};

// Tensor names/shapes disagree with what the receiver expects.
class SchemaError : public Error {
public:
    using Error::Error;
};

class LookupError : public Error {
public:
    using Error::Error;
};

// Parameter update tree is corrupt (cycles, dangling parents, hash mismatch).
class IntegrityError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

} // namespace nncfl
