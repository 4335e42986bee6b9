#pragma once

#include <stdexcept>
#include <string>

namespace obf {

/// Malformed or unusable input data (files, corpora, configs).
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

/// Non-finite values or failed numerical preconditions at runtime.
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace obf
