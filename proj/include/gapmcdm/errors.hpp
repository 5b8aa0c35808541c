#pragma once

#include <stdexcept>
#include <string>

namespace gapmcdm {

// Argument outside its documented domain (CLI maps this to exit code 2).
struct domain_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Inconsistent run configuration or invalid design input (exit code 2).
struct config_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Non-finite value produced during evaluation (exit code 3).
// item_index is the offending item when known, -1 otherwise.
struct numerical_error : std::runtime_error {
    explicit numerical_error(const std::string& what, int item = -1)
        : std::runtime_error(what), item_index(item) {}
    int item_index;
};

}  // namespace gapmcdm
