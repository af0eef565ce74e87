#ifndef H2ML_ERRORS_HPP
#define H2ML_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace h2ml {

// bad user input (unknown geometry, invalid parameters)
struct config_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// inconsistent data structures (tree/hierarchy mismatch, missing parent map)
struct structure_error : std::logic_error {
    using std::logic_error::logic_error;
};

// numerical breakdown (non-SPSD input, no convergence)
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// size limits (oracle cap, DOF cap)
struct resource_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace h2ml

#endif
