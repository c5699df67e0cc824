#pragma once

#include <sstream>
#include <stdexcept>

// MRH_CHECK(cond, "message " << detail): throw std::runtime_error on failure.
#define MRH_CHECK(cond, msg)                                  \
    do {                                                      \
        if (!(cond)) {                                        \
            std::ostringstream os_;                           \
            os_ << "check failed: " << msg;                   \
            throw std::runtime_error(os_.str());              \
        }                                                     \
    } while (0)
