#pragma once

#include <stdexcept>
#include <string>

namespace gfseg {

// Error taxonomy shared by every module. Shape/data errors originate at the
// tensor level, the rest at the layers above.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct RegistryError : std::runtime_error {
    explicit RegistryError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainingError : std::runtime_error {
    explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace gfseg
