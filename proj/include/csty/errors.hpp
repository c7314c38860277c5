#ifndef CSTY_ERRORS_HPP
#define CSTY_ERRORS_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

namespace csty {

// Invalid configuration (bad key, bad value, violated invariant). CLI exit code 2.
class config_error : public std::runtime_error {
public:
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Corrupt or unreadable on-disk artifact. CLI exit code 3.
class artifact_error : public std::runtime_error {
public:
    artifact_error(const std::string& msg, size_t byte_offset)
        : std::runtime_error(msg + " (byte offset " + std::to_string(byte_offset) + ")"),
          byte_offset_(byte_offset) {}

    size_t byte_offset() const { return byte_offset_; }

private:
    size_t byte_offset_;
};

} // namespace csty

#endif // CSTY_ERRORS_HPP
