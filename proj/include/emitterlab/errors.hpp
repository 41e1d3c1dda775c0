#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace emitterlab {

// Process exit codes used by the CLI; library errors carry the matching code
// so main() can translate without a taxonomy switch.
enum class ExitCode : int {
    ok = 0,
    config = 2,   // bad CLI arguments, malformed config, invalid parameters
    io = 3,       // missing/unreadable file, corrupt on-disk format
    numeric = 4,  // fit divergence, integrator failure, degenerate normalization
};

class Error : public std::runtime_error {
  public:
    Error(ExitCode code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
    ExitCode exit_code() const { return code_; }

  private:
    ExitCode code_;
};

class ConfigError : public Error {
  public:
    explicit ConfigError(const std::string& msg) : Error(ExitCode::config, msg) {}
};

class IoError : public Error {
  public:
    explicit IoError(const std::string& msg) : Error(ExitCode::io, msg) {}
};

// Corrupt or truncated file payload. Carries the byte offset where parsing
// stopped making sense (0 for a bad header magic).
class FormatError : public Error {
  public:
    FormatError(const std::string& msg, std::uint64_t byte_offset)
        : Error(ExitCode::io, msg + " (byte offset " + std::to_string(byte_offset) + ")"),
          offset_(byte_offset) {}
    std::uint64_t byte_offset() const { return offset_; }

  private:
    std::uint64_t offset_;
};

class NumericError : public Error {
  public:
    explicit NumericError(const std::string& msg) : Error(ExitCode::numeric, msg) {}
};

// Invalid photophysical rates. Distinct reasons are distinguishable so tests
// can assert on *why* a parameter set was rejected.
class RateError : public Error {
  public:
    enum class Reason {
        negative_or_nonfinite,
        zero_pump,        // r12 == 0: no steady state with occupied excited levels
        zero_deshelving,  // r31 == 0: shelf is absorbing, correlation undefined
    };

    RateError(Reason reason, const std::string& msg)
        : Error(ExitCode::config, msg), reason_(reason) {}
    Reason reason() const { return reason_; }

  private:
    Reason reason_;
};

}  // namespace emitterlab
