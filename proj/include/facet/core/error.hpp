#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace facet {

// Library-wide error with a machine-readable code. The CLI maps these to
// error JSON on stderr; tests match on the code.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& message)
        : std::runtime_error(message), code_(std::move(code)) {}

    const std::string& code() const { return code_; }

private:
    std::string code_;
};

namespace errc {
inline constexpr const char* bad_args = "BAD_ARGS";
inline constexpr const char* bounds = "BOUNDS";
inline constexpr const char* shape_mismatch = "SHAPE_MISMATCH";
inline constexpr const char* dim_mismatch = "DIM_MISMATCH";
inline constexpr const char* nan_input = "NAN_INPUT";
inline constexpr const char* io_error = "IO_ERROR";
inline constexpr const char* integrity = "INTEGRITY";
inline constexpr const char* diverged = "DIVERGED";
inline constexpr const char* stage_too_early = "STAGE_TOO_EARLY";
inline constexpr const char* bad_triplet = "BAD_TRIPLET";
inline constexpr const char* empty_mask = "EMPTY_MASK";
inline constexpr const char* checkpoint_mismatch = "CHECKPOINT_MISMATCH";
}  // namespace errc

}  // namespace facet
