#pragma once

namespace fwm {

inline constexpr const char* kVersion = "factorwm 0.1.0";

} // namespace fwm
