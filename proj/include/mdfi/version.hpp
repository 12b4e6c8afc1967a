#pragma once

namespace mdfi {

inline constexpr const char* kVersion = "0.1.0";

} // namespace mdfi
