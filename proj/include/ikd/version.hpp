#pragma once

namespace ikd {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace ikd
