#pragma once

namespace stnet {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace stnet
