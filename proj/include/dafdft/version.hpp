#pragma once

namespace dafdft {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace dafdft
