#pragma once

namespace casrl {

// Embedded in every output artifact so runs are attributable to a code state.
inline constexpr const char* kCodeVersion = "casrl-0.1.0";

}  // namespace casrl
