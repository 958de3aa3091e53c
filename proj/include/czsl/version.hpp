#pragma once

namespace czsl {

inline constexpr const char* kEngineVersion = "0.1.0";

}  // namespace czsl
