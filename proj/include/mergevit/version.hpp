#pragma once

namespace mergevit {

inline constexpr const char* kVersion = "0.1.0";
// Version of the JSON config / report schema. Bump on any breaking change
// to RunConfig, TrainReport or the CSV column layout.
inline constexpr int kSchemaVersion = 1;

}  // namespace mergevit
