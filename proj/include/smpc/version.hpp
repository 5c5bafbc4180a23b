#pragma once

namespace smpc {

inline constexpr const char* kVersion = "0.1.0";

// Bumped whenever the on-disk layout of the corresponding artifact changes.
inline constexpr int kTraceCsvSchemaVersion = 1;
inline constexpr int kSummaryJsonSchemaVersion = 1;
inline constexpr int kConicTextFormatVersion = 1;
inline constexpr int kSystemMatrixFormatVersion = 1;

}  // namespace smpc
