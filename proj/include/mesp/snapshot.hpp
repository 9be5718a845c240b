#pragma once
// Binary parameter snapshots: magic, version, dtype width, then the named
// tensor list in canonical order. Raw little-endian payloads; round trips
// are bit exact.

#include <string>

#include "mesp/model.hpp"

namespace mesp {

inline constexpr char kSnapshotMagic[8] = {'M', 'E', 'S', 'P', 'S', 'N', 'A', 'P'};
inline constexpr uint32_t kSnapshotVersion = 1;

template <typename T>
void save_snapshot(const std::string& path, ModelParams<T>& params);

// Loads into an already-built model; every name and shape must match.
template <typename T>
void load_snapshot(const std::string& path, ModelParams<T>& params);

}  // namespace mesp
