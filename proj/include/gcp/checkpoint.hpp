#pragma once

#include "gcp/model.hpp"

#include <string>

namespace gcp {

// Single-file binary checkpoint: JSON header (graph, config, loss weights)
// followed by raw little-endian float64 tensors with shape headers. The
// save/load round trip is bit-exact on every parameter. Loading never
// produces a partial model: corrupt files raise IoError or VersionMismatch.
void checkpoint_save(const GcpModel& model, const std::string& path);
GcpModel checkpoint_load(const std::string& path);

} // namespace gcp
