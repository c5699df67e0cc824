#pragma once

#include <cstdint>
#include <string>

#include "mrh/networks.hpp"

namespace mrh {

// Versioned container of named float32 parameter tensors plus optimizer
// moments; byte layout documented in docs/checkpoint_format.md. Values are
// canonicalized to float32 on save, so save -> load -> save is
// byte-identical.
struct CheckpointMeta {
    uint64_t step = 0;       // completed training steps
    uint64_t seed = 0;       // training run seed
    uint64_t adam_t = 0;     // optimizer step counter for bias correction
    bool has_optimizer = false;
};

void save_checkpoint(const std::string& path, const Model& m, const CheckpointMeta& meta);

// Loads parameters (and moments when present) into `m` by name. Throws on a
// config-digest mismatch unless `force`; always throws on unknown names or
// shape mismatches.
CheckpointMeta load_checkpoint(const std::string& path, Model& m, bool force = false);

// Reads only the header (digest/step/seed) without touching a model.
struct CheckpointHeader {
    uint64_t digest = 0;
    CheckpointMeta meta;
};
CheckpointHeader peek_checkpoint(const std::string& path);

}  // namespace mrh
