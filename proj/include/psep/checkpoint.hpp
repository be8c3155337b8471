#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "psep/config.hpp"
#include "psep/optim.hpp"

namespace psep {

inline constexpr char kCheckpointMagic[] = "PSEP1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Where training stopped, for resuming at an epoch boundary.
struct TrainingState {
    std::size_t next_epoch = 0;
    Adam::State adam;
};

/// Binary layout (little-endian):
///   "PSEP1" u32 version
///   u32 len, config echo (key=value text)
///   u32 count, then per tensor: u32 name_len, name, u32 rank, u64 dims[rank], f32 payload
///   u32 m, u32 class per prototype
///   u32 m, per prototype: u8 projected, u64 image id, u32 y, u32 x, f32 attention at site
/// Training state, when present, lives in the echo (state.* keys) and in
/// tensors named adam.m.<param> / adam.v.<param>.
struct Checkpoint {
    TrainConfig config;
    ParamSet params;
    std::vector<std::size_t> class_of;
    std::vector<std::optional<PatchSource>> sources;
    std::optional<TrainingState> state;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
/// Rejects bad magic, unknown versions, truncation, unknown or missing tensors and shape mismatches.
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint make_checkpoint(const TrainConfig& cfg, const Model& model, std::optional<TrainingState> state = std::nullopt);
Model model_from_checkpoint(const Checkpoint& ckpt);

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace psep
