#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "kinaema/world/world.hpp"

namespace kinaema::world {

struct SceneRef {
  std::string id;
  uint64_t seed = 0;
};

struct Dataset {
  WorldConfig world;
  Profile profile = Profile::train;
  uint64_t seed = 0;
  std::vector<SceneRef> scenes;
  std::vector<EpisodeRecord> episodes;
};

struct DatasetGenConfig {
  int episodes = 100;
  int length = 60;
  uint64_t seed = 0;
  Profile profile = Profile::train;
  int episodes_per_scene = 50;
};

Dataset generate_dataset(const DatasetGenConfig& gen, const WorldConfig& world);

// Directory layout: manifest.json (format_version, world config, scene refs,
// episode index with byte offsets and per-episode crc32) + episodes.bin
// (little-endian float32; per episode: poses[(T+1)x3], retinas[TxK*F],
// odometry[Tx4], alt_poses[Tx3], alt_retinas[TxK*F]).
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace kinaema::world
