#include "kinaema/world/dataset.hpp"

#include <zlib.h>

#include <fstream>

#include "json.hpp"

namespace kinaema::world {

using nlohmann::json;

Dataset generate_dataset(const DatasetGenConfig& gen, const WorldConfig& world) {
  Dataset ds;
  ds.world = world;
  ds.profile = gen.profile;
  ds.seed = gen.seed;
  int num_scenes = (gen.episodes + gen.episodes_per_scene - 1) / gen.episodes_per_scene;
  num_scenes = std::max(num_scenes, 1);
  std::vector<Scene> scenes;
  for (int s = 0; s < num_scenes; ++s) {
    uint64_t scene_seed = RngStream::split(gen.seed, "scene-seed", static_cast<uint64_t>(s))
                              .next_u64();
    scenes.push_back(make_scene(scene_seed, world));
    ds.scenes.push_back({scenes.back().id, scene_seed});
  }
  for (int e = 0; e < gen.episodes; ++e) {
    const Scene& scene = scenes[static_cast<size_t>(e / gen.episodes_per_scene)];
    uint64_t ep_seed =
        RngStream::split(gen.seed, "episode-seed", static_cast<uint64_t>(e)).next_u64();
    ds.episodes.push_back(generate_episode(scene, ep_seed, gen.length, gen.profile, world));
  }
  return ds;
}

namespace {

void append_f32(std::vector<float>& buf, double v) { buf.push_back(static_cast<float>(v)); }

std::vector<float> episode_payload(const EpisodeRecord& ep) {
  std::vector<float> buf;
  const int t = ep.length();
  buf.reserve(static_cast<size_t>(t + 1) * 3 + static_cast<size_t>(t) * 4 +
              2 * static_cast<size_t>(t) * ep.observations[0].retina.size() +
              static_cast<size_t>(t) * 3);
  for (const auto& p : ep.poses) {
    append_f32(buf, p.x);
    append_f32(buf, p.y);
    append_f32(buf, p.heading);
  }
  for (const auto& o : ep.observations) buf.insert(buf.end(), o.retina.begin(), o.retina.end());
  for (const auto& o : ep.observations)
    for (double v : o.odometry) append_f32(buf, v);
  for (const auto& p : ep.alt_poses) {
    append_f32(buf, p.x);
    append_f32(buf, p.y);
    append_f32(buf, p.heading);
  }
  for (const auto& r : ep.alt_retinas) buf.insert(buf.end(), r.begin(), r.end());
  return buf;
}

uint32_t payload_crc(const std::vector<float>& payload) {
  return static_cast<uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(payload.data()),
            static_cast<uInt>(payload.size() * sizeof(float))));
}

json world_to_json(const WorldConfig& w) {
  return json{{"arena_w", w.arena_w},
              {"arena_h", w.arena_h},
              {"landmark_count", w.landmark_count},
              {"feature_dim", w.feature_dim},
              {"retina_bins", w.retina_bins},
              {"fov_deg", w.fov_deg},
              {"max_range", w.max_range},
              {"obs_noise", w.obs_noise},
              {"fov_jitter", w.fov_jitter}};
}

WorldConfig world_from_json(const json& j) {
  WorldConfig w;
  w.arena_w = j.at("arena_w").get<double>();
  w.arena_h = j.at("arena_h").get<double>();
  w.landmark_count = j.at("landmark_count").get<int>();
  w.feature_dim = j.at("feature_dim").get<int>();
  w.retina_bins = j.at("retina_bins").get<int>();
  w.fov_deg = j.at("fov_deg").get<double>();
  w.max_range = j.at("max_range").get<double>();
  w.obs_noise = j.at("obs_noise").get<double>();
  w.fov_jitter = j.at("fov_jitter").get<bool>();
  return w;
}

}  // namespace

void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create dataset directory " + dir.string());

  std::ofstream bin(dir / "episodes.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw IoError("cannot open " + (dir / "episodes.bin").string() + " for writing");

  json index = json::array();
  uint64_t offset = 0;
  for (size_t e = 0; e < ds.episodes.size(); ++e) {
    const auto& ep = ds.episodes[e];
    std::vector<float> payload = episode_payload(ep);
    uint64_t bytes = payload.size() * sizeof(float);
    bin.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(bytes));
    index.push_back(json{{"scene_id", ep.scene_id},
                         {"length", ep.length()},
                         {"offset", offset},
                         {"size", bytes},
                         {"crc32", payload_crc(payload)}});
    offset += bytes;
  }
  bin.close();
  if (!bin) throw IoError("failed writing episodes.bin");

  json scenes = json::array();
  for (const auto& s : ds.scenes) scenes.push_back(json{{"id", s.id}, {"seed", s.seed}});

  json manifest = {{"format_version", 1},
                   {"world", world_to_json(ds.world)},
                   {"profile", profile_name(ds.profile)},
                   {"seed", ds.seed},
                   {"scenes", scenes},
                   {"episodes", index}};
  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  if (!mf) throw IoError("cannot open manifest.json for writing");
  mf << manifest.dump(2) << "\n";
}

Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw IoError("cannot open " + (dir / "manifest.json").string());
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    throw IoError("malformed manifest.json: " + std::string(e.what()));
  }
  int version = manifest.at("format_version").get<int>();
  if (version != 1)
    throw IoError("unsupported dataset format_version " + std::to_string(version));

  Dataset ds;
  ds.world = world_from_json(manifest.at("world"));
  ds.profile = profile_from_name(manifest.at("profile").get<std::string>());
  ds.seed = manifest.at("seed").get<uint64_t>();
  for (const auto& s : manifest.at("scenes"))
    ds.scenes.push_back({s.at("id").get<std::string>(), s.at("seed").get<uint64_t>()});

  std::ifstream bin(dir / "episodes.bin", std::ios::binary);
  if (!bin) throw IoError("cannot open " + (dir / "episodes.bin").string());

  const int rdim = ds.world.retina_dim();
  for (const auto& meta : manifest.at("episodes")) {
    const int t = meta.at("length").get<int>();
    const uint64_t offset = meta.at("offset").get<uint64_t>();
    const uint64_t bytes = meta.at("size").get<uint64_t>();
    const uint32_t want_crc = meta.at("crc32").get<uint32_t>();
    const size_t idx = ds.episodes.size();

    uint64_t expect =
        (static_cast<uint64_t>(t + 1) * 3 + static_cast<uint64_t>(t) * (rdim + 4 + 3 + rdim)) *
        sizeof(float);
    if (bytes != expect)
      throw IoError("episode " + std::to_string(idx) + ": size " + std::to_string(bytes) +
                    " does not match manifest geometry " + std::to_string(expect));

    std::vector<float> payload(bytes / sizeof(float));
    bin.seekg(static_cast<std::streamoff>(offset));
    bin.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(bytes));
    if (bin.gcount() != static_cast<std::streamsize>(bytes))
      throw IoError("episode " + std::to_string(idx) + ": truncated payload");
    if (payload_crc(payload) != want_crc)
      throw IoError("episode " + std::to_string(idx) + ": checksum mismatch");

    EpisodeRecord ep;
    ep.scene_id = meta.at("scene_id").get<std::string>();
    size_t pos = 0;
    auto next = [&]() { return static_cast<double>(payload[pos++]); };
    for (int i = 0; i <= t; ++i) {
      Pose p;
      p.x = next();
      p.y = next();
      p.heading = next();
      ep.poses.push_back(p);
    }
    ep.observations.resize(static_cast<size_t>(t));
    for (int i = 0; i < t; ++i) {
      ep.observations[static_cast<size_t>(i)].retina.assign(payload.begin() + pos,
                                                            payload.begin() + pos + rdim);
      pos += static_cast<size_t>(rdim);
    }
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < 4; ++j) ep.observations[static_cast<size_t>(i)].odometry[j] = next();
    for (int i = 0; i < t; ++i) {
      Pose p;
      p.x = next();
      p.y = next();
      p.heading = next();
      ep.alt_poses.push_back(p);
    }
    ep.alt_retinas.resize(static_cast<size_t>(t));
    for (int i = 0; i < t; ++i) {
      ep.alt_retinas[static_cast<size_t>(i)].assign(payload.begin() + pos,
                                                    payload.begin() + pos + rdim);
      pos += static_cast<size_t>(rdim);
    }
    ds.episodes.push_back(std::move(ep));
  }
  return ds;
}

}  // namespace kinaema::world
