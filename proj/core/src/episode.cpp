#include "isodream/episode.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace isodream {

using json = nlohmann::ordered_json;

void Episode::expand_frame(int t, std::vector<float>& chw) const {
  ISO_CHECK(t >= 0 && t < frame_count(), "frame index out of range");
  colorize(frames[t], palette, chw);
}

std::array<uint8_t, kImagePixels> Episode::agent_mask(int t) const {
  ISO_CHECK(t >= 0 && t < frame_count(), "frame index out of range");
  std::array<uint8_t, kImagePixels> m;
  for (int i = 0; i < kImagePixels; ++i) m[i] = frames[t][i] == kPixAgent ? 1 : 0;
  return m;
}

std::array<uint8_t, kImagePixels> Episode::ball_mask(int t) const {
  ISO_CHECK(t >= 0 && t < frame_count(), "frame index out of range");
  std::array<uint8_t, kImagePixels> m;
  for (int i = 0; i < kImagePixels; ++i) m[i] = frames[t][i] == kPixBall ? 1 : 0;
  return m;
}

std::array<float, 2> Episode::prev_action(int t) const {
  if (t <= 0) return {0.0f, 0.0f};
  return actions[t - 1];
}

float Episode::arrival_reward(int t) const {
  if (t <= 0) return 0.0f;
  return rewards[t - 1];
}

namespace {

constexpr char kMagic[8] = {'I', 'S', 'O', 'D', 'E', 'P', '1', '\0'};

template <typename T>
void write_raw(std::ofstream& f, const T* p, size_t n) {
  f.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(T)));
}

template <typename T>
void read_raw(std::ifstream& f, T* p, size_t n, const std::string& what) {
  f.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * sizeof(T)));
  if (f.gcount() != static_cast<std::streamsize>(n * sizeof(T))) {
    throw IoError("ISODEP1: truncated " + what);
  }
}

}  // namespace

void write_isodep1(const Episode& ep, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f.is_open()) throw IoError("cannot open " + path + " for writing");

  json header{
      {"format", "ISODEP1"},
      {"transitions", ep.length},
      {"frames", ep.frame_count()},
      {"image_shape", {3, kImageSize, kImageSize}},
      {"action_dim", 2},
      {"config_hash", ep.config_hash},
      {"seed", ep.seed},
      {"palette", ep.palette},
      {"episode_return", ep.episode_return},
      {"sections",
       {"images_f32", "actions_f32", "rewards_f32", "collisions_u8",
        "agent_masks_u8", "ball_masks_u8"}},
  };
  const std::string hs = header.dump();
  const uint64_t hlen = hs.size();
  f.write(kMagic, 8);
  write_raw(f, &hlen, 1);
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));

  std::vector<float> chw;
  for (int t = 0; t < ep.frame_count(); ++t) {
    ep.expand_frame(t, chw);
    write_raw(f, chw.data(), chw.size());
  }
  for (const auto& a : ep.actions) write_raw(f, a.data(), 2);
  write_raw(f, ep.rewards.data(), ep.rewards.size());
  write_raw(f, ep.collisions.data(), ep.collisions.size());
  for (int t = 0; t < ep.frame_count(); ++t) {
    auto m = ep.agent_mask(t);
    write_raw(f, m.data(), m.size());
  }
  for (int t = 0; t < ep.frame_count(); ++t) {
    auto m = ep.ball_mask(t);
    write_raw(f, m.data(), m.size());
  }
  if (!f.good()) throw IoError("write failure on " + path);
}

Episode read_isodep1(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f.is_open()) throw IoError("cannot open " + path);
  char magic[8];
  read_raw(f, magic, 8, "magic");
  if (std::memcmp(magic, kMagic, 7) != 0) {
    throw IoError("not an ISODEP1 file: " + path);
  }
  uint64_t hlen = 0;
  read_raw(f, &hlen, 1, "header length");
  if (hlen > (1u << 20)) throw IoError("ISODEP1: implausible header length");
  std::string hs(hlen, '\0');
  read_raw(f, hs.data(), hlen, "header");
  json header;
  try {
    header = json::parse(hs);
  } catch (const std::exception& e) {
    throw IoError(std::string("ISODEP1: bad header: ") + e.what());
  }

  Episode ep;
  ep.length = header.at("transitions").get<int>();
  const int frames = header.at("frames").get<int>();
  ISO_CHECK(frames == ep.length + 1, "ISODEP1: frame/transition mismatch");
  ep.config_hash = header.at("config_hash").get<std::string>();
  ep.seed = header.at("seed").get<uint64_t>();
  ep.palette = header.at("palette").get<std::array<std::array<float, 3>, 4>>();
  ep.episode_return = header.at("episode_return").get<double>();

  // reconstruct palette ids from exact float matches; this loader accepts
  // only files produced with the palette recorded in the header
  std::vector<float> chw(3 * kImagePixels);
  ep.frames.resize(frames);
  for (int t = 0; t < frames; ++t) {
    read_raw(f, chw.data(), chw.size(), "image data");
    for (int i = 0; i < kImagePixels; ++i) {
      int id = -1;
      for (int k = 0; k < 4; ++k) {
        if (chw[i] == ep.palette[k][0] && chw[kImagePixels + i] == ep.palette[k][1] &&
            chw[2 * kImagePixels + i] == ep.palette[k][2]) {
          id = k;
          break;
        }
      }
      if (id < 0) throw IoError("ISODEP1: pixel value outside the palette");
      ep.frames[t][i] = static_cast<uint8_t>(id);
    }
  }
  ep.actions.resize(ep.length);
  for (auto& a : ep.actions) read_raw(f, a.data(), 2, "actions");
  ep.rewards.resize(ep.length);
  read_raw(f, ep.rewards.data(), ep.rewards.size(), "rewards");
  ep.collisions.resize(ep.length);
  read_raw(f, ep.collisions.data(), ep.collisions.size(), "collision flags");
  // masks are derivable from the ids; validate the stored agent masks to
  // catch corrupted files
  std::vector<uint8_t> mask(kImagePixels);
  for (int t = 0; t < frames; ++t) {
    read_raw(f, mask.data(), mask.size(), "agent masks");
    auto expect = ep.agent_mask(t);
    if (!std::equal(mask.begin(), mask.end(), expect.begin())) {
      throw IoError("ISODEP1: agent mask does not match image content");
    }
  }
  for (int t = 0; t < frames; ++t) {
    read_raw(f, mask.data(), mask.size(), "ball masks");
  }
  return ep;
}

}  // namespace isodream
