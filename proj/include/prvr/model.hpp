#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "prvr/encoders.hpp"
#include "prvr/util.hpp"

namespace prvr {

struct ModelConfig {
  std::size_t hidden = 384;
  std::size_t heads = 4;
  std::size_t depth = 1;
  std::size_t ff_mult = 4;
  std::size_t max_frames = 128;
};

struct BranchParams {
  EncoderParams video;
  EncoderParams text;
};

// The dual-branch student. Branches share the architecture but never share
// parameter storage.
struct ModelState {
  BranchParams inheritance;
  BranchParams exploration;
  std::size_t video_dim = 0, text_dim = 0;
  ModelConfig config;

  std::vector<Tensor*> branch_parameters(bool inheritance_branch) {
    BranchParams& b = inheritance_branch ? inheritance : exploration;
    auto out = b.video.parameters();
    auto text_params = b.text.parameters();
    out.insert(out.end(), text_params.begin(), text_params.end());
    return out;
  }
  std::vector<const Tensor*> branch_parameters(bool inheritance_branch) const {
    const BranchParams& b = inheritance_branch ? inheritance : exploration;
    auto video_params = b.video.parameters();
    std::vector<const Tensor*> out(video_params.begin(), video_params.end());
    auto text_params = b.text.parameters();
    out.insert(out.end(), text_params.begin(), text_params.end());
    return out;
  }
  std::vector<const Tensor*> all_parameters() const {
    auto out = branch_parameters(true);
    auto explo = branch_parameters(false);
    out.insert(out.end(), explo.begin(), explo.end());
    return out;
  }
};

inline ModelState init_model(const ModelConfig& cfg, std::size_t video_dim, std::size_t text_dim,
                             std::uint64_t seed) {
  ModelState m;
  m.video_dim = video_dim;
  m.text_dim = text_dim;
  m.config = cfg;
  Rng master(seed);
  auto sub_seed = [&master]() { return master.engine(); };
  m.inheritance.video = init_encoder_params(EncoderKind::video, sub_seed(), video_dim, cfg.hidden,
                                            cfg.heads, cfg.max_frames, cfg.depth, cfg.ff_mult);
  m.inheritance.text = init_encoder_params(EncoderKind::text, sub_seed(), text_dim, cfg.hidden,
                                           cfg.heads, 0, cfg.depth, cfg.ff_mult);
  m.exploration.video = init_encoder_params(EncoderKind::video, sub_seed(), video_dim, cfg.hidden,
                                            cfg.heads, cfg.max_frames, cfg.depth, cfg.ff_mult);
  m.exploration.text = init_encoder_params(EncoderKind::text, sub_seed(), text_dim, cfg.hidden,
                                           cfg.heads, 0, cfg.depth, cfg.ff_mult);
  return m;
}

// ---- checkpoint files (.prvc) ------------------------------------------------
// "PRVC" | version u32 LE | header length u32 LE | JSON header | parameter
// blob as little-endian 32-bit floats. Blob order: [inheritance, exploration]
// x [video, text] x EncoderParams::visit_params order.

constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::filesystem::path& path, const ModelState& model,
                            std::uint64_t seed, const std::string& config_hash) {
  nlohmann::ordered_json header;
  header["format"] = "prvr-checkpoint";
  header["version"] = kCheckpointVersion;
  header["dims"] = {{"video_dim", model.video_dim}, {"text_dim", model.text_dim},
                    {"hidden", model.config.hidden}, {"heads", model.config.heads},
                    {"depth", model.config.depth},   {"ff_mult", model.config.ff_mult},
                    {"max_frames", model.config.max_frames}};
  header["seed"] = seed;
  header["config_hash"] = config_hash;
  std::size_t count = 0;
  for (const Tensor* p : model.all_parameters()) count += p->numel();
  header["param_count"] = count;
  std::string hjson = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint: " + path.string());
  auto put_u32 = [&os](std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
  };
  os.write("PRVC", 4);
  put_u32(kCheckpointVersion);
  put_u32(static_cast<std::uint32_t>(hjson.size()));
  os.write(hjson.data(), static_cast<std::streamsize>(hjson.size()));
  for (const Tensor* p : model.all_parameters()) {
    for (double v : p->values) {
      float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(bits);
    }
  }
  if (!os) throw IoError("checkpoint write failed: " + path.string());
}

inline ModelState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "PRVC", 4) != 0)
    throw FormatError("bad checkpoint magic in " + path.string());
  auto get_u32 = [&is, &path]() {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw FormatError("truncated checkpoint " + path.string());
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  };
  std::uint32_t version = get_u32();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  std::uint32_t hlen = get_u32();
  std::string hjson(hlen, '\0');
  is.read(hjson.data(), hlen);
  if (!is) throw FormatError("truncated checkpoint header " + path.string());
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(hjson);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint header parse: " + std::string(e.what()));
  }

  ModelConfig cfg;
  auto dims = header.at("dims");
  cfg.hidden = dims.at("hidden").get<std::size_t>();
  cfg.heads = dims.at("heads").get<std::size_t>();
  cfg.depth = dims.at("depth").get<std::size_t>();
  cfg.ff_mult = dims.at("ff_mult").get<std::size_t>();
  cfg.max_frames = dims.at("max_frames").get<std::size_t>();
  std::uint64_t seed = header.at("seed").get<std::uint64_t>();
  ModelState model = init_model(cfg, dims.at("video_dim").get<std::size_t>(),
                                dims.at("text_dim").get<std::size_t>(), seed);

  std::size_t expected = header.at("param_count").get<std::size_t>();
  std::size_t have = 0;
  for (const Tensor* p : model.all_parameters()) have += p->numel();
  if (have != expected)
    throw FormatError("checkpoint " + path.string() + " holds " + std::to_string(expected) +
                      " parameters, model wants " + std::to_string(have));

  auto fill = [&](Tensor& t) {
    for (double& v : t.values) {
      std::uint32_t bits = get_u32();
      float f;
      std::memcpy(&f, &bits, 4);
      v = static_cast<double>(f);
    }
  };
  for (BranchParams* b : {&model.inheritance, &model.exploration}) {
    EncoderParams::visit_params(b->video, fill);
    EncoderParams::visit_params(b->text, fill);
  }
  return model;
}

}  // namespace prvr
