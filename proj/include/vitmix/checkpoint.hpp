// Encoder checkpoint serialization.
//
// Layout (all little-endian):
//   VITMIXCKPT 1\n
//   <key value> lines: encoder geometry, optimizer position, rng state
//   blobs <count>\n
//   for each blob:  <name> <numel>\n  followed by numel raw f32 values
//   checksum <fnv1a-64 hex of every preceding byte>\n
//
// Parameter and optimizer-moment blobs are stored as f32 regardless of the
// in-memory scalar width; training builds run f32, so save/load round-trips
// are bit-exact and a resumed run continues identically.
#pragma once

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "vitmix/common.hpp"
#include "vitmix/encoder.hpp"
#include "vitmix/optim.hpp"
#include "vitmix/rng.hpp"

namespace vitmix {

struct CheckpointBlob {
  std::string name;
  std::vector<float> data;
};

struct Checkpoint {
  EncoderConfig config;
  std::int64_t step = 0;           // optimizer steps taken
  std::int64_t total_steps = 0;    // cosine schedule horizon
  std::int64_t epoch = 0;
  std::array<std::uint64_t, 4> rng_state{};
  std::vector<CheckpointBlob> blobs;

  static constexpr const char* kMagic = "VITMIXCKPT";
  static constexpr int kVersion = 1;

  std::string serialize() const {
    std::ostringstream os;
    os << kMagic << " " << kVersion << "\n";
    KvConfig kv;
    kv.set_i64("channels", config.channels);
    kv.set_i64("image_size", config.image_size);
    kv.set_i64("patch_size", config.patch_size);
    kv.set_i64("embed_dim", config.embed_dim);
    kv.set_i64("depth", config.depth);
    kv.set_i64("heads", config.heads);
    kv.set_f64("mlp_ratio", config.mlp_ratio);
    kv.set_i64("hidden_v", config.hidden_v());
    kv.set_i64("patch_count", config.patch_count());
    kv.set_i64("step", step);
    kv.set_i64("total_steps", total_steps);
    kv.set_i64("epoch", epoch);
    for (int i = 0; i < 4; ++i) {
      std::ostringstream h;
      h << std::hex << rng_state[static_cast<std::size_t>(i)];
      kv.set("rng" + std::to_string(i), h.str());
    }
    os << kv.to_string();
    os << "blobs " << blobs.size() << "\n";
    for (const auto& b : blobs) {
      os << b.name << " " << b.data.size() << "\n";
      os.write(reinterpret_cast<const char*>(b.data.data()),
               static_cast<std::streamsize>(b.data.size() * sizeof(float)));
    }
    const std::string body = os.str();
    std::ostringstream full;
    full << body << "checksum " << std::hex << fnv1a(body.data(), body.size()) << "\n";
    return full.str();
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path.string());
    const std::string s = serialize();
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
    if (!out) throw IoError("short write on checkpoint: " + path.string());
  }

  static Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    // Verify the trailing checksum line first.
    const auto tail = bytes.rfind("checksum ");
    if (tail == std::string::npos)
      throw IoError("corrupt checkpoint (no checksum): " + path.string());
    const std::string body = bytes.substr(0, tail);
    std::uint64_t stored = 0;
    {
      std::istringstream cs(bytes.substr(tail + 9));
      cs >> std::hex >> stored;
    }
    if (stored != fnv1a(body.data(), body.size()))
      throw IoError("corrupt checkpoint (checksum mismatch): " + path.string());

    std::istringstream is(body);
    std::string magic;
    int version = 0;
    is >> magic >> version;
    if (magic != kMagic)
      throw IoError("not a checkpoint file: " + path.string());
    if (version != kVersion)
      throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " +
                    path.string());
    is.ignore(1); // newline

    Checkpoint ck;
    std::string header_lines;
    std::string line;
    while (std::getline(is, line)) {
      if (line.rfind("blobs ", 0) == 0) break;
      header_lines += line + "\n";
    }
    std::istringstream hdr(header_lines);
    KvConfig kv = KvConfig::parse(hdr);
    ck.config.channels = kv.get_i64("channels");
    ck.config.image_size = kv.get_i64("image_size");
    ck.config.patch_size = kv.get_i64("patch_size");
    ck.config.embed_dim = kv.get_i64("embed_dim");
    ck.config.depth = kv.get_i64("depth");
    ck.config.heads = kv.get_i64("heads");
    ck.config.mlp_ratio = kv.get_f64("mlp_ratio");
    ck.config.validate();
    if (kv.get_i64("hidden_v") != ck.config.hidden_v() ||
        kv.get_i64("patch_count") != ck.config.patch_count())
      throw ConfigError("checkpoint geometry is internally inconsistent: " + path.string());
    ck.step = kv.get_i64("step");
    ck.total_steps = kv.get_i64("total_steps");
    ck.epoch = kv.get_i64("epoch");
    for (int i = 0; i < 4; ++i) {
      std::istringstream h(kv.get("rng" + std::to_string(i)));
      h >> std::hex >> ck.rng_state[static_cast<std::size_t>(i)];
    }

    std::size_t blob_count = 0;
    {
      std::istringstream bl(line.substr(6));
      bl >> blob_count;
    }
    for (std::size_t i = 0; i < blob_count; ++i) {
      std::string head;
      if (!std::getline(is, head)) throw IoError("truncated checkpoint: " + path.string());
      std::istringstream hs(head);
      CheckpointBlob blob;
      std::size_t numel = 0;
      hs >> blob.name >> numel;
      blob.data.resize(numel);
      is.read(reinterpret_cast<char*>(blob.data.data()),
              static_cast<std::streamsize>(numel * sizeof(float)));
      if (static_cast<std::size_t>(is.gcount()) != numel * sizeof(float))
        throw IoError("truncated blob '" + blob.name + "' in " + path.string());
      ck.blobs.push_back(std::move(blob));
    }
    return ck;
  }

  const CheckpointBlob* find(const std::string& name) const {
    for (const auto& b : blobs)
      if (b.name == name) return &b;
    return nullptr;
  }
};

// Snapshot encoder parameters (and optionally optimizer moments) into blobs.
template <class S>
Checkpoint snapshot_encoder(VitEncoder<S>& enc, AdamW<S>* opt = nullptr) {
  Checkpoint ck;
  ck.config = enc.cfg;
  auto named = enc.named_parameters();
  for (auto& [name, t] : named) {
    CheckpointBlob b;
    b.name = name;
    b.data.reserve(static_cast<std::size_t>(t->numel()));
    for (auto v : t->values()) b.data.push_back(static_cast<float>(v));
    ck.blobs.push_back(std::move(b));
  }
  if (opt) {
    ck.step = opt->step_count();
    for (std::size_t i = 0; i < named.size(); ++i) {
      CheckpointBlob m1{"adam_m." + named[i].first, {}};
      CheckpointBlob m2{"adam_v." + named[i].first, {}};
      for (auto v : opt->moment1(i)) m1.data.push_back(static_cast<float>(v));
      for (auto v : opt->moment2(i)) m2.data.push_back(static_cast<float>(v));
      ck.blobs.push_back(std::move(m1));
      ck.blobs.push_back(std::move(m2));
    }
  }
  return ck;
}

// Restore parameters into an encoder built from the checkpoint's config.
// Throws ConfigError when the target encoder's geometry disagrees.
template <class S>
void restore_encoder(const Checkpoint& ck, VitEncoder<S>& enc, AdamW<S>* opt = nullptr) {
  if (enc.cfg.embed_dim != ck.config.embed_dim || enc.cfg.depth != ck.config.depth ||
      enc.cfg.heads != ck.config.heads || enc.cfg.channels != ck.config.channels ||
      enc.cfg.image_size != ck.config.image_size || enc.cfg.patch_size != ck.config.patch_size)
    throw ConfigError("checkpoint geometry (L=" + std::to_string(ck.config.embed_dim) +
                      ", depth=" + std::to_string(ck.config.depth) +
                      ") does not match encoder (L=" + std::to_string(enc.cfg.embed_dim) +
                      ", depth=" + std::to_string(enc.cfg.depth) + ")");
  auto named = enc.named_parameters();
  for (auto& [name, t] : named) {
    const CheckpointBlob* b = ck.find(name);
    if (!b) throw IoError("checkpoint is missing parameter blob '" + name + "'");
    if (static_cast<std::int64_t>(b->data.size()) != t->numel())
      throw ConfigError("blob '" + name + "' has " + std::to_string(b->data.size()) +
                        " values, parameter wants " + std::to_string(t->numel()));
    S* p = t->mutable_data();
    for (std::size_t i = 0; i < b->data.size(); ++i) p[i] = static_cast<S>(b->data[i]);
  }
  if (opt) {
    opt->set_step_count(ck.step);
    for (std::size_t i = 0; i < named.size(); ++i) {
      const CheckpointBlob* m1 = ck.find("adam_m." + named[i].first);
      const CheckpointBlob* m2 = ck.find("adam_v." + named[i].first);
      if (!m1 || !m2)
        throw IoError("checkpoint has no optimizer state for '" + named[i].first + "'");
      auto& dm = opt->moment1(i);
      auto& dv = opt->moment2(i);
      for (std::size_t j = 0; j < dm.size(); ++j) dm[j] = static_cast<S>(m1->data[j]);
      for (std::size_t j = 0; j < dv.size(); ++j) dv[j] = static_cast<S>(m2->data[j]);
    }
  }
}

} // namespace vitmix
