#include "smat/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace smat {

namespace {

constexpr char kMagic[8] = {'S', 'M', 'A', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(sizeof(float) == 4, "float must be 32-bit");

void put_u32(std::ostream& out, std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big)
    v = __builtin_bswap32(v);
  out.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t get_u32(std::istream& in, const char* what) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  if (in.gcount() != 4)
    throw std::runtime_error(std::string("checkpoint: truncated ") + what);
  if constexpr (std::endian::native == std::endian::big)
    v = __builtin_bswap32(v);
  return v;
}

void put_f32s(std::ostream& out, const float* p, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(p), (std::streamsize)(n * 4));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, &p[i], 4);
      put_u32(out, bits);
    }
  }
}

void get_f32s(std::istream& in, float* p, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    in.read(reinterpret_cast<char*>(p), (std::streamsize)(n * 4));
    if (in.gcount() != (std::streamsize)(n * 4))
      throw std::runtime_error("checkpoint: truncated tensor values");
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = get_u32(in, "tensor values");
      std::memcpy(&p[i], &bits, 4);
    }
  }
}

void write_record(std::ostream& out, const std::string& name,
                  const Shape& shape, const float* values, std::size_t n) {
  put_u32(out, (std::uint32_t)name.size());
  out.write(name.data(), (std::streamsize)name.size());
  put_u32(out, (std::uint32_t)shape.size());
  for (int d : shape) put_u32(out, (std::uint32_t)d);
  put_f32s(out, values, n);
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamRegistry<float>& reg,
                     const CheckpointMeta& meta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write(kMagic, 8);
  put_u32(out, kVersion);
  put_u32(out, (std::uint32_t)(reg.entries.size() + 1));
  float meta_vals[3] = {(float)meta.variant, (float)meta.attention,
                        (float)meta.preset};
  write_record(out, "_meta", {3}, meta_vals, 3);
  for (const auto& e : reg.entries)
    write_record(out, e.name, e.tensor.shape(), e.tensor.vec().data(),
                 e.tensor.vec().size());
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (in.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("load_checkpoint: " + path +
                             " is not a checkpoint file");
  std::uint32_t version = get_u32(in, "version");
  if (version != kVersion)
    throw std::runtime_error("load_checkpoint: unsupported format version " +
                             std::to_string(version));
  std::uint32_t count = get_u32(in, "tensor count");
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t name_len = get_u32(in, "name length");
    if (name_len > 4096)
      throw std::runtime_error("load_checkpoint: implausible name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (in.gcount() != (std::streamsize)name_len)
      throw std::runtime_error("checkpoint: truncated name");
    std::uint32_t rank = get_u32(in, "rank");
    if (rank > 8) throw std::runtime_error("load_checkpoint: implausible rank");
    Shape shape;
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      std::uint32_t d = get_u32(in, "dimension");
      shape.push_back((int)d);
      n *= d;
    }
    CheckpointTensor t;
    t.name = std::move(name);
    t.shape = std::move(shape);
    t.values.resize(n);
    get_f32s(in, t.values.data(), n);
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

CheckpointMeta checkpoint_meta(const Checkpoint& ckpt) {
  CheckpointMeta meta;
  if (const auto* t = ckpt.find("_meta"); t && t->values.size() >= 3) {
    meta.variant = (int)t->values[0];
    meta.attention = (int)t->values[1];
    meta.preset = (int)t->values[2];
  }
  return meta;
}

void load_into_registry(const Checkpoint& ckpt, ParamRegistry<float>& reg) {
  for (auto& e : reg.entries) {
    const auto* t = ckpt.find(e.name);
    if (!t)
      throw std::runtime_error("checkpoint: missing tensor '" + e.name + "'");
    if (t->shape != e.tensor.shape())
      throw std::runtime_error("checkpoint: tensor '" + e.name + "' has shape " +
                               shape_str(t->shape) + " but the model expects " +
                               shape_str(e.tensor.shape()));
    std::copy(t->values.begin(), t->values.end(), e.tensor.vec().begin());
  }
}

}  // namespace smat
