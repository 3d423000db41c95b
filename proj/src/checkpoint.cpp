#include "vicregl/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace vicregl {

namespace {

constexpr char kMagic[4] = {'V', 'R', 'G', 'L'};
constexpr std::uint8_t kDtypeF64 = 0;

template <typename T>
void write_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i)
    buf[i] = (unsigned char)((std::uint64_t(v) >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const std::string& path) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  VRL_CHECK(is.good(), "checkpoint ", path, ": truncated at byte ", is.tellg());
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= std::uint64_t(buf[i]) << (8 * i);
  return T(v);
}

void write_f64_le(std::ostream& os, const double* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &data[i], 8);
    write_le<std::uint64_t>(os, bits);
  }
}

}  // namespace

const Tensor* CheckpointData::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

void save_checkpoint(const std::string& path, const CheckpointData& data) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  VRL_CHECK(os.good(), "cannot open checkpoint for writing: ", path);
  os.write(kMagic, 4);
  write_le<std::uint32_t>(os, data.version);
  write_le<std::uint32_t>(os, std::uint32_t(data.tensors.size()));
  for (const auto& [name, t] : data.tensors) {
    write_le<std::uint32_t>(os, std::uint32_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    write_le<std::uint8_t>(os, kDtypeF64);
    write_le<std::uint32_t>(os, std::uint32_t(t.rank()));
    for (std::size_t d = 0; d < t.rank(); ++d)
      write_le<std::uint64_t>(os, std::uint64_t(t.dim(d)));
    write_f64_le(os, t.data(), t.numel());
  }
  write_le<std::uint64_t>(os, data.config_hash);
  VRL_CHECK(os.good(), "write failed for checkpoint: ", path);
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  VRL_CHECK(is.good(), "cannot open checkpoint: ", path);
  char magic[4];
  is.read(magic, 4);
  VRL_CHECK(is.good() && std::memcmp(magic, kMagic, 4) == 0,
            "checkpoint ", path, ": bad magic (expected VRGL)");
  CheckpointData data;
  data.version = read_le<std::uint32_t>(is, path);
  VRL_CHECK(data.version == 1, "checkpoint ", path, ": unsupported version ",
            data.version);
  const auto count = read_le<std::uint32_t>(is, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = read_le<std::uint32_t>(is, path);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    VRL_CHECK(is.good(), "checkpoint ", path, ": truncated tensor name at byte ",
              is.tellg());
    const auto dtype = read_le<std::uint8_t>(is, path);
    VRL_CHECK(dtype == kDtypeF64, "checkpoint ", path, ": unsupported dtype tag ",
              int(dtype), " for tensor '", name, "'");
    const auto rank = read_le<std::uint32_t>(is, path);
    std::vector<std::size_t> dims(rank);
    std::size_t numel = 1;
    for (auto& d : dims) {
      d = std::size_t(read_le<std::uint64_t>(is, path));
      numel *= d;
    }
    Tensor t(dims);
    for (std::size_t k = 0; k < numel; ++k) {
      const std::uint64_t bits = read_le<std::uint64_t>(is, path);
      std::memcpy(&t[k], &bits, 8);
    }
    data.tensors.emplace_back(std::move(name), std::move(t));
  }
  data.config_hash = read_le<std::uint64_t>(is, path);
  return data;
}

void pack_model_state(const VicreglModel& model, CheckpointData& data) {
  for (const auto& [name, v] : model.store().params())
    data.tensors.emplace_back("param/" + name, v.value());
  for (const auto& [name, t] : model.store().buffers())
    data.tensors.emplace_back("buffer/" + name, t);
}

void restore_model_state(VicreglModel& model, const CheckpointData& data) {
  for (auto& [name, v] : model.store().params()) {
    const Tensor* t = data.find("param/" + name);
    VRL_CHECK(t != nullptr, "checkpoint is missing parameter '", name, "'");
    VRL_CHECK(t->same_shape(v.value()), "checkpoint parameter '", name,
              "' has shape ", shape_str(t->shape()), ", model expects ",
              shape_str(v.value().shape()));
    v.mutable_value() = *t;
  }
  for (auto& [name, buf] : model.store().buffers()) {
    const Tensor* t = data.find("buffer/" + name);
    VRL_CHECK(t != nullptr, "checkpoint is missing buffer '", name, "'");
    VRL_CHECK(t->same_shape(buf), "checkpoint buffer '", name, "' shape mismatch");
    buf = *t;
  }
}

Tensor tensor_from_string(const std::string& s) {
  Tensor t({std::max<std::size_t>(s.size(), 1)});
  for (std::size_t i = 0; i < s.size(); ++i) t[i] = double((unsigned char)s[i]);
  if (s.empty()) t[0] = -1.0;
  return t;
}

std::string string_from_tensor(const Tensor& t) {
  std::string s;
  for (std::size_t i = 0; i < t.numel(); ++i) {
    if (t[i] < 0) break;
    s.push_back(char((unsigned char)t[i]));
  }
  return s;
}

std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace vicregl
