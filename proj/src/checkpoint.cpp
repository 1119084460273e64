#include "hfl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fmt/format.h>
#include <fstream>
#include <set>

namespace hfl {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O writes raw little-endian element data");

namespace {

constexpr char kMagic[4] = {'F', 'F', 'C', 'K'};

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error(fmt::format("cannot open '{}' for writing", path.string()));
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  template <class U>
  void le(U v) {
    unsigned char b[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, sizeof(U));
  }
  void finish(const std::filesystem::path& path) {
    out_.flush();
    if (!out_) throw std::runtime_error(fmt::format("write to '{}' failed", path.string()));
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw std::runtime_error(fmt::format("cannot open checkpoint '{}'", path.string()));
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in_) throw std::runtime_error(fmt::format("checkpoint '{}' is truncated", path_.string()));
  }
  template <class U>
  U le() {
    unsigned char b[sizeof(U)];
    bytes(b, sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b[i]) << (8 * i));
    return v;
  }

 private:
  std::ifstream in_;
  std::filesystem::path path_;
};

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
  Writer w(path);
  w.bytes(kMagic, 4);
  w.le<std::uint32_t>(kCheckpointVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xFFFF) throw std::invalid_argument("checkpoint tensor name too long");
    w.le<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.le<std::uint8_t>(static_cast<std::uint8_t>(t.dtype()));
    w.le<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) w.le<std::uint32_t>(static_cast<std::uint32_t>(d));
    std::visit([&](const auto& v) { w.bytes(v.data(), v.size() * sizeof(v[0])); }, *t.storage());
  }
  w.finish(path);
}

NamedTensors read_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error(fmt::format("'{}' is not an FFCK checkpoint", path.string()));
  }
  const auto version = r.le<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw std::runtime_error(fmt::format("unsupported checkpoint version {}", version));
  }
  const auto count = r.le<std::uint32_t>();
  NamedTensors out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(r.le<std::uint16_t>(), '\0');
    r.bytes(name.data(), name.size());
    const auto code = r.le<std::uint8_t>();
    if (code > 1) throw std::runtime_error(fmt::format("tensor '{}': unknown dtype code {}", name, code));
    const auto rank = r.le<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.le<std::uint32_t>();
    const auto dtype = static_cast<DType>(code);
    Buffer buf = make_buffer(dtype, static_cast<std::size_t>(shape_numel(shape)));
    std::visit([&](auto& v) { r.bytes(v.data(), v.size() * sizeof(v[0])); }, buf);
    out.emplace_back(std::move(name), Tensor::from_buffer(std::move(shape), std::move(buf)));
  }
  return out;
}

void save_parameters(const std::filesystem::path& path, const ParameterStore& store,
                     std::string_view pattern) {
  NamedTensors tensors;
  for (const Parameter* p : store.all())
    if (glob_match(pattern, p->name())) tensors.emplace_back(p->name(), p->value());
  write_checkpoint(path, tensors);
}

void load_parameters(const std::filesystem::path& path, ParameterStore& store,
                     std::string_view pattern) {
  assign_parameters(store, read_checkpoint(path), pattern, path.string());
}

void assign_parameters(ParameterStore& store, const NamedTensors& tensors, std::string_view pattern,
                       std::string_view source) {
  std::set<std::string> loaded;
  for (const auto& [name, t] : tensors) {
    if (!glob_match(pattern, name)) continue;
    Parameter* p = store.find(name);
    if (!p) continue;
    if (p->value().shape() != t.shape() || p->value().dtype() != t.dtype()) {
      throw std::runtime_error(fmt::format("checkpoint tensor '{}' is {} {}, parameter is {} {}", name,
                                           dtype_name(t.dtype()), shape_str(t.shape()),
                                           dtype_name(p->value().dtype()),
                                           shape_str(p->value().shape())));
    }
    *p->value().storage() = *t.storage();
    loaded.insert(name);
  }
  for (const Parameter* p : store.all()) {
    if (glob_match(pattern, p->name()) && !loaded.contains(p->name())) {
      throw std::runtime_error(
          fmt::format("{} has no tensor for parameter '{}'", source, p->name()));
    }
  }
}

}  // namespace hfl
