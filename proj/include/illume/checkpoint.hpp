#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "illume/nn.hpp"

namespace illume {

// Named-array container, format "NTC1" (little endian throughout):
//   magic[4] = "NTC1"
//   u8  dtype            0 = f32, 1 = f64
//   u64 config_hash      structural hash of the config the weights belong to
//   u32 count
//   count * { u32 name_len; name bytes; u32 ndim; i64 dims[ndim]; payload }

template <typename S>
struct NamedTensor {
  std::string name;
  Tensor<S> value;
};

namespace detail {

inline void write_bytes(std::FILE* f, const void* p, std::size_t n) {
  if (std::fwrite(p, 1, n, f) != n) throw IoError("checkpoint: short write");
}

inline void read_bytes(std::FILE* f, void* p, std::size_t n) {
  if (std::fread(p, 1, n, f) != n) throw IoError("checkpoint: short read");
}

template <typename T>
void write_pod(std::FILE* f, T v) {
  write_bytes(f, &v, sizeof(T));
}

template <typename T>
T read_pod(std::FILE* f) {
  T v;
  read_bytes(f, &v, sizeof(T));
  return v;
}

template <typename S>
constexpr std::uint8_t dtype_code() {
  static_assert(sizeof(S) == 4 || sizeof(S) == 8, "unsupported scalar");
  return sizeof(S) == 4 ? 0 : 1;
}

struct FileCloser {
  std::FILE* f;
  ~FileCloser() {
    if (f) std::fclose(f);
  }
};

}  // namespace detail

template <typename S>
void save_ntc(const std::string& path, const std::vector<NamedTensor<S>>& arrays,
              std::uint64_t config_hash) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("checkpoint: cannot open for write: " + path);
  detail::FileCloser closer{f};
  detail::write_bytes(f, "NTC1", 4);
  detail::write_pod<std::uint8_t>(f, detail::dtype_code<S>());
  detail::write_pod<std::uint64_t>(f, config_hash);
  detail::write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    detail::write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(a.name.size()));
    detail::write_bytes(f, a.name.data(), a.name.size());
    detail::write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(a.value.ndim()));
    for (idx d : a.value.dims()) detail::write_pod<std::int64_t>(f, d);
    detail::write_bytes(f, a.value.data(),
                        sizeof(S) * static_cast<std::size_t>(a.value.numel()));
  }
}

template <typename S>
std::vector<NamedTensor<S>> load_ntc(const std::string& path,
                                     std::uint64_t* config_hash_out) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError("checkpoint: cannot open for read: " + path);
  detail::FileCloser closer{f};
  char magic[4];
  detail::read_bytes(f, magic, 4);
  if (std::string(magic, 4) != "NTC1")
    throw IoError("checkpoint: bad magic in " + path);
  auto dtype = detail::read_pod<std::uint8_t>(f);
  if (dtype != detail::dtype_code<S>())
    throw IoError("checkpoint: scalar type mismatch in " + path);
  std::uint64_t hash = detail::read_pod<std::uint64_t>(f);
  if (config_hash_out) *config_hash_out = hash;
  auto count = detail::read_pod<std::uint32_t>(f);
  std::vector<NamedTensor<S>> arrays;
  arrays.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name_len = detail::read_pod<std::uint32_t>(f);
    std::string name(name_len, '\0');
    detail::read_bytes(f, name.data(), name_len);
    auto ndim = detail::read_pod<std::uint32_t>(f);
    std::vector<idx> dims(ndim);
    for (auto& d : dims) d = static_cast<idx>(detail::read_pod<std::int64_t>(f));
    Tensor<S> t(dims);
    detail::read_bytes(f, t.data(), sizeof(S) * static_cast<std::size_t>(t.numel()));
    arrays.push_back({std::move(name), std::move(t)});
  }
  return arrays;
}

// A checkpoint refuses to load when the structural config hash differs,
// unless the caller explicitly overrides.
template <typename S>
void save_checkpoint(const std::string& path, const ParamStore<S>& store,
                     std::uint64_t config_hash,
                     const std::vector<NamedTensor<S>>& extra = {}) {
  std::vector<NamedTensor<S>> arrays;
  arrays.reserve(store.items().size() + extra.size());
  for (const auto& p : store.items()) arrays.push_back({p->name, p->value});
  for (const auto& e : extra) arrays.push_back(e);
  save_ntc(path, arrays, config_hash);
}

template <typename S>
std::vector<NamedTensor<S>> load_checkpoint(const std::string& path,
                                            ParamStore<S>& store,
                                            std::uint64_t expected_hash,
                                            bool override_hash = false) {
  std::uint64_t hash = 0;
  auto arrays = load_ntc<S>(path, &hash);
  if (!override_hash && hash != expected_hash)
    throw IoError("checkpoint: config hash mismatch for " + path +
                  " (pass the override flag to force)");
  std::vector<NamedTensor<S>> extra;
  std::size_t matched = 0;
  for (auto& a : arrays) {
    if (!store.has(a.name)) {
      extra.push_back(std::move(a));
      continue;
    }
    auto& p = store.at(a.name);
    check_same_shape(p.value, a.value, "checkpoint " + a.name);
    p.value.array() = a.value.array();
    ++matched;
  }
  if (matched != store.items().size())
    throw IoError("checkpoint: missing parameters in " + path);
  return extra;
}

}  // namespace illume
