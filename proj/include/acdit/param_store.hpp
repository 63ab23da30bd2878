#pragma once

// Named parameter registry plus binary checkpoint I/O.
//
// Checkpoint layout (file magic "ACDT", little-endian throughout):
//   magic[4] | version u32 | entry_count u64
//   per entry: name_len u32 | name bytes | dtype u8 (0=f32, 1=f64)
//            | rank u32 | dims u64[rank] | element bytes
// Round-trips are bit-exact: element bytes are the raw in-memory values.

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "acdit/array.hpp"
#include "acdit/autodiff.hpp"
#include "acdit/binio.hpp"
#include "acdit/common.hpp"

namespace acdit {

template <typename T>
struct dtype_tag;
template <>
struct dtype_tag<float> {
  static constexpr uint8_t value = 0;
};
template <>
struct dtype_tag<double> {
  static constexpr uint8_t value = 1;
};

constexpr uint32_t kCheckpointVersion = 1;

// Maps an n-d parameter shape onto the 2-d Var layout used by the graph ops.
inline std::pair<int64_t, int64_t> shape_to_2d(const Shape& s) {
  if (s.empty()) return {1, 1};
  if (s.size() == 1) return {1, s[0]};
  int64_t last = s.back();
  return {last == 0 ? 0 : shape_numel(s) / last, last};
}

template <typename T>
class ParamStore {
 public:
  struct Entry {
    Shape shape;
    Var<T> var;
  };

  Var<T>& add(const std::string& name, Shape shape, bool trainable) {
    if (entries_.count(name)) throw LookupError("duplicate parameter: " + name);
    auto [r, c] = shape_to_2d(shape);
    Entry e{std::move(shape), Var<T>::leaf(r, c, trainable)};
    order_.push_back(name);
    auto it = entries_.emplace(name, std::move(e)).first;
    return it->second.var;
  }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  Var<T>& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw LookupError("unknown parameter: " + name);
    return it->second.var;
  }
  const Var<T>& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw LookupError("unknown parameter: " + name);
    return it->second.var;
  }
  const Shape& shape_of(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw LookupError("unknown parameter: " + name);
    return it->second.shape;
  }

  bool trainable(const std::string& name) const {
    return at(name).requires_grad();
  }
  void set_trainable(const std::string& name, bool v) {
    at(name).node()->requires_grad = v;
  }

  // insertion order; deterministic across runs given identical build code
  const std::vector<std::string>& names() const { return order_; }

  size_t size() const { return entries_.size(); }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& name : order_) n += entries_.at(name).var.numel();
    return n;
  }

  int64_t trainable_elements() const {
    int64_t n = 0;
    for (const auto& name : order_) {
      const auto& e = entries_.at(name);
      if (e.var.requires_grad()) n += e.var.numel();
    }
    return n;
  }

  void zero_grad() {
    for (const auto& name : order_) {
      auto* node = entries_.at(name).var.node();
      node->grad.assign(node->value.size(), T(0));
    }
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("checkpoint: cannot open for write: " + path);
    detail::write_bytes(os, "ACDT", 4);
    detail::write_le<uint32_t>(os, kCheckpointVersion);
    detail::write_le<uint64_t>(os, order_.size());
    for (const auto& name : order_) {
      const Entry& e = entries_.at(name);
      detail::write_le<uint32_t>(os, static_cast<uint32_t>(name.size()));
      detail::write_bytes(os, name.data(), name.size());
      detail::write_le<uint8_t>(os, dtype_tag<T>::value);
      detail::write_le<uint32_t>(os, static_cast<uint32_t>(e.shape.size()));
      for (int64_t d : e.shape)
        detail::write_le<uint64_t>(os, static_cast<uint64_t>(d));
      detail::write_bytes(os, e.var.data(),
                          sizeof(T) * static_cast<size_t>(e.var.numel()));
    }
    os.flush();
    if (!os) throw FormatError("checkpoint: write failed: " + path);
  }

  // Reads a checkpoint into a fresh store. All parameters load non-trainable;
  // callers mark trainability afterwards.
  static ParamStore load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("checkpoint: cannot open: " + path);
    char magic[4];
    detail::read_bytes(is, magic, 4);
    if (std::string(magic, 4) != "ACDT")
      throw FormatError("checkpoint: bad magic bytes");
    uint32_t version = detail::read_le<uint32_t>(is);
    if (version != kCheckpointVersion)
      throw VersionError("checkpoint: unsupported format version " +
                         std::to_string(version));
    uint64_t count = detail::read_le<uint64_t>(is);
    ParamStore store;
    for (uint64_t i = 0; i < count; ++i) {
      uint32_t name_len = detail::read_le<uint32_t>(is);
      std::string name(name_len, '\0');
      detail::read_bytes(is, name.data(), name_len);
      uint8_t tag = detail::read_le<uint8_t>(is);
      if (tag != dtype_tag<T>::value)
        throw FormatError("checkpoint: dtype mismatch for '" + name + "'");
      uint32_t rank = detail::read_le<uint32_t>(is);
      Shape shape(rank);
      for (uint32_t d = 0; d < rank; ++d)
        shape[d] = static_cast<int64_t>(detail::read_le<uint64_t>(is));
      Var<T>& v = store.add(name, shape, false);
      detail::read_bytes(is, v.data(),
                         sizeof(T) * static_cast<size_t>(v.numel()));
    }
    return store;
  }

  // Copies values from `src` into already-registered parameters. Every loaded
  // name must exist here with an identical shape.
  void assign_from(const ParamStore& src) {
    for (const auto& name : src.order_) {
      auto it = entries_.find(name);
      if (it == entries_.end())
        throw LookupError("checkpoint entry has no matching parameter: " + name);
      const Entry& se = src.entries_.at(name);
      if (it->second.shape != se.shape)
        throw ShapeError("checkpoint shape mismatch for '" + name + "': file " +
                         shape_str(se.shape) + " vs model " +
                         shape_str(it->second.shape));
      it->second.var.node()->value = se.var.node()->value;
    }
  }

 private:
  std::map<std::string, Entry> entries_;
  std::vector<std::string> order_;
};

}  // namespace acdit
