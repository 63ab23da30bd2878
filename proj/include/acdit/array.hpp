#pragma once

// Plain n-d array value type used for parameters, checkpoints and test data.

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "acdit/common.hpp"

namespace acdit {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <typename T>
struct Array {
  Shape shape;
  std::vector<T> values;

  Array() = default;
  explicit Array(Shape s) : shape(std::move(s)) {
    values.assign(static_cast<size_t>(shape_numel(shape)), T(0));
  }
  Array(Shape s, std::vector<T> v) : shape(std::move(s)), values(std::move(v)) {
    if (static_cast<int64_t>(values.size()) != shape_numel(shape))
      throw ShapeError("array value count " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
  }

  int64_t numel() const { return static_cast<int64_t>(values.size()); }
  T* data() { return values.data(); }
  const T* data() const { return values.data(); }

  bool same_as(const Array& o) const {
    return shape == o.shape && values == o.values;
  }
};

}  // namespace acdit
