#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "petseg/errors.hpp"

namespace petseg {

// Dense row-major float32 tensor (last dimension fastest). Conv feature maps
// are (N, C, X, Y, Z); token tensors are (N, X, Y, Z, C) or (B, T, C).
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::vector<int64_t> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != static_cast<size_t>(numel()))
      throw ContractError("Tensor: data size does not match shape");
  }

  static Tensor zeros(std::vector<int64_t> s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return Tensor(std::move(s), std::vector<float>(static_cast<size_t>(n), 0.0f));
  }

  static Tensor full(std::vector<int64_t> s, float v) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return Tensor(std::move(s), std::vector<float>(static_cast<size_t>(n), v));
  }

  int64_t numel() const {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
  }

  int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }
  bool empty() const { return data.empty(); }

  std::string shape_str() const {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i)
      s += (i ? "," : "") + std::to_string(shape[i]);
    return s + ")";
  }
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

}  // namespace petseg
