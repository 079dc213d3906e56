#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "petseg/errors.hpp"
#include "petseg/tensor.hpp"

namespace petseg::nn {

using MatX = Eigen::MatrixXf;
using MapX = Eigen::Map<MatX>;
using CMapX = Eigen::Map<const MatX>;

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}

  void ensure_grad() {
    if (grad.empty()) grad = Tensor::zeros(value.shape);
  }
  void zero_grad() {
    ensure_grad();
    std::fill(grad.data.begin(), grad.data.end(), 0.0f);
  }
};

// Reverse-mode tape. Ops execute eagerly at node creation; backward walks the
// tape in reverse creation order, which fixes the floating-point accumulation
// order and keeps runs bit-reproducible. Single-threaded by design.
class Graph {
 public:
  using NodeId = int32_t;

  NodeId leaf(Tensor v, bool keep_grad = false) {
    return make(std::move(v), keep_grad);
  }

  NodeId param(Parameter& p) {
    const NodeId id = make(Tensor(p.value.shape, p.value.data), true);
    nodes_[static_cast<size_t>(id)].bound = &p;
    return id;
  }

  const Tensor& value(NodeId id) const { return nodes_[static_cast<size_t>(id)].value; }
  // Valid after backward() for leaves created with keep_grad.
  const Tensor& grad(NodeId id) const { return nodes_[static_cast<size_t>(id)].grad; }

  void backward(NodeId root, Tensor seed_grad) {
    if (!same_shape(seed_grad, value(root)))
      throw ContractError("Graph::backward: seed grad shape mismatch");
    grad_buf(root) = std::move(seed_grad);
    for (NodeId id = root; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (n.grad.empty()) continue;
      if (n.backprop) n.backprop(*this, id);
      if (n.bound) {
        n.bound->ensure_grad();
        for (size_t i = 0; i < n.grad.data.size(); ++i)
          n.bound->grad.data[i] += n.grad.data[i];
      }
      if (!n.keep_grad) {
        n.grad = Tensor();
        n.backprop = nullptr;
      }
    }
  }

  size_t node_count() const { return nodes_.size(); }

  // ---- elementwise ----------------------------------------------------

  NodeId add(NodeId a, NodeId b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (!same_shape(A, B)) throw ContractError("add: shape mismatch");
    Tensor y = A;
    for (size_t i = 0; i < y.data.size(); ++i) y.data[i] += B.data[i];
    const NodeId id = make(std::move(y));
    set_backprop(id, [a, b](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      Tensor& ga = g.grad_buf(a);
      Tensor& gb = g.grad_buf(b);
      for (size_t i = 0; i < gy.data.size(); ++i) {
        ga.data[i] += gy.data[i];
        gb.data[i] += gy.data[i];
      }
    });
    return id;
  }

  NodeId scale(NodeId x, float c) {
    Tensor y = value(x);
    for (auto& v : y.data) v *= c;
    const NodeId id = make(std::move(y));
    set_backprop(id, [x, c](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      Tensor& gx = g.grad_buf(x);
      for (size_t i = 0; i < gy.data.size(); ++i) gx.data[i] += c * gy.data[i];
    });
    return id;
  }

  NodeId relu(NodeId x) {
    Tensor y = value(x);
    for (auto& v : y.data) v = v > 0.0f ? v : 0.0f;
    const NodeId id = make(std::move(y));
    set_backprop(id, [x](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      const Tensor& X = g.value(x);
      Tensor& gx = g.grad_buf(x);
      for (size_t i = 0; i < gy.data.size(); ++i)
        if (X.data[i] > 0.0f) gx.data[i] += gy.data[i];
    });
    return id;
  }

  NodeId leaky_relu(NodeId x, float slope) {
    Tensor y = value(x);
    for (auto& v : y.data) v = v > 0.0f ? v : slope * v;
    const NodeId id = make(std::move(y));
    set_backprop(id, [x, slope](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      const Tensor& X = g.value(x);
      Tensor& gx = g.grad_buf(x);
      for (size_t i = 0; i < gy.data.size(); ++i)
        gx.data[i] += gy.data[i] * (X.data[i] > 0.0f ? 1.0f : slope);
    });
    return id;
  }

  // Per-channel PReLU on (N, C, X, Y, Z) tensors.
  NodeId prelu(NodeId x, NodeId alpha) {
    const Tensor& X = value(x);
    const Tensor& A = value(alpha);
    if (X.rank() != 5 || A.numel() != X.dim(1)) throw ContractError("prelu: bad shapes");
    const int64_t n_batch = X.dim(0), c_ch = X.dim(1);
    const int64_t vol = X.numel() / (n_batch * c_ch);
    Tensor y = X;
    for (int64_t n = 0; n < n_batch; ++n)
      for (int64_t c = 0; c < c_ch; ++c) {
        const float a = A.data[static_cast<size_t>(c)];
        float* p = y.data.data() + (n * c_ch + c) * vol;
        for (int64_t i = 0; i < vol; ++i)
          if (p[i] < 0.0f) p[i] *= a;
      }
    const NodeId id = make(std::move(y));
    set_backprop(id, [x, alpha, n_batch, c_ch, vol](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      const Tensor& X = g.value(x);
      const Tensor& A = g.value(alpha);
      Tensor& gx = g.grad_buf(x);
      Tensor& ga = g.grad_buf(alpha);
      for (int64_t n = 0; n < n_batch; ++n)
        for (int64_t c = 0; c < c_ch; ++c) {
          const float a = A.data[static_cast<size_t>(c)];
          const int64_t base = (n * c_ch + c) * vol;
          double da = 0.0;
          for (int64_t i = 0; i < vol; ++i) {
            const size_t k = static_cast<size_t>(base + i);
            if (X.data[k] > 0.0f) {
              gx.data[k] += gy.data[k];
            } else {
              gx.data[k] += gy.data[k] * a;
              da += static_cast<double>(gy.data[k]) * X.data[k];
            }
          }
          ga.data[static_cast<size_t>(c)] += static_cast<float>(da);
        }
    });
    return id;
  }

  NodeId gelu(NodeId x) {
    Tensor y = value(x);
    for (auto& v : y.data) {
      const double xv = v;
      v = static_cast<float>(0.5 * xv * (1.0 + std::erf(xv * 0.7071067811865475)));
    }
    const NodeId id = make(std::move(y));
    set_backprop(id, [x](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      const Tensor& X = g.value(x);
      Tensor& gx = g.grad_buf(x);
      constexpr double inv_sqrt2 = 0.7071067811865475;
      constexpr double inv_sqrt2pi = 0.3989422804014327;
      for (size_t i = 0; i < gy.data.size(); ++i) {
        const double xv = X.data[i];
        const double cdf = 0.5 * (1.0 + std::erf(xv * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * xv * xv);
        gx.data[i] += gy.data[i] * static_cast<float>(cdf + xv * pdf);
      }
    });
    return id;
  }

  // ---- shape plumbing --------------------------------------------------

  NodeId reshape(NodeId x, std::vector<int64_t> new_shape) {
    const Tensor& X = value(x);
    int64_t n = 1;
    for (int64_t d : new_shape) n *= d;
    if (n != X.numel()) throw ContractError("reshape: element count mismatch");
    Tensor y(std::move(new_shape), X.data);
    const NodeId id = make(std::move(y));
    set_backprop(id, [x](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      Tensor& gx = g.grad_buf(x);
      for (size_t i = 0; i < gy.data.size(); ++i) gx.data[i] += gy.data[i];
    });
    return id;
  }

  // Concatenate along the channel axis of (N, C, X, Y, Z) tensors.
  NodeId concat_channels(NodeId a, NodeId b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.rank() != 5 || B.rank() != 5) throw ContractError("concat_channels: rank must be 5");
    for (int i : {0, 2, 3, 4})
      if (A.dim(i) != B.dim(i)) throw ContractError("concat_channels: shape mismatch");
    const int64_t n_batch = A.dim(0), ca = A.dim(1), cb = B.dim(1);
    const int64_t vol = A.dim(2) * A.dim(3) * A.dim(4);
    Tensor y = Tensor::zeros({n_batch, ca + cb, A.dim(2), A.dim(3), A.dim(4)});
    for (int64_t n = 0; n < n_batch; ++n) {
      std::copy_n(A.data.data() + n * ca * vol, ca * vol, y.data.data() + n * (ca + cb) * vol);
      std::copy_n(B.data.data() + n * cb * vol, cb * vol,
                  y.data.data() + (n * (ca + cb) + ca) * vol);
    }
    const NodeId id = make(std::move(y));
    set_backprop(id, [a, b, n_batch, ca, cb, vol](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      Tensor& ga = g.grad_buf(a);
      Tensor& gb = g.grad_buf(b);
      for (int64_t n = 0; n < n_batch; ++n) {
        const float* src = gy.data.data() + n * (ca + cb) * vol;
        float* da = ga.data.data() + n * ca * vol;
        float* db = gb.data.data() + n * cb * vol;
        for (int64_t i = 0; i < ca * vol; ++i) da[i] += src[i];
        for (int64_t i = 0; i < cb * vol; ++i) db[i] += src[ca * vol + i];
      }
    });
    return id;
  }

  // Slice of the last dimension.
  NodeId slice_last(NodeId x, int64_t offset, int64_t len) {
    const Tensor& X = value(x);
    const int64_t c_in = X.shape.back();
    if (offset < 0 || offset + len > c_in) throw ContractError("slice_last: out of range");
    const int64_t rows = X.numel() / c_in;
    std::vector<int64_t> out_shape = X.shape;
    out_shape.back() = len;
    Tensor y = Tensor::zeros(out_shape);
    for (int64_t r = 0; r < rows; ++r)
      std::copy_n(X.data.data() + r * c_in + offset, len, y.data.data() + r * len);
    const NodeId id = make(std::move(y));
    set_backprop(id, [x, offset, len, rows, c_in](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      Tensor& gx = g.grad_buf(x);
      for (int64_t r = 0; r < rows; ++r) {
        const float* src = gy.data.data() + r * len;
        float* dst = gx.data.data() + r * c_in + offset;
        for (int64_t i = 0; i < len; ++i) dst[i] += src[i];
      }
    });
    return id;
  }

  // (N, C, X, Y, Z) -> (N, X, Y, Z, C)
  NodeId to_tokens(NodeId x) {
    const Tensor& X = value(x);
    if (X.rank() != 5) throw ContractError("to_tokens: rank must be 5");
    const int64_t n_batch = X.dim(0), c = X.dim(1), vol = X.numel() / (X.dim(0) * X.dim(1));
    Tensor y = Tensor::zeros({X.dim(0), X.dim(2), X.dim(3), X.dim(4), c});
    for (int64_t n = 0; n < n_batch; ++n)
      for (int64_t ch = 0; ch < c; ++ch) {
        const float* src = X.data.data() + (n * c + ch) * vol;
        float* dst = y.data.data() + n * vol * c + ch;
        for (int64_t v = 0; v < vol; ++v) dst[v * c] = src[v];
      }
    const NodeId id = make(std::move(y));
    set_backprop(id, [x, n_batch, c, vol](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      Tensor& gx = g.grad_buf(x);
      for (int64_t n = 0; n < n_batch; ++n)
        for (int64_t ch = 0; ch < c; ++ch) {
          const float* src = gy.data.data() + n * vol * c + ch;
          float* dst = gx.data.data() + (n * c + ch) * vol;
          for (int64_t v = 0; v < vol; ++v) dst[v] += src[v * c];
        }
    });
    return id;
  }

  // (N, X, Y, Z, C) -> (N, C, X, Y, Z)
  NodeId from_tokens(NodeId x) {
    const Tensor& X = value(x);
    if (X.rank() != 5) throw ContractError("from_tokens: rank must be 5");
    const int64_t n_batch = X.dim(0), c = X.dim(4), vol = X.dim(1) * X.dim(2) * X.dim(3);
    Tensor y = Tensor::zeros({n_batch, c, X.dim(1), X.dim(2), X.dim(3)});
    for (int64_t n = 0; n < n_batch; ++n)
      for (int64_t ch = 0; ch < c; ++ch) {
        const float* src = X.data.data() + n * vol * c + ch;
        float* dst = y.data.data() + (n * c + ch) * vol;
        for (int64_t v = 0; v < vol; ++v) dst[v] = src[v * c];
      }
    const NodeId id = make(std::move(y));
    set_backprop(id, [x, n_batch, c, vol](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      Tensor& gx = g.grad_buf(x);
      for (int64_t n = 0; n < n_batch; ++n)
        for (int64_t ch = 0; ch < c; ++ch) {
          const float* src = gy.data.data() + (n * c + ch) * vol;
          float* dst = gx.data.data() + n * vol * c + ch;
          for (int64_t v = 0; v < vol; ++v) dst[v * c] += src[v];
        }
    });
    return id;
  }

  // Zero-pad the spatial axes of a token tensor (N, X, Y, Z, C) at the high
  // end.
  NodeId pad_tokens(NodeId x, std::array<int64_t, 3> hi) {
    const Tensor& X = value(x);
    if (X.rank() != 5) throw ContractError("pad_tokens: rank must be 5");
    const int64_t n_batch = X.dim(0), c = X.dim(4);
    const std::array<int64_t, 3> in{X.dim(1), X.dim(2), X.dim(3)};
    const std::array<int64_t, 3> out{in[0] + hi[0], in[1] + hi[1], in[2] + hi[2]};
    Tensor y = Tensor::zeros({n_batch, out[0], out[1], out[2], c});
    for (int64_t n = 0; n < n_batch; ++n)
      for (int64_t xx = 0; xx < in[0]; ++xx)
        for (int64_t yy = 0; yy < in[1]; ++yy) {
          const float* src = X.data.data() + (((n * in[0] + xx) * in[1] + yy) * in[2]) * c;
          float* dst = y.data.data() + (((n * out[0] + xx) * out[1] + yy) * out[2]) * c;
          std::copy_n(src, in[2] * c, dst);
        }
    const NodeId id = make(std::move(y));
    set_backprop(id, [x, n_batch, c, in, out](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      Tensor& gx = g.grad_buf(x);
      for (int64_t n = 0; n < n_batch; ++n)
        for (int64_t xx = 0; xx < in[0]; ++xx)
          for (int64_t yy = 0; yy < in[1]; ++yy) {
            const float* src = gy.data.data() + (((n * out[0] + xx) * out[1] + yy) * out[2]) * c;
            float* dst = gx.data.data() + (((n * in[0] + xx) * in[1] + yy) * in[2]) * c;
            for (int64_t i = 0; i < in[2] * c; ++i) dst[i] += src[i];
          }
    });
    return id;
  }

  NodeId crop_tokens(NodeId x, std::array<int64_t, 3> keep) {
    const Tensor& X = value(x);
    if (X.rank() != 5) throw ContractError("crop_tokens: rank must be 5");
    const int64_t n_batch = X.dim(0), c = X.dim(4);
    const std::array<int64_t, 3> in{X.dim(1), X.dim(2), X.dim(3)};
    Tensor y = Tensor::zeros({n_batch, keep[0], keep[1], keep[2], c});
    for (int64_t n = 0; n < n_batch; ++n)
      for (int64_t xx = 0; xx < keep[0]; ++xx)
        for (int64_t yy = 0; yy < keep[1]; ++yy) {
          const float* src = X.data.data() + (((n * in[0] + xx) * in[1] + yy) * in[2]) * c;
          float* dst = y.data.data() + (((n * keep[0] + xx) * keep[1] + yy) * keep[2]) * c;
          std::copy_n(src, keep[2] * c, dst);
        }
    const NodeId id = make(std::move(y));
    set_backprop(id, [x, n_batch, c, in, keep](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      Tensor& gx = g.grad_buf(x);
      for (int64_t n = 0; n < n_batch; ++n)
        for (int64_t xx = 0; xx < keep[0]; ++xx)
          for (int64_t yy = 0; yy < keep[1]; ++yy) {
            const float* src =
                gy.data.data() + (((n * keep[0] + xx) * keep[1] + yy) * keep[2]) * c;
            float* dst = gx.data.data() + (((n * in[0] + xx) * in[1] + yy) * in[2]) * c;
            for (int64_t i = 0; i < keep[2] * c; ++i) dst[i] += src[i];
          }
    });
    return id;
  }

  // Cyclic shift of the spatial axes of a token tensor; shift s moves content
  // towards higher indices.
  NodeId roll_tokens(NodeId x, std::array<int64_t, 3> shift) {
    const Tensor& X = value(x);
    if (X.rank() != 5) throw ContractError("roll_tokens: rank must be 5");
    Tensor y = roll_copy(X, shift);
    const NodeId id = make(std::move(y));
    set_backprop(id, [x, shift](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      Tensor back = roll_copy(gy, {-shift[0], -shift[1], -shift[2]});
      Tensor& gx = g.grad_buf(x);
      for (size_t i = 0; i < back.data.size(); ++i) gx.data[i] += back.data[i];
    });
    return id;
  }

  // (N, X, Y, Z, C) with window size w dividing each axis
  // -> (N*nW, wx*wy*wz, C); windows and in-window tokens ordered
  // lexicographically.
  NodeId window_partition(NodeId x, std::array<int64_t, 3> w) {
    const Tensor& X = value(x);
    if (X.rank() != 5) throw ContractError("window_partition: rank must be 5");
    const std::array<int64_t, 3> grid{X.dim(1), X.dim(2), X.dim(3)};
    for (int a = 0; a < 3; ++a)
      if (grid[a] % w[a] != 0) throw ContractError("window_partition: window must divide grid");
    const int64_t n_batch = X.dim(0), c = X.dim(4);
    const std::array<int64_t, 3> nw{grid[0] / w[0], grid[1] / w[1], grid[2] / w[2]};
    const int64_t windows = nw[0] * nw[1] * nw[2];
    const int64_t tokens = w[0] * w[1] * w[2];
    Tensor y = Tensor::zeros({n_batch * windows, tokens, c});
    partition_copy(X.data.data(), y.data.data(), n_batch, grid, w, c, /*forward=*/true);
    const NodeId id = make(std::move(y));
    set_backprop(id, [x, n_batch, grid, w, c](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      Tensor gx_full = Tensor::zeros(g.value(x).shape);
      partition_copy(gx_full.data.data(), gy.data.data(), n_batch, grid, w, c,
                     /*forward=*/false);
      Tensor& gx = g.grad_buf(x);
      for (size_t i = 0; i < gx_full.data.size(); ++i) gx.data[i] += gx_full.data[i];
    });
    return id;
  }

  // Inverse of window_partition back onto the given grid.
  NodeId window_unpartition(NodeId x, int64_t n_batch, std::array<int64_t, 3> grid,
                            std::array<int64_t, 3> w) {
    const Tensor& X = value(x);
    if (X.rank() != 3) throw ContractError("window_unpartition: rank must be 3");
    const int64_t c = X.dim(2);
    Tensor y = Tensor::zeros({n_batch, grid[0], grid[1], grid[2], c});
    partition_copy(y.data.data(), X.data.data(), n_batch, grid, w, c, /*forward=*/false);
    const NodeId id = make(std::move(y));
    set_backprop(id, [x, n_batch, grid, w, c](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      Tensor gx_full = Tensor::zeros(g.value(x).shape);
      partition_copy(gy.data.data(), gx_full.data.data(), n_batch, grid, w, c,
                     /*forward=*/true);
      Tensor& gx = g.grad_buf(x);
      for (size_t i = 0; i < gx_full.data.size(); ++i) gx.data[i] += gx_full.data[i];
    });
    return id;
  }

  // (W, T, C) -> (W*H, T, C/H): slice index w*H + h carries head h.
  NodeId split_heads(NodeId x, int64_t heads) {
    const Tensor& X = value(x);
    if (X.rank() != 3 || X.dim(2) % heads != 0) throw ContractError("split_heads: bad shape");
    const int64_t wn = X.dim(0), t = X.dim(1), c = X.dim(2), d = c / heads;
    Tensor y = Tensor::zeros({wn * heads, t, d});
    for (int64_t wi = 0; wi < wn; ++wi)
      for (int64_t h = 0; h < heads; ++h)
        for (int64_t ti = 0; ti < t; ++ti)
          std::copy_n(X.data.data() + (wi * t + ti) * c + h * d, d,
                      y.data.data() + ((wi * heads + h) * t + ti) * d);
    const NodeId id = make(std::move(y));
    set_backprop(id, [x, wn, heads, t, c, d](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      Tensor& gx = g.grad_buf(x);
      for (int64_t wi = 0; wi < wn; ++wi)
        for (int64_t h = 0; h < heads; ++h)
          for (int64_t ti = 0; ti < t; ++ti) {
            const float* src = gy.data.data() + ((wi * heads + h) * t + ti) * d;
            float* dst = gx.data.data() + (wi * t + ti) * c + h * d;
            for (int64_t i = 0; i < d; ++i) dst[i] += src[i];
          }
    });
    return id;
  }

  NodeId merge_heads(NodeId x, int64_t heads) {
    const Tensor& X = value(x);
    if (X.rank() != 3 || X.dim(0) % heads != 0) throw ContractError("merge_heads: bad shape");
    const int64_t wn = X.dim(0) / heads, t = X.dim(1), d = X.dim(2), c = d * heads;
    Tensor y = Tensor::zeros({wn, t, c});
    for (int64_t wi = 0; wi < wn; ++wi)
      for (int64_t h = 0; h < heads; ++h)
        for (int64_t ti = 0; ti < t; ++ti)
          std::copy_n(X.data.data() + ((wi * heads + h) * t + ti) * d, d,
                      y.data.data() + (wi * t + ti) * c + h * d);
    const NodeId id = make(std::move(y));
    set_backprop(id, [x, wn, heads, t, d, c](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      Tensor& gx = g.grad_buf(x);
      for (int64_t wi = 0; wi < wn; ++wi)
        for (int64_t h = 0; h < heads; ++h)
          for (int64_t ti = 0; ti < t; ++ti) {
            const float* src = gy.data.data() + (wi * t + ti) * c + h * d;
            float* dst = gx.data.data() + ((wi * heads + h) * t + ti) * d;
            for (int64_t i = 0; i < d; ++i) dst[i] += src[i];
          }
    });
    return id;
  }

  // ---- dense algebra ---------------------------------------------------

  // x (..., Cin) @ w (Cout, Cin)^T + b -> (..., Cout)
  NodeId linear(NodeId x, NodeId w, NodeId b) {
    const Tensor& X = value(x);
    const Tensor& W = value(w);
    const Tensor& B = value(b);
    const int64_t c_in = X.shape.back();
    if (W.rank() != 2 || W.dim(1) != c_in || B.numel() != W.dim(0))
      throw ContractError("linear: shape mismatch");
    const int64_t c_out = W.dim(0);
    const int64_t rows = X.numel() / c_in;
    std::vector<int64_t> out_shape = X.shape;
    out_shape.back() = c_out;
    Tensor y = Tensor::zeros(out_shape);
    {
      CMapX xm(X.data.data(), c_in, rows);
      CMapX wm(W.data.data(), c_in, c_out);
      MapX ym(y.data.data(), c_out, rows);
      ym.noalias() = wm.transpose() * xm;
      Eigen::Map<const Eigen::VectorXf> bv(B.data.data(), c_out);
      ym.colwise() += bv;
    }
    const NodeId id = make(std::move(y));
    set_backprop(id, [x, w, b, rows, c_in, c_out](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      const Tensor& X = g.value(x);
      const Tensor& W = g.value(w);
      CMapX gym(gy.data.data(), c_out, rows);
      CMapX xm(X.data.data(), c_in, rows);
      CMapX wm(W.data.data(), c_in, c_out);
      {
        Tensor& gx = g.grad_buf(x);
        MapX gxm(gx.data.data(), c_in, rows);
        gxm.noalias() += wm * gym;
      }
      {
        Tensor& gw = g.grad_buf(w);
        MapX gwm(gw.data.data(), c_in, c_out);
        gwm.noalias() += xm * gym.transpose();
      }
      {
        Tensor& gb = g.grad_buf(b);
        Eigen::Map<Eigen::VectorXf> gbv(gb.data.data(), c_out);
        gbv.noalias() += gym.rowwise().sum();
      }
    });
    return id;
  }

  // Batched matmul: a (B, M, K) x b (B, K, N) -> (B, M, N);
  // trans_b treats b as (B, N, K) and multiplies by its transpose.
  NodeId matmul(NodeId a, NodeId b, bool trans_b = false) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.rank() != 3 || B.rank() != 3 || A.dim(0) != B.dim(0))
      throw ContractError("matmul: rank-3 tensors with equal batch required");
    const int64_t batch = A.dim(0), m = A.dim(1), k = A.dim(2);
    const int64_t n = trans_b ? B.dim(1) : B.dim(2);
    if ((trans_b ? B.dim(2) : B.dim(1)) != k) throw ContractError("matmul: inner dim mismatch");
    Tensor y = Tensor::zeros({batch, m, n});
    for (int64_t i = 0; i < batch; ++i) {
      CMapX ca(A.data.data() + i * m * k, k, m);
      MapX cy(y.data.data() + i * m * n, n, m);
      if (trans_b) {
        CMapX cb(B.data.data() + i * n * k, k, n);
        cy.noalias() = cb.transpose() * ca;
      } else {
        CMapX cb(B.data.data() + i * k * n, n, k);
        cy.noalias() = cb * ca;
      }
    }
    const NodeId id = make(std::move(y));
    set_backprop(id, [a, b, trans_b, batch, m, k, n](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      const Tensor& A = g.value(a);
      const Tensor& B = g.value(b);
      Tensor& ga = g.grad_buf(a);
      Tensor& gb = g.grad_buf(b);
      for (int64_t i = 0; i < batch; ++i) {
        CMapX cgy(gy.data.data() + i * m * n, n, m);
        CMapX ca(A.data.data() + i * m * k, k, m);
        MapX cga(ga.data.data() + i * m * k, k, m);
        if (trans_b) {
          CMapX cb(B.data.data() + i * n * k, k, n);
          MapX cgb(gb.data.data() + i * n * k, k, n);
          cga.noalias() += cb * cgy;
          cgb.noalias() += ca * cgy.transpose();
        } else {
          CMapX cb(B.data.data() + i * k * n, n, k);
          MapX cgb(gb.data.data() + i * k * n, n, k);
          cga.noalias() += cb.transpose() * cgy;
          cgb.noalias() += cgy * ca.transpose();
        }
      }
    });
    return id;
  }

  NodeId softmax_last(NodeId x) {
    const Tensor& X = value(x);
    const int64_t c = X.shape.back();
    const int64_t rows = X.numel() / c;
    Tensor y = X;
    for (int64_t r = 0; r < rows; ++r) {
      float* p = y.data.data() + r * c;
      float mx = p[0];
      for (int64_t i = 1; i < c; ++i) mx = std::max(mx, p[i]);
      double sum = 0.0;
      for (int64_t i = 0; i < c; ++i) {
        p[i] = std::exp(p[i] - mx);
        sum += p[i];
      }
      const float inv = static_cast<float>(1.0 / sum);
      for (int64_t i = 0; i < c; ++i) p[i] *= inv;
    }
    const NodeId id = make(std::move(y));
    set_backprop(id, [x, rows, c](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      const Tensor& Y = g.value(self);
      Tensor& gx = g.grad_buf(x);
      for (int64_t r = 0; r < rows; ++r) {
        const float* yp = Y.data.data() + r * c;
        const float* gp = gy.data.data() + r * c;
        float* xp = gx.data.data() + r * c;
        double dot = 0.0;
        for (int64_t i = 0; i < c; ++i) dot += static_cast<double>(gp[i]) * yp[i];
        for (int64_t i = 0; i < c; ++i)
          xp[i] += yp[i] * (gp[i] - static_cast<float>(dot));
      }
    });
    return id;
  }

  // Adds the learned relative-position bias to attention scores.
  // scores (W*H, T, T) where slice index w*H + h carries head h;
  // table (H, table_size); index (T*T) entries into the table.
  NodeId add_rel_pos_bias(NodeId scores, NodeId table,
                          std::shared_ptr<std::vector<int32_t>> index, int64_t heads) {
    const Tensor& S = value(scores);
    const Tensor& T = value(table);
    const int64_t t = S.dim(1);
    if (S.rank() != 3 || S.dim(2) != t || static_cast<int64_t>(index->size()) != t * t)
      throw ContractError("add_rel_pos_bias: bad shapes");
    const int64_t table_size = T.dim(1);
    const int64_t slices = S.dim(0);
    Tensor y = S;
    for (int64_t s = 0; s < slices; ++s) {
      const int64_t h = s % heads;
      const float* tab = T.data.data() + h * table_size;
      float* p = y.data.data() + s * t * t;
      for (int64_t i = 0; i < t * t; ++i) p[i] += tab[(*index)[static_cast<size_t>(i)]];
    }
    const NodeId id = make(std::move(y));
    set_backprop(id, [scores, table, index, heads, t, table_size, slices](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      Tensor& gs = g.grad_buf(scores);
      Tensor& gt = g.grad_buf(table);
      for (size_t i = 0; i < gy.data.size(); ++i) gs.data[i] += gy.data[i];
      for (int64_t s = 0; s < slices; ++s) {
        const int64_t h = s % heads;
        float* tab = gt.data.data() + h * table_size;
        const float* p = gy.data.data() + s * t * t;
        for (int64_t i = 0; i < t * t; ++i) tab[(*index)[static_cast<size_t>(i)]] += p[i];
      }
    });
    return id;
  }

  // Adds a constant per-window attention mask (shifted-window masking).
  // scores (N*nW*H, T, T); mask (nW, T, T).
  NodeId add_window_mask(NodeId scores, std::shared_ptr<Tensor> mask, int64_t heads,
                         int64_t n_windows) {
    const Tensor& S = value(scores);
    const int64_t t = S.dim(1);
    const int64_t slices = S.dim(0);
    Tensor y = S;
    for (int64_t s = 0; s < slices; ++s) {
      const int64_t w = (s / heads) % n_windows;
      const float* mp = mask->data.data() + w * t * t;
      float* p = y.data.data() + s * t * t;
      for (int64_t i = 0; i < t * t; ++i) p[i] += mp[i];
    }
    const NodeId id = make(std::move(y));
    set_backprop(id, [scores](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      Tensor& gs = g.grad_buf(scores);
      for (size_t i = 0; i < gy.data.size(); ++i) gs.data[i] += gy.data[i];
    });
    return id;
  }

  // ---- normalization ---------------------------------------------------

  NodeId instance_norm(NodeId x, NodeId gamma, NodeId beta) {
    return group_norm(x, gamma, beta, value(x).dim(1));
  }

  // Group normalization over (N, C, X, Y, Z); gamma/beta per channel.
  NodeId group_norm(NodeId x, NodeId gamma, NodeId beta, int64_t groups) {
    const Tensor& X = value(x);
    const Tensor& G = value(gamma);
    const Tensor& B = value(beta);
    if (X.rank() != 5) throw ContractError("group_norm: rank must be 5");
    const int64_t n_batch = X.dim(0), c = X.dim(1);
    if (c % groups != 0 || G.numel() != c || B.numel() != c)
      throw ContractError("group_norm: bad channel/group setup");
    const int64_t vol = X.numel() / (n_batch * c);
    const int64_t cg = c / groups;
    const int64_t m = cg * vol;
    constexpr double eps = 1e-5;

    auto stats = std::make_shared<std::vector<double>>(
        static_cast<size_t>(n_batch * groups * 2));
    Tensor y = Tensor::zeros(X.shape);
    for (int64_t n = 0; n < n_batch; ++n)
      for (int64_t g0 = 0; g0 < groups; ++g0) {
        const float* src = X.data.data() + (n * c + g0 * cg) * vol;
        double sum = 0.0, sum2 = 0.0;
        for (int64_t i = 0; i < m; ++i) {
          sum += src[i];
          sum2 += static_cast<double>(src[i]) * src[i];
        }
        const double mean = sum / static_cast<double>(m);
        const double var = std::max(0.0, sum2 / static_cast<double>(m) - mean * mean);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*stats)[static_cast<size_t>((n * groups + g0) * 2)] = mean;
        (*stats)[static_cast<size_t>((n * groups + g0) * 2 + 1)] = inv;
        for (int64_t ci = 0; ci < cg; ++ci) {
          const int64_t ch = g0 * cg + ci;
          const float gamma_c = G.data[static_cast<size_t>(ch)];
          const float beta_c = B.data[static_cast<size_t>(ch)];
          const float* xp = X.data.data() + (n * c + ch) * vol;
          float* yp = y.data.data() + (n * c + ch) * vol;
          for (int64_t i = 0; i < vol; ++i)
            yp[i] = static_cast<float>((xp[i] - mean) * inv) * gamma_c + beta_c;
        }
      }
    const NodeId id = make(std::move(y));
    set_backprop(id, [x, gamma, beta, groups, n_batch, c, cg, vol, m, stats](Graph& g,
                                                                             NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      const Tensor& X = g.value(x);
      const Tensor& G = g.value(gamma);
      Tensor& gx = g.grad_buf(x);
      Tensor& gg = g.grad_buf(gamma);
      Tensor& gb = g.grad_buf(beta);
      for (int64_t n = 0; n < n_batch; ++n)
        for (int64_t g0 = 0; g0 < groups; ++g0) {
          const double mean = (*stats)[static_cast<size_t>((n * groups + g0) * 2)];
          const double inv = (*stats)[static_cast<size_t>((n * groups + g0) * 2 + 1)];
          double s1 = 0.0, s2 = 0.0;  // sums of gy*gamma and gy*gamma*xhat
          for (int64_t ci = 0; ci < cg; ++ci) {
            const int64_t ch = g0 * cg + ci;
            const double gamma_c = G.data[static_cast<size_t>(ch)];
            const float* xp = X.data.data() + (n * c + ch) * vol;
            const float* gp = gy.data.data() + (n * c + ch) * vol;
            double dgamma = 0.0, dbeta = 0.0;
            for (int64_t i = 0; i < vol; ++i) {
              const double xhat = (xp[i] - mean) * inv;
              const double gv = gp[i];
              dgamma += gv * xhat;
              dbeta += gv;
              s1 += gv * gamma_c;
              s2 += gv * gamma_c * xhat;
            }
            gg.data[static_cast<size_t>(ch)] += static_cast<float>(dgamma);
            gb.data[static_cast<size_t>(ch)] += static_cast<float>(dbeta);
          }
          const double mean_s1 = s1 / static_cast<double>(m);
          const double mean_s2 = s2 / static_cast<double>(m);
          for (int64_t ci = 0; ci < cg; ++ci) {
            const int64_t ch = g0 * cg + ci;
            const double gamma_c = G.data[static_cast<size_t>(ch)];
            const float* xp = X.data.data() + (n * c + ch) * vol;
            const float* gp = gy.data.data() + (n * c + ch) * vol;
            float* dst = gx.data.data() + (n * c + ch) * vol;
            for (int64_t i = 0; i < vol; ++i) {
              const double xhat = (xp[i] - mean) * inv;
              dst[i] += static_cast<float>(inv * (gp[i] * gamma_c - mean_s1 - xhat * mean_s2));
            }
          }
        }
    });
    return id;
  }

  // Layer norm over the last dimension; gamma/beta of that length.
  NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta) {
    const Tensor& X = value(x);
    const Tensor& G = value(gamma);
    const Tensor& B = value(beta);
    const int64_t c = X.shape.back();
    if (G.numel() != c || B.numel() != c) throw ContractError("layer_norm: bad gamma/beta");
    const int64_t rows = X.numel() / c;
    constexpr double eps = 1e-5;
    auto stats = std::make_shared<std::vector<double>>(static_cast<size_t>(rows * 2));
    Tensor y = Tensor::zeros(X.shape);
    for (int64_t r = 0; r < rows; ++r) {
      const float* xp = X.data.data() + r * c;
      double sum = 0.0, sum2 = 0.0;
      for (int64_t i = 0; i < c; ++i) {
        sum += xp[i];
        sum2 += static_cast<double>(xp[i]) * xp[i];
      }
      const double mean = sum / static_cast<double>(c);
      const double var = std::max(0.0, sum2 / static_cast<double>(c) - mean * mean);
      const double inv = 1.0 / std::sqrt(var + eps);
      (*stats)[static_cast<size_t>(r * 2)] = mean;
      (*stats)[static_cast<size_t>(r * 2 + 1)] = inv;
      float* yp = y.data.data() + r * c;
      for (int64_t i = 0; i < c; ++i)
        yp[i] = static_cast<float>((xp[i] - mean) * inv) * G.data[static_cast<size_t>(i)] +
                B.data[static_cast<size_t>(i)];
    }
    const NodeId id = make(std::move(y));
    set_backprop(id, [x, gamma, beta, rows, c, stats](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      const Tensor& X = g.value(x);
      const Tensor& G = g.value(gamma);
      Tensor& gx = g.grad_buf(x);
      Tensor& gg = g.grad_buf(gamma);
      Tensor& gb = g.grad_buf(beta);
      for (int64_t r = 0; r < rows; ++r) {
        const double mean = (*stats)[static_cast<size_t>(r * 2)];
        const double inv = (*stats)[static_cast<size_t>(r * 2 + 1)];
        const float* xp = X.data.data() + r * c;
        const float* gp = gy.data.data() + r * c;
        double s1 = 0.0, s2 = 0.0;
        for (int64_t i = 0; i < c; ++i) {
          const double xhat = (xp[i] - mean) * inv;
          const double gv = static_cast<double>(gp[i]) * G.data[static_cast<size_t>(i)];
          s1 += gv;
          s2 += gv * xhat;
          gg.data[static_cast<size_t>(i)] += static_cast<float>(gp[i] * xhat);
          gb.data[static_cast<size_t>(i)] += gp[i];
        }
        const double m1 = s1 / static_cast<double>(c);
        const double m2 = s2 / static_cast<double>(c);
        float* dst = gx.data.data() + r * c;
        for (int64_t i = 0; i < c; ++i) {
          const double xhat = (xp[i] - mean) * inv;
          const double gv = static_cast<double>(gp[i]) * G.data[static_cast<size_t>(i)];
          dst[i] += static_cast<float>(inv * (gv - m1 - xhat * m2));
        }
      }
    });
    return id;
  }

  // ---- convolution -----------------------------------------------------

  // x (N, Ci, X, Y, Z) * w (Co, Ci, KX, KY, KZ) + b (Co), floor output dims.
  NodeId conv3d(NodeId x, NodeId w, NodeId b, std::array<int64_t, 3> stride,
                std::array<int64_t, 3> pad) {
    const Tensor& X = value(x);
    const Tensor& W = value(w);
    const Tensor& B = value(b);
    if (X.rank() != 5 || W.rank() != 5) throw ContractError("conv3d: rank must be 5");
    if (X.dim(1) != W.dim(1)) throw ContractError("conv3d: channel mismatch");
    if (B.numel() != W.dim(0)) throw ContractError("conv3d: bias mismatch");
    const int64_t n_batch = X.dim(0), ci = X.dim(1), co = W.dim(0);
    const std::array<int64_t, 3> in{X.dim(2), X.dim(3), X.dim(4)};
    const std::array<int64_t, 3> k{W.dim(2), W.dim(3), W.dim(4)};
    std::array<int64_t, 3> out;
    for (int a = 0; a < 3; ++a) {
      out[a] = (in[a] + 2 * pad[a] - k[a]) / stride[a] + 1;
      if (out[a] < 1) throw ContractError("conv3d: output dim collapsed");
    }
    const int64_t v_out = out[0] * out[1] * out[2];
    const int64_t ck = ci * k[0] * k[1] * k[2];

    Tensor y = Tensor::zeros({n_batch, co, out[0], out[1], out[2]});
    std::vector<float>& col = scratch(ck * v_out);
    for (int64_t n = 0; n < n_batch; ++n) {
      im2col(X.data.data() + n * ci * in[0] * in[1] * in[2], col.data(), ci, in, k, stride, pad,
             out);
      CMapX cm(col.data(), v_out, ck);
      CMapX wm(W.data.data(), ck, co);
      MapX ym(y.data.data() + n * co * v_out, v_out, co);
      ym.noalias() = cm * wm;
      for (int64_t c = 0; c < co; ++c) ym.col(c).array() += B.data[static_cast<size_t>(c)];
    }
    const NodeId id = make(std::move(y));
    set_backprop(id, [x, w, b, stride, pad, n_batch, ci, co, in, k, out, v_out,
                      ck](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      const Tensor& X = g.value(x);
      const Tensor& W = g.value(w);
      Tensor& gx = g.grad_buf(x);
      Tensor& gw = g.grad_buf(w);
      Tensor& gb = g.grad_buf(b);

      // Bias and weight grads share the rebuilt im2col buffer.
      std::vector<float>& col = g.scratch(ck * v_out);
      for (int64_t n = 0; n < n_batch; ++n) {
        im2col(X.data.data() + n * ci * in[0] * in[1] * in[2], col.data(), ci, in, k, stride,
               pad, out);
        CMapX cm(col.data(), v_out, ck);
        CMapX gym(gy.data.data() + n * co * v_out, v_out, co);
        MapX gwm(gw.data.data(), ck, co);
        gwm.noalias() += cm.transpose() * gym;
        for (int64_t c = 0; c < co; ++c)
          gb.data[static_cast<size_t>(c)] += gym.col(c).sum();
      }

      if (stride[0] == 1 && stride[1] == 1 && stride[2] == 1) {
        // grad wrt input = full correlation with the flipped kernel.
        Tensor wflip = Tensor::zeros({ci, co, k[0], k[1], k[2]});
        for (int64_t o = 0; o < co; ++o)
          for (int64_t i = 0; i < ci; ++i)
            for (int64_t kx = 0; kx < k[0]; ++kx)
              for (int64_t ky = 0; ky < k[1]; ++ky)
                for (int64_t kz = 0; kz < k[2]; ++kz)
                  wflip.data[static_cast<size_t>(
                      ((((i * co + o) * k[0] + kx) * k[1] + ky) * k[2] + kz))] =
                      W.data[static_cast<size_t>(((((o * ci + i) * k[0] + k[0] - 1 - kx) * k[1] +
                                                   k[1] - 1 - ky) *
                                                      k[2] +
                                                  k[2] - 1 - kz))];
        const std::array<int64_t, 3> fpad{k[0] - 1 - pad[0], k[1] - 1 - pad[1],
                                          k[2] - 1 - pad[2]};
        const int64_t v_in = in[0] * in[1] * in[2];
        const int64_t ck2 = co * k[0] * k[1] * k[2];
        std::vector<float>& col2 = g.scratch(ck2 * v_in);
        for (int64_t n = 0; n < n_batch; ++n) {
          im2col(gy.data.data() + n * co * v_out, col2.data(), co, out, k, {1, 1, 1}, fpad, in);
          CMapX cm2(col2.data(), v_in, ck2);
          CMapX wfm(wflip.data.data(), ck2, ci);
          MapX gxm(gx.data.data() + n * ci * v_in, v_in, ci);
          gxm.noalias() += cm2 * wfm;
        }
      } else {
        // Strided case: direct gather, used only on the few downsampling
        // convolutions.
        for (int64_t n = 0; n < n_batch; ++n)
          for (int64_t o = 0; o < co; ++o)
            for (int64_t i = 0; i < ci; ++i)
              for (int64_t kx = 0; kx < k[0]; ++kx)
                for (int64_t ky = 0; ky < k[1]; ++ky)
                  for (int64_t kz = 0; kz < k[2]; ++kz) {
                    const float wv = W.data[static_cast<size_t>(
                        ((((o * ci + i) * k[0] + kx) * k[1] + ky) * k[2] + kz))];
                    if (wv == 0.0f) continue;
                    for (int64_t ox = 0; ox < out[0]; ++ox) {
                      const int64_t ixp = ox * stride[0] - pad[0] + kx;
                      if (ixp < 0 || ixp >= in[0]) continue;
                      for (int64_t oy = 0; oy < out[1]; ++oy) {
                        const int64_t iyp = oy * stride[1] - pad[1] + ky;
                        if (iyp < 0 || iyp >= in[1]) continue;
                        const float* gp =
                            gy.data.data() + (((n * co + o) * out[0] + ox) * out[1] + oy) * out[2];
                        float* dst = gx.data.data() +
                                     (((n * ci + i) * in[0] + ixp) * in[1] + iyp) * in[2];
                        for (int64_t oz = 0; oz < out[2]; ++oz) {
                          const int64_t izp = oz * stride[2] - pad[2] + kz;
                          if (izp < 0 || izp >= in[2]) continue;
                          dst[izp] += wv * gp[oz];
                        }
                      }
                    }
                  }
      }
    });
    return id;
  }

  // Transposed conv with kernel == stride (no overlap), the decoder
  // upsampling flavor. x (N, Ci, ...), w (Ci, Co, kx, ky, kz), b (Co).
  NodeId conv_transpose3d(NodeId x, NodeId w, NodeId b, std::array<int64_t, 3> k) {
    const Tensor& X = value(x);
    const Tensor& W = value(w);
    const Tensor& B = value(b);
    if (X.rank() != 5 || W.rank() != 5) throw ContractError("conv_transpose3d: rank must be 5");
    if (X.dim(1) != W.dim(0)) throw ContractError("conv_transpose3d: channel mismatch");
    if (W.dim(2) != k[0] || W.dim(3) != k[1] || W.dim(4) != k[2])
      throw ContractError("conv_transpose3d: kernel/stride mismatch");
    const int64_t n_batch = X.dim(0), ci = X.dim(1), co = W.dim(1);
    if (B.numel() != co) throw ContractError("conv_transpose3d: bias mismatch");
    const std::array<int64_t, 3> in{X.dim(2), X.dim(3), X.dim(4)};
    const std::array<int64_t, 3> out{in[0] * k[0], in[1] * k[1], in[2] * k[2]};
    const int64_t v_in = in[0] * in[1] * in[2];
    const int64_t kk = k[0] * k[1] * k[2];
    const int64_t cok = co * kk;

    Tensor y = Tensor::zeros({n_batch, co, out[0], out[1], out[2]});
    std::vector<float>& tmp = scratch(v_in * cok);
    for (int64_t n = 0; n < n_batch; ++n) {
      CMapX xm(X.data.data() + n * ci * v_in, v_in, ci);
      CMapX wm(W.data.data(), cok, ci);
      MapX tm(tmp.data(), v_in, cok);
      tm.noalias() = xm * wm.transpose();
      scatter_blocks(tmp.data(), y.data.data() + n * co * out[0] * out[1] * out[2], in, out, k,
                     co, B.data.data(), /*forward=*/true);
    }
    const NodeId id = make(std::move(y));
    set_backprop(id, [x, w, b, k, n_batch, ci, co, in, out, v_in, kk, cok](Graph& g,
                                                                           NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      const Tensor& X = g.value(x);
      const Tensor& W = g.value(w);
      Tensor& gx = g.grad_buf(x);
      Tensor& gw = g.grad_buf(w);
      Tensor& gb = g.grad_buf(b);

      std::vector<float>& gtmp = g.scratch(v_in * cok);
      for (int64_t n = 0; n < n_batch; ++n) {
        scatter_blocks(gtmp.data(), const_cast<float*>(gy.data.data()) +
                                        n * co * out[0] * out[1] * out[2],
                       in, out, k, co, nullptr, /*forward=*/false);
        CMapX gtm(gtmp.data(), v_in, cok);
        CMapX xm(X.data.data() + n * ci * v_in, v_in, ci);
        CMapX wm(W.data.data(), cok, ci);
        MapX gxm(gx.data.data() + n * ci * v_in, v_in, ci);
        gxm.noalias() += gtm * wm;
        MapX gwm(gw.data.data(), cok, ci);
        gwm.noalias() += gtm.transpose() * xm;
        for (int64_t c = 0; c < co; ++c) {
          const float* gp = gy.data.data() + (n * co + c) * out[0] * out[1] * out[2];
          double s = 0.0;
          for (int64_t i = 0; i < out[0] * out[1] * out[2]; ++i) s += gp[i];
          gb.data[static_cast<size_t>(c)] += static_cast<float>(s);
        }
      }
    });
    return id;
  }

  // Trilinear x2 upsampling of (N, C, X, Y, Z), centers-aligned
  // (align_corners = false).
  NodeId upsample2x(NodeId x) {
    const Tensor& X = value(x);
    if (X.rank() != 5) throw ContractError("upsample2x: rank must be 5");
    Tensor y = upsample_pass(X);
    const NodeId id = make(std::move(y));
    set_backprop(id, [x](Graph& g, NodeId self) {
      const Tensor& gy = g.nodes_[static_cast<size_t>(self)].grad;
      Tensor gxa = upsample_adjoint(gy, g.value(x).shape);
      Tensor& gx = g.grad_buf(x);
      for (size_t i = 0; i < gxa.data.size(); ++i) gx.data[i] += gxa.data[i];
    });
    return id;
  }

  Tensor& grad_buf(NodeId id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape);
    return n.grad;
  }

  std::vector<float>& scratch(int64_t n) {
    if (static_cast<int64_t>(scratch_.size()) < n) scratch_.resize(static_cast<size_t>(n));
    return scratch_;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Parameter* bound = nullptr;
    bool keep_grad = false;
    std::function<void(Graph&, NodeId)> backprop;
  };

  NodeId make(Tensor value, bool keep_grad = false) {
    nodes_.push_back(Node{std::move(value), Tensor(), nullptr, keep_grad, nullptr});
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  void set_backprop(NodeId id, std::function<void(Graph&, NodeId)> f) {
    nodes_[static_cast<size_t>(id)].backprop = std::move(f);
  }

  // Col (v_out rows x ci*K cols, col-major): column (ci, kx, ky, kz) holds
  // the input value at each output position, zero outside the border.
  static void im2col(const float* x, float* col, int64_t ci, const std::array<int64_t, 3>& in,
                     const std::array<int64_t, 3>& k, const std::array<int64_t, 3>& stride,
                     const std::array<int64_t, 3>& pad, const std::array<int64_t, 3>& out) {
    const int64_t v_out = out[0] * out[1] * out[2];
    int64_t ck = 0;
    for (int64_t c = 0; c < ci; ++c)
      for (int64_t kx = 0; kx < k[0]; ++kx)
        for (int64_t ky = 0; ky < k[1]; ++ky)
          for (int64_t kz = 0; kz < k[2]; ++kz, ++ck) {
            float* dst = col + ck * v_out;
            const float* src_c = x + c * in[0] * in[1] * in[2];
            for (int64_t ox = 0; ox < out[0]; ++ox) {
              const int64_t ix = ox * stride[0] - pad[0] + kx;
              if (ix < 0 || ix >= in[0]) {
                std::fill_n(dst, out[1] * out[2], 0.0f);
                dst += out[1] * out[2];
                continue;
              }
              for (int64_t oy = 0; oy < out[1]; ++oy) {
                const int64_t iy = oy * stride[1] - pad[1] + ky;
                if (iy < 0 || iy >= in[1]) {
                  std::fill_n(dst, out[2], 0.0f);
                  dst += out[2];
                  continue;
                }
                const float* line = src_c + (ix * in[1] + iy) * in[2];
                if (stride[2] == 1) {
                  const int64_t start = std::max<int64_t>(0, pad[2] - kz);
                  const int64_t stop =
                      std::min<int64_t>(out[2], in[2] + pad[2] - kz);
                  for (int64_t oz = 0; oz < start; ++oz) dst[oz] = 0.0f;
                  for (int64_t oz = start; oz < stop; ++oz) dst[oz] = line[oz - pad[2] + kz];
                  for (int64_t oz = stop; oz < out[2]; ++oz) dst[oz] = 0.0f;
                } else {
                  for (int64_t oz = 0; oz < out[2]; ++oz) {
                    const int64_t iz = oz * stride[2] - pad[2] + kz;
                    dst[oz] = (iz >= 0 && iz < in[2]) ? line[iz] : 0.0f;
                  }
                }
                dst += out[2];
              }
            }
          }
  }

  // forward: tmp (v_in x co*kk, col-major) scattered into the output grid;
  // backward: gathered back.
  static void scatter_blocks(float* tmp, float* y, const std::array<int64_t, 3>& in,
                             const std::array<int64_t, 3>& out, const std::array<int64_t, 3>& k,
                             int64_t co, const float* bias, bool forward) {
    const int64_t v_in = in[0] * in[1] * in[2];
    const int64_t kk = k[0] * k[1] * k[2];
    for (int64_t c = 0; c < co; ++c)
      for (int64_t kx = 0; kx < k[0]; ++kx)
        for (int64_t ky = 0; ky < k[1]; ++ky)
          for (int64_t kz = 0; kz < k[2]; ++kz) {
            const int64_t col_idx = c * kk + (kx * k[1] + ky) * k[2] + kz;
            float* t = tmp + col_idx * v_in;
            const float b = bias ? bias[c] : 0.0f;
            for (int64_t ix = 0; ix < in[0]; ++ix)
              for (int64_t iy = 0; iy < in[1]; ++iy) {
                float* yline =
                    y + ((c * out[0] + ix * k[0] + kx) * out[1] + iy * k[1] + ky) * out[2] +
                    kz;
                float* tline = t + (ix * in[1] + iy) * in[2];
                if (forward) {
                  for (int64_t iz = 0; iz < in[2]; ++iz)
                    yline[iz * k[2]] = tline[iz] + b;
                } else {
                  for (int64_t iz = 0; iz < in[2]; ++iz) tline[iz] = yline[iz * k[2]];
                }
              }
          }
  }

  static Tensor roll_copy(const Tensor& X, std::array<int64_t, 3> shift) {
    const int64_t n_batch = X.dim(0), c = X.dim(4);
    const std::array<int64_t, 3> d{X.dim(1), X.dim(2), X.dim(3)};
    const auto wrap = [](int64_t v, int64_t n) { return ((v % n) + n) % n; };
    Tensor y = Tensor::zeros(X.shape);
    for (int64_t n = 0; n < n_batch; ++n)
      for (int64_t xx = 0; xx < d[0]; ++xx) {
        const int64_t sx = wrap(xx - shift[0], d[0]);
        for (int64_t yy = 0; yy < d[1]; ++yy) {
          const int64_t sy = wrap(yy - shift[1], d[1]);
          for (int64_t zz = 0; zz < d[2]; ++zz) {
            const int64_t sz = wrap(zz - shift[2], d[2]);
            std::copy_n(X.data.data() + (((n * d[0] + sx) * d[1] + sy) * d[2] + sz) * c, c,
                        y.data.data() + (((n * d[0] + xx) * d[1] + yy) * d[2] + zz) * c);
          }
        }
      }
    return y;
  }

  // forward=true: full -> windows; forward=false: windows -> full.
  static void partition_copy(const float* full_or_dst, const float* win_or_src, int64_t n_batch,
                             const std::array<int64_t, 3>& grid, const std::array<int64_t, 3>& w,
                             int64_t c, bool forward) {
    const std::array<int64_t, 3> nw{grid[0] / w[0], grid[1] / w[1], grid[2] / w[2]};
    float* dst_w = const_cast<float*>(win_or_src);
    float* dst_f = const_cast<float*>(full_or_dst);
    int64_t widx = 0;
    for (int64_t n = 0; n < n_batch; ++n)
      for (int64_t wx = 0; wx < nw[0]; ++wx)
        for (int64_t wy = 0; wy < nw[1]; ++wy)
          for (int64_t wz = 0; wz < nw[2]; ++wz, ++widx) {
            int64_t t = 0;
            for (int64_t dx = 0; dx < w[0]; ++dx)
              for (int64_t dy = 0; dy < w[1]; ++dy)
                for (int64_t dz = 0; dz < w[2]; ++dz, ++t) {
                  const int64_t gx = wx * w[0] + dx, gy = wy * w[1] + dy, gz = wz * w[2] + dz;
                  const int64_t foff = (((n * grid[0] + gx) * grid[1] + gy) * grid[2] + gz) * c;
                  const int64_t woff = (widx * w[0] * w[1] * w[2] + t) * c;
                  if (forward)
                    std::copy_n(dst_f + foff, c, dst_w + woff);
                  else
                    std::copy_n(dst_w + woff, c, dst_f + foff);
                }
          }
  }

  // One trilinear doubling pass per axis; weights (0.25, 0.75) with
  // replicated borders.
  static Tensor upsample_pass(const Tensor& X) {
    Tensor cur = X;
    for (int axis = 2; axis <= 4; ++axis) {
      const int64_t n_pre = [&] {
        int64_t p = 1;
        for (int i = 0; i < axis; ++i) p *= cur.dim(i);
        return p;
      }();
      const int64_t n_axis = cur.dim(axis);
      const int64_t n_post = cur.numel() / (n_pre * n_axis);
      std::vector<int64_t> out_shape = cur.shape;
      out_shape[static_cast<size_t>(axis)] = n_axis * 2;
      Tensor next = Tensor::zeros(out_shape);
      for (int64_t p = 0; p < n_pre; ++p)
        for (int64_t o = 0; o < n_axis * 2; ++o) {
          const int64_t m = o / 2;
          int64_t lo, hi;
          float wlo, whi;
          if (o % 2 == 0) {
            lo = std::max<int64_t>(0, m - 1);
            hi = m;
            wlo = 0.25f;
            whi = 0.75f;
          } else {
            lo = m;
            hi = std::min<int64_t>(n_axis - 1, m + 1);
            wlo = 0.75f;
            whi = 0.25f;
          }
          const float* src_lo = cur.data.data() + (p * n_axis + lo) * n_post;
          const float* src_hi = cur.data.data() + (p * n_axis + hi) * n_post;
          float* dst = next.data.data() + (p * n_axis * 2 + o) * n_post;
          for (int64_t i = 0; i < n_post; ++i) dst[i] = wlo * src_lo[i] + whi * src_hi[i];
        }
      cur = std::move(next);
    }
    return cur;
  }

  static Tensor upsample_adjoint(const Tensor& GY, const std::vector<int64_t>& x_shape) {
    Tensor cur = GY;
    for (int axis = 4; axis >= 2; --axis) {
      const int64_t n_axis_out = cur.dim(axis);
      const int64_t n_axis_in = x_shape[static_cast<size_t>(axis)] *
                                (axis == 2 ? 1 : 1);  // halves below
      (void)n_axis_in;
      const int64_t n_half = n_axis_out / 2;
      const int64_t n_pre = [&] {
        int64_t p = 1;
        for (int i = 0; i < axis; ++i) p *= cur.dim(i);
        return p;
      }();
      const int64_t n_post = cur.numel() / (n_pre * n_axis_out);
      std::vector<int64_t> out_shape = cur.shape;
      out_shape[static_cast<size_t>(axis)] = n_half;
      Tensor next = Tensor::zeros(out_shape);
      for (int64_t p = 0; p < n_pre; ++p)
        for (int64_t o = 0; o < n_axis_out; ++o) {
          const int64_t m = o / 2;
          int64_t lo, hi;
          float wlo, whi;
          if (o % 2 == 0) {
            lo = std::max<int64_t>(0, m - 1);
            hi = m;
            wlo = 0.25f;
            whi = 0.75f;
          } else {
            lo = m;
            hi = std::min<int64_t>(n_half - 1, m + 1);
            wlo = 0.75f;
            whi = 0.25f;
          }
          const float* src = cur.data.data() + (p * n_axis_out + o) * n_post;
          float* dst_lo = next.data.data() + (p * n_half + lo) * n_post;
          float* dst_hi = next.data.data() + (p * n_half + hi) * n_post;
          for (int64_t i = 0; i < n_post; ++i) {
            dst_lo[i] += wlo * src[i];
            dst_hi[i] += whi * src[i];
          }
        }
      cur = std::move(next);
    }
    return cur;
  }

  std::vector<Node> nodes_;
  std::vector<float> scratch_;
};

}  // namespace petseg::nn
