#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <memory>
#include <string>
#include <vector>

#include "petseg/errors.hpp"
#include "petseg/nn/graph.hpp"
#include "petseg/rng.hpp"
#include "petseg/tensor.hpp"
#include "petseg/volume.hpp"

namespace petseg {

enum class ModelKind { DYNUNET, SWIN_UNETR, SEGRESNET, UNET };
enum class WidthPreset { TOY, PAPER };

inline const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::DYNUNET: return "DYNUNET";
    case ModelKind::SWIN_UNETR: return "SWIN_UNETR";
    case ModelKind::SEGRESNET: return "SEGRESNET";
    case ModelKind::UNET: return "UNET";
  }
  return "?";
}

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "DYNUNET") return ModelKind::DYNUNET;
  if (s == "SWIN_UNETR") return ModelKind::SWIN_UNETR;
  if (s == "SEGRESNET") return ModelKind::SEGRESNET;
  if (s == "UNET") return ModelKind::UNET;
  throw ConfigError("unknown model kind: " + s);
}

inline const char* to_string(WidthPreset p) { return p == WidthPreset::TOY ? "TOY" : "PAPER"; }

inline WidthPreset width_preset_from_string(const std::string& s) {
  if (s == "TOY") return WidthPreset::TOY;
  if (s == "PAPER") return WidthPreset::PAPER;
  throw ConfigError("unknown width preset: " + s);
}

// Patch sizes: DynUNet/UNet (128,160,112), SwinUNETR (96,96,96), SegResNet
// (192,192,192); the TOY preset divides each by 4.
inline Shape3 default_patch_size(ModelKind kind, WidthPreset preset) {
  Shape3 paper;
  switch (kind) {
    case ModelKind::DYNUNET:
    case ModelKind::UNET: paper = {128, 160, 112}; break;
    case ModelKind::SWIN_UNETR: paper = {96, 96, 96}; break;
    case ModelKind::SEGRESNET: paper = {192, 192, 192}; break;
  }
  if (preset == WidthPreset::PAPER) return paper;
  return {paper[0] / 4, paper[1] / 4, paper[2] / 4};
}

// Per-axis product of the encoder strides; every input dimension must be a
// multiple. The TOY presets drop one downsampling stage, and the TOY
// DynUNet/UNet final stage strides (2,2,1) because a (., ., 28) patch only
// carries two factors of two on z.
inline Shape3 stride_divisor(ModelKind kind, WidthPreset preset) {
  const bool toy = preset == WidthPreset::TOY;
  switch (kind) {
    case ModelKind::DYNUNET:
    case ModelKind::UNET: return toy ? Shape3{8, 8, 4} : Shape3{16, 16, 16};
    case ModelKind::SEGRESNET: return toy ? Shape3{4, 4, 4} : Shape3{8, 8, 8};
    case ModelKind::SWIN_UNETR: return toy ? Shape3{8, 8, 8} : Shape3{16, 16, 16};
  }
  return {1, 1, 1};
}

struct ModelConfig {
  ModelKind kind = ModelKind::DYNUNET;
  int64_t in_channels = 2;
  int64_t out_channels = 1;
  Shape3 patch_size{0, 0, 0};  // zero means "default for kind/preset"
  WidthPreset width_preset = WidthPreset::TOY;
  uint64_t seed = 0;

  ModelConfig resolved() const {
    ModelConfig c = *this;
    if (c.patch_size[0] == 0) c.patch_size = default_patch_size(kind, width_preset);
    return c;
  }

  void validate() const {
    if (in_channels < 1) throw ConfigError("ModelConfig: in_channels must be >= 1");
    if (out_channels != 1) throw ConfigError("ModelConfig: out_channels must be 1");
    const ModelConfig c = resolved();
    const Shape3 div = stride_divisor(kind, width_preset);
    for (int a = 0; a < 3; ++a) {
      if (c.patch_size[a] < div[a] || c.patch_size[a] % div[a] != 0)
        throw ConfigError("ModelConfig: patch dim " + std::to_string(c.patch_size[a]) +
                          " not divisible by the " + std::string(to_string(kind)) +
                          " stride product " + std::to_string(div[a]));
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

// A parameterized segmentation network mapping (N, in_channels, X, Y, Z)
// logits of shape (N, 1, X, Y, Z). Forward accepts any spatial size that the
// encoder strides divide. Inference shares a model freely; training mutates
// parameters and needs exclusive access.
class Model {
 public:
  explicit Model(const ModelConfig& config) : config_(config.resolved()) {}
  virtual ~Model() = default;

  const ModelConfig& config() const { return config_; }

  virtual nn::Graph::NodeId build(nn::Graph& g, nn::Graph::NodeId input) = 0;

  Tensor forward(const Tensor& x) {
    validate_input(x);
    nn::Graph g;
    const auto in = g.leaf(x);
    const auto out = build(g, in);
    return g.value(out);
  }

  void validate_input(const Tensor& x) const {
    if (x.rank() != 5 || x.dim(1) != config_.in_channels)
      throw ContractError(std::string(to_string(config_.kind)) + ": input must be (N," +
                          std::to_string(config_.in_channels) + ",X,Y,Z), got " + x.shape_str());
    const Shape3 div = stride_divisor(config_.kind, config_.width_preset);
    for (int a = 0; a < 3; ++a)
      if (x.dim(2 + a) % div[a] != 0 || x.dim(2 + a) < div[a])
        throw ContractError(std::string(to_string(config_.kind)) +
                            ": spatial dims must be multiples of the stride product");
  }

  std::deque<nn::Parameter>& parameters() { return params_; }
  const std::deque<nn::Parameter>& parameters() const { return params_; }

  std::vector<nn::Parameter*> parameter_ptrs() {
    std::vector<nn::Parameter*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }

  int64_t parameter_count() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

 protected:
  nn::Parameter* add_param(const std::string& name, std::vector<int64_t> shape) {
    params_.emplace_back(name, Tensor::zeros(std::move(shape)));
    return &params_.back();
  }

  nn::Parameter* add_uniform(const std::string& name, std::vector<int64_t> shape,
                             int64_t fan_in) {
    nn::Parameter* p = add_param(name, std::move(shape));
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : p->value.data) v = static_cast<float>(init_rng_.uniform(-s, s));
    return p;
  }

  nn::Parameter* add_const(const std::string& name, std::vector<int64_t> shape, float value) {
    nn::Parameter* p = add_param(name, std::move(shape));
    std::fill(p->value.data.begin(), p->value.data.end(), value);
    return p;
  }

  nn::Parameter* add_trunc_normal(const std::string& name, std::vector<int64_t> shape,
                                  double stddev) {
    nn::Parameter* p = add_param(name, std::move(shape));
    for (auto& v : p->value.data) {
      double d = init_rng_.normal(0.0, stddev);
      d = std::clamp(d, -2.0 * stddev, 2.0 * stddev);
      v = static_cast<float>(d);
    }
    return p;
  }

  void seed_init_rng() { init_rng_ = Rng(config_.seed); }

  ModelConfig config_;
  std::deque<nn::Parameter> params_;
  Rng init_rng_{0};
};

// Reusable parameterized pieces wired into a Graph at build time.
namespace arch {

using NodeId = nn::Graph::NodeId;
using A3 = std::array<int64_t, 3>;

struct ConvP {
  nn::Parameter* w = nullptr;
  nn::Parameter* b = nullptr;
  A3 stride{1, 1, 1};
  A3 pad{0, 0, 0};
  NodeId operator()(nn::Graph& g, NodeId x) const {
    return g.conv3d(x, g.param(*w), g.param(*b), stride, pad);
  }
};

struct ConvTP {
  nn::Parameter* w = nullptr;
  nn::Parameter* b = nullptr;
  A3 kernel{2, 2, 2};
  NodeId operator()(nn::Graph& g, NodeId x) const {
    return g.conv_transpose3d(x, g.param(*w), g.param(*b), kernel);
  }
};

struct NormP {
  nn::Parameter* gamma = nullptr;
  nn::Parameter* beta = nullptr;
  int64_t groups = 0;  // 0 = instance norm
  NodeId operator()(nn::Graph& g, NodeId x) const {
    if (groups == 0) return g.instance_norm(x, g.param(*gamma), g.param(*beta));
    return g.group_norm(x, g.param(*gamma), g.param(*beta), groups);
  }
};

struct LinearP {
  nn::Parameter* w = nullptr;
  nn::Parameter* b = nullptr;
  NodeId operator()(nn::Graph& g, NodeId x) const {
    return g.linear(x, g.param(*w), g.param(*b));
  }
};

}  // namespace arch

}  // namespace petseg
