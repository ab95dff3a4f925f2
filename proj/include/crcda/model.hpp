#pragma once

// Feature extractor E, pixel head C_seg, two region heads C_cr and the domain
// classifier C_D. All tensors are NCHW.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "crcda/crlabels.hpp"
#include "crcda/ops.hpp"
#include "crcda/params.hpp"
#include "crcda/tape.hpp"

namespace crcda {

struct ModelConfig {
  std::size_t height = 64;
  std::size_t width = 128;
  std::size_t in_channels = 3;
  std::size_t feature_channels = 32;
  std::size_t stride = 4;
  std::size_t num_classes = kNumClasses;
  // Zero means the head is absent (no contextual-relation labels available).
  std::array<std::size_t, 2> cr_classes{0, 0};
  std::array<RegionSize, 2> regions{{{8, 16}, {16, 32}}};
  std::size_t domain_channels = 32;

  bool has_cr() const { return cr_classes[0] > 0 && cr_classes[1] > 0; }
  std::size_t feature_h() const { return height / stride; }
  std::size_t feature_w() const { return width / stride; }
  /// Channels of the layout map fed to C_D.
  std::size_t layout_channels(bool with_cr) const {
    return num_classes + (with_cr ? cr_classes[0] + cr_classes[1] : 0);
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void validate(const ModelConfig& c) {
  if (c.stride != 4) throw ConfigError("model: feature stride is fixed at 4 by the extractor architecture");
  if (c.height % c.stride || c.width % c.stride)
    throw ConfigError("model: image size must be divisible by the feature stride");
  if (c.feature_channels == 0 || c.domain_channels == 0 || c.num_classes < 2)
    throw ConfigError("model: channel counts must be positive and num_classes >= 2");
  if (c.cr_classes[0] > 0 || c.cr_classes[1] > 0) {
    for (const auto& r : c.regions) {
      if (r.rh % c.stride || r.rw % c.stride)
        throw ConfigError("model: region sizes must be divisible by the feature stride");
      if (c.height % r.rh || c.width % r.rw) throw ConfigError("model: region sizes must tile the image");
    }
  }
}

inline const std::array<std::string, 5> kGroupNames = {"E", "Cseg", "Ccr1", "Ccr2", "CD"};

namespace detail {

/// He-normal weights (variance 2 / fan_in) drawn in double, zero bias.
template <class T>
void add_conv(ParamGroup<T>& g, const std::string& name, std::size_t co, std::size_t ci, std::size_t k,
              std::mt19937_64& rng) {
  const double sd = std::sqrt(2.0 / static_cast<double>(ci * k * k));
  std::normal_distribution<double> nd(0.0, sd);
  Tensor<T> w({co, ci, k, k});
  for (auto& v : w.data()) v = static_cast<T>(nd(rng));
  g.add(name + ".weight", std::move(w));
  g.add(name + ".bias", Tensor<T>({co}));
}

template <class T>
Var<T> conv(Tape<T>& t, ParamGroup<T>& g, const std::string& name, Var<T> x, std::size_t stride) {
  return conv2d(x, t.param(g.at(name + ".weight")), t.param(g.at(name + ".bias")), stride);
}

}  // namespace detail

template <class T>
class Model {
 public:
  Model() = default;

  Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    validate(cfg);
    // Each group draws from its own stream so that adding or removing a head
    // leaves every other group's initialisation unchanged.
    auto rng_for = [seed](std::uint64_t g) { return std::mt19937_64(seed * 0x9E3779B97F4A7C15ull + g + 1); };
    const std::size_t F = cfg.feature_channels;
    auto r = rng_for(0);
    detail::add_conv(E_, "conv1", F, cfg.in_channels, 3, r);
    detail::add_conv(E_, "conv2", F, F, 3, r);
    detail::add_conv(E_, "conv3", F, F, 3, r);
    r = rng_for(1);
    detail::add_conv(Cseg_, "cls", cfg.num_classes, F, 1, r);
    if (cfg.has_cr())
      for (std::size_t k = 0; k < 2; ++k) {
        r = rng_for(2 + k);
        detail::add_conv(Ccr_[k], "cls", cfg.cr_classes[k], F, 1, r);
      }
    r = rng_for(4);
    const std::size_t D = cfg.domain_channels;
    detail::add_conv(CD_, "conv1", D, cfg.layout_channels(cfg.has_cr()), 3, r);
    detail::add_conv(CD_, "conv2", D, D, 3, r);
    detail::add_conv(CD_, "out", 1, D, 1, r);
  }

  const ModelConfig& config() const { return cfg_; }

  /// [N,3,H,W] -> [N,F,H/4,W/4]: three 3x3 conv blocks at strides 2, 1, 2.
  Var<T> extract_features(Tape<T>& t, Var<T> x) {
    const Shape& s = x.shape();
    require(s.size() == 4 && s[1] == cfg_.in_channels && s[2] == cfg_.height && s[3] == cfg_.width,
            "extract_features: expected [N," + std::to_string(cfg_.in_channels) + "," + std::to_string(cfg_.height) +
                "," + std::to_string(cfg_.width) + "], got " + shape_str(s));
    auto h = relu(detail::conv(t, E_, "conv1", x, 2));
    h = relu(detail::conv(t, E_, "conv2", h, 1));
    return relu(detail::conv(t, E_, "conv3", h, 2));
  }

  /// [N,F,h,w] -> [N,C,H,W] class probabilities. Softmax is applied before the
  /// nearest upsampling, which gives the same values as the other order.
  Var<T> predict_pixel(Tape<T>& t, Var<T> f) {
    auto p = softmax_channels(detail::conv(t, Cseg_, "cls", f, 1));
    return upsample_nearest(p, cfg_.stride, cfg_.stride);
  }

  /// [N,F,h,w] -> [N,N_k,H/rh,W/rw] region-class probabilities for head k.
  Var<T> predict_cr(Tape<T>& t, Var<T> f, std::size_t k) {
    require(cfg_.has_cr(), "predict_cr: model has no contextual-relation heads");
    require(k < 2, "predict_cr: head index must be 0 or 1");
    const auto& r = cfg_.regions[k];
    auto pooled = avg_pool(f, r.rh / cfg_.stride, r.rw / cfg_.stride);
    return softmax_channels(detail::conv(t, Ccr_[k], "cls", pooled, 1));
  }

  /// Concatenates P with each region map upsampled to full resolution.
  Var<T> build_layout_map(Var<T> p, const std::vector<Var<T>>& p_cr) {
    std::vector<Var<T>> parts{p};
    for (std::size_t k = 0; k < p_cr.size(); ++k)
      parts.push_back(upsample_nearest(p_cr[k], cfg_.regions[k].rh, cfg_.regions[k].rw));
    return concat_channels(parts);
  }

  /// [N,L,H,W] -> [N,1,H/4,W/4] per-location probability of "source".
  /// The 4x4 average pool is the strided step; it exactly inverts the nearest
  /// upsampling of the layout blocks, so the convolutions run at feature resolution.
  Var<T> predict_domain(Tape<T>& t, Var<T> layout) {
    const Shape& s = layout.shape();
    require(s.size() == 4 && s[1] == CD_.at("conv1.weight").dim(1) && s[2] == cfg_.height && s[3] == cfg_.width,
            "predict_domain: layout map " + shape_str(s) + " does not match the domain classifier");
    auto h = avg_pool(layout, cfg_.stride, cfg_.stride);
    h = relu(detail::conv(t, CD_, "conv1", h, 1));
    h = relu(detail::conv(t, CD_, "conv2", h, 1));
    return sigmoid(detail::conv(t, CD_, "out", h, 1));
  }

  ParamGroup<T>& E() { return E_; }
  ParamGroup<T>& Cseg() { return Cseg_; }
  ParamGroup<T>& Ccr(std::size_t k) { return Ccr_.at(k); }
  ParamGroup<T>& CD() { return CD_; }

  /// Groups in fixed order: E, Cseg, Ccr1, Ccr2, CD. Absent heads are empty groups.
  std::array<ParamGroup<T>*, 5> groups() { return {&E_, &Cseg_, &Ccr_[0], &Ccr_[1], &CD_}; }
  std::array<const ParamGroup<T>*, 5> groups() const { return {&E_, &Cseg_, &Ccr_[0], &Ccr_[1], &CD_}; }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for (auto* g : groups()) n += g->numel();
    return n;
  }

  void zero_grad() {
    for (auto* g : groups()) g->zero_grad();
  }

  template <class U>
  Model<U> cast() const {
    Model<U> m;
    m.cfg_ = cfg_;
    auto src = groups();
    auto dst = m.groups();
    for (std::size_t i = 0; i < src.size(); ++i)
      for (const auto& [name, tensor] : *src[i]) dst[i]->add(name, tensor.template cast<U>());
    return m;
  }

 private:
  template <class>
  friend class Model;

  ModelConfig cfg_;
  ParamGroup<T> E_{"E"};
  ParamGroup<T> Cseg_{"Cseg"};
  std::array<ParamGroup<T>, 2> Ccr_{ParamGroup<T>("Ccr1"), ParamGroup<T>("Ccr2")};
  ParamGroup<T> CD_{"CD"};
};

/// Stacks images into one [N,3,H,W] tensor.
template <class T>
Tensor<T> stack_images(const std::vector<const Tensor<float>*>& imgs) {
  require(!imgs.empty(), "stack_images: empty batch");
  const Shape& s = imgs[0]->shape();
  require(s.size() == 3, "stack_images: images must be [3,H,W]");
  Tensor<T> out({imgs.size(), s[0], s[1], s[2]});
  const std::size_t per = imgs[0]->size();
  for (std::size_t n = 0; n < imgs.size(); ++n) {
    require(imgs[n]->shape() == s, "stack_images: image shapes differ");
    for (std::size_t i = 0; i < per; ++i) out[n * per + i] = static_cast<T>((*imgs[n])[i]);
  }
  return out;
}

}  // namespace crcda
