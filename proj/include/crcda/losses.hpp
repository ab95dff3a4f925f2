#pragma once

// Loss functionals over probability maps. All spatial sums are means over
// positions so that weights do not depend on resolution.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "crcda/ops.hpp"
#include "crcda/scene.hpp"
#include "crcda/tape.hpp"

namespace crcda {

struct LossWeights {
  double lambda_cr = 5e-3;
  double lambda_ent = 2.5e-5;
  double lambda_D = 2.5e-5;

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

inline void validate(const LossWeights& w) {
  if (!(w.lambda_cr >= 0 && w.lambda_ent >= 0 && w.lambda_D >= 0))
    throw ConfigError("loss weights must be nonnegative");
}

struct AemmSchedule {
  std::size_t max_iter = 3000;
  double power = 0.9;
};

/// (1 - iter/max_iter)^power, clamped to 0 past the end.
inline double lambda_r(std::size_t iter, const AemmSchedule& s) {
  require(s.max_iter > 0, "lambda_r: max_iter must be positive");
  if (iter >= s.max_iter) return 0.0;
  return std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(s.max_iter), s.power);
}

/// R(P) = lambda_R * mean_c P_c log P_c for one probability vector.
inline double aemm_regularizer(std::span<const double> p, double lambda_R) {
  double s = 0.0;
  for (double v : p) s += v * std::log(std::max(v, kProbFloor));
  return lambda_R * s / static_cast<double>(p.size());
}

namespace detail {

/// One-hot mask with the layout of a [N,K,h,w] map; labels are N*h*w row-major.
template <class T>
Tensor<T> one_hot_mask(const Shape& s, std::span<const std::int32_t> labels, const char* what) {
  require(s.size() == 4, std::string(what) + ": probability map must be [N,K,h,w]");
  const std::size_t N = s[0], K = s[1], hw = s[2] * s[3];
  require(labels.size() == N * hw, std::string(what) + ": label count " + std::to_string(labels.size()) +
                                       " does not match map " + shape_str(s));
  Tensor<T> m(s);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < hw; ++p) {
      const auto l = labels[n * hw + p];
      require(l >= 0 && static_cast<std::size_t>(l) < K,
              std::string(what) + ": label " + std::to_string(l) + " out of range [0," + std::to_string(K) + ")");
      m[(n * K + static_cast<std::size_t>(l)) * hw + p] = T(1);
    }
  return m;
}

template <class T>
std::size_t positions(Var<T> p) {
  const Shape& s = p.shape();
  return s[0] * s[2] * s[3];
}

}  // namespace detail

/// Mean over positions of -log P at the labelled index. Works for the pixel map
/// (labels = classes) and for region maps (labels = contextual-relation ids).
template <class T>
Var<T> nll_loss(Var<T> p, std::span<const std::int32_t> labels, const char* what = "nll_loss") {
  auto mask = p.tape->constant(detail::one_hot_mask<T>(p.shape(), labels, what));
  const T k = T(-1) / static_cast<T>(detail::positions(p));
  return scale(sum(mul(mask, log_floor(p))), k);
}

template <class T>
Var<T> seg_loss(Var<T> p, std::span<const std::int32_t> labels) {
  return nll_loss(p, labels, "seg_loss");
}

template <class T>
Var<T> cr_loss(Var<T> p_cr, std::span<const std::int32_t> labels) {
  return nll_loss(p_cr, labels, "cr_loss");
}

/// -(1/c_norm) * mean over positions of sum_n max{P log P - R(P), 0}, with R taken
/// per position over the channel axis.
template <class T>
Var<T> aemm_entropy_loss(Var<T> p, T lambda_R, T c_norm) {
  require(c_norm > T(0), "aemm_entropy_loss: c_norm must be positive");
  auto plogp = mul(p, log_floor(p));
  auto reg = broadcast_channels(scale(mean_channels(plogp), lambda_R), p.shape()[1]);
  auto kept = clamp_min0(sub(plogp, reg));
  return scale(sum(kept), T(-1) / (c_norm * static_cast<T>(detail::positions(p))));
}

/// Plain entropy: -(1/c_norm) * mean over positions of sum_c P log P.
template <class T>
Var<T> minent_loss(Var<T> p, T c_norm) {
  require(c_norm > T(0), "minent_loss: c_norm must be positive");
  return scale(sum(mul(p, log_floor(p))), T(-1) / (c_norm * static_cast<T>(detail::positions(p))));
}

template <class T>
struct DomainLossTerms {
  Var<T> bce_s;  // mean -log D_s
  Var<T> bce_t;  // mean -log(1 - D_t)
  Var<T> ent_s;  // mean -D_s log D_s
  Var<T> ent_t;  // mean -D_t log D_t
  Var<T> total;  // bce_s + bce_t + ent_s + ent_t

  /// Log-likelihood form of the domain game: -bce_s - bce_t + ent_s + ent_t.
  /// The domain classifier ascends this value; everything upstream descends it.
  Var<T> game_value() const { return add(sub(ent_s, bce_s), sub(ent_t, bce_t)); }
};

/// Domain classifier losses with source -> 1, target -> 0.
template <class T>
DomainLossTerms<T> domain_loss(Var<T> d_s, Var<T> d_t) {
  auto ent = [](Var<T> d) { return scale(mean(mul(d, log_floor(d))), T(-1)); };
  DomainLossTerms<T> r;
  r.bce_s = scale(mean(log_floor(d_s)), T(-1));
  r.bce_t = scale(mean(log_floor(affine(d_t, T(-1), T(1)))), T(-1));
  r.ent_s = ent(d_s);
  r.ent_t = ent(d_t);
  r.total = add(add(r.bce_s, r.bce_t), add(r.ent_s, r.ent_t));
  return r;
}

/// Flattens label maps (one per batch item) into the N*H*W layout used above.
inline std::vector<std::int32_t> flatten_labels(const std::vector<const LabelMap*>& maps) {
  std::vector<std::int32_t> out;
  for (const auto* m : maps) out.insert(out.end(), m->labels.begin(), m->labels.end());
  return out;
}

}  // namespace crcda
