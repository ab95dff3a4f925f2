#pragma once

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "crcda/error.hpp"
#include "crcda/params.hpp"

namespace crcda {

struct OptimizerConfig {
  double lr0 = 2.5e-4;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double power = 0.9;

  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

inline void validate(const OptimizerConfig& c) {
  if (!(c.lr0 > 0 && c.momentum > 0 && c.weight_decay > 0 && c.power > 0))
    throw ConfigError("optimizer: lr0, momentum, weight_decay and power must all be positive");
}

/// lr0 * (1 - iter/max_iter)^power; zero at and past max_iter.
inline double poly_lr(std::size_t iter, const OptimizerConfig& c, std::size_t max_iter) {
  if (max_iter == 0 || iter >= max_iter) return iter == 0 && max_iter == 0 ? c.lr0 : 0.0;
  return c.lr0 * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), c.power);
}

/// Momentum buffers keyed by "group/name".
template <class T>
struct OptimizerState {
  std::map<std::string, std::vector<T>> velocity;

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

inline std::string param_key(const std::string& group, const std::string& name) { return group + "/" + name; }

/// v <- momentum*v + (g + wd*p); p <- p - lr*v, over every tensor of every group.
/// A non-finite gradient aborts the whole step before anything is modified.
template <class T, class Groups>
void sgd_step(Groups& groups, OptimizerState<T>& state, double lr, const OptimizerConfig& cfg) {
  for (auto* g : groups)
    for (auto& [name, p] : *g) {
      if (!p.has_grad()) continue;
      const auto grad = std::as_const(p).grad();
      for (std::size_t i = 0; i < grad.size(); ++i)
        if (!std::isfinite(grad[i]))
          throw PipelineError("non-finite gradient in " + param_key(g->name(), name) + " at element " +
                              std::to_string(i) + "; step aborted");
    }
  const T m = static_cast<T>(cfg.momentum), wd = static_cast<T>(cfg.weight_decay), step = static_cast<T>(lr);
  for (auto* g : groups)
    for (auto& [name, p] : *g) {
      auto& v = state.velocity[param_key(g->name(), name)];
      if (v.empty()) v.assign(p.size(), T(0));
      require(v.size() == p.size(), "sgd_step: momentum buffer shape mismatch for " + param_key(g->name(), name));
      auto data = p.data();
      std::span<const T> gs;
      if (p.has_grad()) gs = std::as_const(p).grad();
      for (std::size_t i = 0; i < v.size(); ++i) {
        const T gi = gs.empty() ? T(0) : gs[i];
        v[i] = m * v[i] + (gi + wd * data[i]);
        data[i] -= step * v[i];
      }
    }
}

}  // namespace crcda
