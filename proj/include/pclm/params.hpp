#pragma once

#include <map>
#include <string>
#include <string_view>

#include "pclm/error.hpp"
#include "pclm/rng.hpp"
#include "pclm/tensor.hpp"

namespace pclm {

inline constexpr std::string_view kEncoderPrefix = "encoder.";
inline constexpr std::string_view kPathwayPrefix = "pathway.";

// Named trainable tensors, ordered by name. Model structs hold handles that
// share storage with the entries here.
class ParameterStore {
 public:
  const Tensor& add(const std::string& name, Tensor t) {
    t.set_requires_grad(true);
    auto [it, inserted] = tensors_.emplace(name, std::move(t));
    if (!inserted) throw ContractError("parameter '" + name + "' registered twice");
    return it->second;
  }

  bool contains(const std::string& name) const { return tensors_.contains(name); }

  const Tensor& get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw MissingTensorError("missing tensor '" + name + "'");
    return it->second;
  }

  Tensor& get_mut(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw MissingTensorError("missing tensor '" + name + "'");
    return it->second;
  }

  const std::map<std::string, Tensor>& tensors() const { return tensors_; }
  std::map<std::string, Tensor>& tensors() { return tensors_; }

  bool has_prefix(std::string_view prefix) const {
    for (const auto& [name, t] : tensors_)
      if (name.starts_with(prefix)) return true;
    return false;
  }

  // Number of scalars held under `prefix` (empty prefix: everything).
  std::size_t scalar_count(std::string_view prefix = {}) const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors_)
      if (name.starts_with(prefix)) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : tensors_) t.zero_grad();
  }

  ParameterStore clone() const {
    ParameterStore out;
    for (const auto& [name, t] : tensors_) out.add(name, t.detach());
    return out;
  }

  ParameterStore subset(std::string_view prefix) const {
    ParameterStore out;
    for (const auto& [name, t] : tensors_)
      if (name.starts_with(prefix)) out.add(name, t.detach());
    return out;
  }

 private:
  std::map<std::string, Tensor> tensors_;
};

inline Tensor normal_init(Rng& rng, Shape shape, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = rng.normal(0.0, stddev);
  return t;
}

inline Tensor uniform_init(Rng& rng, Shape shape, double bound) {
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace pclm
