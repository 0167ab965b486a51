#include "hydet/optim.hpp"

namespace hydet {

template <typename T>
void sgd_step(std::vector<Tensor<T>>& params, std::vector<std::vector<T>>& velocity,
              const SgdOptions& options, const std::vector<char>& decay_mask) {
  if (!(options.lr > 0.0)) throw ConfigError("sgd_step: learning rate must be positive");
  if (!decay_mask.empty() && decay_mask.size() != params.size()) {
    throw Error("sgd_step: decay mask length differs from the parameter count");
  }
  if (velocity.size() != params.size()) velocity.resize(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& param = params[p];
    if (!param.has_grad()) {
      throw Error("sgd_step: parameter " + std::to_string(p) + " " + to_string(param.shape()) +
                  " has no gradient");
    }
    auto value = param.mutable_data();
    const auto grad = param.grad();
    auto& v = velocity[p];
    if (v.size() != value.size()) v.assign(value.size(), T(0));
    const double wd = (decay_mask.empty() || decay_mask[p]) ? options.weight_decay : 0.0;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = static_cast<double>(grad[i]) + wd * value[i];
      v[i] = static_cast<T>(options.momentum * v[i] + g);
      value[i] = static_cast<T>(value[i] - options.lr * v[i]);
    }
  }
}

template <typename T>
void zero_grad(std::vector<Tensor<T>>& params) {
  for (auto& p : params) p.zero_grad();
}

template void sgd_step<float>(std::vector<Tensor<float>>&, std::vector<std::vector<float>>&, const SgdOptions&,
                              const std::vector<char>&);
template void sgd_step<double>(std::vector<Tensor<double>>&, std::vector<std::vector<double>>&,
                               const SgdOptions&, const std::vector<char>&);
template void zero_grad<float>(std::vector<Tensor<float>>&);
template void zero_grad<double>(std::vector<Tensor<double>>&);

}  // namespace hydet
