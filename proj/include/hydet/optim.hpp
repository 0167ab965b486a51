#pragma once

#include <vector>

#include "hydet/tensor.hpp"

namespace hydet {

struct SgdOptions {
  double lr = 0.01;
  double momentum = 0.0;
  double weight_decay = 0.0;
};

/// SGD with heavy-ball momentum and coupled weight decay, applied in place:
///   v <- momentum * v + grad + weight_decay * param
///   param <- param - lr * v
/// `velocity` holds one buffer per parameter and is sized on first use.
/// When `decay_mask` is non-empty, weight decay applies only to parameters
/// whose flag is set.
template <typename T>
void sgd_step(std::vector<Tensor<T>>& params, std::vector<std::vector<T>>& velocity,
              const SgdOptions& options, const std::vector<char>& decay_mask = {});

template <typename T>
void zero_grad(std::vector<Tensor<T>>& params);

}  // namespace hydet
