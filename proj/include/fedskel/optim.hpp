#pragma once

#include <vector>

#include "fedskel/tensor.hpp"

namespace fedskel {

struct SgdOptions {
    float learning_rate = 0.1f;
    float momentum = 0.9f;
    float weight_decay = 1e-4f;
};

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
///   v <- momentum * v + grad + weight_decay * w
///   w <- w - lr * v
/// Velocity buffers are created lazily (zero) the first time a parameter steps.
class SgdMomentum {
public:
    explicit SgdMomentum(SgdOptions options);

    void add_param(const Tensor& param);
    const std::vector<Tensor>& params() const { return params_; }
    const SgdOptions& options() const { return options_; }
    void set_learning_rate(float lr) { options_.learning_rate = lr; }

    /// Applies one update to every registered parameter, zeroes their
    /// gradients and clears the current thread's tape.
    void step();

    /// Velocity of a registered parameter, empty before its first step.
    const std::vector<float>& velocity(const Tensor& param) const;

private:
    SgdOptions options_;
    std::vector<Tensor> params_;
    std::vector<std::vector<float>> velocity_;
};

}  // namespace fedskel
