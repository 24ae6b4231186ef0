#pragma once

#include <Eigen/Core>

#include <functional>
#include <initializer_list>

#include "fedskel/tensor.hpp"

namespace fedskel {

using MatR = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

namespace detail {

bool grad_enabled();

// Wraps `value` in a node and records it on the thread's tape when grad mode is
// on and any input requires grad.
Tensor make_result(Shape shape, std::vector<float> value, std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward);

// Gradient buffer of an input, or nullptr when it does not participate.
float* grad_of(const Node* input);

void softmax_row(const float* in, float* out, int64_t c, float inv_temperature);
void log_softmax_row(const float* in, float* out, int64_t c, float inv_temperature);

}  // namespace detail
}  // namespace fedskel
