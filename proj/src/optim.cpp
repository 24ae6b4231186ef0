#include "fedskel/optim.hpp"

#include "fedskel/errors.hpp"

namespace fedskel {

SgdMomentum::SgdMomentum(SgdOptions options) : options_(options) {
    if (!(options_.learning_rate >= 0.0f)) throw ConfigError("learning rate must be non-negative");
    if (!(options_.momentum >= 0.0f && options_.momentum < 1.0f)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(options_.weight_decay >= 0.0f)) throw ConfigError("weight decay must be non-negative");
}

void SgdMomentum::add_param(const Tensor& param) {
    if (!param.requires_grad()) throw UsageError("optimizer parameters must require grad");
    params_.push_back(param);
    velocity_.emplace_back();
}

void SgdMomentum::step() {
    for (size_t p = 0; p < params_.size(); ++p) {
        if (!params_[p].has_grad()) {
            throw UsageError("parameter #" + std::to_string(p) + " of shape " + shape_str(params_[p].shape()) +
                             " has no gradient");
        }
    }
    const float lr = options_.learning_rate, mom = options_.momentum, wd = options_.weight_decay;
    for (size_t p = 0; p < params_.size(); ++p) {
        auto w = params_[p].mutable_data();
        auto g = params_[p].grad();
        auto& v = velocity_[p];
        if (v.empty()) v.assign(w.size(), 0.0f);
        for (size_t i = 0; i < w.size(); ++i) {
            v[i] = mom * v[i] + g[i] + wd * w[i];
            w[i] -= lr * v[i];
        }
        params_[p].zero_grad();
    }
    GradTape::current().clear();
}

const std::vector<float>& SgdMomentum::velocity(const Tensor& param) const {
    for (size_t p = 0; p < params_.size(); ++p) {
        if (params_[p].id() == param.id()) return velocity_[p];
    }
    throw UsageError("tensor is not registered with this optimizer");
}

}  // namespace fedskel
