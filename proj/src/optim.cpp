#include "mudjack/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace mudjack {

Optimizer::Optimizer(std::vector<Tensor> params, OptimizerConfig config)
    : params_(std::move(params)), config_(config) {
    if (config_.learning_rate <= 0.0) {
        throw std::invalid_argument("optimizer: learning rate must be positive");
    }
    if (config_.kind == OptimizerKind::Adam) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const auto& p : params_) {
            m_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
            v_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
        }
    }
}

void Optimizer::step() {
    for (const auto& p : params_) {
        if (!p.has_grad()) {
            throw std::runtime_error("optimizer: missing gradient for a parameter of shape " +
                                     shape_str(p.shape()));
        }
    }
    ++step_count_;
    double lr = config_.learning_rate;
    if (config_.kind == OptimizerKind::Sgd) {
        for (auto& p : params_) {
            auto data = p.data_mut();
            auto grad = p.grad();
            for (size_t i = 0; i < data.size(); ++i) {
                data[i] -= lr * grad[i];
            }
        }
    } else {
        double b1 = config_.beta1, b2 = config_.beta2;
        double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_count_));
        double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_count_));
        for (size_t pi = 0; pi < params_.size(); ++pi) {
            auto data = params_[pi].data_mut();
            auto grad = params_[pi].grad();
            auto& m = m_[pi];
            auto& v = v_[pi];
            for (size_t i = 0; i < data.size(); ++i) {
                double g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                double mhat = m[i] / bc1;
                double vhat = v[i] / bc2;
                data[i] -= lr * mhat / (std::sqrt(vhat) + config_.epsilon);
            }
        }
    }
    for (auto& p : params_) {
        if (!all_finite(p.data())) {
            throw std::runtime_error("optimizer: non-finite parameter after update");
        }
    }
    zero_grad();
}

void Optimizer::zero_grad() {
    for (auto& p : params_) {
        p.zero_grad();
    }
}

}  // namespace mudjack
