#pragma once

#include <cstdint>
#include <vector>

#include "mudjack/tensor.hpp"

namespace mudjack {

enum class OptimizerKind { Sgd, Adam };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::Adam;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// First-order optimizer over a fixed parameter list. step() applies the
// update in place and zeroes the gradients; it rejects parameters whose
// gradient was never populated.
class Optimizer {
  public:
    Optimizer(std::vector<Tensor> params, OptimizerConfig config);

    void step();
    void zero_grad();

    int64_t step_count() const { return step_count_; }
    const OptimizerConfig& config() const { return config_; }
    void set_learning_rate(double lr) { config_.learning_rate = lr; }

  private:
    std::vector<Tensor> params_;
    OptimizerConfig config_;
    std::vector<std::vector<double>> m_;  // first moments, Adam only
    std::vector<std::vector<double>> v_;  // second moments, Adam only
    int64_t step_count_ = 0;
};

}  // namespace mudjack
