#pragma once

#include "nullport/model.hpp"

namespace nullport {

enum class OptimizerKind { sgd, momentum, adagrad, adam };

OptimizerKind optimizer_from_string(const std::string& name);
std::string to_string(OptimizerKind k);

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::sgd;
    double lr = 1e-3;
    double beta = 0.9;    // momentum coefficient
    double beta1 = 0.9;   // adam first-moment decay
    double beta2 = 0.999; // adam second-moment decay
    double eps = 0.0;     // 0 selects the per-kind default
};

struct OptimizerState {
    OptimizerConfig config;
    std::uint64_t step = 0;
    std::map<ParamId, Tensor> moment1;  // momentum buffer / adam m / adagrad accumulator
    std::map<ParamId, Tensor> moment2;  // adam v
};

OptimizerState make_optimizer(OptimizerConfig config);

// One update over every gradient entry. sgd: w -= lr*g. momentum:
// v = beta*v + g, w -= lr*v. adagrad: a += g^2, w -= lr*g/(sqrt(a)+eps).
// adam: bias-corrected moments, w -= lr*mhat/(sqrt(vhat)+eps).
void optimizer_step(ModelGraph& model, OptimizerState& state, const GradientSet& grads);

}  // namespace nullport
