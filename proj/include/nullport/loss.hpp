#pragma once

#include <utility>

#include "nullport/model.hpp"

namespace nullport {

enum class LossKind { mse, cross_entropy };

LossKind loss_from_string(const std::string& name);
std::string to_string(LossKind k);

// A batch pairs model input with either regression targets (y) or integer
// class labels, depending on the loss in use.
struct Batch {
    Tensor x;
    Tensor y;
    std::vector<int> labels;
};

// mse: mean of squared deviations over every output element.
// cross_entropy: mean over samples of logsumexp(logits) - logit[label];
// model outputs are treated as logits, softmax is folded into the loss.
double loss_value(const ModelGraph& model, const Batch& batch, LossKind kind);

std::pair<double, GradientSet> primary_gradient(const ModelGraph& model,
                                                const Batch& batch, LossKind kind);

double accuracy(const ModelGraph& model, const Batch& batch);

double grad_norm_sq(const GradientSet& g);
double grad_norm_sq(const GradientSet& g, const std::set<ParamId>& subset);
double grad_dot(const GradientSet& a, const GradientSet& b);

// Gradient of the teleport objective 0.5*||grad L||^2 with respect to the
// parameters, i.e. the Hessian-vector product H*(grad L). Computed by a
// central finite difference of grad L along its own direction with step
// eps = fd_step_scale * (1 + ||w||); parameters and version counter are
// restored bit-exactly before returning.
GradientSet teleport_gradient(ModelGraph& model, const Batch& batch, LossKind kind,
                              double fd_step_scale);

// Same, reusing an already computed loss gradient at the current point.
GradientSet teleport_gradient_from(ModelGraph& model, const Batch& batch, LossKind kind,
                                   double fd_step_scale, const GradientSet& grad0);

}  // namespace nullport
