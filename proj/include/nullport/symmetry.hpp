#pragma once

#include "nullport/loss.hpp"
#include "nullport/svd.hpp"

namespace nullport {

// Generator of a loss-preserving reparameterization between two adjacent
// dense layers: g = I + eps * m acts on the hidden activation in between.
struct GroupActionParam {
    Tensor m;
    double eps = 0.0;
};

// Applies g between dense layers (pair_index - 1, pair_index) of a pure
// dense model: the earlier layer is rewritten so its batch output becomes
// g * (old output), the later layer absorbs g^-1 on its non-bias block.
// h_tilde is the homogeneous input of layer pair_index - 1 as currently
// realized (features+1 x batch), h_tilde_pinv a left inverse of it.
// Requires a bijective activation on the earlier layer. Returns g^-1 so the
// caller can refresh downstream activations; when eps*m vanishes the model
// is untouched and the identity is returned.
Tensor apply_group_action(ModelGraph& model, std::size_t pair_index,
                          const GroupActionParam& action, const Tensor& h_tilde,
                          const Tensor& h_tilde_pinv);

struct SymmetryStepConfig {
    double lr = 1e-3;
    double fd_step_scale = 1e-6;
    bool record_stats_after = true;  // costs one extra gradient evaluation
};

struct SymmetryStepStats {
    double loss_before = 0.0;
    double loss_after = 0.0;
    double grad_norm_sq_before = 0.0;
    double grad_norm_sq_after = 0.0;
    bool has_after = false;
    std::size_t pairs_applied = 0;
    std::size_t pairs_skipped = 0;  // rank-deficient activations reported here
};

// One ascent step on ||grad L||^2 through the group parameterization: a
// simultaneous gradient step on every pair generator at m = 0, then the
// resulting actions applied pair by pair (refreshing activations in
// between). Uses one activation pseudo-inverse and one g inverse per pair.
SymmetryStepStats symmetry_teleport_step(ModelGraph& model, const Batch& batch,
                                         LossKind kind, const SymmetryStepConfig& cfg);

enum class ProbeMethod { nullspace, symmetry };

ProbeMethod probe_method_from_string(const std::string& name);
std::string to_string(ProbeMethod m);

struct ProbeDims {
    int t = 2;          // teleport steps per batch
    std::size_t d = 256;  // layer width
    std::size_t n = 32;   // teleport batch size
    int l = 3;          // hidden layers (the probe model adds an output head)
    int b = 4;          // teleport batches
};

struct ProbeResult {
    ProbeMethod method = ProbeMethod::nullspace;
    ProbeDims dims;
    double seconds_median = 0.0;
    std::vector<double> seconds;  // every timed run
    unsigned long basis_svd_calls = 0;
    unsigned long inverse_op_calls = 0;
};

// Times the teleport phase alone (no primary training) on a synthetic
// l-hidden-layer regression model of width d: median of `repeats` runs from
// identical initial parameters, operation counters taken from the last run.
// The null-space method teleports the l hidden layers; the symmetry method
// works on the l adjacent pairs of the same model.
ProbeResult runtime_probe(ProbeMethod method, const ProbeDims& dims, std::uint64_t seed,
                          int repeats = 3);

}  // namespace nullport
