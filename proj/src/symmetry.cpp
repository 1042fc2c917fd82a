#include "nullport/symmetry.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "nullport/teleport.hpp"

namespace nullport {

namespace {

struct DenseChain {
    std::vector<const DenseNode*> layers;  // node i is also graph position i
};

DenseChain dense_chain(const ModelGraph& model) {
    DenseChain chain;
    for (const Node& n : model.nodes()) {
        const auto* d = std::get_if<DenseNode>(&n);
        if (!d)
            throw std::invalid_argument(
                "symmetry teleportation requires a pure dense model");
        chain.layers.push_back(d);
    }
    if (chain.layers.size() < 2)
        throw std::invalid_argument("symmetry teleportation needs at least two layers");
    return chain;
}

void require_bijective(const DenseNode& node) {
    if (node.act == Activation::identity) return;
    if (node.act == Activation::leaky_relu && node.alpha > 0.0) return;
    throw std::invalid_argument("activation of layer " + std::to_string(node.layer) +
                                " is not bijective");
}

double inverse_slope(double p, const DenseNode& node) {
    if (node.act == Activation::identity) return 1.0;
    return p >= 0.0 ? 1.0 : 1.0 / node.alpha;
}

Tensor apply_sigma_inverse(const Tensor& y, const DenseNode& node) {
    if (node.act == Activation::identity) return y;
    Tensor out = y;
    for (std::size_t i = 0; i < out.size(); ++i)
        if (out[i] < 0.0) out[i] /= node.alpha;
    return out;
}

Tensor nonbias_block(const Tensor& w, std::size_t in_dim) {
    Tensor a({w.rows(), in_dim});
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < in_dim; ++j) a(i, j) = w(i, j);
    return a;
}

// Left inverse from thin SVD factors; returns an empty tensor when the
// matrix is numerically rank-deficient in its columns.
Tensor left_inverse_or_empty(const Tensor& h) {
    if (h.cols() > h.rows()) return {};
    SvdFactors f = thin_svd(h);
    const std::size_t r = f.s.size();
    if (f.s[r - 1] < 1e-10 * f.s[0] || f.s[0] == 0.0) return {};
    stats::bump_inverse_op();
    Tensor w = transposed(f.vt);
    for (std::size_t j = 0; j < r; ++j)
        for (std::size_t i = 0; i < w.rows(); ++i) w(i, j) /= f.s[j];
    return matmul(w, transposed(f.u));
}

}  // namespace

Tensor apply_group_action(ModelGraph& model, std::size_t pair_index,
                          const GroupActionParam& action, const Tensor& h_tilde,
                          const Tensor& h_tilde_pinv) {
    DenseChain chain = dense_chain(model);
    if (pair_index == 0 || pair_index >= chain.layers.size())
        throw std::invalid_argument("pair index out of range");
    const DenseNode& prev = *chain.layers[pair_index - 1];
    const DenseNode& next = *chain.layers[pair_index];
    require_bijective(prev);
    const std::size_t d = prev.out_dim;
    if (action.m.rank() != 2 || action.m.rows() != d || action.m.cols() != d)
        throw std::invalid_argument("group action generator must be " + std::to_string(d) +
                                    " square");
    if (h_tilde.rank() != 2 || h_tilde.rows() != prev.in_dim + (prev.bias ? 1 : 0))
        throw std::invalid_argument("h_tilde rows must match the earlier layer input");
    if (h_tilde_pinv.rank() != 2 || h_tilde_pinv.rows() != h_tilde.cols() ||
        h_tilde_pinv.cols() != h_tilde.rows())
        throw std::invalid_argument("h_tilde_pinv shape does not match h_tilde");

    Tensor g = Tensor::identity(d);
    add_scaled(g, action.m, action.eps);
    if (g == Tensor::identity(d)) return g;

    const Tensor ginv = inverse(g);

    // Later layer: absorb g^-1 into the non-bias block, bias column as is.
    const ParamId next_id{next.layer, ParamSlot::dense_w, 0};
    const Tensor& wn = model.param(next_id);
    Tensor a = nonbias_block(wn, next.in_dim);
    Tensor a2 = matmul(a, ginv);
    Tensor wn2 = wn;
    for (std::size_t i = 0; i < wn2.rows(); ++i)
        for (std::size_t j = 0; j < next.in_dim; ++j) wn2(i, j) = a2(i, j);
    model.set_param(next_id, std::move(wn2));

    // Earlier layer: minimal-change rewrite so its batch output becomes
    // g * sigma(P); exact because h_tilde_pinv is a left inverse.
    const ParamId prev_id{prev.layer, ParamSlot::dense_w, 0};
    const Tensor& wp = model.param(prev_id);
    Tensor p = matmul(wp, h_tilde);
    Tensor z = apply_sigma_inverse(matmul(g, activation_apply(p, prev.act, prev.alpha)), prev);
    Tensor wp2 = added(wp, matmul(subtracted(z, p), h_tilde_pinv));
    model.set_param(prev_id, std::move(wp2));
    return ginv;
}

SymmetryStepStats symmetry_teleport_step(ModelGraph& model, const Batch& batch,
                                         LossKind kind, const SymmetryStepConfig& cfg) {
    DenseChain chain = dense_chain(model);
    const std::size_t layers = chain.layers.size();
    for (std::size_t i = 0; i + 1 < layers; ++i) require_bijective(*chain.layers[i]);

    ForwardTrace trace = forward(model, batch.x);
    auto [loss0, grad0] = primary_gradient(model, batch, kind);

    SymmetryStepStats stats;
    stats.loss_before = loss0;
    stats.grad_norm_sq_before = grad_norm_sq(grad0);

    // Objective gradient d/dW ||grad L||^2 = 2 H grad L through the same
    // finite-difference machinery the null-space engine uses.
    GradientSet obj_grad = teleport_gradient_from(model, batch, kind, cfg.fd_step_scale, grad0);
    for (auto& [id, t] : obj_grad) t = scaled(t, 2.0);

    struct PairPlan {
        Tensor m;
        Tensor h_tilde;
        Tensor h_pinv;
        bool skipped = false;
    };
    std::vector<PairPlan> plans(layers - 1);

    for (std::size_t pair = 1; pair < layers; ++pair) {
        PairPlan& plan = plans[pair - 1];
        const DenseNode& prev = *chain.layers[pair - 1];
        const DenseNode& next = *chain.layers[pair];
        plan.h_tilde = transposed(trace.nodes[pair - 1].captured);
        plan.h_pinv = left_inverse_or_empty(plan.h_tilde);
        if (plan.h_pinv.empty()) {
            plan.skipped = true;
            ++stats.pairs_skipped;
            continue;
        }
        const Tensor p = transposed(trace.nodes[pair - 1].preact);
        const Tensor s = transposed(trace.nodes[pair - 1].output);
        Tensor dinv(p.shape());
        for (std::size_t i = 0; i < p.size(); ++i) dinv[i] = inverse_slope(p[i], prev);

        const Tensor& g_prev = obj_grad.at({prev.layer, ParamSlot::dense_w, 0});
        const Tensor& g_next = obj_grad.at({next.layer, ParamSlot::dense_w, 0});
        Tensor c = matmul(g_prev, transposed(plan.h_pinv));
        Tensor first = matmul(hadamard(c, dinv), transposed(s));
        Tensor second = matmul(transposed(nonbias_block(model.param({next.layer, ParamSlot::dense_w, 0}), next.in_dim)),
                               nonbias_block(g_next, next.in_dim));
        plan.m = subtracted(first, second);
    }

    for (std::size_t pair = 1; pair < layers; ++pair) {
        PairPlan& plan = plans[pair - 1];
        if (plan.skipped) continue;
        GroupActionParam action{plan.m, cfg.lr};
        Tensor ginv = apply_group_action(model, pair, action, plan.h_tilde, plan.h_pinv);
        ++stats.pairs_applied;
        if (pair < layers - 1 && !plans[pair].skipped) {
            // The next pair's activation input just became g * h; update the
            // stored operand and carry the left inverse along (h+ g^-1 is a
            // left inverse of g h).
            Tensor g = Tensor::identity(ginv.rows());
            add_scaled(g, plan.m, cfg.lr);
            PairPlan& np = plans[pair];
            const std::size_t d = g.rows();
            Tensor top({d, np.h_tilde.cols()});
            for (std::size_t i = 0; i < d; ++i)
                for (std::size_t j = 0; j < np.h_tilde.cols(); ++j)
                    top(i, j) = np.h_tilde(i, j);
            Tensor gtop = matmul(g, top);
            for (std::size_t i = 0; i < d; ++i)
                for (std::size_t j = 0; j < np.h_tilde.cols(); ++j)
                    np.h_tilde(i, j) = gtop(i, j);
            Tensor left({np.h_pinv.rows(), d});
            for (std::size_t i = 0; i < np.h_pinv.rows(); ++i)
                for (std::size_t j = 0; j < d; ++j) left(i, j) = np.h_pinv(i, j);
            Tensor lg = matmul(left, ginv);
            for (std::size_t i = 0; i < np.h_pinv.rows(); ++i)
                for (std::size_t j = 0; j < d; ++j) np.h_pinv(i, j) = lg(i, j);
        }
    }

    if (cfg.record_stats_after) {
        auto [loss1, grad1] = primary_gradient(model, batch, kind);
        stats.loss_after = loss1;
        stats.grad_norm_sq_after = grad_norm_sq(grad1);
        stats.has_after = true;
    }
    return stats;
}

ProbeMethod probe_method_from_string(const std::string& name) {
    if (name == "nullspace") return ProbeMethod::nullspace;
    if (name == "symmetry") return ProbeMethod::symmetry;
    throw std::invalid_argument("unknown probe method: " + name);
}

std::string to_string(ProbeMethod m) {
    return m == ProbeMethod::nullspace ? "nullspace" : "symmetry";
}

ProbeResult runtime_probe(ProbeMethod method, const ProbeDims& dims, std::uint64_t seed,
                          int repeats) {
    if (dims.t < 1 || dims.b < 1 || dims.l < 1 || dims.d == 0 || dims.n == 0)
        throw std::invalid_argument("probe dims must be positive");
    if (repeats < 1) throw std::invalid_argument("probe needs at least one repeat");

    SeededRng rng(seed);
    MlpSpec spec;
    spec.input_dim = dims.d;
    spec.hidden.assign(static_cast<std::size_t>(dims.l), dims.d);
    spec.output_dim = dims.d;
    spec.hidden_act = Activation::leaky_relu;
    spec.alpha = 0.1;
    ModelGraph model = build_mlp(spec, rng);

    // Only the hidden layers teleport; the head gives the symmetry method its
    // final pair partner, so both methods touch l weight groups.
    std::set<ParamId> hidden;
    for (std::uint32_t layer = 0; layer < static_cast<std::uint32_t>(dims.l); ++layer)
        hidden.insert({layer, ParamSlot::dense_w, 0});
    model.set_teleportable(hidden);

    const std::size_t samples = static_cast<std::size_t>(dims.b) * dims.n;
    const Tensor x = rng.normal({samples, dims.d});
    const Tensor y = rng.normal({samples, dims.d});
    DataView view{&x, &y, nullptr};

    ProbeResult result;
    result.method = method;
    result.dims = dims;

    for (int run = 0; run < repeats; ++run) {
        ModelGraph work = model;
        SeededRng draw = SeededRng(seed).fork(7);
        stats::reset_op_counters();
        const auto start = std::chrono::steady_clock::now();
        if (method == ProbeMethod::nullspace) {
            TeleportConfig cfg;
            cfg.eta = 1e-4;
            cfg.batches = dims.b;
            cfg.steps = dims.t;
            cfg.cap = 1e18;
            cfg.tau = 1.0;
            cfg.batch_size = dims.n;
            cfg.record_loss_after = false;
            run_teleport_for_epoch(work, view, cfg, LossKind::mse, draw);
        } else {
            SymmetryStepConfig scfg;
            scfg.lr = 1e-4;
            scfg.record_stats_after = false;
            std::vector<std::size_t> order = draw.shuffle(samples);
            std::size_t cursor = 0;
            for (int b = 0; b < dims.b; ++b) {
                if (cursor + dims.n > order.size()) {
                    order = draw.shuffle(samples);
                    cursor = 0;
                }
                std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                             order.begin() + static_cast<std::ptrdiff_t>(cursor + dims.n));
                cursor += dims.n;
                Batch batch = view.gather(idx);
                for (int s = 0; s < dims.t; ++s)
                    symmetry_teleport_step(work, batch, LossKind::mse, scfg);
            }
        }
        const auto stop = std::chrono::steady_clock::now();
        result.seconds.push_back(std::chrono::duration<double>(stop - start).count());
        result.basis_svd_calls = stats::basis_svd_count();
        result.inverse_op_calls = stats::inverse_op_count();
    }
    std::vector<double> sorted = result.seconds;
    std::sort(sorted.begin(), sorted.end());
    result.seconds_median = sorted[sorted.size() / 2];
    return result;
}

}  // namespace nullport
