#include "nullport/loss.hpp"

#include <cmath>
#include <limits>

namespace nullport {

LossKind loss_from_string(const std::string& name) {
    if (name == "mse") return LossKind::mse;
    if (name == "cross_entropy") return LossKind::cross_entropy;
    throw std::invalid_argument("unknown loss: " + name);
}

std::string to_string(LossKind k) {
    return k == LossKind::mse ? "mse" : "cross_entropy";
}

namespace {

void check_targets(const Tensor& out, const Batch& batch, LossKind kind) {
    if (kind == LossKind::mse) {
        if (!out.same_shape(batch.y))
            throw std::invalid_argument("mse target shape mismatch: " +
                                        shape_string(batch.y) + " vs output " +
                                        shape_string(out));
    } else {
        if (out.rank() != 2)
            throw std::invalid_argument("cross_entropy expects rank-2 logits");
        if (batch.labels.size() != out.rows())
            throw std::invalid_argument("cross_entropy needs one label per sample");
        for (int lbl : batch.labels)
            if (lbl < 0 || static_cast<std::size_t>(lbl) >= out.cols())
                throw std::invalid_argument("class index out of range");
    }
}

double loss_of_output(const Tensor& out, const Batch& batch, LossKind kind) {
    check_targets(out, batch, kind);
    if (kind == LossKind::mse) {
        double s = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double d = out[i] - batch.y[i];
            s += d * d;
        }
        return s / static_cast<double>(out.size());
    }
    double s = 0.0;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < out.cols(); ++j) mx = std::max(mx, out(i, j));
        double lse = 0.0;
        for (std::size_t j = 0; j < out.cols(); ++j) lse += std::exp(out(i, j) - mx);
        lse = mx + std::log(lse);
        s += lse - out(i, static_cast<std::size_t>(batch.labels[i]));
    }
    return s / static_cast<double>(out.rows());
}

Tensor loss_grad_of_output(const Tensor& out, const Batch& batch, LossKind kind) {
    check_targets(out, batch, kind);
    Tensor d(out.shape());
    if (kind == LossKind::mse) {
        const double scale = 2.0 / static_cast<double>(out.size());
        for (std::size_t i = 0; i < out.size(); ++i) d[i] = scale * (out[i] - batch.y[i]);
        return d;
    }
    const double scale = 1.0 / static_cast<double>(out.rows());
    for (std::size_t i = 0; i < out.rows(); ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < out.cols(); ++j) mx = std::max(mx, out(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < out.cols(); ++j) {
            d(i, j) = std::exp(out(i, j) - mx);
            sum += d(i, j);
        }
        for (std::size_t j = 0; j < out.cols(); ++j) d(i, j) = scale * d(i, j) / sum;
        d(i, static_cast<std::size_t>(batch.labels[i])) -= scale;
    }
    return d;
}

}  // namespace

double loss_value(const ModelGraph& model, const Batch& batch, LossKind kind) {
    ForwardTrace trace = forward(model, batch.x);
    return loss_of_output(trace.output, batch, kind);
}

std::pair<double, GradientSet> primary_gradient(const ModelGraph& model,
                                                const Batch& batch, LossKind kind) {
    ForwardTrace trace = forward(model, batch.x);
    const double loss = loss_of_output(trace.output, batch, kind);
    GradientSet grads = backward(model, trace, loss_grad_of_output(trace.output, batch, kind));
    return {loss, std::move(grads)};
}

double accuracy(const ModelGraph& model, const Batch& batch) {
    ForwardTrace trace = forward(model, batch.x);
    const Tensor& out = trace.output;
    if (out.rank() != 2 || batch.labels.size() != out.rows())
        throw std::invalid_argument("accuracy needs rank-2 logits and one label per sample");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        std::size_t arg = 0;
        for (std::size_t j = 1; j < out.cols(); ++j)
            if (out(i, j) > out(i, arg)) arg = j;
        if (arg == static_cast<std::size_t>(batch.labels[i])) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(out.rows());
}

double grad_norm_sq(const GradientSet& g) {
    double s = 0.0;
    for (const auto& [id, t] : g) s += frobenius_norm_sq(t);
    return s;
}

double grad_norm_sq(const GradientSet& g, const std::set<ParamId>& subset) {
    double s = 0.0;
    for (const ParamId& id : subset) {
        auto it = g.find(id);
        if (it == g.end())
            throw std::invalid_argument("gradient set is missing " + to_string(id));
        s += frobenius_norm_sq(it->second);
    }
    return s;
}

double grad_dot(const GradientSet& a, const GradientSet& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("gradient sets have different key sets");
    double s = 0.0;
    auto ib = b.begin();
    for (const auto& [id, t] : a) {
        if (ib->first != id)
            throw std::invalid_argument("gradient sets have different key sets");
        s += dot(t, ib->second);
        ++ib;
    }
    return s;
}

GradientSet teleport_gradient(ModelGraph& model, const Batch& batch, LossKind kind,
                              double fd_step_scale) {
    GradientSet grad0 = primary_gradient(model, batch, kind).second;
    return teleport_gradient_from(model, batch, kind, fd_step_scale, grad0);
}

GradientSet teleport_gradient_from(ModelGraph& model, const Batch& batch, LossKind kind,
                                   double fd_step_scale, const GradientSet& grad0) {
    const double gn = std::sqrt(grad_norm_sq(grad0));
    GradientSet out;
    if (gn == 0.0) {
        for (const auto& [id, w] : model.params()) out[id] = Tensor(w.shape());
        return out;
    }
    double wnorm_sq = 0.0;
    for (const auto& [id, w] : model.params()) wnorm_sq += frobenius_norm_sq(w);
    const double eps = fd_step_scale * (1.0 + std::sqrt(wnorm_sq));
    if (!(eps > 0.0) || !std::isfinite(eps))
        throw std::runtime_error("teleport_gradient finite-difference step underflowed");

    const ModelGraph::Snapshot snap = model.snapshot();
    const double inv_gn = 1.0 / gn;
    for (const auto& [id, g] : grad0) model.add_scaled_param(id, g, eps * inv_gn);
    GradientSet gplus = primary_gradient(model, batch, kind).second;
    model.restore(snap);
    for (const auto& [id, g] : grad0) model.add_scaled_param(id, g, -eps * inv_gn);
    GradientSet gminus = primary_gradient(model, batch, kind).second;
    model.restore(snap);

    const double scale = gn / (2.0 * eps);
    for (const auto& [id, gp] : gplus) {
        Tensor t = subtracted(gp, gminus.at(id));
        out[id] = scaled(t, scale);
        ensure_finite(out[id], "teleport_gradient");
    }
    return out;
}

}  // namespace nullport
