#include "nullport/optimizer.hpp"

#include <cmath>

namespace nullport {

OptimizerKind optimizer_from_string(const std::string& name) {
    if (name == "sgd") return OptimizerKind::sgd;
    if (name == "momentum") return OptimizerKind::momentum;
    if (name == "adagrad") return OptimizerKind::adagrad;
    if (name == "adam") return OptimizerKind::adam;
    throw std::invalid_argument("unknown optimizer: " + name);
}

std::string to_string(OptimizerKind k) {
    switch (k) {
        case OptimizerKind::sgd: return "sgd";
        case OptimizerKind::momentum: return "momentum";
        case OptimizerKind::adagrad: return "adagrad";
        case OptimizerKind::adam: return "adam";
    }
    return "?";
}

OptimizerState make_optimizer(OptimizerConfig config) {
    if (!(config.lr >= 0.0) || !std::isfinite(config.lr))
        throw std::invalid_argument("learning rate must be finite and non-negative");
    if (config.beta < 0.0 || config.beta >= 1.0 || config.beta1 < 0.0 ||
        config.beta1 >= 1.0 || config.beta2 < 0.0 || config.beta2 >= 1.0)
        throw std::invalid_argument("optimizer decay coefficients must lie in [0, 1)");
    if (config.eps == 0.0)
        config.eps = config.kind == OptimizerKind::adagrad ? 1e-10 : 1e-8;
    OptimizerState st;
    st.config = config;
    return st;
}

namespace {

Tensor& buffer(std::map<ParamId, Tensor>& m, const ParamId& id, const Tensor& like) {
    auto it = m.find(id);
    if (it == m.end()) it = m.emplace(id, Tensor(like.shape())).first;
    return it->second;
}

}  // namespace

void optimizer_step(ModelGraph& model, OptimizerState& state, const GradientSet& grads) {
    const OptimizerConfig& c = state.config;
    ++state.step;
    for (const auto& [id, g] : grads) {
        switch (c.kind) {
            case OptimizerKind::sgd:
                model.add_scaled_param(id, g, -c.lr);
                break;
            case OptimizerKind::momentum: {
                Tensor& v = buffer(state.moment1, id, g);
                for (std::size_t i = 0; i < v.size(); ++i) v[i] = c.beta * v[i] + g[i];
                model.add_scaled_param(id, v, -c.lr);
                break;
            }
            case OptimizerKind::adagrad: {
                Tensor& a = buffer(state.moment1, id, g);
                Tensor upd(g.shape());
                for (std::size_t i = 0; i < a.size(); ++i) {
                    a[i] += g[i] * g[i];
                    upd[i] = g[i] / (std::sqrt(a[i]) + c.eps);
                }
                model.add_scaled_param(id, upd, -c.lr);
                break;
            }
            case OptimizerKind::adam: {
                Tensor& m = buffer(state.moment1, id, g);
                Tensor& v = buffer(state.moment2, id, g);
                const double t = static_cast<double>(state.step);
                const double c1 = 1.0 - std::pow(c.beta1, t);
                const double c2 = 1.0 - std::pow(c.beta2, t);
                Tensor upd(g.shape());
                for (std::size_t i = 0; i < m.size(); ++i) {
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                    upd[i] = (m[i] / c1) / (std::sqrt(v[i] / c2) + c.eps);
                }
                model.add_scaled_param(id, upd, -c.lr);
                break;
            }
        }
    }
}

}  // namespace nullport
