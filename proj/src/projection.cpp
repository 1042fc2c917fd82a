#include "nullport/projection.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <thread>

#include "nullport/svd.hpp"

namespace nullport {

std::string to_string(const BasisGroupKey& key) {
    std::ostringstream os;
    os << 'L' << key.layer << '.';
    switch (key.kind) {
        case BasisGroupKey::Kind::dense: os << "dense"; break;
        case BasisGroupKey::Kind::conv: os << "conv"; break;
        case BasisGroupKey::Kind::attn_in: os << "attn_in"; break;
        case BasisGroupKey::Kind::attn_out: os << "attn_out"; break;
    }
    return os.str();
}

namespace {

const NodeTrace& trace_for_layer(const ModelGraph& model, const ForwardTrace& trace,
                                 std::uint32_t layer, bool want_attention) {
    if (trace.nodes.size() != model.nodes().size())
        throw std::invalid_argument("trace does not match the model graph");
    for (std::size_t i = 0; i < model.nodes().size(); ++i) {
        const Node& n = model.nodes()[i];
        if (want_attention) {
            if (const auto* a = std::get_if<AttentionNode>(&n); a && a->layer == layer)
                return trace.nodes[i];
        } else if (const auto* d = std::get_if<DenseNode>(&n); d && d->layer == layer) {
            return trace.nodes[i];
        } else if (const auto* c = std::get_if<Conv2dNode>(&n); c && c->layer == layer) {
            return trace.nodes[i];
        }
    }
    throw std::invalid_argument("no layer " + std::to_string(layer) + " in trace");
}

}  // namespace

RepresentationMatrix capture_representation(const ModelGraph& model,
                                            const ForwardTrace& trace,
                                            const BasisGroupKey& key) {
    const bool attn = key.kind == BasisGroupKey::Kind::attn_in ||
                      key.kind == BasisGroupKey::Kind::attn_out;
    const NodeTrace& nt = trace_for_layer(model, trace, key.layer, attn);
    const Tensor& operand = key.kind == BasisGroupKey::Kind::attn_out ? nt.concat
                                                                      : nt.captured;
    if (operand.empty())
        throw std::invalid_argument("trace holds no captured input for " + to_string(key));
    RepresentationMatrix rep;
    rep.group = to_string(key);
    rep.mat = transposed(operand);
    rep.side = key.kind == BasisGroupKey::Kind::dense ? ProjectionSide::right
                                                      : ProjectionSide::left;
    return rep;
}

std::size_t select_rank(const std::vector<double>& singular_values, double tau) {
    if (!(tau >= 0.0 && tau <= 1.0))
        throw std::invalid_argument("tau must lie in [0, 1]");
    if (singular_values.empty()) return 0;
    const double smax = singular_values.front();
    double total = 0.0;
    double prev = std::numeric_limits<double>::infinity();
    std::vector<double> sq(singular_values.size());
    for (std::size_t i = 0; i < singular_values.size(); ++i) {
        double s = singular_values[i];
        if (s > prev)
            throw std::invalid_argument("singular values must be sorted descending");
        prev = s;
        if (s < 0.0) throw std::invalid_argument("singular values must be non-negative");
        if (s < 1e-12 * smax) s = 0.0;
        sq[i] = s * s;
        total += sq[i];
    }
    if (total == 0.0) return 0;
    const double target = tau * total;
    double cum = 0.0;
    std::size_t k = 0;
    while (k < sq.size() && cum < target) {
        cum += sq[k];
        ++k;
    }
    return k;
}

CoreBasis core_basis(const RepresentationMatrix& rep, double tau) {
    stats::bump_basis_svd();
    SvdFactors f = thin_svd(rep.mat);
    CoreBasis basis;
    basis.group = rep.group;
    basis.side = rep.side;
    basis.singular_values.assign(f.s.data(), f.s.data() + f.s.size());
    basis.rank = select_rank(basis.singular_values, tau);
    if (basis.rank > 0) {
        basis.b = Tensor({rep.mat.rows(), basis.rank});
        for (std::size_t i = 0; i < rep.mat.rows(); ++i)
            for (std::size_t j = 0; j < basis.rank; ++j) basis.b(i, j) = f.u(i, j);
    }
    double total = 0.0, kept = 0.0;
    for (std::size_t i = 0; i < basis.singular_values.size(); ++i) {
        const double sq = basis.singular_values[i] * basis.singular_values[i];
        total += sq;
        if (i < basis.rank) kept += sq;
    }
    basis.energy_fraction = total > 0.0 ? kept / total : 1.0;
    return basis;
}

Tensor project(const Tensor& grad, const CoreBasis& basis) {
    if (grad.rank() != 2) throw std::invalid_argument("project expects a rank-2 gradient");
    if (basis.rank == 0) return grad;
    if (basis.side == ProjectionSide::right) {
        if (grad.cols() != basis.b.rows())
            throw std::invalid_argument("project: gradient columns do not match basis rows");
        Tensor gb = matmul(grad, basis.b);
        return subtracted(grad, matmul(gb, transposed(basis.b)));
    }
    if (grad.rows() != basis.b.rows())
        throw std::invalid_argument("project: gradient rows do not match basis rows");
    Tensor btg = matmul(transposed(basis.b), grad);
    return subtracted(grad, matmul(basis.b, btg));
}

BasisMap build_all_bases(const ModelGraph& model, const ForwardTrace& trace, double tau,
                         int threads) {
    struct Job {
        BasisGroupKey key;
        std::vector<ParamId> params;
    };
    std::vector<Job> jobs;
    // Groups whose parameters are all outside the teleportable set never get
    // projected, so factorizing them would only distort the SVD-count story.
    const std::set<ParamId>& live = model.teleportable();
    auto push_if_live = [&](Job job) {
        for (const ParamId& id : job.params) {
            if (live.count(id) != 0) {
                jobs.push_back(std::move(job));
                return;
            }
        }
    };
    for (const Node& n : model.nodes()) {
        if (const auto* d = std::get_if<DenseNode>(&n)) {
            push_if_live({{d->layer, BasisGroupKey::Kind::dense},
                          {{d->layer, ParamSlot::dense_w, 0}}});
        } else if (const auto* c = std::get_if<Conv2dNode>(&n)) {
            push_if_live({{c->layer, BasisGroupKey::Kind::conv},
                          {{c->layer, ParamSlot::conv_w, 0}}});
        } else if (const auto* a = std::get_if<AttentionNode>(&n)) {
            Job in{{a->layer, BasisGroupKey::Kind::attn_in}, {}};
            for (std::uint32_t head = 0; head < a->heads; ++head) {
                in.params.push_back({a->layer, ParamSlot::attn_q, head});
                in.params.push_back({a->layer, ParamSlot::attn_k, head});
                in.params.push_back({a->layer, ParamSlot::attn_v, head});
            }
            push_if_live(std::move(in));
            push_if_live({{a->layer, BasisGroupKey::Kind::attn_out},
                          {{a->layer, ParamSlot::attn_o, 0}}});
        }
    }
    std::vector<std::shared_ptr<const CoreBasis>> slots(jobs.size());
    auto run_job = [&](std::size_t j) {
        RepresentationMatrix rep = capture_representation(model, trace, jobs[j].key);
        slots[j] = std::make_shared<const CoreBasis>(core_basis(rep, tau));
    };
    if (threads <= 1 || jobs.size() <= 1) {
        for (std::size_t j = 0; j < jobs.size(); ++j) run_job(j);
    } else {
        const std::size_t nthreads = std::min<std::size_t>(threads, jobs.size());
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(nthreads);
        for (std::size_t t = 0; t < nthreads; ++t) {
            pool.emplace_back([&, t] {
                try {
                    for (std::size_t j = t; j < jobs.size(); j += nthreads) run_job(j);
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        for (const auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    BasisMap out;
    for (std::size_t j = 0; j < jobs.size(); ++j)
        for (const ParamId& id : jobs[j].params) out[id] = slots[j];
    return out;
}

}  // namespace nullport
