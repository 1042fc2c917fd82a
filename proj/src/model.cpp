#include "nullport/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace nullport {

namespace {

const char* slot_name(ParamSlot s) {
    switch (s) {
        case ParamSlot::dense_w: return "dense_w";
        case ParamSlot::conv_w: return "conv_w";
        case ParamSlot::attn_q: return "attn_q";
        case ParamSlot::attn_k: return "attn_k";
        case ParamSlot::attn_v: return "attn_v";
        case ParamSlot::attn_o: return "attn_o";
        case ParamSlot::embed: return "embed";
    }
    return "?";
}

bool is_head_slot(ParamSlot s) {
    return s == ParamSlot::attn_q || s == ParamSlot::attn_k || s == ParamSlot::attn_v;
}

}  // namespace

std::string to_string(const ParamId& id) {
    std::ostringstream os;
    os << 'L' << id.layer << '.' << slot_name(id.slot);
    if (is_head_slot(id.slot)) os << ".h" << id.head;
    return os.str();
}

Activation activation_from_string(const std::string& name) {
    if (name == "identity") return Activation::identity;
    if (name == "relu") return Activation::relu;
    if (name == "leaky_relu") return Activation::leaky_relu;
    if (name == "softmax") return Activation::softmax;
    throw std::invalid_argument("unknown activation: " + name);
}

std::string to_string(Activation a) {
    switch (a) {
        case Activation::identity: return "identity";
        case Activation::relu: return "relu";
        case Activation::leaky_relu: return "leaky_relu";
        case Activation::softmax: return "softmax";
    }
    return "?";
}

void ModelGraph::add_param(ParamId id, Tensor w) {
    if (params_.count(id))
        throw std::invalid_argument("duplicate parameter " + to_string(id));
    params_.emplace(id, std::move(w));
    teleportable_.insert(id);
}

const Tensor& ModelGraph::param(const ParamId& id) const {
    auto it = params_.find(id);
    if (it == params_.end())
        throw std::invalid_argument("unknown parameter " + to_string(id));
    return it->second;
}

void ModelGraph::set_teleportable(std::set<ParamId> ids) {
    for (const ParamId& id : ids)
        if (!params_.count(id))
            throw std::invalid_argument("teleportable id not in model: " + to_string(id));
    teleportable_ = std::move(ids);
}

void ModelGraph::set_param(const ParamId& id, Tensor w) {
    auto it = params_.find(id);
    if (it == params_.end())
        throw std::invalid_argument("unknown parameter " + to_string(id));
    if (!it->second.same_shape(w))
        throw std::invalid_argument("set_param shape mismatch for " + to_string(id));
    it->second = std::move(w);
    ++version_;
}

void ModelGraph::add_scaled_param(const ParamId& id, const Tensor& delta, double scale) {
    auto it = params_.find(id);
    if (it == params_.end())
        throw std::invalid_argument("unknown parameter " + to_string(id));
    add_scaled(it->second, delta, scale);
    ++version_;
}

void ModelGraph::restore(const Snapshot& s) {
    params_ = s.params;
    version_ = s.version;
}

Tensor im2col(const Tensor& image, std::size_t kernel, std::size_t stride,
              std::size_t pad) {
    if (image.rank() != 3) throw std::invalid_argument("im2col expects a (C,h,w) tensor");
    if (kernel == 0 || stride == 0) throw std::invalid_argument("im2col needs kernel, stride >= 1");
    const std::size_t c = image.extent(0), h = image.extent(1), w = image.extent(2);
    if (h + 2 * pad < kernel || w + 2 * pad < kernel)
        throw std::invalid_argument("im2col kernel larger than padded image");
    const std::size_t oh = (h + 2 * pad - kernel) / stride + 1;
    const std::size_t ow = (w + 2 * pad - kernel) / stride + 1;
    Tensor cols({oh * ow, c * kernel * kernel});
    const double* src = image.data();
    for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
            double* row = cols.data() + (oy * ow + ox) * cols.cols();
            std::size_t col = 0;
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (std::size_t ky = 0; ky < kernel; ++ky) {
                    for (std::size_t kx = 0; kx < kernel; ++kx, ++col) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                                  static_cast<std::ptrdiff_t>(pad);
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                  static_cast<std::ptrdiff_t>(pad);
                        if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) ||
                            ix >= static_cast<std::ptrdiff_t>(w))
                            continue;  // zero padding, row starts zeroed
                        row[col] = src[(ch * h + static_cast<std::size_t>(iy)) * w +
                                       static_cast<std::size_t>(ix)];
                    }
                }
            }
        }
    }
    return cols;
}

Tensor col2im(const Tensor& cols, std::size_t channels, std::size_t h, std::size_t w,
              std::size_t kernel, std::size_t stride, std::size_t pad) {
    if (cols.rank() != 2) throw std::invalid_argument("col2im expects a rank-2 tensor");
    const std::size_t oh = (h + 2 * pad - kernel) / stride + 1;
    const std::size_t ow = (w + 2 * pad - kernel) / stride + 1;
    if (cols.rows() != oh * ow || cols.cols() != channels * kernel * kernel)
        throw std::invalid_argument("col2im shape mismatch: " + shape_string(cols));
    Tensor image({channels, h, w});
    double* dst = image.data();
    for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
            const double* row = cols.data() + (oy * ow + ox) * cols.cols();
            std::size_t col = 0;
            for (std::size_t ch = 0; ch < channels; ++ch) {
                for (std::size_t ky = 0; ky < kernel; ++ky) {
                    for (std::size_t kx = 0; kx < kernel; ++kx, ++col) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                                  static_cast<std::ptrdiff_t>(pad);
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                  static_cast<std::ptrdiff_t>(pad);
                        if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) ||
                            ix >= static_cast<std::ptrdiff_t>(w))
                            continue;
                        dst[(ch * h + static_cast<std::size_t>(iy)) * w +
                            static_cast<std::size_t>(ix)] += row[col];
                    }
                }
            }
        }
    }
    return image;
}

Tensor activation_apply(const Tensor& p, Activation a, double alpha) {
    switch (a) {
        case Activation::identity:
            return p;
        case Activation::relu: {
            Tensor out = p;
            for (std::size_t i = 0; i < out.size(); ++i)
                if (out[i] < 0.0) out[i] = 0.0;
            return out;
        }
        case Activation::leaky_relu: {
            Tensor out = p;
            for (std::size_t i = 0; i < out.size(); ++i)
                if (out[i] < 0.0) out[i] *= alpha;
            return out;
        }
        case Activation::softmax: {
            if (p.rank() != 2)
                throw std::invalid_argument("softmax activation expects rank-2 input");
            Tensor out = p;
            for (std::size_t i = 0; i < out.rows(); ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < out.cols(); ++j) mx = std::max(mx, out(i, j));
                double sum = 0.0;
                for (std::size_t j = 0; j < out.cols(); ++j) {
                    out(i, j) = std::exp(out(i, j) - mx);
                    sum += out(i, j);
                }
                for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) /= sum;
            }
            return out;
        }
    }
    throw std::invalid_argument("unknown activation");
}

namespace {

// Elementwise derivative; softmax is handled structurally by the callers.
Tensor activation_deriv(const Tensor& p, Activation a, double alpha) {
    Tensor d(p.shape());
    switch (a) {
        case Activation::identity:
            d.fill(1.0);
            return d;
        case Activation::relu:
            for (std::size_t i = 0; i < p.size(); ++i) d[i] = p[i] > 0.0 ? 1.0 : 0.0;
            return d;
        case Activation::leaky_relu:
            for (std::size_t i = 0; i < p.size(); ++i) d[i] = p[i] >= 0.0 ? 1.0 : alpha;
            return d;
        case Activation::softmax:
            throw std::invalid_argument("softmax derivative is not elementwise");
    }
    throw std::invalid_argument("unknown activation");
}

Tensor homogeneous(const Tensor& x) {
    Tensor xt({x.rows(), x.cols() + 1});
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t j = 0; j < x.cols(); ++j) xt(i, j) = x(i, j);
        xt(i, x.cols()) = 1.0;
    }
    return xt;
}

// (n*oh*ow x C) row form  <->  (n, C, oh, ow) image form
Tensor rows_to_images(const Tensor& rows, std::size_t n, std::size_t c, std::size_t oh,
                      std::size_t ow) {
    Tensor img({n, c, oh, ow});
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
                const double* r = rows.data() + ((s * oh + y) * ow + x) * c;
                for (std::size_t ch = 0; ch < c; ++ch)
                    img.data()[((s * c + ch) * oh + y) * ow + x] = r[ch];
            }
    return img;
}

Tensor images_to_rows(const Tensor& img, std::size_t n, std::size_t c, std::size_t oh,
                      std::size_t ow) {
    Tensor rows({n * oh * ow, c});
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
                double* r = rows.data() + ((s * oh + y) * ow + x) * c;
                for (std::size_t ch = 0; ch < c; ++ch)
                    r[ch] = img.data()[((s * c + ch) * oh + y) * ow + x];
            }
    return rows;
}

struct ForwardVisitor {
    const ModelGraph& model;
    ForwardTrace& trace;
    NodeTrace& nt;
    std::vector<Tensor>& marks;
    const Tensor& in;

    Tensor operator()(const DenseNode& node) {
        if (in.rank() != 2 || in.cols() != node.in_dim)
            throw std::invalid_argument("dense input shape mismatch: got " +
                                        shape_string(in));
        nt.captured = node.bias ? homogeneous(in) : in;
        nt.preact = matmul(nt.captured, transposed(model.param({node.layer, ParamSlot::dense_w, 0})));
        return activation_apply(nt.preact, node.act, node.alpha);
    }

    Tensor operator()(const Conv2dNode& node) {
        if (in.rank() != 4 || in.extent(1) != node.in_ch || in.extent(2) != node.in_h ||
            in.extent(3) != node.in_w)
            throw std::invalid_argument("conv input shape mismatch: got " +
                                        shape_string(in));
        const std::size_t n = in.extent(0);
        const std::size_t oh = node.out_h(), ow = node.out_w();
        const std::size_t patch = node.in_ch * node.kernel * node.kernel;
        Tensor cols({n * oh * ow, patch});
        Tensor image({node.in_ch, node.in_h, node.in_w});
        const std::size_t per_sample = image.size();
        for (std::size_t s = 0; s < n; ++s) {
            std::copy_n(in.data() + s * per_sample, per_sample, image.data());
            Tensor c = im2col(image, node.kernel, node.stride, node.pad);
            std::copy_n(c.data(), c.size(), cols.data() + s * oh * ow * patch);
        }
        nt.captured = std::move(cols);
        nt.preact = matmul(nt.captured, model.param({node.layer, ParamSlot::conv_w, 0}));
        Tensor act = activation_apply(nt.preact, node.act, node.alpha);
        Tensor img = rows_to_images(act, n, node.out_ch, oh, ow);
        if (node.pool <= 1) return img;
        if (oh % node.pool != 0 || ow % node.pool != 0)
            throw std::invalid_argument("pool window must divide conv output extents");
        const std::size_t ph = oh / node.pool, pw = ow / node.pool;
        Tensor pooled({n, node.out_ch, ph, pw});
        nt.pool_argmax.resize(pooled.size());
        std::size_t out_idx = 0;
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t ch = 0; ch < node.out_ch; ++ch)
                for (std::size_t py = 0; py < ph; ++py)
                    for (std::size_t px = 0; px < pw; ++px, ++out_idx) {
                        double best = -std::numeric_limits<double>::infinity();
                        std::size_t best_idx = 0;
                        for (std::size_t ky = 0; ky < node.pool; ++ky)
                            for (std::size_t kx = 0; kx < node.pool; ++kx) {
                                const std::size_t y = py * node.pool + ky;
                                const std::size_t x = px * node.pool + kx;
                                const std::size_t idx = ((s * node.out_ch + ch) * oh + y) * ow + x;
                                if (img[idx] > best) {
                                    best = img[idx];
                                    best_idx = idx;
                                }
                            }
                        pooled[out_idx] = best;
                        nt.pool_argmax[out_idx] = best_idx;
                    }
        return pooled;
    }

    Tensor operator()(const AttentionNode& node) {
        if (in.rank() != 2 || in.cols() != node.d_in)
            throw std::invalid_argument("attention input shape mismatch: got " +
                                        shape_string(in));
        if (node.heads == 0 || node.d_model % node.heads != 0)
            throw std::invalid_argument("attention heads must divide d_model");
        if (in.rows() != trace.batch_items * node.seq_len)
            throw std::invalid_argument("attention input rows must equal samples*seq_len");
        const std::size_t n = trace.batch_items, t = node.seq_len, dh = node.head_dim();
        const double scale = 1.0 / std::sqrt(static_cast<double>(node.d_model));
        nt.captured = in;
        Tensor concat({n * t, node.d_model});
        for (std::uint32_t head = 0; head < node.heads; ++head) {
            Tensor q = matmul(in, model.param({node.layer, ParamSlot::attn_q, head}));
            Tensor k = matmul(in, model.param({node.layer, ParamSlot::attn_k, head}));
            Tensor v = matmul(in, model.param({node.layer, ParamSlot::attn_v, head}));
            Tensor attn({n * t, t});
            for (std::size_t s = 0; s < n; ++s) {
                const std::size_t base = s * t;
                for (std::size_t i = 0; i < t; ++i) {
                    double mx = -std::numeric_limits<double>::infinity();
                    std::vector<double> row(t, 0.0);
                    for (std::size_t j = 0; j < t; ++j) {
                        if (node.causal && j > i) {
                            row[j] = -std::numeric_limits<double>::infinity();
                            continue;
                        }
                        double d = 0.0;
                        for (std::size_t e = 0; e < dh; ++e)
                            d += q(base + i, e) * k(base + j, e);
                        row[j] = d * scale;
                        mx = std::max(mx, row[j]);
                    }
                    double sum = 0.0;
                    for (std::size_t j = 0; j < t; ++j) {
                        row[j] = std::isinf(row[j]) ? 0.0 : std::exp(row[j] - mx);
                        sum += row[j];
                    }
                    for (std::size_t j = 0; j < t; ++j) attn(base + i, j) = row[j] / sum;
                }
                for (std::size_t i = 0; i < t; ++i)
                    for (std::size_t e = 0; e < dh; ++e) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < t; ++j)
                            acc += attn(base + i, j) * v(base + j, e);
                        concat(base + i, head * dh + e) = acc;
                    }
            }
            nt.head_q.push_back(std::move(q));
            nt.head_k.push_back(std::move(k));
            nt.head_v.push_back(std::move(v));
            nt.head_attn.push_back(std::move(attn));
        }
        nt.concat = std::move(concat);
        return matmul(nt.concat, model.param({node.layer, ParamSlot::attn_o, 0}));
    }

    Tensor operator()(const FlattenNode& node) {
        if (in.rank() != 4 || in.extent(1) != node.ch || in.extent(2) != node.h ||
            in.extent(3) != node.w)
            throw std::invalid_argument("flatten input shape mismatch: got " +
                                        shape_string(in));
        return in.reshaped({in.extent(0), node.ch * node.h * node.w});
    }

    Tensor operator()(const SeqPoolNode& node) {
        if (in.rank() != 2 || in.rows() != trace.batch_items * node.seq_len)
            throw std::invalid_argument("sequence pool input shape mismatch: got " +
                                        shape_string(in));
        const std::size_t n = trace.batch_items, t = node.seq_len, d = in.cols();
        Tensor out({n, d});
        for (std::size_t s = 0; s < n; ++s) {
            if (node.last_token) {
                for (std::size_t j = 0; j < d; ++j) out(s, j) = in(s * t + t - 1, j);
            } else {
                for (std::size_t j = 0; j < d; ++j) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < t; ++i) acc += in(s * t + i, j);
                    out(s, j) = acc / static_cast<double>(t);
                }
            }
        }
        return out;
    }

    Tensor operator()(const ResidualMarkNode&) {
        marks.push_back(in);
        return in;
    }

    Tensor operator()(const ResidualAddNode&) {
        if (marks.empty())
            throw std::invalid_argument("residual add without a matching mark");
        Tensor out = added(in, marks.back());
        marks.pop_back();
        return out;
    }
};

struct BackwardState {
    GradientSet grads;
    std::vector<Tensor> skip;
};

struct BackwardVisitor {
    const ModelGraph& model;
    const ForwardTrace& trace;
    const NodeTrace& nt;
    BackwardState& st;
    const Tensor& g;  // gradient w.r.t. this node's output

    Tensor operator()(const DenseNode& node) {
        const ParamId id{node.layer, ParamSlot::dense_w, 0};
        const Tensor& w = model.param(id);
        Tensor dp;
        if (node.act == Activation::softmax) {
            const Tensor& y = nt.output;
            dp = Tensor(y.shape());
            for (std::size_t i = 0; i < y.rows(); ++i) {
                double rowdot = 0.0;
                for (std::size_t j = 0; j < y.cols(); ++j) rowdot += g(i, j) * y(i, j);
                for (std::size_t j = 0; j < y.cols(); ++j)
                    dp(i, j) = y(i, j) * (g(i, j) - rowdot);
            }
        } else {
            dp = hadamard(g, activation_deriv(nt.preact, node.act, node.alpha));
        }
        st.grads[id] = matmul(transposed(dp), nt.captured);
        Tensor dxt = matmul(dp, w);
        if (!node.bias) return dxt;
        Tensor dx({dxt.rows(), node.in_dim});
        for (std::size_t i = 0; i < dx.rows(); ++i)
            for (std::size_t j = 0; j < node.in_dim; ++j) dx(i, j) = dxt(i, j);
        return dx;
    }

    Tensor operator()(const Conv2dNode& node) {
        const ParamId id{node.layer, ParamSlot::conv_w, 0};
        const Tensor& w = model.param(id);
        const std::size_t n = nt.input.extent(0);
        const std::size_t oh = node.out_h(), ow = node.out_w();
        Tensor dimg({n, node.out_ch, oh, ow});
        if (node.pool > 1) {
            for (std::size_t i = 0; i < g.size(); ++i) dimg[nt.pool_argmax[i]] += g[i];
        } else {
            dimg = g;
        }
        Tensor da = images_to_rows(dimg, n, node.out_ch, oh, ow);
        Tensor dp = hadamard(da, activation_deriv(nt.preact, node.act, node.alpha));
        st.grads[id] = matmul(transposed(nt.captured), dp);
        Tensor dcols = matmul(dp, transposed(w));
        Tensor dx({n, node.in_ch, node.in_h, node.in_w});
        const std::size_t patch = node.in_ch * node.kernel * node.kernel;
        Tensor sample_cols({oh * ow, patch});
        for (std::size_t s = 0; s < n; ++s) {
            std::copy_n(dcols.data() + s * oh * ow * patch, sample_cols.size(),
                        sample_cols.data());
            Tensor di = col2im(sample_cols, node.in_ch, node.in_h, node.in_w, node.kernel,
                               node.stride, node.pad);
            std::copy_n(di.data(), di.size(), dx.data() + s * di.size());
        }
        return dx;
    }

    Tensor operator()(const AttentionNode& node) {
        const std::size_t n = trace.batch_items, t = node.seq_len, dh = node.head_dim();
        const double scale = 1.0 / std::sqrt(static_cast<double>(node.d_model));
        const ParamId oid{node.layer, ParamSlot::attn_o, 0};
        st.grads[oid] = matmul(transposed(nt.concat), g);
        Tensor dconcat = matmul(g, transposed(model.param(oid)));
        Tensor dx({n * t, node.d_in});
        for (std::uint32_t head = 0; head < node.heads; ++head) {
            const Tensor& q = nt.head_q[head];
            const Tensor& k = nt.head_k[head];
            const Tensor& v = nt.head_v[head];
            const Tensor& attn = nt.head_attn[head];
            Tensor dq({n * t, dh}), dk({n * t, dh}), dv({n * t, dh});
            for (std::size_t s = 0; s < n; ++s) {
                const std::size_t base = s * t;
                Tensor dattn({t, t});
                for (std::size_t i = 0; i < t; ++i)
                    for (std::size_t j = 0; j < t; ++j) {
                        double acc = 0.0;
                        for (std::size_t e = 0; e < dh; ++e)
                            acc += dconcat(base + i, head * dh + e) * v(base + j, e);
                        dattn(i, j) = acc;
                    }
                for (std::size_t j = 0; j < t; ++j)
                    for (std::size_t e = 0; e < dh; ++e) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < t; ++i)
                            acc += attn(base + i, j) * dconcat(base + i, head * dh + e);
                        dv(base + j, e) = acc;
                    }
                for (std::size_t i = 0; i < t; ++i) {
                    double rowdot = 0.0;
                    for (std::size_t j = 0; j < t; ++j)
                        rowdot += dattn(i, j) * attn(base + i, j);
                    for (std::size_t j = 0; j < t; ++j) {
                        const double ds = attn(base + i, j) * (dattn(i, j) - rowdot) * scale;
                        for (std::size_t e = 0; e < dh; ++e) {
                            dq(base + i, e) += ds * k(base + j, e);
                            dk(base + j, e) += ds * q(base + i, e);
                        }
                    }
                }
            }
            const ParamId qid{node.layer, ParamSlot::attn_q, head};
            const ParamId kid{node.layer, ParamSlot::attn_k, head};
            const ParamId vid{node.layer, ParamSlot::attn_v, head};
            st.grads[qid] = matmul(transposed(nt.captured), dq);
            st.grads[kid] = matmul(transposed(nt.captured), dk);
            st.grads[vid] = matmul(transposed(nt.captured), dv);
            add_scaled(dx, matmul(dq, transposed(model.param(qid))), 1.0);
            add_scaled(dx, matmul(dk, transposed(model.param(kid))), 1.0);
            add_scaled(dx, matmul(dv, transposed(model.param(vid))), 1.0);
        }
        return dx;
    }

    Tensor operator()(const FlattenNode&) { return g.reshaped(nt.input.shape()); }

    Tensor operator()(const SeqPoolNode& node) {
        const std::size_t n = trace.batch_items, t = node.seq_len, d = nt.input.cols();
        Tensor dx({n * t, d});
        for (std::size_t s = 0; s < n; ++s) {
            if (node.last_token) {
                for (std::size_t j = 0; j < d; ++j) dx(s * t + t - 1, j) = g(s, j);
            } else {
                for (std::size_t i = 0; i < t; ++i)
                    for (std::size_t j = 0; j < d; ++j)
                        dx(s * t + i, j) = g(s, j) / static_cast<double>(t);
            }
        }
        return dx;
    }

    Tensor operator()(const ResidualMarkNode&) {
        if (st.skip.empty())
            throw std::invalid_argument("residual mark without a matching add");
        Tensor out = added(g, st.skip.back());
        st.skip.pop_back();
        return out;
    }

    Tensor operator()(const ResidualAddNode&) {
        st.skip.push_back(g);
        return g;
    }
};

}  // namespace

ForwardTrace forward(const ModelGraph& model, const Tensor& batch) {
    ensure_finite(batch, "forward input");
    ForwardTrace trace;
    trace.model_version = model.version();
    Tensor cur;
    if (batch.rank() == 3) {
        if (model.seq_len() == 0 || batch.extent(1) != model.seq_len())
            throw std::invalid_argument("rank-3 batch requires a sequence model with matching seq_len");
        trace.batch_items = batch.extent(0);
        cur = batch.reshaped({batch.extent(0) * batch.extent(1), batch.extent(2)});
    } else if (batch.rank() == 4 || batch.rank() == 2) {
        trace.batch_items = batch.extent(0);
        cur = batch;
    } else {
        throw std::invalid_argument("forward expects a rank-2, 3 or 4 batch");
    }
    std::vector<Tensor> marks;
    trace.nodes.reserve(model.nodes().size());
    for (const Node& node : model.nodes()) {
        NodeTrace nt;
        nt.input = cur;
        ForwardVisitor v{model, trace, nt, marks, nt.input};
        nt.output = std::visit(v, node);
        ensure_finite(nt.output, "forward activation");
        cur = nt.output;
        trace.nodes.push_back(std::move(nt));
    }
    if (!marks.empty()) throw std::invalid_argument("residual mark without a matching add");
    trace.output = cur;
    return trace;
}

GradientSet backward(const ModelGraph& model, const ForwardTrace& trace,
                     const Tensor& d_output) {
    if (trace.model_version != model.version())
        throw std::runtime_error("backward called with a stale trace (parameters changed)");
    if (trace.nodes.size() != model.nodes().size())
        throw std::invalid_argument("trace does not match the model graph");
    if (!d_output.same_shape(trace.output))
        throw std::invalid_argument("d_output shape mismatch: " + shape_string(d_output) +
                                    " vs " + shape_string(trace.output));
    BackwardState st;
    Tensor g = d_output;
    for (std::size_t i = model.nodes().size(); i > 0; --i) {
        BackwardVisitor v{model, trace, trace.nodes[i - 1], st, g};
        g = std::visit(v, model.nodes()[i - 1]);
        ensure_finite(g, "backward gradient");
    }
    if (!st.skip.empty())
        throw std::invalid_argument("residual add without a matching mark");
    return st.grads;
}

namespace {

Tensor init_weight(std::size_t rows, std::size_t cols, double fan_in, SeededRng& rng,
                   bool zero_last_col = false) {
    Tensor w({rows, cols});
    const double s = 1.0 / std::sqrt(fan_in);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) {
            if (zero_last_col && j + 1 == cols) {
                rng.next_normal();  // keep the stream position shape-determined
                w(i, j) = 0.0;
            } else {
                w(i, j) = rng.next_normal() * s;
            }
        }
    return w;
}

}  // namespace

ModelGraph build_mlp(const MlpSpec& spec, SeededRng& rng) {
    if (spec.input_dim == 0 || spec.output_dim == 0)
        throw std::invalid_argument("mlp needs input_dim and output_dim");
    ModelGraph m;
    std::uint32_t layer = 0;
    std::size_t in = spec.input_dim;
    for (std::size_t h : spec.hidden) {
        m.add_node(DenseNode{layer, in, h, spec.hidden_act, spec.alpha, true});
        m.add_param({layer, ParamSlot::dense_w, 0},
                    init_weight(h, in + 1, static_cast<double>(in), rng, true));
        in = h;
        ++layer;
    }
    m.add_node(DenseNode{layer, in, spec.output_dim, Activation::identity, spec.alpha, true});
    m.add_param({layer, ParamSlot::dense_w, 0},
                init_weight(spec.output_dim, in + 1, static_cast<double>(in), rng, true));
    return m;
}

ModelGraph build_cnn(const CnnSpec& spec, SeededRng& rng) {
    if (spec.channels.empty() || spec.output_dim == 0)
        throw std::invalid_argument("cnn needs channels and output_dim");
    ModelGraph m;
    std::uint32_t layer = 0;
    std::size_t c = spec.in_ch, h = spec.in_h, w = spec.in_w;
    for (std::size_t oc : spec.channels) {
        Conv2dNode node{layer, c, h, w, oc, spec.kernel, spec.stride, spec.pad,
                        spec.pool, spec.act, spec.alpha};
        const std::size_t oh = node.out_h(), ow = node.out_w();
        if (spec.pool > 1 && (oh % spec.pool || ow % spec.pool))
            throw std::invalid_argument("pool window must divide conv output extents");
        m.add_node(node);
        const std::size_t patch = c * spec.kernel * spec.kernel;
        m.add_param({layer, ParamSlot::conv_w, 0},
                    init_weight(patch, oc, static_cast<double>(patch), rng));
        c = oc;
        h = spec.pool > 1 ? oh / spec.pool : oh;
        w = spec.pool > 1 ? ow / spec.pool : ow;
        ++layer;
    }
    m.add_node(FlattenNode{c, h, w});
    const std::size_t flat = c * h * w;
    m.add_node(DenseNode{layer, flat, spec.output_dim, Activation::identity, spec.alpha, true});
    m.add_param({layer, ParamSlot::dense_w, 0},
                init_weight(spec.output_dim, flat + 1, static_cast<double>(flat), rng, true));
    return m;
}

ModelGraph build_transformer(const TransformerSpec& spec, SeededRng& rng) {
    if (spec.seq_len == 0 || spec.d_model == 0 || spec.output_dim == 0 || spec.heads == 0)
        throw std::invalid_argument("transformer needs seq_len, d_model, heads, output_dim");
    if (spec.d_model % spec.heads != 0)
        throw std::invalid_argument("heads must divide d_model");
    ModelGraph m;
    m.set_seq_len(spec.seq_len);
    std::uint32_t layer = 0;
    m.add_node(DenseNode{layer, spec.input_dim, spec.d_model, Activation::identity, 0.1, true});
    m.add_param({layer, ParamSlot::dense_w, 0},
                init_weight(spec.d_model, spec.input_dim + 1,
                            static_cast<double>(spec.input_dim), rng, true));
    ++layer;
    const std::size_t dh = spec.d_model / spec.heads;
    for (std::size_t b = 0; b < spec.blocks; ++b) {
        m.add_node(ResidualMarkNode{});
        m.add_node(AttentionNode{layer, spec.seq_len, spec.d_model, spec.d_model,
                                 spec.d_model, spec.heads, spec.causal});
        for (std::uint32_t head = 0; head < spec.heads; ++head) {
            const double fan = static_cast<double>(spec.d_model);
            m.add_param({layer, ParamSlot::attn_q, head}, init_weight(spec.d_model, dh, fan, rng));
            m.add_param({layer, ParamSlot::attn_k, head}, init_weight(spec.d_model, dh, fan, rng));
            m.add_param({layer, ParamSlot::attn_v, head}, init_weight(spec.d_model, dh, fan, rng));
        }
        m.add_param({layer, ParamSlot::attn_o, 0},
                    init_weight(spec.d_model, spec.d_model,
                                static_cast<double>(spec.d_model), rng));
        ++layer;
        m.add_node(ResidualAddNode{});
        m.add_node(ResidualMarkNode{});
        m.add_node(DenseNode{layer, spec.d_model, spec.ffn_dim, Activation::relu, 0.1, true});
        m.add_param({layer, ParamSlot::dense_w, 0},
                    init_weight(spec.ffn_dim, spec.d_model + 1,
                                static_cast<double>(spec.d_model), rng, true));
        ++layer;
        m.add_node(DenseNode{layer, spec.ffn_dim, spec.d_model, Activation::identity, 0.1, true});
        m.add_param({layer, ParamSlot::dense_w, 0},
                    init_weight(spec.d_model, spec.ffn_dim + 1,
                                static_cast<double>(spec.ffn_dim), rng, true));
        ++layer;
        m.add_node(ResidualAddNode{});
    }
    m.add_node(SeqPoolNode{spec.seq_len, spec.pool_last_token});
    m.add_node(DenseNode{layer, spec.d_model, spec.output_dim, Activation::identity, 0.1, true});
    m.add_param({layer, ParamSlot::dense_w, 0},
                init_weight(spec.output_dim, spec.d_model + 1,
                            static_cast<double>(spec.d_model), rng, true));
    return m;
}

namespace {

constexpr std::uint32_t kBlobVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

void save_params(const ModelGraph& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os.write("NLPT", 4);
    put_u32(os, kBlobVersion);
    put_u32(os, static_cast<std::uint32_t>(model.params().size()));
    for (const auto& [id, w] : model.params()) {
        put_u32(os, id.layer);
        put_u32(os, static_cast<std::uint32_t>(id.slot));
        put_u32(os, id.head);
        put_u32(os, static_cast<std::uint32_t>(w.rank()));
        for (std::size_t ax = 0; ax < w.rank(); ++ax) put_u64(os, w.extent(ax));
        for (std::size_t i = 0; i < w.size(); ++i)
            put_u64(os, std::bit_cast<std::uint64_t>(w[i]));
    }
    if (!os) throw std::runtime_error("failed writing parameter blob to " + path);
}

void load_params(ModelGraph& model, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "NLPT", 4) != 0)
        throw std::runtime_error(path + " is not a parameter blob (bad magic)");
    const std::uint32_t version = get_u32(is);
    if (version != kBlobVersion)
        throw std::runtime_error("unsupported parameter blob version");
    const std::uint32_t count = get_u32(is);
    if (count != model.params().size())
        throw std::runtime_error("parameter blob count does not match the model");
    for (std::uint32_t p = 0; p < count; ++p) {
        ParamId id;
        id.layer = get_u32(is);
        id.slot = static_cast<ParamSlot>(get_u32(is));
        id.head = get_u32(is);
        const std::uint32_t rank = get_u32(is);
        std::vector<std::size_t> shape(rank);
        for (std::uint32_t ax = 0; ax < rank; ++ax)
            shape[ax] = static_cast<std::size_t>(get_u64(is));
        Tensor w(shape);
        for (std::size_t i = 0; i < w.size(); ++i)
            w[i] = std::bit_cast<double>(get_u64(is));
        if (!is) throw std::runtime_error("truncated parameter blob: " + path);
        model.set_param(id, std::move(w));
    }
}

}  // namespace nullport
