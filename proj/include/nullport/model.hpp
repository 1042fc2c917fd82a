#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "nullport/rng.hpp"
#include "nullport/tensor.hpp"

namespace nullport {

enum class ParamSlot : std::uint32_t {
    dense_w = 0,
    conv_w = 1,
    attn_q = 2,
    attn_k = 3,
    attn_v = 4,
    attn_o = 5,
    embed = 6,  // reserved for embedding tables; no builder emits one
};

struct ParamId {
    std::uint32_t layer = 0;
    ParamSlot slot = ParamSlot::dense_w;
    std::uint32_t head = 0;

    auto operator<=>(const ParamId&) const = default;
};

std::string to_string(const ParamId& id);

using ParamMap = std::map<ParamId, Tensor>;
using GradientSet = std::map<ParamId, Tensor>;

enum class Activation { identity, relu, leaky_relu, softmax };

Activation activation_from_string(const std::string& name);
std::string to_string(Activation a);

// Elementwise (or, for softmax, row-wise) application of an activation.
Tensor activation_apply(const Tensor& preact, Activation a, double alpha);

// Row-items dense layer. Weights are (out x in+1) when bias is folded:
// inputs get a trailing homogeneous 1 so the bias is just another column.
struct DenseNode {
    std::uint32_t layer = 0;
    std::size_t in_dim = 0;
    std::size_t out_dim = 0;
    Activation act = Activation::identity;
    double alpha = 0.1;  // leaky_relu slope
    bool bias = true;
};

// Bias-free convolution, weights ((in_ch*k*k) x out_ch), applied through
// im2col. Optional non-overlapping max pool of window `pool` after the
// activation (0 or 1 disables it).
struct Conv2dNode {
    std::uint32_t layer = 0;
    std::size_t in_ch = 0, in_h = 0, in_w = 0;
    std::size_t out_ch = 0;
    std::size_t kernel = 3, stride = 1, pad = 1;
    std::size_t pool = 0;
    Activation act = Activation::relu;
    double alpha = 0.1;

    std::size_t out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
    std::size_t out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
};

// Multi-head self-attention on (n*seq_len x d_in) token rows. Per-head
// projections are bias-free (d_in x d_model/heads); the output projection is
// (d_model x d_out). Scores are scaled by 1/sqrt(d_model).
struct AttentionNode {
    std::uint32_t layer = 0;
    std::size_t seq_len = 0;
    std::size_t d_in = 0;
    std::size_t d_model = 0;
    std::size_t d_out = 0;
    std::size_t heads = 1;
    bool causal = false;

    std::size_t head_dim() const { return d_model / heads; }
};

// (n, C, h, w) -> (n, C*h*w)
struct FlattenNode {
    std::size_t ch = 0, h = 0, w = 0;
};

// (n*seq_len, d) -> (n, d); mean over tokens, or the last token when
// last_token is set.
struct SeqPoolNode {
    std::size_t seq_len = 0;
    bool last_token = false;
};

// Residual bookkeeping: Mark saves the current activation, Add sums the most
// recent unmatched mark into the current activation (LIFO pairing).
struct ResidualMarkNode {};
struct ResidualAddNode {};

using Node = std::variant<DenseNode, Conv2dNode, AttentionNode, FlattenNode,
                          SeqPoolNode, ResidualMarkNode, ResidualAddNode>;

struct NodeTrace {
    Tensor input;
    Tensor captured;  // exact operand multiplying the weight (see module docs)
    Tensor preact;    // pre-activation, row form
    Tensor output;
    std::vector<std::size_t> pool_argmax;  // flat indices into pre-pool activation
    std::vector<Tensor> head_q, head_k, head_v;  // per head, (n*T x head_dim)
    std::vector<Tensor> head_attn;               // per head, (n*T x T) row blocks
    Tensor concat;  // concatenated heads, the operand for the output projection
};

struct ForwardTrace {
    std::vector<NodeTrace> nodes;
    Tensor output;
    std::uint64_t model_version = 0;
    std::size_t batch_items = 0;  // number of samples in the batch
};

class ModelGraph {
public:
    void add_node(Node n) { nodes_.push_back(std::move(n)); }
    void add_param(ParamId id, Tensor w);

    const std::vector<Node>& nodes() const { return nodes_; }
    const ParamMap& params() const { return params_; }
    const Tensor& param(const ParamId& id) const;
    std::uint64_t version() const { return version_; }

    // Sequence length expected on rank-3 input; 0 for image/flat models.
    std::size_t seq_len() const { return seq_len_; }
    void set_seq_len(std::size_t t) { seq_len_ = t; }

    // Parameters eligible for teleport updates; defaults to all of them.
    const std::set<ParamId>& teleportable() const { return teleportable_; }
    void set_teleportable(std::set<ParamId> ids);

    void set_param(const ParamId& id, Tensor w);
    void add_scaled_param(const ParamId& id, const Tensor& delta, double scale);

    struct Snapshot {
        ParamMap params;
        std::uint64_t version = 0;
    };
    Snapshot snapshot() const { return {params_, version_}; }
    void restore(const Snapshot& s);

private:
    std::vector<Node> nodes_;
    ParamMap params_;
    std::set<ParamId> teleportable_;
    std::size_t seq_len_ = 0;
    std::uint64_t version_ = 0;
};

// batch: (n, d) flat rows, (n, C, h, w) images, or (n, T, d) sequences.
ForwardTrace forward(const ModelGraph& model, const Tensor& batch);

// d_output matches trace.output. Returns gradients for every parameter.
// Throws if the trace was produced by a different parameter version.
GradientSet backward(const ModelGraph& model, const ForwardTrace& trace,
                     const Tensor& d_output);

// Patch matrix of one (C, h, w) image: row per output position (row-major),
// column layout channel-major then patch-row-major.
Tensor im2col(const Tensor& image, std::size_t kernel, std::size_t stride,
              std::size_t pad);

// Adjoint of im2col: scatter-adds patch rows back into a (C, h, w) image.
Tensor col2im(const Tensor& cols, std::size_t channels, std::size_t h, std::size_t w,
              std::size_t kernel, std::size_t stride, std::size_t pad);

struct MlpSpec {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden;
    std::size_t output_dim = 0;
    Activation hidden_act = Activation::relu;
    double alpha = 0.1;
};

struct CnnSpec {
    std::size_t in_ch = 1, in_h = 8, in_w = 8;
    std::vector<std::size_t> channels;
    std::size_t kernel = 3, stride = 1, pad = 1, pool = 2;
    std::size_t output_dim = 0;
    Activation act = Activation::relu;
    double alpha = 0.1;
};

struct TransformerSpec {
    std::size_t seq_len = 0;
    std::size_t input_dim = 0;
    std::size_t d_model = 0;
    std::size_t heads = 1;
    std::size_t blocks = 1;
    std::size_t ffn_dim = 0;
    std::size_t output_dim = 0;
    bool causal = false;
    bool pool_last_token = false;
};

ModelGraph build_mlp(const MlpSpec& spec, SeededRng& rng);
ModelGraph build_cnn(const CnnSpec& spec, SeededRng& rng);
ModelGraph build_transformer(const TransformerSpec& spec, SeededRng& rng);

// Flat parameter blob: "NLPT" magic, format version, then per-parameter id,
// shape and row-major doubles, all little-endian.
void save_params(const ModelGraph& model, const std::string& path);
void load_params(ModelGraph& model, const std::string& path);

}  // namespace nullport
