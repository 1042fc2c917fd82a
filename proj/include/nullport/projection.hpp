#pragma once

#include <map>
#include <memory>

#include "nullport/model.hpp"

namespace nullport {

// Which side of the gradient the basis projector acts on. Dense layers
// multiply inputs from the right (rows of the gradient live in input space);
// conv and attention weights multiply inputs from the left.
enum class ProjectionSide { right, left };

// Feature-space representation of what a weight group saw on a batch:
// columns are the batch vectors the weight multiplies. Bases extracted from
// it span the directions that influence the layer output on that batch.
struct RepresentationMatrix {
    std::string group;  // e.g. "L1.attn_in"
    Tensor mat;         // features x batch columns
    ProjectionSide side = ProjectionSide::right;
};

struct CoreBasis {
    std::string group;
    Tensor b;  // features x rank, orthonormal columns; empty when rank == 0
    ProjectionSide side = ProjectionSide::right;
    std::size_t rank = 0;
    double energy_fraction = 1.0;
    std::vector<double> singular_values;
};

// Groups of parameters that share one representation (attention q/k/v across
// heads share the token matrix; the output projection has its own).
struct BasisGroupKey {
    std::uint32_t layer = 0;
    enum class Kind { dense, conv, attn_in, attn_out } kind = Kind::dense;

    auto operator<=>(const BasisGroupKey&) const = default;
};

std::string to_string(const BasisGroupKey& key);

RepresentationMatrix capture_representation(const ModelGraph& model,
                                            const ForwardTrace& trace,
                                            const BasisGroupKey& key);

// Smallest k whose leading squared singular values reach fraction tau of the
// total squared mass. Values below 1e-12 * s_max count as zero; all-zero
// input selects k = 0. Input must be sorted descending, tau in [0, 1].
std::size_t select_rank(const std::vector<double>& singular_values, double tau);

CoreBasis core_basis(const RepresentationMatrix& rep, double tau);

// Removes the basis-spanned component: right side g - (g b) b^T, left side
// g - b (b^T g). Pure; rank 0 returns the gradient unchanged.
Tensor project(const Tensor& grad, const CoreBasis& basis);

using BasisMap = std::map<ParamId, std::shared_ptr<const CoreBasis>>;

// One SVD per weight group; threads > 1 factorizes groups in parallel
// (results are bit-identical to the single-threaded run).
BasisMap build_all_bases(const ModelGraph& model, const ForwardTrace& trace, double tau,
                         int threads = 1);

}  // namespace nullport
