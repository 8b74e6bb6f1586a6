#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "weightspace/matrix.hpp"

namespace weightspace::ad {

using NodeId = std::int32_t;

// Reverse-mode tape over Matrix values. Nodes are created in forward order;
// backward() sweeps the tape in reverse, accumulating gradients into every
// node. Leaves are plain values whose gradients can be read out afterwards.
class Tape {
public:
    NodeId leaf(Matrix value);

    const Matrix& value(NodeId id) const { return nodes_[id].value; }
    const Matrix& grad(NodeId id) const { return nodes_[id].grad; }

    NodeId matmul(NodeId a, NodeId b);
    NodeId matmul_nt(NodeId a, NodeId b);  // a * b^T
    NodeId add(NodeId a, NodeId b);
    NodeId add_row_broadcast(NodeId x, NodeId row);  // row is [1 x c]
    NodeId add_const(NodeId x, Matrix constant);
    NodeId hadamard_const(NodeId x, Matrix constant);
    NodeId scale(NodeId x, double s);
    NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, double eps = 1e-5);
    NodeId softmax_rows(NodeId x);
    NodeId gelu(NodeId x);
    NodeId slice_cols(NodeId x, std::size_t begin, std::size_t end);
    NodeId concat_cols(const std::vector<NodeId>& parts);
    NodeId concat_rows(const std::vector<NodeId>& parts);
    NodeId mean_rows(NodeId x);  // [1 x c]
    NodeId l2_normalize_rows(NodeId x);
    NodeId sum_all(NodeId x);  // [1 x 1]
    NodeId add_scalars(const std::vector<NodeId>& scalars);

    // Sum over signal elements of ((pred - mean) * inv_std - target_norm)^2,
    // where target_norm is the already-normalized target. Returns [1 x 1].
    NodeId masked_scaled_sq_error(NodeId pred, const Matrix& target_norm, const Matrix& mask,
                                  double mean, double inv_std);

    // NT-Xent over pre-scaled similarity logits for 2B stacked embeddings
    // (rows i and i+B are positive pairs). Returns the mean loss, [1 x 1].
    NodeId nt_xent_from_logits(NodeId logits);

    void backward(NodeId loss);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        std::function<void(Tape&)> backprop;  // empty for leaves
    };

    NodeId push(Matrix value, std::function<void(Tape&)> backprop);
    Matrix& grad_mut(NodeId id) { return nodes_[id].grad; }

    std::vector<Node> nodes_;
};

}  // namespace weightspace::ad
