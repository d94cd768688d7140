#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "casrl/types.hpp"

namespace casrl {

// Handle into a Tape. Valid only for the tape that produced it.
struct NodeId {
    int32_t v = -1;
    bool valid() const { return v >= 0; }
};

// Reverse-mode differentiation record over dense matrices. A tape is built per
// forward pass and discarded after backward. Node order is a topological order
// by construction: an op may only reference ids already on the tape.
//
// Vectors are represented as 1xC rows so the same ops serve both per-sample
// and batched (BxC) computation.
class Tape {
public:
    enum class Op : uint8_t {
        Leaf,
        MatMul,
        Add,        // same shape, or rhs is a 1xC row broadcast over rows
        Concat,     // column-wise, equal row counts
        Relu,
        Tanh,
        Sigmoid,
        Scale,      // x * scalar constant
        CwiseAffine,  // per-column x*s + t with constant s, t
        Mean,       // scalar mean over all entries
        Mse,        // scalar mean squared error between two same-shaped nodes
        StopGradient,
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    NodeId leaf(Mat value);
    NodeId leaf_row(const Vec& value) { return leaf(as_row(value)); }

    NodeId matmul(NodeId a, NodeId b);
    NodeId add(NodeId a, NodeId b);
    NodeId concat(std::span<const NodeId> parts);
    NodeId concat(std::initializer_list<NodeId> parts) {
        return concat(std::span<const NodeId>(parts.begin(), parts.size()));
    }
    NodeId relu(NodeId x);
    NodeId tanh(NodeId x);
    NodeId sigmoid(NodeId x);
    NodeId scale(NodeId x, double s);
    NodeId cwise_affine(NodeId x, Vec col_scale, Vec col_shift);
    NodeId mean(NodeId x);
    NodeId mse(NodeId pred, NodeId target);

    // Forward value identical to x; propagates exactly zero gradient upstream.
    NodeId stop_gradient(NodeId x);

    const Mat& value(NodeId id) const { return nodes_[check(id)].value; }

    // Accumulates d(output)/d(node) for every node reachable from `output`.
    // `output` must be scalar (1x1). May be called once per tape.
    void backward(NodeId output);

    // Gradient of the last backward() output w.r.t. `id`; zeros if unreachable.
    Mat grad(NodeId id) const;

    size_t size() const { return nodes_.size(); }
    void reserve(size_t n) { nodes_.reserve(n); }

    static Mat as_row(const Vec& v) {
        return Eigen::Map<const Mat>(v.data(), 1, v.size());
    }

private:
    struct Node {
        Op op;
        int32_t a = -1;
        int32_t b = -1;
        int32_t aux = -1;
        double scalar = 0.0;
        Mat value;
    };

    int32_t check(NodeId id) const;
    NodeId push(Node n);
    const Mat& val(int32_t i) const { return nodes_[i].value; }

    std::vector<Node> nodes_;
    std::vector<std::vector<int32_t>> concat_parts_;
    std::vector<std::pair<Vec, Vec>> affines_;
    std::vector<Mat> grads_;  // parallel to nodes_, empty until touched
};

}  // namespace casrl
