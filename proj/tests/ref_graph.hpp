#pragma once

// Shared by the tape unit tests and the acceptance gradient-check: an
// independent reference interpreter over the op vocabulary, with central
// finite differences that freeze stop-gradient outputs at their base values.

#include <cmath>
#include <utility>
#include <vector>

#include "casrl/rng.hpp"
#include "casrl/tape.hpp"

namespace casrl::testref {

// Independent reference interpreter for gradient checking. Mirrors the op
// vocabulary with plain Eigen, and supports freezing stop-gradient outputs at
// their base values so central differences measure the same function the tape
// differentiates.
struct TOp {
    enum Kind { Leaf, MatMul, Add, Concat, Relu, Tanh, Sigmoid, Scale, Affine, Mean, Mse, Stop };
    Kind kind;
    int a = -1, b = -1;
    int leaf = -1;
    double c = 0.0;
    std::vector<int> parts;
    Vec s, t;
};

struct RefGraph {
    std::vector<TOp> ops;

    // Evaluates node values. If frozen != nullptr, stop nodes read their
    // recorded base value instead of recomputing.
    std::vector<Mat> eval(const std::vector<Mat>& leaves,
                          const std::vector<Mat>* frozen) const {
        std::vector<Mat> vals(ops.size());
        for (size_t i = 0; i < ops.size(); ++i) {
            const TOp& op = ops[i];
            switch (op.kind) {
                case TOp::Leaf: vals[i] = leaves[static_cast<size_t>(op.leaf)]; break;
                case TOp::MatMul: vals[i] = vals[op.a] * vals[op.b]; break;
                case TOp::Add:
                    if (vals[op.b].rows() == vals[op.a].rows())
                        vals[i] = vals[op.a] + vals[op.b];
                    else
                        vals[i] = vals[op.a].rowwise() + vals[op.b].row(0);
                    break;
                case TOp::Concat: {
                    Index cols = 0;
                    for (int p : op.parts) cols += vals[p].cols();
                    Mat m(vals[op.parts[0]].rows(), cols);
                    Index at = 0;
                    for (int p : op.parts) {
                        m.middleCols(at, vals[p].cols()) = vals[p];
                        at += vals[p].cols();
                    }
                    vals[i] = m;
                    break;
                }
                case TOp::Relu: vals[i] = vals[op.a].cwiseMax(0.0); break;
                case TOp::Tanh: vals[i] = vals[op.a].array().tanh().matrix(); break;
                case TOp::Sigmoid:
                    vals[i] = (1.0 / (1.0 + (-vals[op.a].array()).exp())).matrix();
                    break;
                case TOp::Scale: vals[i] = vals[op.a] * op.c; break;
                case TOp::Affine:
                    vals[i] = ((vals[op.a].array().rowwise() * op.s.transpose().array())
                                   .rowwise() +
                               op.t.transpose().array())
                                  .matrix();
                    break;
                case TOp::Mean: {
                    Mat m(1, 1);
                    m(0, 0) = vals[op.a].mean();
                    vals[i] = m;
                    break;
                }
                case TOp::Mse: {
                    Mat m(1, 1);
                    m(0, 0) = (vals[op.a] - vals[op.b]).squaredNorm() /
                              static_cast<double>(vals[op.a].size());
                    vals[i] = m;
                    break;
                }
                case TOp::Stop:
                    vals[i] = frozen ? (*frozen)[i] : vals[op.a];
                    break;
            }
        }
        return vals;
    }

    // Central finite differences of the final (scalar) node w.r.t. one leaf,
    // with stop nodes frozen at their base-point values.
    Mat fd_grad(const std::vector<Mat>& leaves, int leaf_idx, double h) const {
        std::vector<Mat> base = eval(leaves, nullptr);
        Mat g(leaves[static_cast<size_t>(leaf_idx)].rows(),
              leaves[static_cast<size_t>(leaf_idx)].cols());
        std::vector<Mat> work = leaves;
        for (Index r = 0; r < g.rows(); ++r) {
            for (Index c = 0; c < g.cols(); ++c) {
                double orig = work[static_cast<size_t>(leaf_idx)](r, c);
                work[static_cast<size_t>(leaf_idx)](r, c) = orig + h;
                double up = eval(work, &base).back()(0, 0);
                work[static_cast<size_t>(leaf_idx)](r, c) = orig - h;
                double dn = eval(work, &base).back()(0, 0);
                work[static_cast<size_t>(leaf_idx)](r, c) = orig;
                g(r, c) = (up - dn) / (2.0 * h);
            }
        }
        return g;
    }

    // Replays the same op list onto a tape; returns leaf node ids and output.
    std::pair<std::vector<NodeId>, NodeId> build(Tape& tape,
                                                 const std::vector<Mat>& leaves) const {
        std::vector<NodeId> ids(ops.size());
        std::vector<NodeId> leaf_ids;
        for (size_t i = 0; i < ops.size(); ++i) {
            const TOp& op = ops[i];
            switch (op.kind) {
                case TOp::Leaf:
                    ids[i] = tape.leaf(leaves[static_cast<size_t>(op.leaf)]);
                    leaf_ids.push_back(ids[i]);
                    break;
                case TOp::MatMul: ids[i] = tape.matmul(ids[op.a], ids[op.b]); break;
                case TOp::Add: ids[i] = tape.add(ids[op.a], ids[op.b]); break;
                case TOp::Concat: {
                    std::vector<NodeId> ps;
                    for (int p : op.parts) ps.push_back(ids[p]);
                    ids[i] = tape.concat(std::span<const NodeId>(ps.data(), ps.size()));
                    break;
                }
                case TOp::Relu: ids[i] = tape.relu(ids[op.a]); break;
                case TOp::Tanh: ids[i] = tape.tanh(ids[op.a]); break;
                case TOp::Sigmoid: ids[i] = tape.sigmoid(ids[op.a]); break;
                case TOp::Scale: ids[i] = tape.scale(ids[op.a], op.c); break;
                case TOp::Affine: ids[i] = tape.cwise_affine(ids[op.a], op.s, op.t); break;
                case TOp::Mean: ids[i] = tape.mean(ids[op.a]); break;
                case TOp::Mse: ids[i] = tape.mse(ids[op.a], ids[op.b]); break;
                case TOp::Stop: ids[i] = tape.stop_gradient(ids[op.a]); break;
            }
        }
        return {leaf_ids, ids.back()};
    }
};

Mat random_mat(Rng& rng, Index r, Index c) {
    Mat m(r, c);
    for (Index i = 0; i < r; ++i)
        for (Index j = 0; j < c; ++j) m(i, j) = rng.uniform(-1.0, 1.0);
    return m;
}

// Random DAG over the op vocabulary ending in a scalar.
std::pair<RefGraph, std::vector<Mat>> random_graph(uint64_t seed, bool with_stops) {
    Rng rng(seed);
    RefGraph g;
    std::vector<Mat> leaves;
    std::vector<std::pair<Index, Index>> shape;  // per node

    auto add_leaf = [&](Index r, Index c) {
        leaves.push_back(random_mat(rng, r, c));
        TOp op;
        op.kind = TOp::Leaf;
        op.leaf = static_cast<int>(leaves.size() - 1);
        g.ops.push_back(op);
        shape.emplace_back(r, c);
        return static_cast<int>(g.ops.size() - 1);
    };

    add_leaf(1, 2 + static_cast<Index>(rng.below(3)));
    add_leaf(shape[0].second, 2 + static_cast<Index>(rng.below(3)));

    int steps = 6 + static_cast<int>(rng.below(6));
    for (int s = 0; s < steps; ++s) {
        int pick = static_cast<int>(rng.below(static_cast<uint64_t>(g.ops.size())));
        auto [r, c] = shape[static_cast<size_t>(pick)];
        TOp op;
        switch (rng.below(8)) {
            case 0: {  // matmul with a fresh compatible leaf
                int other = add_leaf(c, 1 + static_cast<Index>(rng.below(3)));
                op.kind = TOp::MatMul;
                op.a = pick;
                op.b = other;
                shape.emplace_back(r, shape[static_cast<size_t>(other)].second);
                break;
            }
            case 1: {  // add (same shape or broadcast row)
                bool bcast = r > 1 && rng.below(2) == 0;
                int other = add_leaf(bcast ? 1 : r, c);
                op.kind = TOp::Add;
                op.a = pick;
                op.b = other;
                shape.emplace_back(r, c);
                break;
            }
            case 2: {  // concat with a fresh leaf of equal rows
                int other = add_leaf(r, 1 + static_cast<Index>(rng.below(3)));
                op.kind = TOp::Concat;
                op.parts = {pick, other};
                shape.emplace_back(r, c + shape[static_cast<size_t>(other)].second);
                break;
            }
            case 3:
                op.kind = TOp::Tanh;
                op.a = pick;
                shape.emplace_back(r, c);
                break;
            case 4:
                op.kind = TOp::Sigmoid;
                op.a = pick;
                shape.emplace_back(r, c);
                break;
            case 5:
                op.kind = TOp::Scale;
                op.a = pick;
                op.c = rng.uniform(-2.0, 2.0);
                shape.emplace_back(r, c);
                break;
            case 6: {
                op.kind = TOp::Affine;
                op.a = pick;
                op.s = Vec(c);
                op.t = Vec(c);
                for (Index i = 0; i < c; ++i) {
                    op.s[i] = rng.uniform(0.5, 2.0);
                    op.t[i] = rng.uniform(-1.0, 1.0);
                }
                shape.emplace_back(r, c);
                break;
            }
            default:
                if (with_stops && rng.below(2) == 0) {
                    op.kind = TOp::Stop;
                    op.a = pick;
                } else {
                    op.kind = TOp::Tanh;  // relu kinked at 0 trips FD; keep it out
                    op.a = pick;          // of random graphs, tested separately
                }
                shape.emplace_back(r, c);
                break;
        }
        g.ops.push_back(op);
    }

    TOp mean;
    mean.kind = TOp::Mean;
    mean.a = static_cast<int>(g.ops.size() - 1);
    g.ops.push_back(mean);
    return {std::move(g), std::move(leaves)};
}


}  // namespace casrl::testref
