#include "casrl/tape.hpp"

#include <cmath>
#include <string>

namespace casrl {

namespace {

std::string op_name(Tape::Op op) {
    switch (op) {
        case Tape::Op::Leaf: return "leaf";
        case Tape::Op::MatMul: return "matmul";
        case Tape::Op::Add: return "add";
        case Tape::Op::Concat: return "concat";
        case Tape::Op::Relu: return "relu";
        case Tape::Op::Tanh: return "tanh";
        case Tape::Op::Sigmoid: return "sigmoid";
        case Tape::Op::Scale: return "scale";
        case Tape::Op::CwiseAffine: return "cwise_affine";
        case Tape::Op::Mean: return "mean";
        case Tape::Op::Mse: return "mse";
        case Tape::Op::StopGradient: return "stop_gradient";
    }
    return "?";
}

[[noreturn]] void shape_error(Tape::Op op, const Mat& a, const Mat& b) {
    throw DimensionError(op_name(op) + ": incompatible shapes " + shape_str(a) +
                         " and " + shape_str(b));
}

}  // namespace

int32_t Tape::check(NodeId id) const {
    if (!id.valid() || static_cast<size_t>(id.v) >= nodes_.size())
        throw ContractError("tape: node id " + std::to_string(id.v) + " not on this tape");
    return id.v;
}

NodeId Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return NodeId{static_cast<int32_t>(nodes_.size() - 1)};
}

NodeId Tape::leaf(Mat value) {
    return push({Op::Leaf, -1, -1, -1, 0.0, std::move(value)});
}

NodeId Tape::matmul(NodeId a, NodeId b) {
    int32_t ia = check(a), ib = check(b);
    const Mat& A = val(ia);
    const Mat& B = val(ib);
    if (A.cols() != B.rows()) shape_error(Op::MatMul, A, B);
    return push({Op::MatMul, ia, ib, -1, 0.0, A * B});
}

NodeId Tape::add(NodeId a, NodeId b) {
    int32_t ia = check(a), ib = check(b);
    const Mat& A = val(ia);
    const Mat& B = val(ib);
    if (A.rows() == B.rows() && A.cols() == B.cols())
        return push({Op::Add, ia, ib, -1, 0.0, A + B});
    if (B.rows() == 1 && B.cols() == A.cols())  // row broadcast (bias)
        return push({Op::Add, ia, ib, -1, 0.0, A.rowwise() + B.row(0)});
    shape_error(Op::Add, A, B);
}

NodeId Tape::concat(std::span<const NodeId> parts) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    std::vector<int32_t> ids;
    ids.reserve(parts.size());
    Index rows = val(check(parts[0])).rows();
    Index cols = 0;
    for (NodeId p : parts) {
        int32_t i = check(p);
        if (val(i).rows() != rows) shape_error(Op::Concat, val(ids.empty() ? i : ids[0]), val(i));
        ids.push_back(i);
        cols += val(i).cols();
    }
    Mat out(rows, cols);
    Index at = 0;
    for (int32_t i : ids) {
        out.middleCols(at, val(i).cols()) = val(i);
        at += val(i).cols();
    }
    concat_parts_.push_back(std::move(ids));
    return push({Op::Concat, -1, -1, static_cast<int32_t>(concat_parts_.size() - 1), 0.0,
                 std::move(out)});
}

NodeId Tape::relu(NodeId x) {
    int32_t i = check(x);
    return push({Op::Relu, i, -1, -1, 0.0, val(i).cwiseMax(0.0)});
}

NodeId Tape::tanh(NodeId x) {
    int32_t i = check(x);
    return push({Op::Tanh, i, -1, -1, 0.0, val(i).array().tanh().matrix()});
}

NodeId Tape::sigmoid(NodeId x) {
    int32_t i = check(x);
    Mat y = (1.0 / (1.0 + (-val(i).array()).exp())).matrix();
    return push({Op::Sigmoid, i, -1, -1, 0.0, std::move(y)});
}

NodeId Tape::scale(NodeId x, double s) {
    int32_t i = check(x);
    return push({Op::Scale, i, -1, -1, s, val(i) * s});
}

NodeId Tape::cwise_affine(NodeId x, Vec col_scale, Vec col_shift) {
    int32_t i = check(x);
    const Mat& X = val(i);
    if (col_scale.size() != X.cols() || col_shift.size() != X.cols())
        throw DimensionError("cwise_affine: input " + shape_str(X) + " vs " +
                             std::to_string(col_scale.size()) + " scale coefficients");
    Mat y = (X.array().rowwise() * col_scale.transpose().array()).rowwise() +
            col_shift.transpose().array();
    affines_.emplace_back(std::move(col_scale), std::move(col_shift));
    return push({Op::CwiseAffine, i, -1, static_cast<int32_t>(affines_.size() - 1), 0.0,
                 std::move(y)});
}

NodeId Tape::mean(NodeId x) {
    int32_t i = check(x);
    Mat y(1, 1);
    y(0, 0) = val(i).mean();
    return push({Op::Mean, i, -1, -1, 0.0, std::move(y)});
}

NodeId Tape::mse(NodeId pred, NodeId target) {
    int32_t ia = check(pred), ib = check(target);
    const Mat& A = val(ia);
    const Mat& B = val(ib);
    if (A.rows() != B.rows() || A.cols() != B.cols()) shape_error(Op::Mse, A, B);
    Mat y(1, 1);
    y(0, 0) = (A - B).squaredNorm() / static_cast<double>(A.size());
    return push({Op::Mse, ia, ib, -1, 0.0, std::move(y)});
}

NodeId Tape::stop_gradient(NodeId x) {
    int32_t i = check(x);
    return push({Op::StopGradient, i, -1, -1, 0.0, val(i)});
}

void Tape::backward(NodeId output) {
    int32_t out = check(output);
    const Mat& o = val(out);
    if (o.rows() != 1 || o.cols() != 1)
        throw ContractError("backward: output must be scalar, got " + shape_str(o));

    grads_.assign(nodes_.size(), Mat());
    grads_[out] = Mat::Ones(1, 1);

    auto acc = [&](int32_t i, auto&& g) {
        if (grads_[i].size() == 0)
            grads_[i] = Mat::Zero(nodes_[i].value.rows(), nodes_[i].value.cols());
        grads_[i] += g;
    };

    for (int32_t i = out; i >= 0; --i) {
        if (grads_[i].size() == 0) continue;  // unreachable from output
        const Node& n = nodes_[i];
        const Mat& g = grads_[i];
        switch (n.op) {
            case Op::Leaf:
            case Op::StopGradient:
                break;  // stop: zero gradient to parents
            case Op::MatMul:
                acc(n.a, g * val(n.b).transpose());
                acc(n.b, val(n.a).transpose() * g);
                break;
            case Op::Add:
                acc(n.a, g);
                if (val(n.b).rows() == g.rows())
                    acc(n.b, g);
                else
                    acc(n.b, g.colwise().sum());
                break;
            case Op::Concat: {
                Index at = 0;
                for (int32_t p : concat_parts_[n.aux]) {
                    acc(p, g.middleCols(at, val(p).cols()));
                    at += val(p).cols();
                }
                break;
            }
            case Op::Relu:
                acc(n.a, (val(n.a).array() > 0.0).cast<double>().matrix().cwiseProduct(g));
                break;
            case Op::Tanh:
                acc(n.a, ((1.0 - n.value.array().square()) * g.array()).matrix());
                break;
            case Op::Sigmoid:
                acc(n.a, (n.value.array() * (1.0 - n.value.array()) * g.array()).matrix());
                break;
            case Op::Scale:
                acc(n.a, g * n.scalar);
                break;
            case Op::CwiseAffine:
                acc(n.a, (g.array().rowwise() *
                          affines_[n.aux].first.transpose().array()).matrix());
                break;
            case Op::Mean:
                acc(n.a, Mat::Constant(val(n.a).rows(), val(n.a).cols(),
                                       g(0, 0) / static_cast<double>(val(n.a).size())));
                break;
            case Op::Mse: {
                double c = 2.0 * g(0, 0) / static_cast<double>(val(n.a).size());
                Mat d = (val(n.a) - val(n.b)) * c;
                acc(n.a, d);
                acc(n.b, -d);
                break;
            }
        }
    }
}

Mat Tape::grad(NodeId id) const {
    int32_t i = check(id);
    if (grads_.empty())
        throw ContractError("grad: backward() has not run on this tape");
    if (grads_[i].size() == 0)
        return Mat::Zero(nodes_[i].value.rows(), nodes_[i].value.cols());
    return grads_[i];
}

}  // namespace casrl
