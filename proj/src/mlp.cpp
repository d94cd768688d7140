#include "casrl/mlp.hpp"

#include <cmath>
#include <string>

#include "casrl/rng.hpp"

namespace casrl {

namespace {

Mat activate(const Mat& z, Activation act) {
    switch (act) {
        case Activation::Linear: return z;
        case Activation::Relu: return z.cwiseMax(0.0);
        case Activation::Tanh: return z.array().tanh().matrix();
        case Activation::Sigmoid: return (1.0 / (1.0 + (-z.array()).exp())).matrix();
    }
    return z;
}

NodeId activate(Tape& tape, NodeId z, Activation act) {
    switch (act) {
        case Activation::Linear: return z;
        case Activation::Relu: return tape.relu(z);
        case Activation::Tanh: return tape.tanh(z);
        case Activation::Sigmoid: return tape.sigmoid(z);
    }
    return z;
}

}  // namespace

Index MlpParams::param_count() const {
    Index n = 0;
    for (const auto& l : layers) n += l.w.size() + l.b.size();
    return n;
}

MlpParams mlp_make(Index in, const std::vector<Index>& hidden, Index out,
                   Activation hidden_act, Activation out_act, uint64_t seed) {
    if (in <= 0 || out <= 0) throw ContractError("mlp_make: nonpositive layer width");
    std::vector<Index> widths;
    widths.push_back(in);
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(out);

    Rng rng(seed);
    MlpParams p;
    p.layers.reserve(widths.size() - 1);
    for (size_t i = 0; i + 1 < widths.size(); ++i) {
        Index fan_in = widths[i], fan_out = widths[i + 1];
        double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        MlpLayer l;
        l.w.resize(fan_in, fan_out);
        for (Index r = 0; r < fan_in; ++r)
            for (Index c = 0; c < fan_out; ++c) l.w(r, c) = rng.uniform(-bound, bound);
        l.b = Vec::Zero(fan_out);
        l.act = (i + 2 < widths.size()) ? hidden_act : out_act;
        p.layers.push_back(std::move(l));
    }
    return p;
}

Mat mlp_forward(const MlpParams& p, const Mat& x) {
    if (x.cols() != p.in_dim())
        throw DimensionError("mlp_forward: input has " + std::to_string(x.cols()) +
                             " columns, network expects " + std::to_string(p.in_dim()));
    Mat h = x;
    for (const auto& l : p.layers) {
        Mat z = h * l.w;
        z.rowwise() += l.b.transpose();
        h = activate(z, l.act);
    }
    return h;
}

Vec mlp_forward(const MlpParams& p, const Vec& x) {
    Mat y = mlp_forward(p, Mat(Tape::as_row(x)));
    return y.row(0).transpose();
}

MlpNodes mlp_insert(Tape& tape, const MlpParams& p) {
    MlpNodes nodes;
    nodes.layers.reserve(p.layers.size());
    for (const auto& l : p.layers)
        nodes.layers.emplace_back(tape.leaf(l.w), tape.leaf_row(l.b));
    return nodes;
}

NodeId mlp_apply(Tape& tape, const MlpParams& p, const MlpNodes& nodes, NodeId input) {
    NodeId h = input;
    for (size_t i = 0; i < p.layers.size(); ++i) {
        NodeId z = tape.add(tape.matmul(h, nodes.layers[i].first), nodes.layers[i].second);
        h = activate(tape, z, p.layers[i].act);
    }
    return h;
}

std::vector<Arr> mlp_collect_grads(const Tape& tape, const MlpNodes& nodes) {
    std::vector<Arr> grads;
    grads.reserve(nodes.layers.size() * 2);
    for (const auto& [w, b] : nodes.layers) {
        Mat gw = tape.grad(w);
        Mat gb = tape.grad(b);
        grads.emplace_back(Eigen::Map<const Arr>(gw.data(), gw.size()));
        grads.emplace_back(Eigen::Map<const Arr>(gb.data(), gb.size()));
    }
    return grads;
}

}  // namespace casrl
