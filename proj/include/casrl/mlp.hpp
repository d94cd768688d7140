#pragma once

#include <cstdint>
#include <vector>

#include "casrl/tape.hpp"
#include "casrl/types.hpp"

namespace casrl {

enum class Activation : uint8_t { Linear, Relu, Tanh, Sigmoid };

// One dense layer. Weights are (in x out) so a forward pass over row-vector
// inputs is x*W + b, batched or not.
struct MlpLayer {
    Mat w;
    Vec b;
    Activation act = Activation::Linear;
};

struct MlpParams {
    std::vector<MlpLayer> layers;

    Index in_dim() const { return layers.front().w.rows(); }
    Index out_dim() const { return layers.back().w.cols(); }
    Index param_count() const;
};

// Uniform +-sqrt(6/(fan_in+fan_out)) init, fixed by seed. `hidden` lists the
// widths between input and output; hidden layers get `hidden_act`.
MlpParams mlp_make(Index in, const std::vector<Index>& hidden, Index out,
                   Activation hidden_act, Activation out_act, uint64_t seed);

// Plain forward, rows are samples.
Mat mlp_forward(const MlpParams& p, const Mat& x);
Vec mlp_forward(const MlpParams& p, const Vec& x);

// Taped forward: parameters become leaves so backward() yields their gradients.
struct MlpNodes {
    std::vector<std::pair<NodeId, NodeId>> layers;  // (w, b) per layer
};

MlpNodes mlp_insert(Tape& tape, const MlpParams& p);
NodeId mlp_apply(Tape& tape, const MlpParams& p, const MlpNodes& nodes, NodeId input);

// Gradients in flat-tensor order (w0, b0, w1, b1, ...) matching adam/soft ops.
std::vector<Arr> mlp_collect_grads(const Tape& tape, const MlpNodes& nodes);

}  // namespace casrl
