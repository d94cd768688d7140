#pragma once

#include <cstdint>
#include <vector>

#include "casrl/mlp.hpp"
#include "casrl/types.hpp"

namespace casrl {

// Adam with bias correction. Moment accumulators mirror the flat-tensor order
// (w0, b0, w1, b1, ...) of the network they optimize.
struct AdamState {
    std::vector<Arr> m;
    std::vector<Arr> v;
    int64_t step = 0;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

AdamState adam_make(const MlpParams& p, double lr);
void adam_step(MlpParams& p, const std::vector<Arr>& grads, AdamState& state);

// Rescales grads in place so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
double clip_global_norm(std::vector<Arr>& grads, double max_norm);

// target <- (1 - tau_mix)*target + tau_mix*source, per parameter.
void soft_update(MlpParams& target, const MlpParams& source, double tau_mix);

}  // namespace casrl
