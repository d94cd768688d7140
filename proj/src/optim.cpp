#include "casrl/optim.hpp"

#include <cmath>
#include <string>

namespace casrl {

namespace {

// Flat mutable views over a network's tensors, in optimizer order.
std::vector<Eigen::Map<Arr>> flat_views(MlpParams& p) {
    std::vector<Eigen::Map<Arr>> views;
    views.reserve(p.layers.size() * 2);
    for (auto& l : p.layers) {
        views.emplace_back(l.w.data(), l.w.size());
        views.emplace_back(l.b.data(), l.b.size());
    }
    return views;
}

}  // namespace

AdamState adam_make(const MlpParams& p, double lr) {
    AdamState s;
    s.lr = lr;
    for (const auto& l : p.layers) {
        s.m.emplace_back(Arr::Zero(l.w.size()));
        s.m.emplace_back(Arr::Zero(l.b.size()));
        s.v.emplace_back(Arr::Zero(l.w.size()));
        s.v.emplace_back(Arr::Zero(l.b.size()));
    }
    return s;
}

void adam_step(MlpParams& p, const std::vector<Arr>& grads, AdamState& state) {
    auto params = flat_views(p);
    if (grads.size() != params.size() || state.m.size() != params.size())
        throw DimensionError("adam_step: got " + std::to_string(grads.size()) +
                             " gradient tensors for " + std::to_string(params.size()) +
                             " parameter tensors");
    state.step += 1;
    double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (size_t i = 0; i < params.size(); ++i) {
        if (grads[i].size() != params[i].size())
            throw DimensionError("adam_step: gradient tensor " + std::to_string(i) +
                                 " has size " + std::to_string(grads[i].size()) +
                                 ", parameter has " + std::to_string(params[i].size()));
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i].square();
        params[i] -= state.lr * (state.m[i] / bc1) / ((state.v[i] / bc2).sqrt() + state.eps);
    }
}

double clip_global_norm(std::vector<Arr>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads) sq += g.square().sum();
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        double f = max_norm / norm;
        for (auto& g : grads) g *= f;
    }
    return norm;
}

void soft_update(MlpParams& target, const MlpParams& source, double tau_mix) {
    if (target.layers.size() != source.layers.size())
        throw DimensionError("soft_update: layer count mismatch");
    for (size_t i = 0; i < target.layers.size(); ++i) {
        auto& t = target.layers[i];
        const auto& s = source.layers[i];
        if (t.w.rows() != s.w.rows() || t.w.cols() != s.w.cols())
            throw DimensionError("soft_update: layer " + std::to_string(i) + " shape " +
                                 shape_str(t.w) + " vs " + shape_str(s.w));
        t.w = (1.0 - tau_mix) * t.w + tau_mix * s.w;
        t.b = (1.0 - tau_mix) * t.b + tau_mix * s.b;
    }
}

}  // namespace casrl
