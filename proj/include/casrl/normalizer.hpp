#pragma once

#include "casrl/types.hpp"

namespace casrl {

// Per-dimension running mean/variance (Welford), population convention.
// normalize() is affine: x*scale() + shift(), so the same coefficients can be
// replayed on a differentiation tape via cwise_affine. Before any update the
// transform is the identity.
class RunningNormalizer {
public:
    RunningNormalizer() = default;
    explicit RunningNormalizer(Index dim)
        : n_(0), mean_(Vec::Zero(dim)), m2_(Vec::Zero(dim)) {}

    void update(const Vec& x);
    Vec normalize(const Vec& x) const { return x.cwiseProduct(scale()) + shift(); }

    Vec scale() const;   // 1/sqrt(var + eps), or ones before any update
    Vec shift() const;   // -mean * scale
    Vec mean() const { return mean_; }
    Vec variance() const;
    int64_t count() const { return n_; }
    Index dim() const { return mean_.size(); }

    static constexpr double kEps = 1e-8;

    int64_t n_ = 0;
    Vec mean_;
    Vec m2_;
};

}  // namespace casrl
