#include "casrl/normalizer.hpp"

#include <string>

namespace casrl {

void RunningNormalizer::update(const Vec& x) {
    if (x.size() != mean_.size())
        throw DimensionError("normalizer: sample has " + std::to_string(x.size()) +
                             " dims, expected " + std::to_string(mean_.size()));
    n_ += 1;
    Vec d = x - mean_;
    mean_ += d / static_cast<double>(n_);
    m2_ += d.cwiseProduct(x - mean_);
}

Vec RunningNormalizer::variance() const {
    if (n_ == 0) return Vec::Ones(mean_.size());
    return m2_ / static_cast<double>(n_);
}

Vec RunningNormalizer::scale() const {
    if (n_ == 0) return Vec::Ones(mean_.size());
    return (variance().array() + kEps).rsqrt().matrix();
}

Vec RunningNormalizer::shift() const {
    if (n_ == 0) return Vec::Zero(mean_.size());
    return -mean_.cwiseProduct(scale());
}

}  // namespace casrl
