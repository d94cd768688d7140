#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "casrl/types.hpp"

namespace casrl {

struct CqrConfig {
    int user_groups = 4;
    int item_groups = 4;
    int bins = 512;           // log-spaced histogram bins
    double range_min = 0.01;  // rewards at or below land in the underflow bin
    double range_max = 1e4;
    int64_t min_count = 100;  // bucket observations before its own CDF is used

    int n_buckets() const { return user_groups * item_groups; }
};

// Conditional empirical reward distributions per (user group, item group)
// bucket, backed by fixed log-spaced histograms. Transforming a reward yields
// its mid-rank quantile within its bucket, falling back to the pooled global
// distribution for buckets that have seen fewer than min_count rewards.
class QuantileTable {
public:
    QuantileTable() = default;
    explicit QuantileTable(CqrConfig cfg);

    void update(int user_group, int item_group, double reward);

    // Mid-rank empirical CDF value in [0,1]. An empty table maps everything
    // to the neutral 0.5.
    double transform(int user_group, int item_group, double reward) const;

    int64_t bucket_count(int user_group, int item_group) const;
    int64_t total_count() const { return total_; }
    const CqrConfig& config() const { return cfg_; }

    // Quantile curve of one bucket: reward values at the given CDF levels
    // (inverse of transform, histogram-interpolated).
    std::vector<double> bucket_quantiles(int user_group, int item_group,
                                         std::span<const double> levels) const;

    nlohmann::json to_json() const;
    static QuantileTable from_json(const nlohmann::json& j);

private:
    struct Histogram {
        std::vector<int64_t> counts;  // underflow + bins + overflow
        int64_t n = 0;
    };

    int bucket_index(int user_group, int item_group) const;
    int bin_of(double reward) const;
    double transform_on(const Histogram& h, double reward) const;
    double quantile_on(const Histogram& h, double level) const;

    CqrConfig cfg_;
    std::vector<Histogram> buckets_;
    Histogram global_;
    int64_t total_ = 0;
    double log_min_ = 0.0, log_step_ = 0.0;
};

}  // namespace casrl
