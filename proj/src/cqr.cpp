#include "casrl/cqr.hpp"

#include <cmath>
#include <string>

namespace casrl {

QuantileTable::QuantileTable(CqrConfig cfg) : cfg_(cfg) {
    if (cfg_.bins < 2 || cfg_.range_min <= 0.0 || cfg_.range_max <= cfg_.range_min)
        throw ContractError("cqr: bad histogram configuration");
    log_min_ = std::log(cfg_.range_min);
    log_step_ = (std::log(cfg_.range_max) - log_min_) / static_cast<double>(cfg_.bins);
    Histogram empty;
    empty.counts.assign(static_cast<size_t>(cfg_.bins) + 2, 0);
    buckets_.assign(static_cast<size_t>(cfg_.n_buckets()), empty);
    global_ = empty;
}

int QuantileTable::bucket_index(int user_group, int item_group) const {
    if (user_group < 0 || user_group >= cfg_.user_groups || item_group < 0 ||
        item_group >= cfg_.item_groups)
        throw ContractError("cqr: unknown bucket key (" + std::to_string(user_group) + "," +
                            std::to_string(item_group) + ")");
    return user_group * cfg_.item_groups + item_group;
}

int QuantileTable::bin_of(double reward) const {
    if (reward <= cfg_.range_min) return 0;  // underflow, includes r = 0
    if (reward > cfg_.range_max) return cfg_.bins + 1;
    int b = static_cast<int>((std::log(reward) - log_min_) / log_step_);
    if (b >= cfg_.bins) b = cfg_.bins - 1;
    if (b < 0) b = 0;
    return b + 1;
}

void QuantileTable::update(int user_group, int item_group, double reward) {
    if (!std::isfinite(reward)) throw NumericError("cqr update: non-finite reward");
    int bin = bin_of(reward);
    Histogram& h = buckets_[static_cast<size_t>(bucket_index(user_group, item_group))];
    h.counts[static_cast<size_t>(bin)] += 1;
    h.n += 1;
    global_.counts[static_cast<size_t>(bin)] += 1;
    global_.n += 1;
    total_ += 1;
}

double QuantileTable::transform_on(const Histogram& h, double reward) const {
    // Mass below the reward's bin counts as strictly smaller, the bin's own
    // mass as ties: mid-rank (below + 0.5*at)/n.
    if (h.n == 0) return 0.5;
    int bin = bin_of(reward);
    int64_t below = 0;
    for (int b = 0; b < bin; ++b) below += h.counts[static_cast<size_t>(b)];
    double at = static_cast<double>(h.counts[static_cast<size_t>(bin)]);
    return (static_cast<double>(below) + 0.5 * at) / static_cast<double>(h.n);
}

double QuantileTable::transform(int user_group, int item_group, double reward) const {
    const Histogram& h = buckets_[static_cast<size_t>(bucket_index(user_group, item_group))];
    if (h.n >= cfg_.min_count) return transform_on(h, reward);
    if (global_.n > 0) return transform_on(global_, reward);
    return 0.5;
}

int64_t QuantileTable::bucket_count(int user_group, int item_group) const {
    return buckets_[static_cast<size_t>(bucket_index(user_group, item_group))].n;
}

double QuantileTable::quantile_on(const Histogram& h, double level) const {
    if (h.n == 0) return 0.0;
    double target = level * static_cast<double>(h.n);
    int64_t cum = 0;
    for (size_t b = 0; b < h.counts.size(); ++b) {
        int64_t c = h.counts[b];
        if (c == 0) continue;
        if (static_cast<double>(cum + c) >= target) {
            double frac = (target - static_cast<double>(cum)) / static_cast<double>(c);
            if (b == 0) return cfg_.range_min;
            if (b == h.counts.size() - 1) return cfg_.range_max;
            double lo = std::exp(log_min_ + static_cast<double>(b - 1) * log_step_);
            double hi = std::exp(log_min_ + static_cast<double>(b) * log_step_);
            return lo + frac * (hi - lo);
        }
        cum += c;
    }
    return cfg_.range_max;
}

std::vector<double> QuantileTable::bucket_quantiles(int user_group, int item_group,
                                                    std::span<const double> levels) const {
    const Histogram& h = buckets_[static_cast<size_t>(bucket_index(user_group, item_group))];
    const Histogram& src = (h.n >= cfg_.min_count || global_.n == 0) ? h : global_;
    std::vector<double> out;
    out.reserve(levels.size());
    for (double q : levels) out.push_back(quantile_on(src, q));
    return out;
}

nlohmann::json QuantileTable::to_json() const {
    nlohmann::json jb = nlohmann::json::array();
    for (const auto& h : buckets_) jb.push_back(nlohmann::json{{"n", h.n}, {"counts", h.counts}});
    return nlohmann::json{{"format", "casrl-cqr-v1"},
                          {"user_groups", cfg_.user_groups},
                          {"item_groups", cfg_.item_groups},
                          {"bins", cfg_.bins},
                          {"range_min", cfg_.range_min},
                          {"range_max", cfg_.range_max},
                          {"min_count", cfg_.min_count},
                          {"buckets", std::move(jb)},
                          {"global", nlohmann::json{{"n", global_.n}, {"counts", global_.counts}}}};
}

QuantileTable QuantileTable::from_json(const nlohmann::json& j) {
    CqrConfig cfg;
    cfg.user_groups = j.at("user_groups").get<int>();
    cfg.item_groups = j.at("item_groups").get<int>();
    cfg.bins = j.at("bins").get<int>();
    cfg.range_min = j.at("range_min").get<double>();
    cfg.range_max = j.at("range_max").get<double>();
    cfg.min_count = j.at("min_count").get<int64_t>();
    QuantileTable t(cfg);
    const auto& jb = j.at("buckets");
    for (size_t i = 0; i < t.buckets_.size(); ++i) {
        t.buckets_[i].n = jb.at(i).at("n").get<int64_t>();
        t.buckets_[i].counts = jb.at(i).at("counts").get<std::vector<int64_t>>();
    }
    t.global_.n = j.at("global").at("n").get<int64_t>();
    t.global_.counts = j.at("global").at("counts").get<std::vector<int64_t>>();
    t.total_ = 0;
    for (const auto& h : t.buckets_) t.total_ += h.n;
    return t;
}

}  // namespace casrl
