#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "casrl/cqr.hpp"
#include "casrl/rng.hpp"

using namespace casrl;

namespace {

double ks_vs_uniform(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    double n = static_cast<double>(xs.size());
    double d = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
        double hi = (static_cast<double>(i) + 1.0) / n - xs[i];
        double lo = xs[i] - static_cast<double>(i) / n;
        d = std::max(d, std::max(hi, lo));
    }
    return d;
}

double variance(const std::vector<double>& xs) {
    double n = static_cast<double>(xs.size());
    double mean = 0;
    for (double x : xs) mean += x;
    mean /= n;
    double v = 0;
    for (double x : xs) v += (x - mean) * (x - mean);
    return v / n;
}

}  // namespace

TEST_CASE("cqr update bookkeeping") {
    CqrConfig cfg;
    cfg.min_count = 2;
    QuantileTable t(cfg);
    t.update(0, 0, 1.0);
    t.update(0, 0, 2.0);
    t.update(0, 0, 3.0);
    CHECK(t.bucket_count(0, 0) == 3);
    CHECK(t.bucket_count(1, 2) == 0);  // other buckets untouched
    CHECK(t.total_count() == 3);

    CHECK_THROWS_AS(t.update(4, 0, 1.0), ContractError);
    CHECK_THROWS_AS(t.update(0, -1, 1.0), ContractError);
    CHECK_THROWS_AS(t.update(0, 0, std::nan("")), NumericError);

    // histogram mass equals insert count after many inserts
    Rng rng(4);
    QuantileTable big{CqrConfig{}};
    for (int i = 0; i < 10000; ++i)
        big.update(static_cast<int>(rng.below(4)), static_cast<int>(rng.below(4)),
                   std::exp(rng.normal()));
    CHECK(big.total_count() == 10000);
}

TEST_CASE("cqr transform hand cases") {
    CqrConfig cfg;
    cfg.min_count = 1;
    QuantileTable t(cfg);
    for (double r : {1.0, 2.0, 3.0, 4.0, 5.0}) t.update(1, 1, r);

    CHECK(t.transform(1, 1, 3.0) == doctest::Approx(0.5));  // mid-rank median
    CHECK(t.transform(1, 1, 0.5) <= 0.5 / 5.0);             // below all observations
    CHECK(t.transform(1, 1, 100.0) == doctest::Approx(1.0).epsilon(0.1));

    // empty table: neutral value
    QuantileTable empty{CqrConfig{}};
    CHECK(empty.transform(0, 0, 7.0) == 0.5);

    // below min_count the bucket falls back to the global distribution
    CqrConfig strict;
    strict.min_count = 100;
    QuantileTable g(strict);
    for (int i = 0; i < 200; ++i) g.update(0, 0, 1.0 + i % 7);
    g.update(2, 2, 1000.0);  // sparse bucket
    double via_global = g.transform(2, 2, 3.0);
    double direct = g.transform(0, 0, 3.0);
    CHECK(via_global == doctest::Approx(direct).epsilon(0.05));
}

TEST_CASE("self-transformed lognormal rewards are nearly uniform") {
    Rng rng(9);
    CqrConfig cfg;
    QuantileTable t(cfg);
    std::vector<double> rewards;
    rewards.reserve(10000);
    for (int i = 0; i < 10000; ++i) {
        double r = std::exp(1.5 + 1.0 * rng.normal());
        rewards.push_back(r);
        t.update(0, 0, r);
    }
    std::vector<double> u;
    u.reserve(rewards.size());
    for (double r : rewards) u.push_back(t.transform(0, 0, r));

    for (double x : u) {
        CHECK(x >= 0.0);
        CHECK(x <= 1.0);
    }
    CHECK(ks_vs_uniform(u) < 0.02);
    CHECK(variance(u) <= 1.0 / 12.0 + 1e-3);
    CHECK(variance(u) < variance(rewards));
}

TEST_CASE("transform is monotone within a fixed bucket state") {
    Rng rng(13);
    CqrConfig cfg;
    cfg.min_count = 1;
    QuantileTable t(cfg);
    for (int i = 0; i < 5000; ++i) t.update(3, 2, std::exp(rng.normal() * 1.2));

    for (int trial = 0; trial < 2000; ++trial) {
        double a = rng.uniform(0.0, 50.0);
        double b = rng.uniform(0.0, 50.0);
        if (a > b) std::swap(a, b);
        CHECK(t.transform(3, 2, a) <= t.transform(3, 2, b));
    }
}

TEST_CASE("bucket quantile curves invert the transform") {
    Rng rng(21);
    CqrConfig cfg;
    cfg.min_count = 1;
    QuantileTable t(cfg);
    for (int i = 0; i < 20000; ++i) t.update(0, 1, std::exp(1.0 + 0.8 * rng.normal()));

    std::vector<double> levels = {0.1, 0.25, 0.5, 0.75, 0.9};
    std::vector<double> qs = t.bucket_quantiles(0, 1, levels);
    REQUIRE(qs.size() == levels.size());
    for (size_t i = 0; i + 1 < qs.size(); ++i) CHECK(qs[i] <= qs[i + 1]);
    for (size_t i = 0; i < qs.size(); ++i)
        CHECK(t.transform(0, 1, qs[i]) == doctest::Approx(levels[i]).epsilon(0.05));
}

TEST_CASE("quantile table serialization round trip") {
    Rng rng(31);
    QuantileTable t{CqrConfig{}};
    for (int i = 0; i < 3000; ++i)
        t.update(static_cast<int>(rng.below(4)), static_cast<int>(rng.below(4)),
                 std::exp(rng.normal()));
    QuantileTable back = QuantileTable::from_json(t.to_json());
    CHECK(back.total_count() == t.total_count());
    for (int ug = 0; ug < 4; ++ug)
        for (int ig = 0; ig < 4; ++ig) {
            CHECK(back.bucket_count(ug, ig) == t.bucket_count(ug, ig));
            CHECK(back.transform(ug, ig, 2.5) == t.transform(ug, ig, 2.5));
        }
}
