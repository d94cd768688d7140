#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <vector>

#include "casrl/env.hpp"
#include "casrl/rng.hpp"

using namespace casrl;

namespace {

WorldConfig small_world(uint64_t seed = 11) {
    WorldConfig cfg;
    cfg.seed = seed;
    cfg.ladder = {50, 20, 8};
    cfg.slate_size = 4;
    return cfg;
}

Environment make_env(const WorldConfig& cfg) {
    return Environment(std::make_shared<ItemCatalog>(ItemCatalog::build(cfg)), cfg);
}

double skewness(const std::vector<double>& xs) {
    double n = static_cast<double>(xs.size());
    double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    double m2 = 0, m3 = 0;
    for (double x : xs) {
        double d = x - mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    m2 /= n;
    m3 /= n;
    return m3 / std::pow(m2, 1.5);
}

// Slate of the k best/worst items by true expected watch for this user.
std::vector<int32_t> affinity_slate(const Environment& env, const UserFeatures& u, Index k,
                                    bool best) {
    std::vector<std::pair<double, int32_t>> scored;
    for (const auto& item : env.catalog().items)
        scored.emplace_back(env.true_engagement(u, item.id).expected_watch, item.id);
    std::sort(scored.begin(), scored.end());
    if (best) std::reverse(scored.begin(), scored.end());
    std::vector<int32_t> out;
    for (Index i = 0; i < k; ++i) out.push_back(scored[static_cast<size_t>(i)].second);
    return out;
}

std::vector<int32_t> random_slate(const Environment& env, Rng& rng) {
    std::vector<int32_t> ids(env.catalog().items.size());
    for (size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int32_t>(i);
    for (Index i = 0; i < env.config().slate_size; ++i) {
        size_t j = static_cast<size_t>(i) +
                   static_cast<size_t>(rng.below(ids.size() - static_cast<size_t>(i)));
        std::swap(ids[static_cast<size_t>(i)], ids[j]);
    }
    ids.resize(static_cast<size_t>(env.config().slate_size));
    return ids;
}

}  // namespace

TEST_CASE("reset is seed-deterministic and well-formed") {
    Environment env = make_env(small_world());
    UserState a = env.reset(123);
    UserState b = env.reset(123);
    CHECK(a.feat.latent == b.feat.latent);
    CHECK(a.feat.activity_bias == b.feat.activity_bias);
    CHECK(a.satisfaction == b.satisfaction);
    CHECK(a.satisfaction > 0.0);
    CHECK(a.step == 0);
    CHECK_FALSE(a.done);
    CHECK(static_cast<Index>(env.catalog().items.size()) == env.config().ladder[0]);

    UserState c = env.reset(124);
    CHECK(c.feat.latent != a.feat.latent);
}

TEST_CASE("true engagement link functions") {
    WorldConfig cfg = small_world();
    cfg.like_offset = 0.0;
    cfg.longview_offset = 0.0;
    cfg.watch_log_base = 0.0;
    Environment env = make_env(cfg);

    // zero user latent makes every dot product vanish: p = sigmoid(0)
    UserFeatures u;
    u.latent = Vec::Zero(cfg.latent_dim);
    u.activity_bias = 0.0;
    Engagement e = env.true_engagement(u, 0);
    CHECK(e.p_like == doctest::Approx(0.5));
    CHECK(e.p_longview == doctest::Approx(0.5));

    // increasing the dot product strictly increases all three outputs
    const CatalogItem& item = env.catalog().at(3);
    UserFeatures lo, hi;
    lo.latent = 0.1 * item.latent;
    hi.latent = 0.7 * item.latent;
    lo.activity_bias = hi.activity_bias = 0.0;
    Engagement el = env.true_engagement(lo, 3);
    Engagement eh = env.true_engagement(hi, 3);
    CHECK(eh.p_like > el.p_like);
    CHECK(eh.p_longview > el.p_longview);
    CHECK(eh.expected_watch > el.expected_watch);

    CHECK_THROWS_AS(env.true_engagement(u, 9999), ContractError);
}

TEST_CASE("expected watch time is right-skewed across random pairs") {
    Environment env = make_env(small_world(21));
    std::vector<double> watch;
    watch.reserve(100000);
    for (uint64_t us = 0; us < 2000; ++us) {
        UserState u = env.reset(us);
        for (const auto& item : env.catalog().items)
            watch.push_back(env.true_engagement(u.feat, item.id).expected_watch);
    }
    CHECK(watch.size() == 100000);
    CHECK(skewness(watch) > 0.0);
}

TEST_CASE("per-user and per-item mean watch distributions are heavy-tailed") {
    Environment env = make_env(small_world(22));
    std::vector<double> per_user;
    std::vector<double> per_item(env.catalog().items.size(), 0.0);
    for (uint64_t us = 0; us < 500; ++us) {
        UserState u = env.reset(us);
        double sum = 0;
        for (const auto& item : env.catalog().items) {
            double w = env.true_engagement(u.feat, item.id).expected_watch;
            sum += w;
            per_item[static_cast<size_t>(item.id)] += w;
        }
        per_user.push_back(sum / static_cast<double>(env.catalog().items.size()));
    }
    for (auto& w : per_item) w /= 500.0;
    CHECK(skewness(per_user) > 0.0);
    CHECK(skewness(per_item) > 0.0);
}

TEST_CASE("predictions: zero noise is exact, keyed noise is reproducible") {
    Environment env = make_env(small_world());
    UserState u = env.reset(5);
    std::vector<int32_t> items = {0, 1, 2, 3, 4};

    PredictorParams clean;
    clean.sigma = 0.0;
    clean.noise_seed = 99;
    clean.column_offset = Vec::Zero(3);
    Mat p = env.predict(items, clean, u.feat);
    for (size_t i = 0; i < items.size(); ++i) {
        Engagement e = env.true_engagement(u.feat, items[i]);
        CHECK(p(static_cast<Index>(i), 0) == e.p_like);
        CHECK(p(static_cast<Index>(i), 1) == e.p_longview);
        CHECK(p(static_cast<Index>(i), 2) == e.expected_watch);
    }

    PredictorParams noisy = clean;
    noisy.sigma = 0.5;
    Mat n1 = env.predict(items, noisy, u.feat);
    Mat n2 = env.predict(items, noisy, u.feat);
    CHECK(n1 == n2);  // same checkpoint, bit-identical
    CHECK(n1 != p);

    // different checkpoints disagree essentially always
    int differs = 0;
    for (uint64_t trial = 0; trial < 100; ++trial) {
        PredictorParams other = noisy;
        other.noise_seed = 1000 + trial;
        if (env.predict(items, other, u.feat) != n1) ++differs;
    }
    CHECK(differs == 100);

    CHECK_THROWS_AS(env.predict(std::vector<int32_t>{}, clean, u.feat), ContractError);
}

TEST_CASE("step contract: rewards, termination, errors") {
    Environment env = make_env(small_world(31));
    Rng rng(4);

    // rewards are never negative and sessions always terminate
    int finished = 0;
    for (uint64_t us = 0; us < 10000; ++us) {
        UserState u = env.reset(us);
        int steps = 0;
        while (!u.done) {
            StepResult r = env.step(u, random_slate(env, rng));
            CHECK(r.reward >= 0.0);
            ++steps;
            REQUIRE(steps <= env.config().max_session_len);
        }
        CHECK(u.step <= env.config().max_session_len);
        ++finished;
    }
    CHECK(finished == 10000);

    UserState u = env.reset(77);
    std::vector<int32_t> bad = {0, 1};
    CHECK_THROWS_AS(env.step(u, bad), ContractError);
    while (!u.done) env.step(u, random_slate(env, rng));
    CHECK_THROWS_AS(env.step(u, random_slate(env, rng)), ContractError);
}

TEST_CASE("adversarial minimum-affinity slates end sessions sooner than random") {
    Environment env = make_env(small_world(41));
    Rng rng(8);
    double len_adv = 0, len_rand = 0;
    const int kSessions = 300;
    for (uint64_t us = 0; us < kSessions; ++us) {
        UserState a = env.reset(us);
        std::vector<int32_t> worst =
            affinity_slate(env, a.feat, env.config().slate_size, false);
        while (!a.done) env.step(a, worst);
        len_adv += a.step;

        UserState b = env.reset(us);
        while (!b.done) env.step(b, random_slate(env, rng));
        len_rand += b.step;
    }
    CHECK(len_adv / kSessions < len_rand / kSessions);
}

TEST_CASE("oracle-greedy slates beat random slates by at least 20% watch time") {
    WorldConfig cfg = small_world(51);
    Environment env = make_env(cfg);
    Rng rng(9);
    double wt_greedy = 0, wt_rand = 0;
    for (uint64_t us = 0; us < 500; ++us) {
        UserState a = env.reset(us);
        std::vector<int32_t> best = env.oracle_slate(a.feat);
        while (!a.done) wt_greedy += env.step(a, best).reward;

        UserState b = env.reset(us);
        while (!b.done) wt_rand += env.step(b, random_slate(env, rng)).reward;
    }
    CHECK(wt_greedy >= 1.2 * wt_rand);
}

TEST_CASE("session metrics definition") {
    StepResult one;
    one.reward = 10.0;
    one.outcomes = {{true, true, 4.0}, {false, true, 3.0}, {false, true, 3.0},
                    {false, false, 0.0}};
    SessionMetrics m = session_metrics(std::vector<StepResult>{one});
    CHECK(m.watch_time == doctest::Approx(10.0));
    CHECK(m.session_length == 3);

    SessionMetrics empty = session_metrics(std::vector<StepResult>{});
    CHECK(empty.watch_time == 0.0);
    CHECK(empty.session_length == 0);

    // recompute property: metrics equal the undiscounted sum of logged rewards
    Environment env = make_env(small_world(61));
    Rng rng(13);
    UserState u = env.reset(3);
    std::vector<StepResult> steps;
    double sum = 0;
    while (!u.done) {
        steps.push_back(env.step(u, random_slate(env, rng)));
        sum += steps.back().reward;
    }
    SessionMetrics sm = session_metrics(steps);
    CHECK(sm.watch_time == doctest::Approx(sum));
}

TEST_CASE("determinism: identical seeds and slates reproduce every outcome") {
    Environment env1 = make_env(small_world(71));
    Environment env2 = make_env(small_world(71));
    Rng r1(55), r2(55);
    UserState a = env1.reset(9);
    UserState b = env2.reset(9);
    while (!a.done) {
        auto slate1 = random_slate(env1, r1);
        auto slate2 = random_slate(env2, r2);
        REQUIRE(slate1 == slate2);
        StepResult sa = env1.step(a, slate1);
        StepResult sb = env2.step(b, slate2);
        CHECK(sa.reward == sb.reward);
        CHECK(a.satisfaction == b.satisfaction);
    }
    CHECK(b.done);
}

TEST_CASE("world config validation and json round trip") {
    WorldConfig cfg = small_world();
    nlohmann::json j = cfg;
    WorldConfig back = j.get<WorldConfig>();
    CHECK(back.seed == cfg.seed);
    CHECK(back.ladder == cfg.ladder);
    CHECK(back.stage_sigma == cfg.stage_sigma);

    WorldConfig bad = cfg;
    bad.ladder = {50, 60, 8};
    CHECK_THROWS_AS(bad.validate(), ContractError);
    WorldConfig bad2 = cfg;
    bad2.stage_sigma = {0.1, 0.4, 0.15};
    CHECK_THROWS_AS(bad2.validate(), ContractError);
}
