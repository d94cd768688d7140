#include "casrl/env.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <string>

#include "casrl/rng.hpp"

namespace casrl {

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

constexpr uint64_t kItemLatentTag = 0x11;
constexpr uint64_t kItemBiasTag = 0x12;
constexpr uint64_t kUserLatentTag = 0x21;
constexpr uint64_t kUserBiasTag = 0x22;
constexpr uint64_t kUserSatTag = 0x23;
constexpr uint64_t kLongViewTag = 0x31;
constexpr uint64_t kLikeTag = 0x32;
constexpr uint64_t kWatchTag = 0x33;

// Quartile index against three ascending thresholds.
int8_t quartile(double x, const std::array<double, 3>& q) {
    if (x < q[0]) return 0;
    if (x < q[1]) return 1;
    if (x < q[2]) return 2;
    return 3;
}

}  // namespace

void WorldConfig::validate() const {
    if (ladder.empty()) throw ContractError("world: empty stage ladder");
    for (size_t i = 0; i + 1 < ladder.size(); ++i)
        if (ladder[i] <= ladder[i + 1])
            throw ContractError("world: stage ladder must be strictly decreasing");
    if (slate_size >= ladder.back())
        throw ContractError("world: slate size must be below the last stage size");
    if (slate_size <= 0) throw ContractError("world: nonpositive slate size");
    if (stage_sigma.size() != ladder.size())
        throw ContractError("world: need one stage_sigma per stage");
    for (size_t i = 0; i + 1 < stage_sigma.size(); ++i)
        if (stage_sigma[i] < stage_sigma[i + 1])
            throw ContractError("world: stage_sigma must be non-increasing downstream");
    if (latent_dim <= 0) throw ContractError("world: nonpositive latent dim");
    if (max_session_len <= 0) throw ContractError("world: nonpositive max session length");
    if (satisfaction_min <= 0 || satisfaction_max < satisfaction_min)
        throw ContractError("world: bad satisfaction range");
}

void to_json(nlohmann::json& j, const WorldConfig& c) {
    j = nlohmann::json{{"seed", c.seed},
                       {"latent_dim", c.latent_dim},
                       {"latent_scale", c.latent_scale},
                       {"like_offset", c.like_offset},
                       {"longview_offset", c.longview_offset},
                       {"watch_kappa", c.watch_kappa},
                       {"watch_log_base", c.watch_log_base},
                       {"watch_shock_sigma", c.watch_shock_sigma},
                       {"watch_cap", c.watch_cap},
                       {"user_bias_sigma", c.user_bias_sigma},
                       {"item_bias_sigma", c.item_bias_sigma},
                       {"satisfaction_min", c.satisfaction_min},
                       {"satisfaction_max", c.satisfaction_max},
                       {"satisfaction_leak", c.satisfaction_leak},
                       {"satisfaction_gain", c.satisfaction_gain},
                       {"max_session_len", c.max_session_len},
                       {"ladder", c.ladder},
                       {"slate_size", c.slate_size},
                       {"stage_sigma", c.stage_sigma},
                       {"column_noise", c.column_noise},
                       {"history_fast", c.history_fast},
                       {"history_slow", c.history_slow}};
}

void from_json(const nlohmann::json& j, WorldConfig& c) {
    c = WorldConfig{};
    j.at("seed").get_to(c.seed);
    j.at("latent_dim").get_to(c.latent_dim);
    j.at("latent_scale").get_to(c.latent_scale);
    j.at("like_offset").get_to(c.like_offset);
    j.at("longview_offset").get_to(c.longview_offset);
    j.at("watch_kappa").get_to(c.watch_kappa);
    j.at("watch_log_base").get_to(c.watch_log_base);
    j.at("watch_shock_sigma").get_to(c.watch_shock_sigma);
    j.at("watch_cap").get_to(c.watch_cap);
    j.at("user_bias_sigma").get_to(c.user_bias_sigma);
    j.at("item_bias_sigma").get_to(c.item_bias_sigma);
    j.at("satisfaction_min").get_to(c.satisfaction_min);
    j.at("satisfaction_max").get_to(c.satisfaction_max);
    j.at("satisfaction_leak").get_to(c.satisfaction_leak);
    j.at("satisfaction_gain").get_to(c.satisfaction_gain);
    j.at("max_session_len").get_to(c.max_session_len);
    j.at("ladder").get_to(c.ladder);
    j.at("slate_size").get_to(c.slate_size);
    j.at("stage_sigma").get_to(c.stage_sigma);
    j.at("column_noise").get_to(c.column_noise);
    j.at("history_fast").get_to(c.history_fast);
    j.at("history_slow").get_to(c.history_slow);
}

ItemCatalog ItemCatalog::build(const WorldConfig& cfg) {
    cfg.validate();
    ItemCatalog cat;
    cat.latent_dim = cfg.latent_dim;
    cat.items.reserve(cfg.n_items());
    double unit = cfg.latent_scale / std::sqrt(static_cast<double>(cfg.latent_dim));
    for (int32_t id = 0; id < cfg.n_items(); ++id) {
        CatalogItem it;
        it.id = id;
        it.latent.resize(cfg.latent_dim);
        for (Index k = 0; k < cfg.latent_dim; ++k)
            it.latent[k] = unit * keyed_normal(mix(cfg.seed, kItemLatentTag, id, k));
        it.bias = cfg.item_bias_sigma * keyed_normal(mix(cfg.seed, kItemBiasTag, id));
        it.group = 0;
        cat.items.push_back(std::move(it));
    }
    // Empirical bias quartiles over the catalog define the item groups.
    std::vector<double> biases;
    biases.reserve(cat.items.size());
    for (const auto& it : cat.items) biases.push_back(it.bias);
    std::sort(biases.begin(), biases.end());
    auto at_q = [&](double q) {
        double pos = q * static_cast<double>(biases.size() - 1);
        size_t lo = static_cast<size_t>(pos);
        double frac = pos - static_cast<double>(lo);
        return lo + 1 < biases.size() ? biases[lo] + frac * (biases[lo + 1] - biases[lo])
                                      : biases[lo];
    };
    cat.bias_quartiles = {at_q(0.25), at_q(0.5), at_q(0.75)};
    for (auto& it : cat.items) it.group = quartile(it.bias, cat.bias_quartiles);
    return cat;
}

const CatalogItem& ItemCatalog::at(int32_t id) const {
    if (id < 0 || static_cast<size_t>(id) >= items.size())
        throw ContractError("catalog: unknown item id " + std::to_string(id));
    return items[id];
}

uint64_t user_feature_key(const UserFeatures& f) {
    uint64_t h = 0x51A17A5C3B7E3D1DULL;
    for (Index k = 0; k < f.latent.size(); ++k)
        h = mix(h, std::bit_cast<uint64_t>(f.latent[k]));
    return mix(h, std::bit_cast<uint64_t>(f.activity_bias));
}

std::vector<PredictorParams> default_predictors(const WorldConfig& cfg) {
    std::vector<PredictorParams> out;
    for (size_t i = 0; i < cfg.stage_sigma.size(); ++i) {
        PredictorParams p;
        p.sigma = cfg.stage_sigma[i];
        p.noise_seed = mix(cfg.seed, 0x77, i);
        p.column_offset = Vec::Zero(3);
        out.push_back(std::move(p));
    }
    return out;
}

Environment::Environment(std::shared_ptr<const ItemCatalog> catalog, WorldConfig cfg)
    : catalog_(std::move(catalog)), cfg_(std::move(cfg)) {
    cfg_.validate();
    if (catalog_->latent_dim != cfg_.latent_dim ||
        static_cast<Index>(catalog_->items.size()) != cfg_.n_items())
        throw ContractError("environment: catalog does not match world config");
}

UserState Environment::reset(uint64_t user_seed) const {
    UserState u;
    u.user_seed = user_seed;
    double unit = cfg_.latent_scale / std::sqrt(static_cast<double>(cfg_.latent_dim));
    u.feat.latent.resize(cfg_.latent_dim);
    for (Index k = 0; k < cfg_.latent_dim; ++k)
        u.feat.latent[k] = unit * keyed_normal(mix(cfg_.seed, kUserLatentTag, user_seed, k));
    u.feat.activity_bias =
        cfg_.user_bias_sigma * keyed_normal(mix(cfg_.seed, kUserBiasTag, user_seed));
    // Activity-bias quartiles of N(0, sigma) are analytic.
    double s = cfg_.user_bias_sigma;
    u.group = quartile(u.feat.activity_bias, {-0.6744897501960817 * s, 0.0,
                                              0.6744897501960817 * s});
    u.satisfaction = cfg_.satisfaction_min +
                     (cfg_.satisfaction_max - cfg_.satisfaction_min) *
                         keyed_uniform(mix(cfg_.seed, kUserSatTag, user_seed));
    u.step = 0;
    u.history = Vec::Zero(4);
    u.done = false;
    return u;
}

Engagement Environment::true_engagement(const UserFeatures& user, int32_t item_id) const {
    const CatalogItem& item = catalog_->at(item_id);
    double dot = user.latent.dot(item.latent);
    Engagement e;
    e.p_like = sigmoid(dot + cfg_.like_offset);
    e.p_longview = sigmoid(dot + cfg_.longview_offset);
    e.expected_watch =
        std::exp(cfg_.watch_kappa * dot + cfg_.watch_log_base + user.activity_bias + item.bias);
    return e;
}

Mat Environment::predict(std::span<const int32_t> items, const PredictorParams& p,
                         const UserFeatures& user) const {
    if (items.empty()) throw ContractError("predict: empty candidate set");
    uint64_t ukey = user_feature_key(user);
    Mat out(static_cast<Index>(items.size()), 3);
    for (Index r = 0; r < out.rows(); ++r) {
        int32_t id = items[static_cast<size_t>(r)];
        Engagement e = true_engagement(user, id);
        uint64_t key = mix(p.noise_seed, ukey, static_cast<uint64_t>(id));
        out(r, 0) = e.p_like + p.column_offset[0] +
                    p.sigma * cfg_.column_noise[0] * keyed_normal(mix(key, 0));
        out(r, 1) = e.p_longview + p.column_offset[1] +
                    p.sigma * cfg_.column_noise[1] * keyed_normal(mix(key, 1));
        out(r, 2) = e.expected_watch + p.column_offset[2] +
                    p.sigma * cfg_.column_noise[2] * keyed_normal(mix(key, 2));
    }
    return out;
}

StepResult Environment::step(UserState& user, std::span<const int32_t> slate) const {
    if (user.done) throw ContractError("env step: session already terminal");
    if (static_cast<Index>(slate.size()) != cfg_.slate_size)
        throw ContractError("env step: slate has " + std::to_string(slate.size()) +
                            " items, configured size is " + std::to_string(cfg_.slate_size));

    StepResult res;
    res.outcomes.reserve(slate.size());
    int long_views = 0;
    int likes = 0;
    double shock_mean_comp = 0.5 * cfg_.watch_shock_sigma * cfg_.watch_shock_sigma;
    for (int32_t id : slate) {
        Engagement e = true_engagement(user.feat, id);
        uint64_t key = mix(cfg_.seed, user.user_seed, static_cast<uint64_t>(user.step),
                           static_cast<uint64_t>(id));
        ItemOutcome o;
        o.long_view = keyed_uniform(mix(key, kLongViewTag)) < e.p_longview;
        o.like = keyed_uniform(mix(key, kLikeTag)) < e.p_like;
        o.watch_seconds = 0.0;
        if (o.long_view) {
            double shock = std::exp(cfg_.watch_shock_sigma * keyed_normal(mix(key, kWatchTag)) -
                                    shock_mean_comp);
            o.watch_seconds = std::min(cfg_.watch_cap, e.expected_watch * shock);
            long_views += 1;
        }
        likes += o.like ? 1 : 0;
        res.reward += o.watch_seconds;
        res.outcomes.push_back(o);
    }

    double n = static_cast<double>(slate.size());
    double like_rate = static_cast<double>(likes) / n;
    double watch_mean = res.reward / n;
    user.history[0] = cfg_.history_fast * user.history[0] + (1.0 - cfg_.history_fast) * like_rate;
    user.history[1] = cfg_.history_slow * user.history[1] + (1.0 - cfg_.history_slow) * like_rate;
    user.history[2] =
        cfg_.history_fast * user.history[2] + (1.0 - cfg_.history_fast) * watch_mean;
    user.history[3] =
        cfg_.history_slow * user.history[3] + (1.0 - cfg_.history_slow) * watch_mean;

    user.satisfaction +=
        cfg_.satisfaction_gain * static_cast<double>(long_views) - cfg_.satisfaction_leak;
    user.step += 1;
    if (user.satisfaction <= 0.0) {
        user.satisfaction = 0.0;
        user.done = true;
    }
    if (user.step >= cfg_.max_session_len) user.done = true;
    return res;
}

Vec Environment::state_vector(const UserState& user) const {
    Vec s(state_dim());
    s.head(cfg_.latent_dim) = user.feat.latent;
    s[cfg_.latent_dim] = user.feat.activity_bias;
    s[cfg_.latent_dim + 1] = user.satisfaction;
    s[cfg_.latent_dim + 2] =
        static_cast<double>(user.step) / static_cast<double>(cfg_.max_session_len);
    s.tail(4) = user.history;
    return s;
}

double Environment::true_item_value(const UserFeatures& user, int32_t item_id) const {
    Engagement e = true_engagement(user, item_id);
    return e.p_longview * e.expected_watch;
}

std::vector<int32_t> Environment::oracle_slate(const UserFeatures& user) const {
    std::vector<std::pair<double, int32_t>> scored;
    scored.reserve(catalog_->items.size());
    for (const auto& item : catalog_->items)
        scored.emplace_back(-true_item_value(user, item.id), item.id);
    std::sort(scored.begin(), scored.end());
    std::vector<int32_t> out;
    out.reserve(static_cast<size_t>(cfg_.slate_size));
    for (Index i = 0; i < cfg_.slate_size; ++i)
        out.push_back(scored[static_cast<size_t>(i)].second);
    return out;
}

UserFeatures Environment::features_from_state(const Vec& s) const {
    if (s.size() != state_dim())
        throw DimensionError("features_from_state: state has " + std::to_string(s.size()) +
                             " dims, expected " + std::to_string(state_dim()));
    UserFeatures f;
    f.latent = s.head(cfg_.latent_dim);
    f.activity_bias = s[cfg_.latent_dim];
    return f;
}

int8_t slate_item_group(const ItemCatalog& catalog, std::span<const int32_t> slate) {
    if (slate.empty()) throw ContractError("slate_item_group: empty slate");
    double bias = 0.0;
    for (int32_t id : slate) bias += catalog.at(id).bias;
    bias /= static_cast<double>(slate.size());
    return quartile(bias, catalog.bias_quartiles);
}

PredictionCache::PredictionCache(const Environment& env,
                                 std::vector<PredictorParams> predictors)
    : env_(&env), predictors_(std::move(predictors)) {
    all_items_.resize(env.catalog().items.size());
    for (size_t i = 0; i < all_items_.size(); ++i) all_items_[i] = static_cast<int32_t>(i);
    // Entry budget sized so a long run stays within a few hundred MB.
    max_entries_ = 30000;
}

const Mat& PredictionCache::full_matrix(int stage, const UserFeatures& feat) {
    uint64_t key = mix(static_cast<uint64_t>(stage), user_feature_key(feat));
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    if (cache_.size() >= max_entries_) cache_.clear();
    Mat full = env_->predict(all_items_, predictors_[static_cast<size_t>(stage - 1)], feat);
    return cache_.emplace(key, std::move(full)).first->second;
}

Mat PredictionCache::rows(int stage, const UserFeatures& feat,
                          std::span<const int32_t> items) {
    const Mat& full = full_matrix(stage, feat);
    Mat out(static_cast<Index>(items.size()), full.cols());
    for (size_t i = 0; i < items.size(); ++i)
        out.row(static_cast<Index>(i)) = full.row(items[i]);
    return out;
}

SessionMetrics session_metrics(std::span<const StepResult> steps) {
    SessionMetrics m;
    for (const auto& s : steps) {
        m.watch_time += s.reward;
        for (const auto& o : s.outcomes)
            if (o.watch_seconds > 0.0) m.session_length += 1;
    }
    return m;
}

}  // namespace casrl
