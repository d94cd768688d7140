#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "casrl/types.hpp"

namespace casrl {

// Generative latent-factor world. All stochastic outcomes are keyed draws:
// (world seed, user seed, step, item id) fully determine them, so any session
// can be replayed exactly from its action sequence.
struct WorldConfig {
    uint64_t seed = 1;
    Index latent_dim = 8;
    double latent_scale = 1.5;

    // Engagement model. Like/long-view follow the user-item affinity; watch
    // seconds also carry user and item biases, so ranking for watch and
    // ranking for long views pull toward different items.
    double like_offset = -1.2;
    double longview_offset = -1.0;
    double watch_kappa = 0.7;
    double watch_log_base = 0.8;
    double watch_shock_sigma = 0.8;  // mean-one lognormal shock on realized watch
    double watch_cap = 60.0;         // per-item duration cap, seconds
    double user_bias_sigma = 0.7;
    double item_bias_sigma = 1.0;

    // Satisfaction-exhaustion quitting. Long-viewed items return part of the
    // per-request leak, so engaging slates extend sessions.
    double satisfaction_min = 6.0;
    double satisfaction_max = 12.0;
    double satisfaction_leak = 1.0;
    double satisfaction_gain = 0.12;  // per long-viewed item
    int max_session_len = 50;

    // Cascade geometry: |I^1| .. |I^N|, then the final slate.
    std::vector<Index> ladder = {500, 100, 20};
    Index slate_size = 10;

    // Per-stage prediction noise scale (multiplies per-column base sigma).
    // Upstream models are lighter and noisier, so scales must be non-increasing.
    std::vector<double> stage_sigma = {1.0, 0.35, 0.12};
    std::array<double, 3> column_noise = {0.3, 0.3, 4.0};

    // History summary EMA decays (fast, slow).
    double history_fast = 0.5;
    double history_slow = 0.9;

    Index n_items() const { return ladder.front(); }
    int n_stages() const { return static_cast<int>(ladder.size()); }
    void validate() const;
};

void to_json(nlohmann::json& j, const WorldConfig& c);
void from_json(const nlohmann::json& j, WorldConfig& c);

struct CatalogItem {
    int32_t id;
    Vec latent;
    double bias;
    int8_t group;  // bias quartile, 0..3
};

struct ItemCatalog {
    std::vector<CatalogItem> items;
    std::array<double, 3> bias_quartiles{};
    Index latent_dim = 0;

    static ItemCatalog build(const WorldConfig& cfg);
    const CatalogItem& at(int32_t id) const;
};

// User-side features sufficient to recompute every stage prediction; these are
// exactly the fields embedded in the first-stage observation.
struct UserFeatures {
    Vec latent;
    double activity_bias = 0.0;
};

uint64_t user_feature_key(const UserFeatures& f);

struct UserState {
    uint64_t user_seed = 0;
    UserFeatures feat;
    int8_t group = 0;  // activity-bias quartile, 0..3
    double satisfaction = 0.0;
    int step = 0;
    Vec history;  // EMAs of (like rate, mean watch) at fast/slow decay
    bool done = false;
};

struct Engagement {
    double p_like;
    double p_longview;
    double expected_watch;
};

struct ItemOutcome {
    bool like;
    bool long_view;
    double watch_seconds;
};

struct StepResult {
    double reward = 0.0;  // realized watch seconds summed over the slate
    std::vector<ItemOutcome> outcomes;
};

// Per-stage prediction "model": true engagement plus keyed Gaussian noise.
struct PredictorParams {
    double sigma = 0.0;  // stage scale on per-column base noise
    uint64_t noise_seed = 0;
    Vec column_offset;  // calibration offsets, one per prediction column
};

std::vector<PredictorParams> default_predictors(const WorldConfig& cfg);

class Environment {
public:
    Environment(std::shared_ptr<const ItemCatalog> catalog, WorldConfig cfg);

    UserState reset(uint64_t user_seed) const;

    Engagement true_engagement(const UserFeatures& user, int32_t item_id) const;

    // |items| x 3 prediction matrix, deterministic given (user features,
    // item ids, predictor params).
    Mat predict(std::span<const int32_t> items, const PredictorParams& p,
                const UserFeatures& user) const;

    // Applies one request step in place. Throws ContractError after terminal.
    StepResult step(UserState& user, std::span<const int32_t> slate) const;

    const ItemCatalog& catalog() const { return *catalog_; }
    const WorldConfig& config() const { return cfg_; }
    Index state_dim() const { return cfg_.latent_dim + 3 + 4; }

    // Flattened observable user state: latent, activity bias, satisfaction
    // remaining, step fraction, history summary. Layout is fixed; predictions
    // are recomputable from it.
    Vec state_vector(const UserState& user) const;
    UserFeatures features_from_state(const Vec& s) const;

    // Expected realized watch seconds of one item: p_longview * E[watch].
    double true_item_value(const UserFeatures& user, int32_t item_id) const;
    // Slate of the catalog's top items by true_item_value.
    std::vector<int32_t> oracle_slate(const UserFeatures& user) const;

private:
    std::shared_ptr<const ItemCatalog> catalog_;
    WorldConfig cfg_;
};

// CQR bucket key for a whole slate: quartile of the slate's mean item bias,
// against the same thresholds that group single items.
int8_t slate_item_group(const ItemCatalog& catalog, std::span<const int32_t> slate);

// Memoizes full-catalog prediction matrices per (stage, user). Predictions
// are keyed draws, so cached rows are bit-identical to direct computation;
// replays of the same user just gather instead of recomputing. Single-owner,
// not thread-safe.
class PredictionCache {
public:
    PredictionCache(const Environment& env, std::vector<PredictorParams> predictors);

    const Mat& full_matrix(int stage, const UserFeatures& feat);
    Mat rows(int stage, const UserFeatures& feat, std::span<const int32_t> items);

private:
    const Environment* env_;
    std::vector<PredictorParams> predictors_;
    std::vector<int32_t> all_items_;
    std::unordered_map<uint64_t, Mat> cache_;
    size_t max_entries_;
};

struct SessionMetrics {
    double watch_time = 0.0;
    int64_t session_length = 0;  // items with positive watch time
};

// Aggregates logged step results of one complete session.
SessionMetrics session_metrics(std::span<const StepResult> steps);

}  // namespace casrl
