#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "casrl/agents.hpp"
#include "casrl/cascade.hpp"
#include "casrl/cqr.hpp"
#include "casrl/env.hpp"

namespace casrl {

struct TrainConfig {
    std::string algo = "unex-cic";
    int agents = 3;
    bool sg = true;
    bool cqr = true;
    double gamma = 0.9;
    double actor_lr = 1e-4;
    double critic_lr = 2e-4;
    double tau_mix = 0.005;
    double grad_clip = 10.0;
    std::vector<Index> hidden = {48, 48, 48, 48};
    int64_t steps = 100000;
    Index batch = 256;
    Index buffer_capacity = 50000;
    int update_every = 10;
    int64_t warmup_steps = 2000;
    int round_steps = 500;  // checkpoint + normalizer freeze cadence
    double explore_sigma = 0.15;
    double explore_decay = 0.999;  // per session
    int64_t eval_every = 2000;
    int eval_sessions = 100;
    uint64_t seed = 1;
    bool log_traces = false;
    bool check_replay = false;
    int cqr_bins = 512;
    double cqr_range_min = 0.01;
    double cqr_range_max = 1e4;
    int64_t cqr_min_count = 100;
    double td3_smooth_sigma = 0.1;
    double td3_smooth_clip = 0.2;
    int td3_delay = 2;
    Index cem_pop = 24;
    double cem_elite = 0.25;
    int cem_rollouts = 6;
    double cem_init_sigma = 0.5;
    double cem_sigma_floor = 0.02;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct ExperimentConfig {
    int schema_version = 1;
    WorldConfig world;
    TrainConfig train;

    void validate() const;
    // Hash of the semantically effective configuration: spellings that cannot
    // change any output (an inert sg flag at one agent, unused per-algorithm
    // knobs, the cic/ctde/ddpg naming distinction at one agent) collapse to
    // one canonical form before hashing.
    std::string config_hash() const;
    Algo algo() const { return algo_from_name(train.algo); }
    int effective_agents() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

struct EvalStats {
    double wt_mean = 0.0;
    double wt_std = 0.0;
    double sl_mean = 0.0;
    double sl_std = 0.0;
};

struct CurvePoint {
    int64_t round = 0;
    int64_t env_steps = 0;
    EvalStats eval;
    double critic_loss = 0.0;
    std::vector<double> actor_grad_norms;
    double explore_sigma = 0.0;
};

struct TrainResult {
    std::vector<CurvePoint> curve;
    EvalStats final_eval;
    double best_wt = 0.0;
    double best_sl = 0.0;
    int64_t env_steps = 0;
    int64_t violations = 0;
};

// What evaluate() rolls out: trained actors, fixed per-stage weights, uniform
// random weights, or the true-engagement oracle (noiseless predictors ranked
// by the watch column).
struct PolicySpec {
    enum class Kind { Actors, Constant, Random, Oracle } kind = Kind::Actors;
    const CascadePolicy* actors = nullptr;
    std::vector<Vec> constants;
};

EvalStats evaluate_policy(const CascadeContext& ctx, const PolicySpec& spec, int n_sessions,
                          uint64_t seed);

// World wiring shared by training, evaluation and verification.
struct Bench {
    std::shared_ptr<const ItemCatalog> catalog;
    std::unique_ptr<Environment> env;
    std::vector<PredictorParams> predictors;
    ObsLayout layout;
    std::unique_ptr<PredictionCache> cache;

    explicit Bench(const WorldConfig& cfg,
                   std::shared_ptr<const ItemCatalog> shared_catalog = nullptr);
    CascadeContext ctx() const { return make_context(*env, predictors, layout, cache.get()); }
    // Zero-noise predictor variant for oracle rollouts.
    std::vector<PredictorParams> noiseless_predictors() const;
};

nlohmann::json policy_to_json(const CascadePolicy& policy);
CascadePolicy policy_from_json(const nlohmann::json& j);

// Runs one training cell and writes its artifacts (curve.jsonl, config.json,
// checkpoint_final.json, run_summary.json, optionally traces.jsonl and
// per-round replay checkpoints) under out_dir. Pass an empty out_dir to keep
// everything in memory.
class Trainer {
public:
    Trainer(ExperimentConfig cfg, std::string out_dir,
            std::shared_ptr<const ItemCatalog> shared_catalog = nullptr);

    TrainResult run();

    // Final policy view for in-process evaluation (valid after run()).
    PolicySpec final_policy() const;
    const Bench& bench() const { return bench_; }
    const ExperimentConfig& config() const { return cfg_; }
    const QuantileTable* quantile_table() const { return cqr_live_ ? &*cqr_live_ : nullptr; }
    const std::map<int64_t, CascadePolicy>& checkpoints() const { return ckpt_store_; }
    const ReplayBuffer* buffer() const { return buffer_ ? &*buffer_ : nullptr; }

private:
    struct LoopHooks;

    TrainResult run_stack(Algo algo);
    TrainResult run_iddpg();
    TrainResult run_cem();
    TrainResult run_eval_only(Algo algo);
    TrainResult collect_and_train(const LoopHooks& hooks);
    int64_t replay_check(std::span<const Transition* const> batch);

    void write_artifacts(const TrainResult& res, const nlohmann::json& agents_state);
    void append_curve(const CurvePoint& p);
    EvalStats eval_now(const PolicySpec& spec) const;

    ExperimentConfig cfg_;
    std::string out_dir_;
    Bench bench_;
    std::string hash_;

    std::optional<ReplayBuffer> buffer_;
    std::optional<QuantileTable> cqr_live_;
    std::map<int64_t, CascadePolicy> ckpt_store_;
    std::unique_ptr<AgentStack> stack_;
    std::unique_ptr<IndependentStacks> istacks_;
    Vec cem_mean_;
    std::string curve_path_;
    int64_t replay_check_skipped_ = 0;
};

// evaluate subcommand: loads a final checkpoint, rebuilds the policy and rolls
// out held-out sessions. Verifies the stored config hash.
EvalStats evaluate_checkpoint(const std::string& ckpt_path, int n_sessions, uint64_t seed);

}  // namespace casrl
