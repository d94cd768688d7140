#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "casrl/cascade.hpp"
#include "casrl/cqr.hpp"
#include "casrl/env.hpp"
#include "casrl/optim.hpp"
#include "casrl/rng.hpp"

namespace casrl {

enum class Algo { UnexCic, UnexCtde, Ddpg, Td3, Iddpg, Cem, Random, Oracle };

Algo algo_from_name(const std::string& name);
std::string algo_name(Algo a);
// Algorithms trained through the shared actor-critic stack.
bool algo_uses_stack(Algo a);

// One logged interaction step. The full stage-N observation embeds every
// upstream v and action, so tau^i for any i is recoverable via obs_prefix.
struct Transition {
    Observation obs;         // tau^N_t
    Vec action_last;         // a^N_t
    std::vector<Vec> noise;  // per stage; empty entries where none was applied
    double reward_raw = 0.0;
    double reward_shaped = 0.0;
    Observation next_obs;  // tau^N_{t+1}; stage()==0 iff done
    bool done = false;
    int64_t checkpoint_id = -1;
    int8_t user_group = 0;
    int8_t item_group = 0;

    double reward(bool cqr) const { return cqr ? reward_shaped : reward_raw; }
    std::vector<Vec> logged_actions() const;
};

// FIFO ring with uniform without-replacement batch sampling.
class ReplayBuffer {
public:
    explicit ReplayBuffer(size_t capacity) : capacity_(capacity) {}

    void push(Transition t);
    std::vector<const Transition*> sample(size_t batch, Rng& rng) const;
    size_t size() const { return items_.size(); }
    int64_t oldest_checkpoint() const;

private:
    size_t capacity_;
    std::deque<Transition> items_;
};

// Deduplicated critic view (s, v^1..v^N): tau^N minus the embedded actions.
Vec critic_obs_part(const ObsLayout& layout, const Observation& tau_full);
// Full critic input (s, v^1..v^N, a^1..a^N) with explicitly supplied actions.
Vec critic_input(const ObsLayout& layout, const Observation& tau_full,
                 std::span<const Vec> actions);
// Inverse of critic_input for the observation fields (information equivalence).
Observation obs_from_critic_input(const ObsLayout& layout, const Vec& input);

struct AgentConfig {
    int agents = 3;  // controlled stages, counted from the final stage backwards
    std::vector<Index> hidden = {48, 48, 48, 48};
    double gamma = 0.9;
    double actor_lr = 1e-4;
    double critic_lr = 2e-4;
    double tau_mix = 0.005;
    double grad_clip = 10.0;
    double action_bound = 2.0;
    bool sg = true;
    double td3_smooth_sigma = 0.1;
    double td3_smooth_clip = 0.2;
    int td3_delay = 2;
    uint64_t seed = 1;
};

// Actors for the controlled window, a shared global critic, their target
// copies and optimizer state. One object per training run, single-threaded.
class AgentStack {
public:
    AgentStack(const ObsLayout& layout, AgentConfig cfg, Algo algo);

    const CascadePolicy& policy() const { return online_; }
    const CascadePolicy& target_policy() const { return target_; }
    const AgentConfig& config() const { return cfg_; }
    int first_controlled() const { return online_.first_controlled; }

    // Normalizer statistics accumulate during collection and take effect only
    // when frozen, so behavior within a collection round is stationary.
    void observe_trace(const CascadeTrace& trace);
    void freeze_normalizers();

    double critic_update(const CascadeContext& ctx,
                         std::span<const Transition* const> batch, bool cqr, Rng& rng);
    // Pre-clip gradient norms per agent.
    std::vector<double> actor_update(const CascadeContext& ctx,
                                     std::span<const Transition* const> batch, bool cqr);
    void soft_update_targets();

    bool actor_due() const;  // false only while TD3 delays the policy step

    double q_value(const Observation& tau_full, std::span<const Vec> actions) const;

    // Raw objective gradients (before clipping), exposed for verification.
    std::vector<std::vector<Arr>> actor_gradients(const CascadeContext& ctx,
                                                  std::span<const Transition* const> batch,
                                                  bool sg_override) const;

    // Bootstrap targets y for a batch (terminal rows are bare rewards).
    Mat critic_targets(const CascadeContext& ctx, std::span<const Transition* const> batch,
                       bool cqr, Rng& rng) const {
        return target_q_rows(ctx, batch, cqr, rng);
    }

    const MlpParams& critic_net() const { return critic_; }
    const MlpParams& critic_target_net() const { return critic_target_; }
    const MlpParams& twin_critic_target_net() const { return critic2_target_; }
    const RunningNormalizer& critic_normalizer() const { return critic_norm_; }

    nlohmann::json to_json() const;
    void load_json(const nlohmann::json& j);

private:
    Mat target_q_rows(const CascadeContext& ctx, std::span<const Transition* const> batch,
                      bool cqr, Rng& rng) const;
    double critic_step(MlpParams& net, AdamState& opt, const Mat& x, const Mat& y);

    ObsLayout layout_;
    AgentConfig cfg_;
    Algo algo_;

    CascadePolicy online_;
    CascadePolicy target_;
    std::vector<AdamState> actor_opt_;
    std::vector<RunningNormalizer> actor_norm_acc_;

    MlpParams critic_;
    MlpParams critic_target_;
    AdamState critic_opt_;
    RunningNormalizer critic_norm_;      // frozen snapshot used by updates
    RunningNormalizer critic_norm_acc_;  // live accumulator

    // TD3 twin machinery; unused for other algorithms.
    MlpParams critic2_;
    MlpParams critic2_target_;
    AdamState critic2_opt_;
    int64_t critic_steps_ = 0;
};

// Independent per-stage DDPG: each controlled stage trains its own critic on
// its own (tau^i, a^i), with no information sharing.
class IndependentStacks {
public:
    IndependentStacks(const ObsLayout& layout, AgentConfig cfg);

    const CascadePolicy& policy() const { return online_; }
    void observe_trace(const CascadeTrace& trace);
    void freeze_normalizers();
    double critic_update(std::span<const Transition* const> batch, bool cqr);
    std::vector<double> actor_update(std::span<const Transition* const> batch, bool cqr);
    void soft_update_targets();

    nlohmann::json to_json() const;

private:
    struct Head {
        int stage;
        MlpParams actor_target;
        MlpParams critic;
        MlpParams critic_target;
        AdamState a_opt;
        AdamState c_opt;
        RunningNormalizer norm_acc;
    };

    ObsLayout layout_;
    AgentConfig cfg_;
    CascadePolicy online_;
    std::vector<Head> heads_;
};

// Diagonal-Gaussian cross-entropy method, maximizing. step() draws one
// population, refits on the elite fraction and reports the running best.
class CemOptimizer {
public:
    struct Params {
        Index pop = 64;
        double elite_frac = 0.1;
        double lo = -1e300;
        double hi = 1e300;
        double sigma_floor = 1e-4;
        uint64_t seed = 1;
    };

    CemOptimizer(Vec init_mean, Vec init_sigma, Params p);

    struct IterLog {
        double best_value;
        double elite_mean_value;
        Vec mean;
    };
    IterLog step(const std::function<double(const Vec&)>& objective);

    const Vec& mean() const { return mean_; }
    const Vec& sigma() const { return sigma_; }
    const Vec& best() const { return best_x_; }
    double best_value() const { return best_value_; }

private:
    Vec mean_;
    Vec sigma_;
    Params p_;
    Rng rng_;
    Vec best_x_;
    double best_value_;
};

Vec cem_search(const std::function<double(const Vec&)>& objective, Vec init_mean,
               Vec init_sigma, CemOptimizer::Params p, int iterations);

}  // namespace casrl
