#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "casrl/env.hpp"
#include "casrl/mlp.hpp"
#include "casrl/normalizer.hpp"
#include "casrl/tape.hpp"
#include "casrl/types.hpp"

namespace casrl {

// Ordered candidate subset at one stage. Order is meaningful: prediction
// matrix rows align with it.
struct CandidateSet {
    int stage = 1;  // 1-based
    std::vector<int32_t> ids;
};

// Dimension bookkeeping for the fixed observation flattening
// (s, v^1, a^1, v^2, a^2, ..., v^i).
struct ObsLayout {
    Index state_dim = 0;
    int n_stages = 0;
    Index pred_cols = 3;   // prediction columns per stage (M)
    Index action_dim = 3;  // action components per stage

    Index stats_dim() const { return 7 * pred_cols; }
    // dim(tau^i) = dim(s) + i*dim(v) + (i-1)*dim(a)
    Index obs_dim(int stage) const {
        return state_dim + stage * stats_dim() + (stage - 1) * action_dim;
    }
    // Deduplicated critic view: (s, v^1..v^N, a^1..a^N).
    Index critic_obs_dim() const { return state_dim + n_stages * stats_dim(); }
    Index critic_input_dim() const { return critic_obs_dim() + n_stages * action_dim; }

    bool operator==(const ObsLayout&) const = default;
};

// Structured per-stage observation with a canonical flattening.
struct Observation {
    Vec state;                 // s
    std::vector<Vec> stats;    // v^1..v^i
    std::vector<Vec> actions;  // a^1..a^{i-1}

    int stage() const { return static_cast<int>(stats.size()); }
    Vec flatten() const;
};

Observation compose_first(Vec state, Vec v1);
Observation compose_obs(const Observation& tau, Vec action, Vec v_next);
Observation obs_from_flat(const ObsLayout& layout, int stage, const Vec& flat);

// tau^stage embedded in a later-stage observation (composition is lossless).
Observation obs_prefix(const Observation& full, int stage);

// Seven order-free statistics per prediction column, over the candidate set:
// mean, std(population), min, q25, q50, q75, max. Quantiles use linear
// interpolation of the sorted column.
Vec extract_stats(const Mat& predictions);

// Top-k by q = predictions * action, descending, ties broken by ascending
// item id. Returns the surviving ids in rank order.
CandidateSet stage_select(const CandidateSet& in, const Mat& predictions, const Vec& action,
                          Index k);

// A stage policy: network plus its frozen observation normalizer.
struct Actor {
    MlpParams net;
    RunningNormalizer norm;
    double bound = 2.0;
};

// a = clamp(bound*sigmoid(mlp(normalize(tau))) + noise, 0, bound);
// pass noise = nullptr for evaluation/target mode.
Vec act(const Actor& actor, const Vec& tau_flat, const Vec* noise);

// Noiseless batched form: one observation per row, one action per row.
Mat act_batched(const Actor& actor, const Mat& tau_rows);

// Differentiable action path (noiseless); the normalizer enters as a constant
// affine transform, so gradients flow into tau and the network leaves.
NodeId act_on_tape(Tape& tape, const Actor& actor, const MlpNodes& nodes, NodeId tau_node);

// The full policy over the cascade: stages below `first_controlled` use the
// fixed action, later stages are actor-controlled (actors[0] drives stage
// first_controlled).
struct CascadePolicy {
    int first_controlled = 1;  // 1-based stage index
    Vec fixed_action;
    std::vector<Actor> actors;

    int n_controlled() const { return static_cast<int>(actors.size()); }
    bool controls(int stage) const { return stage >= first_controlled; }
    const Actor& actor_for(int stage) const { return actors[stage - first_controlled]; }
};

struct CascadeTrace {
    Observation obs;                               // tau^N, structured
    std::vector<Vec> actions;                      // a^1..a^N
    std::vector<Vec> noise;                        // per stage; empty Vec = none
    std::vector<std::vector<int32_t>> candidates;  // I^1..I^N
    std::vector<int32_t> slate;                    // I^{N+1}
    int64_t checkpoint_id = -1;
};

// Immutable inputs of a cascade execution. The optional cache memoizes
// per-user prediction matrices; values are bit-identical either way.
struct CascadeContext {
    const Environment* env = nullptr;
    std::span<const PredictorParams> predictors;
    ObsLayout layout;
    PredictionCache* cache = nullptr;
};

ObsLayout make_layout(const Environment& env);
CascadeContext make_context(const Environment& env, std::span<const PredictorParams> preds,
                            const ObsLayout& layout, PredictionCache* cache = nullptr);

// Stage predictions through the context, using the cache when present.
Mat ctx_predict(const CascadeContext& ctx, std::span<const int32_t> items, int stage,
                const UserFeatures& feat);

// Both entry points below are pure functions of their inputs and safe to call
// concurrently with shared immutable policies and predictors.
//
// Executes the chain from the live user state. `noise` (when given) holds one
// vector per controlled stage.
CascadeTrace run_cascade(const CascadeContext& ctx, const UserState& user,
                         const CascadePolicy& policy, const std::vector<Vec>* noise);

// Replays the chain from the first controlled stage's logged observation.
// Upstream stages are reconstructed with the logged fixed actions; stages from
// first_controlled on are recomputed with the given actors.
CascadeTrace replay_cascade(const CascadeContext& ctx, const Observation& tau_first,
                            const CascadePolicy& policy, const std::vector<Vec>* noise);

// Noiseless replay that produces only observations and actions (no final
// slate); this is the form critic targets consume. When the window is the
// last stage alone, no candidate machinery runs.
CascadeTrace replay_observations(const CascadeContext& ctx, const Observation& tau_first,
                                 const CascadePolicy& policy);

// Candidate chain state rebuilt up to an observation's stage using its logged
// upstream actions; callers continue the cascade from there.
struct WindowChain {
    CandidateSet cands;
    Mat preds;  // predictions over cands, rows aligned
};
WindowChain chain_to_window(const CascadeContext& ctx, const Observation& tau_first);

// Actor-free execution with one fixed action per stage (global weight vectors,
// random-action baselines).
CascadeTrace run_cascade_constant(const CascadeContext& ctx, const UserState& user,
                                  std::span<const Vec> stage_actions);

}  // namespace casrl
