#include "casrl/cascade.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace casrl {

Vec Observation::flatten() const {
    Index dim = state.size();
    for (const auto& v : stats) dim += v.size();
    for (const auto& a : actions) dim += a.size();
    Vec out(dim);
    Index at = 0;
    out.head(state.size()) = state;
    at += state.size();
    for (size_t i = 0; i < stats.size(); ++i) {
        out.segment(at, stats[i].size()) = stats[i];
        at += stats[i].size();
        if (i < actions.size()) {
            out.segment(at, actions[i].size()) = actions[i];
            at += actions[i].size();
        }
    }
    return out;
}

Observation compose_first(Vec state, Vec v1) {
    Observation tau;
    tau.state = std::move(state);
    tau.stats.push_back(std::move(v1));
    return tau;
}

Observation compose_obs(const Observation& tau, Vec action, Vec v_next) {
    if (tau.actions.size() + 1 != tau.stats.size())
        throw ContractError("compose_obs: malformed observation");
    Observation out = tau;
    out.actions.push_back(std::move(action));
    out.stats.push_back(std::move(v_next));
    return out;
}

Observation obs_from_flat(const ObsLayout& layout, int stage, const Vec& flat) {
    if (flat.size() != layout.obs_dim(stage))
        throw DimensionError("obs_from_flat: stage " + std::to_string(stage) + " expects " +
                             std::to_string(layout.obs_dim(stage)) + " dims, got " +
                             std::to_string(flat.size()));
    Observation tau;
    Index at = 0;
    tau.state = flat.segment(at, layout.state_dim);
    at += layout.state_dim;
    for (int i = 1; i <= stage; ++i) {
        tau.stats.push_back(flat.segment(at, layout.stats_dim()));
        at += layout.stats_dim();
        if (i < stage) {
            tau.actions.push_back(flat.segment(at, layout.action_dim));
            at += layout.action_dim;
        }
    }
    return tau;
}

Observation obs_prefix(const Observation& full, int stage) {
    if (stage < 1 || stage > full.stage())
        throw ContractError("obs_prefix: stage " + std::to_string(stage) +
                            " not contained in a stage-" + std::to_string(full.stage()) +
                            " observation");
    Observation out;
    out.state = full.state;
    out.stats.assign(full.stats.begin(), full.stats.begin() + stage);
    out.actions.assign(full.actions.begin(), full.actions.begin() + (stage - 1));
    return out;
}

Vec extract_stats(const Mat& predictions) {
    if (predictions.rows() == 0) throw ContractError("extract_stats: empty candidate set");
    const Index n = predictions.rows();
    const Index m = predictions.cols();
    Vec out(7 * m);
    std::vector<double> col(static_cast<size_t>(n));
    for (Index c = 0; c < m; ++c) {
        for (Index r = 0; r < n; ++r) col[static_cast<size_t>(r)] = predictions(r, c);
        std::sort(col.begin(), col.end());
        double mean = predictions.col(c).mean();
        double var =
            (predictions.col(c).array() - mean).square().sum() / static_cast<double>(n);
        auto quant = [&](double q) {
            double pos = q * static_cast<double>(n - 1);
            size_t lo = static_cast<size_t>(pos);
            double frac = pos - static_cast<double>(lo);
            return lo + 1 < col.size() ? col[lo] + frac * (col[lo + 1] - col[lo]) : col[lo];
        };
        out[7 * c + 0] = mean;
        out[7 * c + 1] = std::sqrt(var);
        out[7 * c + 2] = col.front();
        out[7 * c + 3] = quant(0.25);
        out[7 * c + 4] = quant(0.5);
        out[7 * c + 5] = quant(0.75);
        out[7 * c + 6] = col.back();
    }
    return out;
}

CandidateSet stage_select(const CandidateSet& in, const Mat& predictions, const Vec& action,
                          Index k) {
    const Index n = static_cast<Index>(in.ids.size());
    if (k > n)
        throw ContractError("stage_select: k=" + std::to_string(k) +
                            " exceeds candidate count " + std::to_string(n));
    if (predictions.rows() != n)
        throw DimensionError("stage_select: prediction rows " +
                             std::to_string(predictions.rows()) + " do not align with " +
                             std::to_string(n) + " candidates");
    if (predictions.cols() != action.size())
        throw DimensionError("stage_select: " + std::to_string(predictions.cols()) +
                             " prediction columns vs action dim " +
                             std::to_string(action.size()));

    Vec q = predictions * action;
    if (!q.allFinite())
        throw NumericError("stage_select: non-finite ranking score at stage " +
                           std::to_string(in.stage));

    std::vector<Index> order(static_cast<size_t>(n));
    for (Index i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    auto before = [&](Index a, Index b) {
        if (q[a] != q[b]) return q[a] > q[b];
        return in.ids[static_cast<size_t>(a)] < in.ids[static_cast<size_t>(b)];
    };
    if (k < n) std::nth_element(order.begin(), order.begin() + k - 1, order.end(), before);
    std::sort(order.begin(), order.begin() + k, before);

    CandidateSet out;
    out.stage = in.stage + 1;
    out.ids.reserve(static_cast<size_t>(k));
    for (Index i = 0; i < k; ++i) out.ids.push_back(in.ids[static_cast<size_t>(order[i])]);
    return out;
}

Vec act(const Actor& actor, const Vec& tau_flat, const Vec* noise) {
    Vec z = mlp_forward(actor.net, actor.norm.normalize(tau_flat));
    Vec a = actor.bound * (1.0 / (1.0 + (-z.array()).exp()));
    if (noise != nullptr) {
        if (noise->size() != a.size())
            throw DimensionError("act: noise dim " + std::to_string(noise->size()) +
                                 " vs action dim " + std::to_string(a.size()));
        a += *noise;
    }
    return a.cwiseMax(0.0).cwiseMin(actor.bound);
}

Mat act_batched(const Actor& actor, const Mat& tau_rows) {
    Vec scale = actor.norm.scale();
    Vec shift = actor.norm.shift();
    Mat x = (tau_rows.array().rowwise() * scale.transpose().array()).rowwise() +
            shift.transpose().array();
    Mat z = mlp_forward(actor.net, x);
    return actor.bound * (1.0 / (1.0 + (-z.array()).exp()));
}

NodeId act_on_tape(Tape& tape, const Actor& actor, const MlpNodes& nodes, NodeId tau_node) {
    NodeId x = tape.cwise_affine(tau_node, actor.norm.scale(), actor.norm.shift());
    NodeId z = mlp_apply(tape, actor.net, nodes, x);
    return tape.scale(tape.sigmoid(z), actor.bound);
}

ObsLayout make_layout(const Environment& env) {
    ObsLayout l;
    l.state_dim = env.state_dim();
    l.n_stages = env.config().n_stages();
    l.pred_cols = 3;
    l.action_dim = 3;
    return l;
}

CascadeContext make_context(const Environment& env, std::span<const PredictorParams> preds,
                            const ObsLayout& layout, PredictionCache* cache) {
    if (static_cast<int>(preds.size()) != env.config().n_stages())
        throw ContractError("cascade: need one predictor per stage");
    return CascadeContext{&env, preds, layout, cache};
}

Mat ctx_predict(const CascadeContext& ctx, std::span<const int32_t> items, int stage,
                const UserFeatures& feat) {
    if (ctx.cache != nullptr) return ctx.cache->rows(stage, feat, items);
    return ctx.env->predict(items, ctx.predictors[static_cast<size_t>(stage - 1)], feat);
}

namespace {

struct ChainState {
    Observation tau;
    CandidateSet cands;
    Mat preds;
    std::vector<Vec> actions;
    std::vector<std::vector<int32_t>> candidate_log;
};

// Runs stages `from`..N. With slate_needed=false the final cut is skipped;
// only observations and actions are produced (what critic targets consume).
CascadeTrace run_stages(const CascadeContext& ctx, const CascadePolicy& policy,
                        const std::vector<Vec>* noise, ChainState st, int from,
                        bool slate_needed) {
    const auto& cfg = ctx.env->config();
    const int n_stages = cfg.n_stages();
    const UserFeatures feat = ctx.env->features_from_state(st.tau.state);

    std::vector<Vec> noise_log(static_cast<size_t>(n_stages));
    int stage = from;
    try {
        for (; stage <= n_stages; ++stage) {
            st.candidate_log.push_back(st.cands.ids);
            Vec a;
            if (policy.controls(stage)) {
                const Vec* nz = nullptr;
                if (noise != nullptr) {
                    const Vec& v = (*noise)[static_cast<size_t>(stage - policy.first_controlled)];
                    if (v.size() > 0) nz = &v;
                }
                a = act(policy.actor_for(stage), st.tau.flatten(), nz);
                if (nz != nullptr) noise_log[static_cast<size_t>(stage - 1)] = *nz;
            } else {
                a = policy.fixed_action;
            }
            st.actions.push_back(std::move(a));

            if (stage < n_stages) {
                st.cands = stage_select(st.cands, st.preds, st.actions.back(),
                                        cfg.ladder[static_cast<size_t>(stage)]);
                st.preds = ctx_predict(ctx, st.cands.ids, stage + 1, feat);
                st.tau = compose_obs(st.tau, st.actions.back(), extract_stats(st.preds));
            } else if (slate_needed) {
                st.cands = stage_select(st.cands, st.preds, st.actions.back(), cfg.slate_size);
            }
        }
    } catch (const std::exception& e) {
        throw ContractError("cascade stage " + std::to_string(stage) + ": " + e.what());
    }

    CascadeTrace trace;
    trace.obs = std::move(st.tau);
    trace.actions = std::move(st.actions);
    trace.noise = std::move(noise_log);
    trace.candidates = std::move(st.candidate_log);
    if (slate_needed) trace.slate = std::move(st.cands.ids);
    return trace;
}

CandidateSet full_candidate_set(const CascadeContext& ctx) {
    CandidateSet c;
    c.stage = 1;
    c.ids.resize(ctx.env->catalog().items.size());
    for (size_t i = 0; i < c.ids.size(); ++i) c.ids[i] = static_cast<int32_t>(i);
    return c;
}

ChainState make_chain_state(const CascadeContext& ctx, const Observation& tau_first) {
    const int j0 = tau_first.stage();
    const UserFeatures feat = ctx.env->features_from_state(tau_first.state);
    ChainState st;
    st.cands = full_candidate_set(ctx);
    st.preds = ctx_predict(ctx, st.cands.ids, 1, feat);
    for (int stage = 1; stage < j0; ++stage) {
        st.candidate_log.push_back(st.cands.ids);
        st.actions.push_back(tau_first.actions[static_cast<size_t>(stage - 1)]);
        st.cands = stage_select(st.cands, st.preds, st.actions.back(),
                                ctx.env->config().ladder[static_cast<size_t>(stage)]);
        st.preds = ctx_predict(ctx, st.cands.ids, stage + 1, feat);
    }
    st.tau = tau_first;
    return st;
}

}  // namespace

WindowChain chain_to_window(const CascadeContext& ctx, const Observation& tau_first) {
    ChainState st = make_chain_state(ctx, tau_first);
    return WindowChain{std::move(st.cands), std::move(st.preds)};
}

CascadeTrace run_cascade(const CascadeContext& ctx, const UserState& user,
                         const CascadePolicy& policy, const std::vector<Vec>* noise) {
    ChainState st;
    st.cands = full_candidate_set(ctx);
    st.preds = ctx_predict(ctx, st.cands.ids, 1, user.feat);
    st.tau = compose_first(ctx.env->state_vector(user), extract_stats(st.preds));
    return run_stages(ctx, policy, noise, std::move(st), 1, /*slate_needed=*/true);
}

CascadeTrace replay_cascade(const CascadeContext& ctx, const Observation& tau_first,
                            const CascadePolicy& policy, const std::vector<Vec>* noise) {
    if (tau_first.stage() != policy.first_controlled)
        throw ContractError("replay_cascade: observation is for stage " +
                            std::to_string(tau_first.stage()) +
                            ", first controlled stage is " +
                            std::to_string(policy.first_controlled));
    return run_stages(ctx, policy, noise, make_chain_state(ctx, tau_first),
                      policy.first_controlled, /*slate_needed=*/true);
}

CascadeTrace run_cascade_constant(const CascadeContext& ctx, const UserState& user,
                                  std::span<const Vec> stage_actions) {
    const auto& cfg = ctx.env->config();
    const int n_stages = cfg.n_stages();
    if (static_cast<int>(stage_actions.size()) != n_stages)
        throw ContractError("run_cascade_constant: need one action per stage");

    CandidateSet cands = full_candidate_set(ctx);
    Mat preds = ctx_predict(ctx, cands.ids, 1, user.feat);
    Observation tau = compose_first(ctx.env->state_vector(user), extract_stats(preds));

    CascadeTrace trace;
    trace.noise.resize(static_cast<size_t>(n_stages));
    for (int stage = 1; stage <= n_stages; ++stage) {
        trace.candidates.push_back(cands.ids);
        const Vec& a = stage_actions[static_cast<size_t>(stage - 1)];
        trace.actions.push_back(a);
        if (stage < n_stages) {
            cands = stage_select(cands, preds, a, cfg.ladder[static_cast<size_t>(stage)]);
            preds = ctx_predict(ctx, cands.ids, stage + 1, user.feat);
            tau = compose_obs(tau, a, extract_stats(preds));
        } else {
            cands = stage_select(cands, preds, a, cfg.slate_size);
        }
    }
    trace.obs = std::move(tau);
    trace.slate = std::move(cands.ids);
    return trace;
}

CascadeTrace replay_observations(const CascadeContext& ctx, const Observation& tau_first,
                                 const CascadePolicy& policy) {
    const int j0 = policy.first_controlled;
    if (tau_first.stage() != j0)
        throw ContractError("replay_observations: observation is for stage " +
                            std::to_string(tau_first.stage()) +
                            ", first controlled stage is " + std::to_string(j0));
    const int n_stages = ctx.env->config().n_stages();
    if (j0 == n_stages) {
        // Single controlled stage: nothing downstream depends on selection, so
        // no candidate machinery runs at all.
        CascadeTrace trace;
        trace.obs = tau_first;
        trace.actions.assign(tau_first.actions.begin(), tau_first.actions.end());
        trace.actions.push_back(act(policy.actors[0], tau_first.flatten(), nullptr));
        trace.noise.resize(static_cast<size_t>(n_stages));
        return trace;
    }
    return run_stages(ctx, policy, nullptr, make_chain_state(ctx, tau_first), j0,
                      /*slate_needed=*/false);
}

}  // namespace casrl
