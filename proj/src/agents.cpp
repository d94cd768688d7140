#include "casrl/agents.hpp"

#include <algorithm>
#include <cmath>

#include "casrl/serialize.hpp"

namespace casrl {

Algo algo_from_name(const std::string& name) {
    if (name == "unex-cic") return Algo::UnexCic;
    if (name == "unex-ctde") return Algo::UnexCtde;
    if (name == "ddpg") return Algo::Ddpg;
    if (name == "td3") return Algo::Td3;
    if (name == "iddpg") return Algo::Iddpg;
    if (name == "cem") return Algo::Cem;
    if (name == "random") return Algo::Random;
    if (name == "oracle") return Algo::Oracle;
    throw ContractError("unknown algorithm: " + name);
}

std::string algo_name(Algo a) {
    switch (a) {
        case Algo::UnexCic: return "unex-cic";
        case Algo::UnexCtde: return "unex-ctde";
        case Algo::Ddpg: return "ddpg";
        case Algo::Td3: return "td3";
        case Algo::Iddpg: return "iddpg";
        case Algo::Cem: return "cem";
        case Algo::Random: return "random";
        case Algo::Oracle: return "oracle";
    }
    return "?";
}

bool algo_uses_stack(Algo a) {
    return a == Algo::UnexCic || a == Algo::UnexCtde || a == Algo::Ddpg || a == Algo::Td3;
}

std::vector<Vec> Transition::logged_actions() const {
    std::vector<Vec> out(obs.actions.begin(), obs.actions.end());
    out.push_back(action_last);
    return out;
}

void ReplayBuffer::push(Transition t) {
    if (items_.size() == capacity_) items_.pop_front();
    items_.push_back(std::move(t));
}

std::vector<const Transition*> ReplayBuffer::sample(size_t batch, Rng& rng) const {
    if (items_.empty()) throw ContractError("replay buffer: sampling from an empty buffer");
    size_t n = std::min(batch, items_.size());
    // Rejection sampling keeps batches without replacement; collisions are
    // rare at batch << size.
    std::vector<size_t> picked;
    picked.reserve(n);
    while (picked.size() < n) {
        size_t idx = static_cast<size_t>(rng.below(items_.size()));
        if (std::find(picked.begin(), picked.end(), idx) == picked.end())
            picked.push_back(idx);
    }
    std::vector<const Transition*> out;
    out.reserve(n);
    for (size_t idx : picked) out.push_back(&items_[idx]);
    return out;
}

int64_t ReplayBuffer::oldest_checkpoint() const {
    return items_.empty() ? -1 : items_.front().checkpoint_id;
}

Vec critic_obs_part(const ObsLayout& layout, const Observation& tau_full) {
    if (tau_full.stage() != layout.n_stages)
        throw DimensionError("critic_obs_part: observation covers stage " +
                             std::to_string(tau_full.stage()) + " of " +
                             std::to_string(layout.n_stages));
    Vec out(layout.critic_obs_dim());
    Index at = 0;
    out.head(layout.state_dim) = tau_full.state;
    at += layout.state_dim;
    for (const Vec& v : tau_full.stats) {
        out.segment(at, v.size()) = v;
        at += v.size();
    }
    return out;
}

Vec critic_input(const ObsLayout& layout, const Observation& tau_full,
                 std::span<const Vec> actions) {
    if (static_cast<int>(actions.size()) != layout.n_stages)
        throw DimensionError("critic_input: " + std::to_string(actions.size()) +
                             " actions for " + std::to_string(layout.n_stages) + " stages");
    Vec out(layout.critic_input_dim());
    out.head(layout.critic_obs_dim()) = critic_obs_part(layout, tau_full);
    Index at = layout.critic_obs_dim();
    for (const Vec& a : actions) {
        out.segment(at, a.size()) = a;
        at += a.size();
    }
    return out;
}

Observation obs_from_critic_input(const ObsLayout& layout, const Vec& input) {
    if (input.size() != layout.critic_input_dim())
        throw DimensionError("obs_from_critic_input: got " + std::to_string(input.size()) +
                             " dims, expected " + std::to_string(layout.critic_input_dim()));
    Observation obs;
    Index at = 0;
    obs.state = input.segment(at, layout.state_dim);
    at += layout.state_dim;
    for (int i = 0; i < layout.n_stages; ++i) {
        obs.stats.push_back(input.segment(at, layout.stats_dim()));
        at += layout.stats_dim();
    }
    for (int i = 0; i + 1 < layout.n_stages; ++i) {
        obs.actions.push_back(input.segment(at, layout.action_dim));
        at += layout.action_dim;
    }
    return obs;
}

namespace {

Vec tape_row_value(const Tape& tape, NodeId id) {
    const Mat& m = tape.value(id);
    return m.row(0).transpose();
}

}  // namespace

AgentStack::AgentStack(const ObsLayout& layout, AgentConfig cfg, Algo algo)
    : layout_(layout), cfg_(std::move(cfg)), algo_(algo) {
    if (!algo_uses_stack(algo)) throw ContractError("agent stack: unsupported algorithm");
    if (algo == Algo::Ddpg || algo == Algo::Td3) cfg_.agents = 1;
    if (cfg_.agents < 1 || cfg_.agents > layout.n_stages)
        throw ContractError("agent stack: agent count " + std::to_string(cfg_.agents) +
                            " outside 1.." + std::to_string(layout.n_stages));

    online_.first_controlled = layout.n_stages - cfg_.agents + 1;
    online_.fixed_action = Vec::Constant(layout.action_dim, 1.0);
    for (int stage = online_.first_controlled; stage <= layout.n_stages; ++stage) {
        Actor a;
        a.net = mlp_make(layout.obs_dim(stage), cfg_.hidden, layout.action_dim,
                         Activation::Tanh, Activation::Linear, mix(cfg_.seed, 0xAC, stage));
        a.norm = RunningNormalizer(layout.obs_dim(stage));
        a.bound = cfg_.action_bound;
        online_.actors.push_back(std::move(a));
        actor_opt_.push_back(adam_make(online_.actors.back().net, cfg_.actor_lr));
        actor_norm_acc_.emplace_back(layout.obs_dim(stage));
    }
    target_ = online_;

    critic_ = mlp_make(layout.critic_input_dim(), cfg_.hidden, 1, Activation::Tanh,
                       Activation::Linear, mix(cfg_.seed, 0xC1));
    critic_target_ = critic_;
    critic_opt_ = adam_make(critic_, cfg_.critic_lr);
    critic_norm_ = RunningNormalizer(layout.critic_obs_dim());
    critic_norm_acc_ = critic_norm_;

    if (algo_ == Algo::Td3) {
        critic2_ = mlp_make(layout.critic_input_dim(), cfg_.hidden, 1, Activation::Tanh,
                            Activation::Linear, mix(cfg_.seed, 0xC2));
        critic2_target_ = critic2_;
        critic2_opt_ = adam_make(critic2_, cfg_.critic_lr);
    }
}

void AgentStack::observe_trace(const CascadeTrace& trace) {
    for (int stage = online_.first_controlled; stage <= layout_.n_stages; ++stage)
        actor_norm_acc_[static_cast<size_t>(stage - online_.first_controlled)].update(
            obs_prefix(trace.obs, stage).flatten());
    critic_norm_acc_.update(critic_obs_part(layout_, trace.obs));
}

void AgentStack::freeze_normalizers() {
    for (size_t k = 0; k < online_.actors.size(); ++k) {
        online_.actors[k].norm = actor_norm_acc_[k];
        target_.actors[k].norm = actor_norm_acc_[k];
    }
    critic_norm_ = critic_norm_acc_;
}

namespace {

// Rows of flattened tau^stage prefixes, one per transition.
Mat prefix_rows(const ObsLayout& layout, int stage,
                std::span<const Transition* const> batch,
                const std::vector<Index>& rows_of, bool next) {
    Mat out(static_cast<Index>(rows_of.size()), layout.obs_dim(stage));
    for (size_t i = 0; i < rows_of.size(); ++i) {
        const Transition& t = *batch[static_cast<size_t>(rows_of[i])];
        out.row(static_cast<Index>(i)) =
            obs_prefix(next ? t.next_obs : t.obs, stage).flatten().transpose();
    }
    return out;
}

// Column offset of v^stage inside the critic observation part.
Index stats_offset(const ObsLayout& layout, int stage) {
    return layout.state_dim + static_cast<Index>(stage - 1) * layout.stats_dim();
}

}  // namespace

Mat AgentStack::target_q_rows(const CascadeContext& ctx,
                              std::span<const Transition* const> batch, bool cqr,
                              Rng& rng) const {
    const Index B = static_cast<Index>(batch.size());
    const int j0 = online_.first_controlled;
    const int n_stages = layout_.n_stages;
    Mat y(B, 1);

    std::vector<Index> live;
    for (Index b = 0; b < B; ++b) {
        const Transition& t = *batch[static_cast<size_t>(b)];
        if (t.done)
            y(b, 0) = t.reward(cqr);
        else
            live.push_back(b);
    }
    if (live.empty()) return y;
    const Index Bl = static_cast<Index>(live.size());

    Mat obs_part(Bl, layout_.critic_obs_dim());
    std::vector<Mat> acts(static_cast<size_t>(n_stages));
    for (int stage = 1; stage < j0; ++stage) {
        Mat& a = acts[static_cast<size_t>(stage - 1)];
        a.resize(Bl, layout_.action_dim);
        for (Index i = 0; i < Bl; ++i)
            a.row(i) = batch[static_cast<size_t>(live[static_cast<size_t>(i)])]
                           ->next_obs.actions[static_cast<size_t>(stage - 1)]
                           .transpose();
    }

    if (algo_ == Algo::UnexCic && j0 < n_stages) {
        // Stage-synchronous replay: the whole batch advances through the
        // chain together so every policy call is one matrix pass.
        Mat cur = prefix_rows(layout_, j0, batch, live, /*next=*/true);
        for (Index i = 0; i < Bl; ++i)
            obs_part.row(i).head(stats_offset(layout_, j0 + 1)) =
                cur.row(i).head(stats_offset(layout_, j0 + 1));

        std::vector<WindowChain> chains(static_cast<size_t>(Bl));
        std::vector<UserFeatures> feats(static_cast<size_t>(Bl));
        for (Index i = 0; i < Bl; ++i) {
            const Transition& t = *batch[static_cast<size_t>(live[static_cast<size_t>(i)])];
            Observation tau = obs_prefix(t.next_obs, j0);
            chains[static_cast<size_t>(i)] = chain_to_window(ctx, tau);
            feats[static_cast<size_t>(i)] = ctx.env->features_from_state(tau.state);
        }

        for (int stage = j0; stage <= n_stages; ++stage) {
            Mat a = act_batched(target_.actors[static_cast<size_t>(stage - j0)], cur);
            acts[static_cast<size_t>(stage - 1)] = a;
            if (stage == n_stages) break;
            Mat v(Bl, layout_.stats_dim());
            for (Index i = 0; i < Bl; ++i) {
                WindowChain& wc = chains[static_cast<size_t>(i)];
                CandidateSet next = stage_select(
                    wc.cands, wc.preds, a.row(i).transpose(),
                    ctx.env->config().ladder[static_cast<size_t>(stage)]);
                wc.preds = ctx_predict(ctx, next.ids, stage + 1,
                                       feats[static_cast<size_t>(i)]);
                wc.cands = std::move(next);
                v.row(i) = extract_stats(wc.preds).transpose();
            }
            obs_part.middleCols(stats_offset(layout_, stage + 1), layout_.stats_dim()) = v;
            Mat grown(Bl, cur.cols() + a.cols() + v.cols());
            grown << cur, a, v;
            cur = std::move(grown);
        }
    } else {
        // Buffer observations stand in for replayed ones; only the target
        // actions are recomputed, each from its own logged tau^i.
        for (Index i = 0; i < Bl; ++i)
            obs_part.row(i) =
                critic_obs_part(layout_,
                                batch[static_cast<size_t>(live[static_cast<size_t>(i)])]
                                    ->next_obs)
                    .transpose();
        for (int stage = j0; stage <= n_stages; ++stage) {
            Mat tau = prefix_rows(layout_, stage, batch, live, /*next=*/true);
            Mat a = act_batched(target_.actors[static_cast<size_t>(stage - j0)], tau);
            if (algo_ == Algo::Td3) {
                for (Index i = 0; i < a.rows(); ++i)
                    for (Index k = 0; k < a.cols(); ++k) {
                        double nz = cfg_.td3_smooth_sigma * rng.normal();
                        nz = std::clamp(nz, -cfg_.td3_smooth_clip, cfg_.td3_smooth_clip);
                        a(i, k) = std::clamp(a(i, k) + nz, 0.0, cfg_.action_bound);
                    }
            }
            acts[static_cast<size_t>(stage - 1)] = std::move(a);
        }
    }

    Mat xs(Bl, layout_.critic_input_dim());
    Vec scale = critic_norm_.scale();
    Vec shift = critic_norm_.shift();
    xs.leftCols(layout_.critic_obs_dim()) =
        (obs_part.array().rowwise() * scale.transpose().array()).rowwise() +
        shift.transpose().array();
    Index at = layout_.critic_obs_dim();
    for (const Mat& a : acts) {
        xs.middleCols(at, layout_.action_dim) = a;
        at += layout_.action_dim;
    }

    Mat q = mlp_forward(critic_target_, xs);
    if (algo_ == Algo::Td3) q = q.cwiseMin(mlp_forward(critic2_target_, xs));
    for (Index i = 0; i < Bl; ++i) {
        const Transition& t = *batch[static_cast<size_t>(live[static_cast<size_t>(i)])];
        y(live[static_cast<size_t>(i)], 0) = t.reward(cqr) + cfg_.gamma * q(i, 0);
    }
    return y;
}

double AgentStack::critic_step(MlpParams& net, AdamState& opt, const Mat& x, const Mat& y) {
    Tape tape;
    MlpNodes nodes = mlp_insert(tape, net);
    NodeId pred = mlp_apply(tape, net, nodes, tape.leaf(x));
    NodeId loss = tape.mse(pred, tape.leaf(y));
    tape.backward(loss);
    std::vector<Arr> grads = mlp_collect_grads(tape, nodes);
    clip_global_norm(grads, cfg_.grad_clip);
    adam_step(net, grads, opt);
    return tape.value(loss)(0, 0);
}

double AgentStack::critic_update(const CascadeContext& ctx,
                                 std::span<const Transition* const> batch, bool cqr,
                                 Rng& rng) {
    const Index B = static_cast<Index>(batch.size());
    Mat y = target_q_rows(ctx, batch, cqr, rng);

    Mat x(B, layout_.critic_input_dim());
    for (Index b = 0; b < B; ++b) {
        const Transition& t = *batch[static_cast<size_t>(b)];
        Vec row = critic_input(layout_, t.obs, t.logged_actions());
        row.head(layout_.critic_obs_dim()) =
            critic_norm_.normalize(row.head(layout_.critic_obs_dim()));
        x.row(b) = row.transpose();
    }

    double loss = critic_step(critic_, critic_opt_, x, y);
    if (algo_ == Algo::Td3) loss = 0.5 * (loss + critic_step(critic2_, critic2_opt_, x, y));
    critic_steps_ += 1;
    return loss;
}

bool AgentStack::actor_due() const {
    if (algo_ != Algo::Td3) return true;
    return critic_steps_ % cfg_.td3_delay == 0;
}

std::vector<std::vector<Arr>> AgentStack::actor_gradients(
    const CascadeContext& ctx, std::span<const Transition* const> batch,
    bool sg_override) const {
    const int j0 = online_.first_controlled;
    const int n_stages = layout_.n_stages;
    const int m = online_.n_controlled();
    const Index B = static_cast<Index>(batch.size());

    std::vector<Index> all(static_cast<size_t>(B));
    for (Index b = 0; b < B; ++b) all[static_cast<size_t>(b)] = b;

    Tape tape;
    std::vector<MlpNodes> actor_nodes;
    for (const Actor& a : online_.actors) actor_nodes.push_back(mlp_insert(tape, a.net));
    MlpNodes critic_nodes = mlp_insert(tape, critic_);

    Vec scale = critic_norm_.scale();
    Vec shift = critic_norm_.shift();
    auto normalize_rows = [&](const Mat& part) {
        return Mat(((part.array().rowwise() * scale.transpose().array()).rowwise() +
                    shift.transpose().array())
                       .matrix());
    };
    auto logged_action_rows = [&](int stage) {
        Mat a(B, layout_.action_dim);
        for (Index b = 0; b < B; ++b) {
            const Transition& t = *batch[static_cast<size_t>(b)];
            a.row(b) = (stage == n_stages
                            ? t.action_last
                            : t.obs.actions[static_cast<size_t>(stage - 1)])
                           .transpose();
        }
        return a;
    };

    // One Q head per group; each group contributes its own batch mean, so the
    // per-agent variant gets per-agent objectives and the chained variants a
    // single shared one.
    std::vector<NodeId> group_means;

    if (algo_ == Algo::UnexCtde) {
        Mat obs_part(B, layout_.critic_obs_dim());
        for (Index b = 0; b < B; ++b)
            obs_part.row(b) =
                critic_obs_part(layout_, batch[static_cast<size_t>(b)]->obs).transpose();
        Mat obs_norm = normalize_rows(obs_part);

        for (int stage = j0; stage <= n_stages; ++stage) {
            int k = stage - j0;
            NodeId tau = tape.leaf(prefix_rows(layout_, stage, batch, all, /*next=*/false));
            NodeId a_node = act_on_tape(tape, online_.actors[static_cast<size_t>(k)],
                                        actor_nodes[static_cast<size_t>(k)], tau);
            std::vector<NodeId> parts;
            parts.push_back(tape.leaf(obs_norm));
            for (int s = 1; s <= n_stages; ++s)
                parts.push_back(s == stage ? a_node : tape.leaf(logged_action_rows(s)));
            NodeId x = tape.concat(std::span<const NodeId>(parts.data(), parts.size()));
            group_means.push_back(tape.mean(mlp_apply(tape, critic_, critic_nodes, x)));
        }
    } else {
        // Chained rebuild from the window's first observation; candidate
        // machinery is locally constant in the actions and stays off-tape.
        Mat cur_flat = prefix_rows(layout_, j0, batch, all, /*next=*/false);
        NodeId cur = tape.leaf(cur_flat);

        Mat obs_part(B, layout_.critic_obs_dim());
        for (Index b = 0; b < B; ++b) {
            Vec row = critic_obs_part(layout_, batch[static_cast<size_t>(b)]->obs);
            obs_part.row(b) = row.transpose();
        }

        std::vector<WindowChain> chains;
        std::vector<UserFeatures> feats;
        if (j0 < n_stages) {
            chains.resize(static_cast<size_t>(B));
            feats.resize(static_cast<size_t>(B));
            for (Index b = 0; b < B; ++b) {
                Observation tau = obs_prefix(batch[static_cast<size_t>(b)]->obs, j0);
                chains[static_cast<size_t>(b)] = chain_to_window(ctx, tau);
                feats[static_cast<size_t>(b)] = ctx.env->features_from_state(tau.state);
            }
        }

        std::vector<NodeId> a_nodes(static_cast<size_t>(m));
        for (int stage = j0; stage <= n_stages; ++stage) {
            int k = stage - j0;
            NodeId a_node = act_on_tape(tape, online_.actors[static_cast<size_t>(k)],
                                        actor_nodes[static_cast<size_t>(k)], cur);
            a_nodes[static_cast<size_t>(k)] = a_node;
            if (stage == n_stages) break;

            const Mat& a_val = tape.value(a_node);
            Mat v(B, layout_.stats_dim());
            for (Index b = 0; b < B; ++b) {
                WindowChain& wc = chains[static_cast<size_t>(b)];
                CandidateSet next = stage_select(
                    wc.cands, wc.preds, a_val.row(b).transpose(),
                    ctx.env->config().ladder[static_cast<size_t>(stage)]);
                wc.preds = ctx_predict(ctx, next.ids, stage + 1,
                                       feats[static_cast<size_t>(b)]);
                wc.cands = std::move(next);
                v.row(b) = extract_stats(wc.preds).transpose();
            }
            // Replayed downstream statistics replace the logged ones.
            obs_part.middleCols(stats_offset(layout_, stage + 1), layout_.stats_dim()) = v;
            NodeId embed = sg_override ? tape.stop_gradient(a_node) : a_node;
            cur = tape.concat({cur, embed, tape.leaf(v)});
        }

        std::vector<NodeId> parts;
        parts.push_back(tape.leaf(normalize_rows(obs_part)));
        for (int s = 1; s <= n_stages; ++s) {
            if (s >= j0)
                parts.push_back(a_nodes[static_cast<size_t>(s - j0)]);
            else
                parts.push_back(tape.leaf(logged_action_rows(s)));
        }
        NodeId x = tape.concat(std::span<const NodeId>(parts.data(), parts.size()));
        group_means.push_back(tape.mean(mlp_apply(tape, critic_, critic_nodes, x)));
    }

    NodeId sum = group_means[0];
    for (size_t g = 1; g < group_means.size(); ++g) sum = tape.add(sum, group_means[g]);
    tape.backward(tape.scale(sum, -1.0));

    std::vector<std::vector<Arr>> out;
    for (const MlpNodes& nodes : actor_nodes) out.push_back(mlp_collect_grads(tape, nodes));
    return out;
}

std::vector<double> AgentStack::actor_update(const CascadeContext& ctx,
                                             std::span<const Transition* const> batch,
                                             bool /*cqr*/) {
    std::vector<std::vector<Arr>> grads = actor_gradients(ctx, batch, cfg_.sg);
    std::vector<double> norms;
    for (size_t k = 0; k < grads.size(); ++k) {
        norms.push_back(clip_global_norm(grads[k], cfg_.grad_clip));
        adam_step(online_.actors[k].net, grads[k], actor_opt_[k]);
    }
    return norms;
}

void AgentStack::soft_update_targets() {
    for (size_t k = 0; k < online_.actors.size(); ++k)
        soft_update(target_.actors[k].net, online_.actors[k].net, cfg_.tau_mix);
    soft_update(critic_target_, critic_, cfg_.tau_mix);
    if (algo_ == Algo::Td3) soft_update(critic2_target_, critic2_, cfg_.tau_mix);
}

double AgentStack::q_value(const Observation& tau_full, std::span<const Vec> actions) const {
    Vec row = critic_input(layout_, tau_full, actions);
    row.head(layout_.critic_obs_dim()) =
        critic_norm_.normalize(row.head(layout_.critic_obs_dim()));
    return mlp_forward(critic_, row)[0];
}

nlohmann::json AgentStack::to_json() const {
    nlohmann::json actors = nlohmann::json::array();
    for (size_t k = 0; k < online_.actors.size(); ++k) {
        actors.push_back(nlohmann::json{
            {"net", mlp_to_json(online_.actors[k].net)},
            {"target", mlp_to_json(target_.actors[k].net)},
            {"norm", normalizer_to_json(online_.actors[k].norm)},
            {"norm_acc", normalizer_to_json(actor_norm_acc_[k])},
            {"opt", adam_to_json(actor_opt_[k])}});
    }
    nlohmann::json j{{"actors", std::move(actors)},
                     {"critic", mlp_to_json(critic_)},
                     {"critic_target", mlp_to_json(critic_target_)},
                     {"critic_opt", adam_to_json(critic_opt_)},
                     {"critic_norm", normalizer_to_json(critic_norm_)},
                     {"critic_norm_acc", normalizer_to_json(critic_norm_acc_)},
                     {"critic_steps", critic_steps_},
                     {"first_controlled", online_.first_controlled}};
    if (algo_ == Algo::Td3) {
        j["critic2"] = mlp_to_json(critic2_);
        j["critic2_target"] = mlp_to_json(critic2_target_);
        j["critic2_opt"] = adam_to_json(critic2_opt_);
    }
    return j;
}

void AgentStack::load_json(const nlohmann::json& j) {
    const auto& actors = j.at("actors");
    if (actors.size() != online_.actors.size())
        throw ContractError("agent stack load: actor count mismatch");
    for (size_t k = 0; k < online_.actors.size(); ++k) {
        online_.actors[k].net = mlp_from_json(actors.at(k).at("net"));
        target_.actors[k].net = mlp_from_json(actors.at(k).at("target"));
        online_.actors[k].norm = normalizer_from_json(actors.at(k).at("norm"));
        target_.actors[k].norm = online_.actors[k].norm;
        actor_norm_acc_[k] = normalizer_from_json(actors.at(k).at("norm_acc"));
        actor_opt_[k] = adam_from_json(actors.at(k).at("opt"));
    }
    critic_ = mlp_from_json(j.at("critic"));
    critic_target_ = mlp_from_json(j.at("critic_target"));
    critic_opt_ = adam_from_json(j.at("critic_opt"));
    critic_norm_ = normalizer_from_json(j.at("critic_norm"));
    critic_norm_acc_ = normalizer_from_json(j.at("critic_norm_acc"));
    critic_steps_ = j.at("critic_steps").get<int64_t>();
    if (algo_ == Algo::Td3) {
        critic2_ = mlp_from_json(j.at("critic2"));
        critic2_target_ = mlp_from_json(j.at("critic2_target"));
        critic2_opt_ = adam_from_json(j.at("critic2_opt"));
    }
}

IndependentStacks::IndependentStacks(const ObsLayout& layout, AgentConfig cfg)
    : layout_(layout), cfg_(std::move(cfg)) {
    if (cfg_.agents < 1 || cfg_.agents > layout.n_stages)
        throw ContractError("independent stacks: bad agent count");
    online_.first_controlled = layout.n_stages - cfg_.agents + 1;
    online_.fixed_action = Vec::Constant(layout.action_dim, 1.0);
    for (int stage = online_.first_controlled; stage <= layout.n_stages; ++stage) {
        Actor a;
        a.net = mlp_make(layout.obs_dim(stage), cfg_.hidden, layout.action_dim,
                         Activation::Tanh, Activation::Linear, mix(cfg_.seed, 0xAC, stage));
        a.norm = RunningNormalizer(layout.obs_dim(stage));
        a.bound = cfg_.action_bound;
        online_.actors.push_back(std::move(a));

        Head h;
        h.stage = stage;
        h.actor_target = online_.actors.back().net;
        h.critic = mlp_make(layout.obs_dim(stage) + layout.action_dim, cfg_.hidden, 1,
                            Activation::Tanh, Activation::Linear, mix(cfg_.seed, 0xD1, stage));
        h.critic_target = h.critic;
        h.a_opt = adam_make(online_.actors.back().net, cfg_.actor_lr);
        h.c_opt = adam_make(h.critic, cfg_.critic_lr);
        h.norm_acc = RunningNormalizer(layout.obs_dim(stage));
        heads_.push_back(std::move(h));
    }
}

void IndependentStacks::observe_trace(const CascadeTrace& trace) {
    for (size_t k = 0; k < heads_.size(); ++k)
        heads_[k].norm_acc.update(obs_prefix(trace.obs, heads_[k].stage).flatten());
}

void IndependentStacks::freeze_normalizers() {
    for (size_t k = 0; k < heads_.size(); ++k) online_.actors[k].norm = heads_[k].norm_acc;
}

double IndependentStacks::critic_update(std::span<const Transition* const> batch, bool cqr) {
    const Index B = static_cast<Index>(batch.size());
    std::vector<Index> all(static_cast<size_t>(B));
    for (Index b = 0; b < B; ++b) all[static_cast<size_t>(b)] = b;

    double loss_sum = 0;
    for (size_t k = 0; k < heads_.size(); ++k) {
        Head& h = heads_[k];
        const Actor& actor = online_.actors[k];
        Index obs_dim = layout_.obs_dim(h.stage);
        Vec scale = actor.norm.scale();
        Vec shift = actor.norm.shift();
        auto norm_rows = [&](const Mat& rows) {
            return Mat(((rows.array().rowwise() * scale.transpose().array()).rowwise() +
                        shift.transpose().array())
                           .matrix());
        };

        Mat tau = prefix_rows(layout_, h.stage, batch, all, /*next=*/false);
        Mat x(B, obs_dim + layout_.action_dim);
        x.leftCols(obs_dim) = norm_rows(tau);
        for (Index b = 0; b < B; ++b) {
            const Transition& t = *batch[static_cast<size_t>(b)];
            x.row(b).tail(layout_.action_dim) =
                (h.stage == layout_.n_stages
                     ? t.action_last
                     : t.obs.actions[static_cast<size_t>(h.stage - 1)])
                    .transpose();
        }

        std::vector<Index> live;
        for (Index b = 0; b < B; ++b)
            if (!batch[static_cast<size_t>(b)]->done) live.push_back(b);
        Mat y(B, 1);
        for (Index b = 0; b < B; ++b) y(b, 0) = batch[static_cast<size_t>(b)]->reward(cqr);
        if (!live.empty()) {
            Actor target_actor = actor;
            target_actor.net = h.actor_target;
            Mat tau_next = prefix_rows(layout_, h.stage, batch, live, /*next=*/true);
            Mat a_next = act_batched(target_actor, tau_next);
            Mat xn(static_cast<Index>(live.size()), obs_dim + layout_.action_dim);
            xn.leftCols(obs_dim) = norm_rows(tau_next);
            xn.rightCols(layout_.action_dim) = a_next;
            Mat q = mlp_forward(h.critic_target, xn);
            for (size_t i = 0; i < live.size(); ++i) y(live[i], 0) += cfg_.gamma * q(static_cast<Index>(i), 0);
        }

        Tape tape;
        MlpNodes nodes = mlp_insert(tape, h.critic);
        NodeId loss = tape.mse(mlp_apply(tape, h.critic, nodes, tape.leaf(x)), tape.leaf(y));
        tape.backward(loss);
        std::vector<Arr> grads = mlp_collect_grads(tape, nodes);
        clip_global_norm(grads, cfg_.grad_clip);
        adam_step(h.critic, grads, h.c_opt);
        loss_sum += tape.value(loss)(0, 0);
    }
    return loss_sum / static_cast<double>(heads_.size());
}

std::vector<double> IndependentStacks::actor_update(std::span<const Transition* const> batch,
                                                    bool /*cqr*/) {
    const Index B = static_cast<Index>(batch.size());
    std::vector<Index> all(static_cast<size_t>(B));
    for (Index b = 0; b < B; ++b) all[static_cast<size_t>(b)] = b;

    std::vector<double> norms;
    for (size_t k = 0; k < heads_.size(); ++k) {
        Head& h = heads_[k];
        Actor& actor = online_.actors[k];
        Vec scale = actor.norm.scale();
        Vec shift = actor.norm.shift();
        Mat tau = prefix_rows(layout_, h.stage, batch, all, /*next=*/false);
        Mat tau_norm = ((tau.array().rowwise() * scale.transpose().array()).rowwise() +
                        shift.transpose().array())
                           .matrix();

        Tape tape;
        MlpNodes actor_nodes = mlp_insert(tape, actor.net);
        MlpNodes critic_nodes = mlp_insert(tape, h.critic);
        NodeId a_node = act_on_tape(tape, actor, actor_nodes, tape.leaf(tau));
        NodeId x = tape.concat({tape.leaf(tau_norm), a_node});
        NodeId mean = tape.mean(mlp_apply(tape, h.critic, critic_nodes, x));
        tape.backward(tape.scale(mean, -1.0));
        std::vector<Arr> grads = mlp_collect_grads(tape, actor_nodes);
        norms.push_back(clip_global_norm(grads, cfg_.grad_clip));
        adam_step(actor.net, grads, h.a_opt);
    }
    return norms;
}

void IndependentStacks::soft_update_targets() {
    for (size_t k = 0; k < heads_.size(); ++k) {
        soft_update(heads_[k].actor_target, online_.actors[k].net, cfg_.tau_mix);
        soft_update(heads_[k].critic_target, heads_[k].critic, cfg_.tau_mix);
    }
}

nlohmann::json IndependentStacks::to_json() const {
    nlohmann::json heads = nlohmann::json::array();
    for (size_t k = 0; k < heads_.size(); ++k) {
        heads.push_back(nlohmann::json{{"stage", heads_[k].stage},
                                       {"net", mlp_to_json(online_.actors[k].net)},
                                       {"norm", normalizer_to_json(online_.actors[k].norm)},
                                       {"critic", mlp_to_json(heads_[k].critic)}});
    }
    return nlohmann::json{{"heads", std::move(heads)}};
}

CemOptimizer::CemOptimizer(Vec init_mean, Vec init_sigma, Params p)
    : mean_(std::move(init_mean)),
      sigma_(std::move(init_sigma)),
      p_(p),
      rng_(mix(p.seed, 0xCE)),
      best_x_(mean_),
      best_value_(-1e300) {
    if (sigma_.size() != mean_.size())
        throw DimensionError("cem: mean/sigma dimension mismatch");
}

CemOptimizer::IterLog CemOptimizer::step(const std::function<double(const Vec&)>& objective) {
    const Index dim = mean_.size();
    std::vector<Vec> xs(static_cast<size_t>(p_.pop));
    std::vector<double> vals(static_cast<size_t>(p_.pop));
    for (Index j = 0; j < p_.pop; ++j) {
        Vec x(dim);
        for (Index d = 0; d < dim; ++d)
            x[d] = std::clamp(mean_[d] + sigma_[d] * rng_.normal(), p_.lo, p_.hi);
        vals[static_cast<size_t>(j)] = objective(x);
        xs[static_cast<size_t>(j)] = std::move(x);
    }

    std::vector<Index> order(static_cast<size_t>(p_.pop));
    for (Index j = 0; j < p_.pop; ++j) order[static_cast<size_t>(j)] = j;
    std::sort(order.begin(), order.end(), [&](Index a, Index b) {
        if (vals[static_cast<size_t>(a)] != vals[static_cast<size_t>(b)])
            return vals[static_cast<size_t>(a)] > vals[static_cast<size_t>(b)];
        return a < b;
    });

    Index n_elite = std::max<Index>(
        1, static_cast<Index>(std::lround(p_.elite_frac * static_cast<double>(p_.pop))));
    n_elite = std::min(n_elite, p_.pop);

    Vec new_mean = Vec::Zero(dim);
    for (Index e = 0; e < n_elite; ++e) new_mean += xs[static_cast<size_t>(order[e])];
    new_mean /= static_cast<double>(n_elite);
    Vec var = Vec::Zero(dim);
    double elite_value = 0;
    for (Index e = 0; e < n_elite; ++e) {
        var += (xs[static_cast<size_t>(order[e])] - new_mean).cwiseAbs2();
        elite_value += vals[static_cast<size_t>(order[e])];
    }
    var /= static_cast<double>(n_elite);
    mean_ = new_mean;
    sigma_ = var.cwiseSqrt().cwiseMax(p_.sigma_floor);

    if (vals[static_cast<size_t>(order[0])] > best_value_) {
        best_value_ = vals[static_cast<size_t>(order[0])];
        best_x_ = xs[static_cast<size_t>(order[0])];
    }
    return IterLog{best_value_, elite_value / static_cast<double>(n_elite), mean_};
}

Vec cem_search(const std::function<double(const Vec&)>& objective, Vec init_mean,
               Vec init_sigma, CemOptimizer::Params p, int iterations) {
    CemOptimizer opt(std::move(init_mean), std::move(init_sigma), p);
    for (int i = 0; i < iterations; ++i) opt.step(objective);
    return opt.best();
}

}  // namespace casrl
