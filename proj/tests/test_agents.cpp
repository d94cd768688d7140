#include <doctest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "casrl/agents.hpp"
#include "casrl/trainer.hpp"

using namespace casrl;

namespace {

WorldConfig small_world(uint64_t seed = 11) {
    WorldConfig cfg;
    cfg.seed = seed;
    cfg.ladder = {50, 20, 8};
    cfg.slate_size = 4;
    return cfg;
}

AgentConfig small_agent_cfg(int agents, uint64_t seed) {
    AgentConfig ac;
    ac.agents = agents;
    ac.hidden = {16, 16, 16, 16};
    ac.seed = seed;
    return ac;
}

// Rolls out a few noisy sessions and returns complete transitions.
std::vector<Transition> collect_transitions(const Bench& bench, const CascadePolicy& policy,
                                            int n, uint64_t seed) {
    CascadeContext ctx = bench.ctx();
    const Environment& env = *bench.env;
    Rng rng(seed);
    std::vector<Transition> out;
    uint64_t session = 0;
    while (static_cast<int>(out.size()) < n) {
        UserState user = env.reset(mix(seed, 0x11, session++));
        std::optional<Transition> pending;
        while (!user.done && static_cast<int>(out.size()) < n) {
            std::vector<Vec> noise(static_cast<size_t>(policy.n_controlled()));
            for (auto& nz : noise) {
                nz = Vec(3);
                for (Index k = 0; k < 3; ++k) nz[k] = 0.15 * rng.normal();
            }
            CascadeTrace trace = run_cascade(ctx, user, policy, &noise);
            trace.checkpoint_id = 0;
            StepResult sr = env.step(user, trace.slate);
            if (pending) {
                pending->next_obs = trace.obs;
                pending->done = false;
                out.push_back(std::move(*pending));
                pending.reset();
            }
            Transition t;
            t.obs = trace.obs;
            t.action_last = trace.actions.back();
            t.noise = trace.noise;
            t.reward_raw = sr.reward;
            t.reward_shaped = std::min(1.0, sr.reward / 100.0);
            t.user_group = user.group;
            t.item_group = slate_item_group(env.catalog(), trace.slate);
            if (user.done) {
                t.done = true;
                out.push_back(std::move(t));
            } else {
                pending = std::move(t);
            }
        }
    }
    return out;
}

std::vector<const Transition*> as_batch(const std::vector<Transition>& ts) {
    std::vector<const Transition*> out;
    for (const auto& t : ts) out.push_back(&t);
    return out;
}

bool params_equal(const MlpParams& a, const MlpParams& b) {
    if (a.layers.size() != b.layers.size()) return false;
    for (size_t i = 0; i < a.layers.size(); ++i)
        if (a.layers[i].w != b.layers[i].w || a.layers[i].b != b.layers[i].b) return false;
    return true;
}

}  // namespace

TEST_CASE("critic input layout and information equivalence") {
    Bench bench(small_world());
    AgentStack stack(bench.layout, small_agent_cfg(3, 5), Algo::UnexCic);
    std::vector<Transition> ts = collect_transitions(bench, stack.policy(), 4, 9);

    const ObsLayout& L = bench.layout;
    CHECK(L.critic_input_dim() ==
          L.state_dim + L.n_stages * L.stats_dim() + L.n_stages * L.action_dim);

    Vec x = critic_input(L, ts[0].obs, ts[0].logged_actions());
    CHECK(x.size() == L.critic_input_dim());

    // reconstructing tau^N's fields from the critic input succeeds
    Observation back = obs_from_critic_input(L, x);
    CHECK(back.state == ts[0].obs.state);
    for (int i = 0; i < L.n_stages; ++i)
        CHECK(back.stats[static_cast<size_t>(i)] == ts[0].obs.stats[static_cast<size_t>(i)]);
    // embedded actions come back out of the action slots
    for (size_t i = 0; i < ts[0].obs.actions.size(); ++i)
        CHECK(back.actions[i] == ts[0].obs.actions[i]);

    // single-stage world: input is (s, v^1, a^1), nothing to deduplicate
    WorldConfig w1 = small_world(21);
    w1.ladder = {30};
    w1.slate_size = 4;
    w1.stage_sigma = {1.0};
    Bench b1(w1);
    CHECK(b1.layout.critic_input_dim() == b1.layout.state_dim + 21 + 3);
}

TEST_CASE("replay buffer: fifo eviction and without-replacement batches") {
    ReplayBuffer buf(5);
    Rng rng(3);
    CHECK_THROWS_AS(buf.sample(2, rng), ContractError);
    for (int i = 0; i < 8; ++i) {
        Transition t;
        t.checkpoint_id = i;
        buf.push(std::move(t));
    }
    CHECK(buf.size() == 5);
    CHECK(buf.oldest_checkpoint() == 3);  // first three evicted

    auto batch = buf.sample(5, rng);
    std::vector<int64_t> ids;
    for (const Transition* t : batch) ids.push_back(t->checkpoint_id);
    std::sort(ids.begin(), ids.end());
    CHECK(ids == std::vector<int64_t>{3, 4, 5, 6, 7});  // distinct

    auto big = buf.sample(64, rng);
    CHECK(big.size() == 5);  // capped at buffer size
}

TEST_CASE("critic targets: gamma=0 and terminal transitions give bare rewards") {
    Bench bench(small_world(31));
    CascadeContext ctx = bench.ctx();
    for (Algo algo : {Algo::UnexCic, Algo::UnexCtde, Algo::Ddpg}) {
        AgentConfig ac = small_agent_cfg(algo == Algo::Ddpg ? 1 : 3, 7);
        ac.gamma = 0.0;
        AgentStack stack(bench.layout, ac, algo);
        std::vector<Transition> ts = collect_transitions(bench, stack.policy(), 12, 13);
        auto batch = as_batch(ts);
        Rng rng(1);
        Mat y = stack.critic_targets(ctx, batch, true, rng);
        for (Index b = 0; b < y.rows(); ++b)
            CHECK(y(b, 0) == ts[static_cast<size_t>(b)].reward_shaped);
    }

    // done rows are bare rewards even with a large gamma
    AgentConfig ac = small_agent_cfg(3, 7);
    ac.gamma = 0.95;
    AgentStack stack(bench.layout, ac, Algo::UnexCic);
    std::vector<Transition> ts = collect_transitions(bench, stack.policy(), 40, 17);
    auto batch = as_batch(ts);
    Rng rng(2);
    Mat y = stack.critic_targets(ctx, batch, false, rng);
    int checked = 0;
    for (Index b = 0; b < y.rows(); ++b) {
        if (!ts[static_cast<size_t>(b)].done) continue;
        CHECK(y(b, 0) == ts[static_cast<size_t>(b)].reward_raw);
        ++checked;
    }
    CHECK(checked >= 1);
}

TEST_CASE("toy mdp: critic converges to the analytic two-step return") {
    // Deterministic 2-step sessions: satisfaction forces done after step 2,
    // zero watch shock, fixed policy (no exploration).
    WorldConfig cfg = small_world(41);
    cfg.satisfaction_min = cfg.satisfaction_max = 2.0;
    cfg.satisfaction_gain = 0.0;
    cfg.watch_shock_sigma = 0.0;
    Bench bench(cfg);
    CascadeContext ctx = bench.ctx();
    const Environment& env = *bench.env;

    AgentConfig ac = small_agent_cfg(3, 19);
    ac.gamma = 0.9;
    AgentStack stack(bench.layout, ac, Algo::UnexCic);

    // one fixed user, rewards r1, r2 fully determined
    UserState u0 = env.reset(77);
    CascadeTrace tr1 = run_cascade(ctx, u0, stack.policy(), nullptr);
    UserState u1 = u0;
    StepResult s1 = env.step(u1, tr1.slate);
    CascadeTrace tr2 = run_cascade(ctx, u1, stack.policy(), nullptr);
    UserState u2 = u1;
    StepResult s2 = env.step(u2, tr2.slate);
    REQUIRE(u2.done);
    double r1 = s1.reward, r2 = s2.reward;
    REQUIRE(r1 > 0.0);

    Transition t1;
    t1.obs = tr1.obs;
    t1.action_last = tr1.actions.back();
    t1.noise = tr1.noise;
    t1.reward_raw = r1;
    t1.reward_shaped = r1;
    t1.next_obs = tr2.obs;
    t1.done = false;
    Transition t2;
    t2.obs = tr2.obs;
    t2.action_last = tr2.actions.back();
    t2.noise = tr2.noise;
    t2.reward_raw = r2;
    t2.reward_shaped = r2;
    t2.done = true;

    std::vector<Transition> ts = {t1, t2};
    // critic-only training: actors stay fixed, so Q(s0) -> r1 + gamma*r2
    stack.observe_trace(tr1);
    stack.observe_trace(tr2);
    stack.freeze_normalizers();
    auto batch = as_batch(ts);
    Rng rng(5);
    for (int i = 0; i < 5000; ++i) {
        stack.critic_update(ctx, batch, false, rng);
        stack.soft_update_targets();
    }
    double q0 = stack.q_value(t1.obs, t1.logged_actions());
    double target = r1 + 0.9 * r2;
    CHECK(std::abs(q0 - target) <= 0.02 * std::abs(target));

    double q1 = stack.q_value(t2.obs, t2.logged_actions());
    CHECK(std::abs(q1 - r2) <= 0.02 * std::abs(std::max(r2, 1.0)));
}

TEST_CASE("sg gradients equal the detached-downstream reference") {
    Bench bench(small_world(51));
    CascadeContext ctx = bench.ctx();
    AgentConfig ac = small_agent_cfg(3, 23);
    AgentStack stack(bench.layout, ac, Algo::UnexCic);
    std::vector<Transition> ts = collect_transitions(bench, stack.policy(), 16, 29);
    for (const auto& t : ts) {
        CascadeTrace tr;
        tr.obs = t.obs;
        stack.observe_trace(tr);
    }
    stack.freeze_normalizers();
    auto batch = as_batch(ts);

    std::vector<std::vector<Arr>> sg_grads = stack.actor_gradients(ctx, batch, true);

    // Reference: replay the chain plainly, then differentiate each agent in
    // isolation with every other action held constant.
    const ObsLayout& L = bench.layout;
    const CascadePolicy& pol = stack.policy();
    const RunningNormalizer& cnorm = stack.critic_normalizer();
    for (int agent = 0; agent < 3; ++agent) {
        int stage = pol.first_controlled + agent;
        Tape tape;
        MlpNodes actor_nodes = mlp_insert(tape, pol.actors[static_cast<size_t>(agent)].net);
        MlpNodes critic_nodes = mlp_insert(tape, stack.critic_net());
        std::vector<NodeId> qs;
        for (const Transition* tp : batch) {
            CascadeTrace re = replay_observations(ctx, obs_prefix(tp->obs, 1), pol);
            Vec tau_i = obs_prefix(re.obs, stage).flatten();
            NodeId a_node = act_on_tape(tape, pol.actors[static_cast<size_t>(agent)],
                                        actor_nodes, tape.leaf_row(tau_i));
            std::vector<NodeId> parts;
            parts.push_back(tape.leaf_row(cnorm.normalize(critic_obs_part(L, re.obs))));
            for (int s = 1; s <= L.n_stages; ++s)
                parts.push_back(s == stage
                                    ? a_node
                                    : tape.leaf_row(re.actions[static_cast<size_t>(s - 1)]));
            NodeId x = tape.concat(std::span<const NodeId>(parts.data(), parts.size()));
            qs.push_back(mlp_apply(tape, stack.critic_net(), critic_nodes, x));
        }
        NodeId mean = tape.mean(tape.concat(std::span<const NodeId>(qs.data(), qs.size())));
        tape.backward(tape.scale(mean, -1.0));
        std::vector<Arr> ref = mlp_collect_grads(tape, actor_nodes);

        REQUIRE(ref.size() == sg_grads[static_cast<size_t>(agent)].size());
        double max_diff = 0.0;
        for (size_t k = 0; k < ref.size(); ++k)
            max_diff = std::max(
                max_diff,
                (ref[k] - sg_grads[static_cast<size_t>(agent)][k]).abs().maxCoeff());
        CHECK(max_diff <= 1e-10);
    }

    // without SG, upstream agents feel downstream paths: gradients must differ
    std::vector<std::vector<Arr>> full_grads = stack.actor_gradients(ctx, batch, false);
    double diff0 = 0.0;
    for (size_t k = 0; k < full_grads[0].size(); ++k)
        diff0 = std::max(diff0, (full_grads[0][k] - sg_grads[0][k]).abs().maxCoeff());
    CHECK(diff0 > 1e-12);
    // the last agent has no downstream path, so SG changes nothing for it
    double diff_last = 0.0;
    for (size_t k = 0; k < full_grads[2].size(); ++k)
        diff_last = std::max(diff_last, (full_grads[2][k] - sg_grads[2][k]).abs().maxCoeff());
    CHECK(diff_last == 0.0);
}

TEST_CASE("one-agent degeneracy: cic, ctde and ddpg updates are bit-identical") {
    Bench bench(small_world(61));
    CascadeContext ctx = bench.ctx();

    auto make = [&](Algo algo) {
        AgentConfig ac = small_agent_cfg(1, 37);
        return std::make_unique<AgentStack>(bench.layout, ac, algo);
    };
    auto cic = make(Algo::UnexCic);
    auto ctde = make(Algo::UnexCtde);
    auto ddpg = make(Algo::Ddpg);
    CHECK(params_equal(cic->policy().actors[0].net, ddpg->policy().actors[0].net));

    std::vector<Transition> ts = collect_transitions(bench, cic->policy(), 24, 43);
    auto batch = as_batch(ts);

    for (int round = 0; round < 3; ++round) {
        for (AgentStack* s : {cic.get(), ctde.get(), ddpg.get()}) {
            Rng rng(99);  // same stream offsets for each stack
            s->critic_update(ctx, batch, true, rng);
            s->actor_update(ctx, batch, true);
            s->soft_update_targets();
        }
    }
    CHECK(params_equal(cic->policy().actors[0].net, ctde->policy().actors[0].net));
    CHECK(params_equal(cic->policy().actors[0].net, ddpg->policy().actors[0].net));
    CHECK(params_equal(cic->critic_net(), ctde->critic_net()));
    CHECK(params_equal(cic->critic_net(), ddpg->critic_net()));
}

TEST_CASE("ctde targets keep stale logged observations (the od gap)") {
    Bench bench(small_world(71));
    CascadeContext ctx = bench.ctx();
    AgentConfig ac = small_agent_cfg(3, 47);
    AgentStack behavior(bench.layout, ac, Algo::UnexCic);
    std::vector<Transition> ts = collect_transitions(bench, behavior.policy(), 10, 53);

    // target policy differs from the behavior policy that logged the data
    AgentConfig ac2 = small_agent_cfg(3, 48);
    AgentStack trained(bench.layout, ac2, Algo::UnexCic);

    int diffs = 0;
    for (const auto& t : ts) {
        if (t.done) continue;
        CascadeTrace replayed =
            replay_observations(ctx, obs_prefix(t.next_obs, 1), trained.target_policy());
        // CIC recomputes downstream observations; CTDE would keep t.next_obs
        if (replayed.obs.flatten() != t.next_obs.flatten()) ++diffs;
    }
    CHECK(diffs > 0);
}

TEST_CASE("td3: twin minimum and delayed actor steps") {
    Bench bench(small_world(81));
    CascadeContext ctx = bench.ctx();
    AgentConfig ac = small_agent_cfg(1, 59);
    ac.gamma = 0.9;
    ac.td3_smooth_sigma = 0.0;  // isolate the twin-minimum effect
    AgentStack td3(bench.layout, ac, Algo::Td3);
    std::vector<Transition> ts = collect_transitions(bench, td3.policy(), 12, 61);
    auto batch = as_batch(ts);

    Rng rng(3);
    Mat y = td3.critic_targets(ctx, batch, true, rng);
    // recompute both single-critic targets; the twin target can exceed neither
    const ObsLayout& L = bench.layout;
    for (Index b = 0; b < y.rows(); ++b) {
        const Transition& t = ts[static_cast<size_t>(b)];
        if (t.done) continue;
        std::vector<Vec> acts(t.next_obs.actions.begin(), t.next_obs.actions.end());
        acts.push_back(act(td3.target_policy().actors[0],
                           obs_prefix(t.next_obs, L.n_stages).flatten(), nullptr));
        Vec row = critic_input(L, t.next_obs, acts);
        row.head(L.critic_obs_dim()) =
            td3.critic_normalizer().normalize(row.head(L.critic_obs_dim()));
        double q1 = mlp_forward(td3.critic_target_net(), row)[0];
        double q2 = mlp_forward(td3.twin_critic_target_net(), row)[0];
        CHECK(y(b, 0) <= t.reward_shaped + 0.9 * q1 + 1e-12);
        CHECK(y(b, 0) <= t.reward_shaped + 0.9 * q2 + 1e-12);
    }

    // policy delay: the actor trains on every second critic step
    td3.critic_update(ctx, batch, true, rng);
    CHECK_FALSE(td3.actor_due());
    td3.critic_update(ctx, batch, true, rng);
    CHECK(td3.actor_due());
}

TEST_CASE("cem: quadratic oracle, fixed point, and no selection pressure at 100%") {
    // 9-dim quadratic: recover the optimum to 1e-2 within 50 iterations
    Vec target(9);
    for (Index i = 0; i < 9; ++i) target[i] = 0.3 + 0.15 * static_cast<double>(i);
    auto objective = [&](const Vec& x) { return -(x - target).squaredNorm(); };

    CemOptimizer::Params p;
    p.pop = 64;
    p.elite_frac = 0.1;
    p.seed = 11;
    p.sigma_floor = 0.0;
    CemOptimizer opt(Vec::Ones(9), Vec::Constant(9, 1.0), p);
    for (int i = 0; i < 50; ++i) opt.step(objective);
    CHECK((opt.mean() - target).cwiseAbs().maxCoeff() < 1e-2);

    // zero-variance initialization at the optimum never moves
    CemOptimizer fixed(target, Vec::Zero(9), p);
    for (int i = 0; i < 5; ++i) fixed.step(objective);
    CHECK(fixed.mean() == target);
    CHECK(fixed.best() == target);

    // elite fraction 100%: no selection pressure, mean drift averages to zero
    double drift_sum = 0.0;
    for (uint64_t seed = 0; seed < 200; ++seed) {
        CemOptimizer::Params p100;
        p100.pop = 64;
        p100.elite_frac = 1.0;
        p100.seed = seed;
        p100.sigma_floor = 0.0;
        CemOptimizer o(Vec::Zero(4), Vec::Ones(4), p100);
        o.step([](const Vec& x) { return x.sum(); });
        drift_sum += o.mean().sum() / 4.0;
    }
    double avg_drift = drift_sum / 200.0;
    // per-seed drift has std 1/sqrt(64); the 200-seed average should be ~0
    CHECK(std::abs(avg_drift) < 4.0 / std::sqrt(64.0 * 200.0));
}
