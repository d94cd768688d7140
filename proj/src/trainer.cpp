#include "casrl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "casrl/serialize.hpp"
#include "casrl/version.hpp"

namespace casrl {

namespace fs = std::filesystem;

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"algo", c.algo},
                       {"agents", c.agents},
                       {"sg", c.sg},
                       {"cqr", c.cqr},
                       {"gamma", c.gamma},
                       {"actor_lr", c.actor_lr},
                       {"critic_lr", c.critic_lr},
                       {"tau_mix", c.tau_mix},
                       {"grad_clip", c.grad_clip},
                       {"hidden", c.hidden},
                       {"steps", c.steps},
                       {"batch", c.batch},
                       {"buffer_capacity", c.buffer_capacity},
                       {"update_every", c.update_every},
                       {"warmup_steps", c.warmup_steps},
                       {"round_steps", c.round_steps},
                       {"explore_sigma", c.explore_sigma},
                       {"explore_decay", c.explore_decay},
                       {"eval_every", c.eval_every},
                       {"eval_sessions", c.eval_sessions},
                       {"seed", c.seed},
                       {"log_traces", c.log_traces},
                       {"check_replay", c.check_replay},
                       {"cqr_bins", c.cqr_bins},
                       {"cqr_range_min", c.cqr_range_min},
                       {"cqr_range_max", c.cqr_range_max},
                       {"cqr_min_count", c.cqr_min_count},
                       {"td3_smooth_sigma", c.td3_smooth_sigma},
                       {"td3_smooth_clip", c.td3_smooth_clip},
                       {"td3_delay", c.td3_delay},
                       {"cem_pop", c.cem_pop},
                       {"cem_elite", c.cem_elite},
                       {"cem_rollouts", c.cem_rollouts},
                       {"cem_init_sigma", c.cem_init_sigma},
                       {"cem_sigma_floor", c.cem_sigma_floor}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    c = TrainConfig{};
    j.at("algo").get_to(c.algo);
    j.at("agents").get_to(c.agents);
    j.at("sg").get_to(c.sg);
    j.at("cqr").get_to(c.cqr);
    j.at("gamma").get_to(c.gamma);
    j.at("actor_lr").get_to(c.actor_lr);
    j.at("critic_lr").get_to(c.critic_lr);
    j.at("tau_mix").get_to(c.tau_mix);
    j.at("grad_clip").get_to(c.grad_clip);
    j.at("hidden").get_to(c.hidden);
    j.at("steps").get_to(c.steps);
    j.at("batch").get_to(c.batch);
    j.at("buffer_capacity").get_to(c.buffer_capacity);
    j.at("update_every").get_to(c.update_every);
    j.at("warmup_steps").get_to(c.warmup_steps);
    j.at("round_steps").get_to(c.round_steps);
    j.at("explore_sigma").get_to(c.explore_sigma);
    j.at("explore_decay").get_to(c.explore_decay);
    j.at("eval_every").get_to(c.eval_every);
    j.at("eval_sessions").get_to(c.eval_sessions);
    j.at("seed").get_to(c.seed);
    j.at("log_traces").get_to(c.log_traces);
    j.at("check_replay").get_to(c.check_replay);
    j.at("cqr_bins").get_to(c.cqr_bins);
    j.at("cqr_range_min").get_to(c.cqr_range_min);
    j.at("cqr_range_max").get_to(c.cqr_range_max);
    j.at("cqr_min_count").get_to(c.cqr_min_count);
    j.at("td3_smooth_sigma").get_to(c.td3_smooth_sigma);
    j.at("td3_smooth_clip").get_to(c.td3_smooth_clip);
    j.at("td3_delay").get_to(c.td3_delay);
    j.at("cem_pop").get_to(c.cem_pop);
    j.at("cem_elite").get_to(c.cem_elite);
    j.at("cem_rollouts").get_to(c.cem_rollouts);
    j.at("cem_init_sigma").get_to(c.cem_init_sigma);
    j.at("cem_sigma_floor").get_to(c.cem_sigma_floor);
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    j = nlohmann::json{
        {"schema_version", c.schema_version}, {"world", c.world}, {"train", c.train}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
    c = ExperimentConfig{};
    int v = j.at("schema_version").get<int>();
    if (v != 1)
        throw ContractError("config: unsupported schema_version " + std::to_string(v));
    j.at("world").get_to(c.world);
    j.at("train").get_to(c.train);
}

int ExperimentConfig::effective_agents() const {
    Algo a = algo();
    if (a == Algo::Ddpg || a == Algo::Td3) return 1;
    return train.agents;
}

void ExperimentConfig::validate() const {
    world.validate();
    Algo a = algo();  // throws on unknown names
    int m = effective_agents();
    if (m < 1 || m > world.n_stages())
        throw ContractError("config: agents " + std::to_string(m) + " outside 1.." +
                            std::to_string(world.n_stages()));
    if (train.steps <= 0 || train.round_steps <= 0 || train.update_every <= 0 ||
        train.batch <= 0 || train.buffer_capacity <= 0 || train.eval_every <= 0 ||
        train.eval_sessions <= 0)
        throw ContractError("config: nonpositive budget or batch setting");
    if (train.gamma < 0.0 || train.gamma >= 1.0)
        throw ContractError("config: gamma outside [0,1)");
    if (train.hidden.empty()) throw ContractError("config: empty hidden layer list");
    if (a == Algo::Cem && (train.cem_pop < 2 || train.cem_rollouts < 1))
        throw ContractError("config: bad CEM settings");
}

std::string ExperimentConfig::config_hash() const {
    ExperimentConfig eff = *this;
    Algo a = algo();
    if (a == Algo::Ddpg || a == Algo::Td3) eff.train.agents = 1;
    if (eff.train.agents == 1) {
        eff.train.sg = false;  // no downstream path exists
        if (a == Algo::UnexCic || a == Algo::UnexCtde || a == Algo::Ddpg)
            eff.train.algo = "ddpg";  // the three coincide at one agent
    }
    TrainConfig defaults;
    if (eff.algo() != Algo::Td3) {
        eff.train.td3_smooth_sigma = defaults.td3_smooth_sigma;
        eff.train.td3_smooth_clip = defaults.td3_smooth_clip;
        eff.train.td3_delay = defaults.td3_delay;
    }
    if (eff.algo() != Algo::Cem) {
        eff.train.cem_pop = defaults.cem_pop;
        eff.train.cem_elite = defaults.cem_elite;
        eff.train.cem_rollouts = defaults.cem_rollouts;
        eff.train.cem_init_sigma = defaults.cem_init_sigma;
        eff.train.cem_sigma_floor = defaults.cem_sigma_floor;
    }
    nlohmann::json j = eff;
    return json_hash(j);
}

Bench::Bench(const WorldConfig& cfg, std::shared_ptr<const ItemCatalog> shared_catalog) {
    catalog = shared_catalog ? std::move(shared_catalog)
                             : std::make_shared<ItemCatalog>(ItemCatalog::build(cfg));
    env = std::make_unique<Environment>(catalog, cfg);
    predictors = default_predictors(cfg);
    layout = make_layout(*env);
    cache = std::make_unique<PredictionCache>(*env, predictors);
}

std::vector<PredictorParams> Bench::noiseless_predictors() const {
    std::vector<PredictorParams> out = predictors;
    for (auto& p : out) p.sigma = 0.0;
    return out;
}

EvalStats evaluate_policy(const CascadeContext& ctx, const PolicySpec& spec, int n_sessions,
                          uint64_t seed) {
    const Environment& env = *ctx.env;
    const int n_stages = env.config().n_stages();
    std::vector<double> wt(static_cast<size_t>(n_sessions));
    std::vector<double> sl(static_cast<size_t>(n_sessions));

    for (int s = 0; s < n_sessions; ++s) {
        UserState user = env.reset(mix(seed, 0xE0, static_cast<uint64_t>(s)));
        Rng rnd(mix(seed, 0xE1, static_cast<uint64_t>(s)));
        double watch = 0.0;
        int64_t items = 0;
        while (!user.done) {
            std::vector<int32_t> slate;
            switch (spec.kind) {
                case PolicySpec::Kind::Actors:
                    slate = run_cascade(ctx, user, *spec.actors, nullptr).slate;
                    break;
                case PolicySpec::Kind::Oracle:
                    slate = env.oracle_slate(user.feat);
                    break;
                case PolicySpec::Kind::Constant:
                    slate = run_cascade_constant(ctx, user, spec.constants).slate;
                    break;
                case PolicySpec::Kind::Random: {
                    std::vector<Vec> acts(static_cast<size_t>(n_stages));
                    for (auto& a : acts) {
                        a = Vec(3);
                        for (Index k = 0; k < 3; ++k) a[k] = rnd.uniform(0.0, 2.0);
                    }
                    slate = run_cascade_constant(ctx, user, acts).slate;
                    break;
                }
            }
            StepResult sr = env.step(user, slate);
            watch += sr.reward;
            for (const auto& o : sr.outcomes)
                if (o.watch_seconds > 0.0) items += 1;
        }
        wt[static_cast<size_t>(s)] = watch;
        sl[static_cast<size_t>(s)] = static_cast<double>(items);
    }

    auto mean_std = [](const std::vector<double>& xs) {
        double n = static_cast<double>(xs.size());
        double m = 0;
        for (double x : xs) m += x;
        m /= n;
        double v = 0;
        for (double x : xs) v += (x - m) * (x - m);
        return std::make_pair(m, std::sqrt(v / n));
    };
    EvalStats e;
    std::tie(e.wt_mean, e.wt_std) = mean_std(wt);
    std::tie(e.sl_mean, e.sl_std) = mean_std(sl);
    return e;
}

nlohmann::json policy_to_json(const CascadePolicy& policy) {
    nlohmann::json actors = nlohmann::json::array();
    for (const Actor& a : policy.actors)
        actors.push_back(nlohmann::json{{"net", mlp_to_json(a.net)},
                                        {"norm", normalizer_to_json(a.norm)},
                                        {"bound", a.bound}});
    return nlohmann::json{{"first_controlled", policy.first_controlled},
                          {"fixed_action", vec_to_json(policy.fixed_action)},
                          {"actors", std::move(actors)}};
}

CascadePolicy policy_from_json(const nlohmann::json& j) {
    CascadePolicy p;
    p.first_controlled = j.at("first_controlled").get<int>();
    p.fixed_action = vec_from_json(j.at("fixed_action"));
    for (const auto& aj : j.at("actors")) {
        Actor a;
        a.net = mlp_from_json(aj.at("net"));
        a.norm = normalizer_from_json(aj.at("norm"));
        a.bound = aj.at("bound").get<double>();
        p.actors.push_back(std::move(a));
    }
    return p;
}

Trainer::Trainer(ExperimentConfig cfg, std::string out_dir,
                 std::shared_ptr<const ItemCatalog> shared_catalog)
    : cfg_(std::move(cfg)),
      out_dir_(std::move(out_dir)),
      bench_(cfg_.world, std::move(shared_catalog)),
      hash_(cfg_.config_hash()) {
    cfg_.validate();
    if (!out_dir_.empty()) {
        fs::create_directories(out_dir_);
        if (cfg_.train.log_traces) fs::create_directories(fs::path(out_dir_) / "checkpoints");
        std::ofstream cf(fs::path(out_dir_) / "config.json");
        nlohmann::json j = cfg_;
        j["config_hash"] = hash_;
        j["code_version"] = kCodeVersion;
        cf << j.dump(2) << "\n";
        curve_path_ = (fs::path(out_dir_) / "curve.jsonl").string();
        std::ofstream truncate(curve_path_);  // fresh file per run
    }
}

void Trainer::append_curve(const CurvePoint& p) {
    if (curve_path_.empty()) return;
    nlohmann::json j{{"round", p.round},
                     {"env_steps", p.env_steps},
                     {"watch_time_mean", p.eval.wt_mean},
                     {"watch_time_std", p.eval.wt_std},
                     {"session_len_mean", p.eval.sl_mean},
                     {"session_len_std", p.eval.sl_std},
                     {"critic_loss", p.critic_loss},
                     {"actor_grad_norms", p.actor_grad_norms},
                     {"explore_sigma", p.explore_sigma},
                     {"seed", cfg_.train.seed},
                     {"config_hash", hash_},
                     {"code_version", kCodeVersion}};
    std::ofstream f(curve_path_, std::ios::app);
    f << j.dump() << "\n";
}

EvalStats Trainer::eval_now(const PolicySpec& spec) const {
    uint64_t eseed = mix(cfg_.train.seed, hash_str("eval"));
    return evaluate_policy(bench_.ctx(), spec, cfg_.train.eval_sessions, eseed);
}

namespace {

std::vector<Vec> window_noise(const Transition& t, int first_controlled, int n_stages) {
    std::vector<Vec> out;
    for (int stage = first_controlled; stage <= n_stages; ++stage)
        out.push_back(t.noise[static_cast<size_t>(stage - 1)]);
    return out;
}

}  // namespace

struct Trainer::LoopHooks {
    std::function<const CascadePolicy&()> policy;
    std::function<void(const CascadeTrace&)> observe;
    std::function<void()> freeze;
    std::function<std::pair<double, std::vector<double>>(
        std::span<const Transition* const>)> update;
};

TrainResult Trainer::run() {
    Algo a = cfg_.algo();
    if (algo_uses_stack(a)) return run_stack(a);
    if (a == Algo::Iddpg) return run_iddpg();
    if (a == Algo::Cem) return run_cem();
    return run_eval_only(a);
}

TrainResult Trainer::run_stack(Algo algo) {
    AgentConfig ac;
    ac.agents = cfg_.effective_agents();
    ac.hidden = cfg_.train.hidden;
    ac.gamma = cfg_.train.gamma;
    ac.actor_lr = cfg_.train.actor_lr;
    ac.critic_lr = cfg_.train.critic_lr;
    ac.tau_mix = cfg_.train.tau_mix;
    ac.grad_clip = cfg_.train.grad_clip;
    ac.sg = cfg_.train.sg;
    ac.td3_smooth_sigma = cfg_.train.td3_smooth_sigma;
    ac.td3_smooth_clip = cfg_.train.td3_smooth_clip;
    ac.td3_delay = cfg_.train.td3_delay;
    ac.seed = cfg_.train.seed;
    stack_ = std::make_unique<AgentStack>(bench_.layout, ac, algo);

    CascadeContext ctx = bench_.ctx();
    Rng update_rng(mix(cfg_.train.seed, hash_str("update")));

    LoopHooks hooks;
    hooks.policy = [&]() -> const CascadePolicy& { return stack_->policy(); };
    hooks.observe = [&](const CascadeTrace& t) { stack_->observe_trace(t); };
    hooks.freeze = [&]() { stack_->freeze_normalizers(); };
    hooks.update = [&](std::span<const Transition* const> batch) {
        double loss = stack_->critic_update(ctx, batch, cfg_.train.cqr, update_rng);
        std::vector<double> norms;
        if (stack_->actor_due()) norms = stack_->actor_update(ctx, batch, cfg_.train.cqr);
        stack_->soft_update_targets();
        return std::make_pair(loss, std::move(norms));
    };

    TrainResult res = collect_and_train(hooks);
    write_artifacts(res, stack_->to_json());
    return res;
}

TrainResult Trainer::run_iddpg() {
    AgentConfig ac;
    ac.agents = cfg_.effective_agents();
    ac.hidden = cfg_.train.hidden;
    ac.gamma = cfg_.train.gamma;
    ac.actor_lr = cfg_.train.actor_lr;
    ac.critic_lr = cfg_.train.critic_lr;
    ac.tau_mix = cfg_.train.tau_mix;
    ac.grad_clip = cfg_.train.grad_clip;
    ac.seed = cfg_.train.seed;
    istacks_ = std::make_unique<IndependentStacks>(bench_.layout, ac);

    LoopHooks hooks;
    hooks.policy = [&]() -> const CascadePolicy& { return istacks_->policy(); };
    hooks.observe = [&](const CascadeTrace& t) { istacks_->observe_trace(t); };
    hooks.freeze = [&]() { istacks_->freeze_normalizers(); };
    hooks.update = [&](std::span<const Transition* const> batch) {
        double loss = istacks_->critic_update(batch, cfg_.train.cqr);
        std::vector<double> norms = istacks_->actor_update(batch, cfg_.train.cqr);
        istacks_->soft_update_targets();
        return std::make_pair(loss, std::move(norms));
    };

    TrainResult res = collect_and_train(hooks);
    write_artifacts(res, istacks_->to_json());
    return res;
}

TrainResult Trainer::collect_and_train(const LoopHooks& hooks) {
    const TrainConfig& tc = cfg_.train;
    const Environment& env = *bench_.env;
    CascadeContext ctx = bench_.ctx();

    buffer_.emplace(static_cast<size_t>(tc.buffer_capacity));
    CqrConfig qc;
    qc.bins = tc.cqr_bins;
    qc.range_min = tc.cqr_range_min;
    qc.range_max = tc.cqr_range_max;
    qc.min_count = tc.cqr_min_count;
    cqr_live_.emplace(qc);
    QuantileTable cqr_frozen = *cqr_live_;

    Rng explore_rng(mix(tc.seed, hash_str("explore")));
    Rng sample_rng(mix(tc.seed, hash_str("sample")));

    std::ofstream trace_file;
    if (tc.log_traces && !out_dir_.empty())
        trace_file.open(fs::path(out_dir_) / "traces.jsonl");

    TrainResult res;
    std::optional<UserState> user;
    std::optional<Transition> pending;
    uint64_t session_counter = 0;
    int64_t sessions_done = 0;
    int64_t steps_done = 0;
    int64_t round = 0;
    int64_t next_eval = tc.eval_every;
    uint64_t session_seed = 0;

    while (steps_done < tc.steps) {
        hooks.freeze();
        cqr_frozen = *cqr_live_;
        const int64_t ckpt_id = round;
        if (tc.check_replay || tc.log_traces) {
            ckpt_store_[ckpt_id] = hooks.policy();
            int64_t oldest = buffer_->oldest_checkpoint();
            if (oldest > 0) ckpt_store_.erase(ckpt_store_.begin(), ckpt_store_.lower_bound(oldest));
        }
        if (tc.log_traces && !out_dir_.empty()) {
            nlohmann::json cj{{"format", "casrl-replay-ckpt-v1"},
                              {"id", ckpt_id},
                              {"config_hash", hash_},
                              {"policy", policy_to_json(hooks.policy())}};
            char name[32];
            std::snprintf(name, sizeof(name), "ckpt_%06lld.json",
                          static_cast<long long>(ckpt_id));
            std::ofstream cf(fs::path(out_dir_) / "checkpoints" / name);
            cf << cj.dump() << "\n";
        }

        // Collection.
        int64_t collected = 0;
        for (int i = 0; i < tc.round_steps && steps_done < tc.steps; ++i) {
            if (!user) {
                session_seed = mix(tc.seed, 0x5E55, session_counter);
                ++session_counter;
                user = env.reset(session_seed);
            }
            const CascadePolicy& pol = hooks.policy();
            double sigma =
                tc.explore_sigma *
                std::pow(tc.explore_decay, static_cast<double>(sessions_done));
            std::vector<Vec> noise(static_cast<size_t>(pol.n_controlled()));
            if (sigma > 0.0) {
                for (auto& nz : noise) {
                    nz = Vec(bench_.layout.action_dim);
                    for (Index k = 0; k < nz.size(); ++k) nz[k] = sigma * explore_rng.normal();
                }
            }
            int step_index = user->step;
            CascadeTrace trace =
                run_cascade(ctx, *user, pol, sigma > 0.0 ? &noise : nullptr);
            trace.checkpoint_id = ckpt_id;
            StepResult sr = env.step(*user, trace.slate);
            int8_t ig = slate_item_group(*bench_.catalog, trace.slate);
            double rt = cqr_frozen.transform(user->group, ig, sr.reward);
            cqr_live_->update(user->group, ig, sr.reward);
            hooks.observe(trace);

            if (pending) {
                pending->next_obs = trace.obs;
                pending->done = false;
                buffer_->push(std::move(*pending));
                pending.reset();
            }
            Transition t;
            t.obs = trace.obs;
            t.action_last = trace.actions.back();
            t.noise = trace.noise;
            t.reward_raw = sr.reward;
            t.reward_shaped = rt;
            t.checkpoint_id = ckpt_id;
            t.user_group = user->group;
            t.item_group = ig;

            if (trace_file.is_open()) {
                nlohmann::json row{{"session", session_seed},
                                   {"t", step_index},
                                   {"tau1", vec_to_json(obs_prefix(trace.obs, 1).flatten())},
                                   {"noise", nlohmann::json::array()},
                                   {"actions", nlohmann::json::array()},
                                   {"r", sr.reward},
                                   {"r_tilde", rt},
                                   {"ckpt", ckpt_id},
                                   {"user_group", user->group},
                                   {"item_group", ig},
                                   {"done", user->done}};
                for (const Vec& nz : trace.noise) row["noise"].push_back(vec_to_json(nz));
                for (const Vec& av : trace.actions) row["actions"].push_back(vec_to_json(av));
                trace_file << row.dump() << "\n";
            }

            if (user->done) {
                t.done = true;
                buffer_->push(std::move(t));
                user.reset();
                ++sessions_done;
            } else {
                pending = std::move(t);
            }
            ++steps_done;
            ++collected;
        }

        // Updates.
        double loss_sum = 0.0;
        int64_t loss_n = 0;
        std::vector<double> norm_sum;
        int64_t norm_n = 0;
        if (hooks.update && static_cast<int64_t>(buffer_->size()) >= tc.warmup_steps) {
            int64_t n_updates = collected / tc.update_every;
            for (int64_t u = 0; u < n_updates; ++u) {
                auto batch = buffer_->sample(static_cast<size_t>(tc.batch), sample_rng);
                if (tc.check_replay) res.violations += replay_check(batch);
                auto [loss, norms] = hooks.update(batch);
                loss_sum += loss;
                ++loss_n;
                if (!norms.empty()) {
                    if (norm_sum.empty()) norm_sum.assign(norms.size(), 0.0);
                    for (size_t k = 0; k < norms.size(); ++k) norm_sum[k] += norms[k];
                    ++norm_n;
                }
            }
        }

        ++round;
        if (steps_done >= next_eval) {
            CurvePoint p;
            p.round = round;
            p.env_steps = steps_done;
            p.eval = eval_now(PolicySpec{PolicySpec::Kind::Actors, &hooks.policy(), {}});
            p.critic_loss = loss_n > 0 ? loss_sum / static_cast<double>(loss_n) : 0.0;
            if (norm_n > 0)
                for (double s : norm_sum)
                    p.actor_grad_norms.push_back(s / static_cast<double>(norm_n));
            p.explore_sigma =
                tc.explore_sigma * std::pow(tc.explore_decay, static_cast<double>(sessions_done));
            res.curve.push_back(p);
            append_curve(p);
            next_eval = (steps_done / tc.eval_every + 1) * tc.eval_every;
        }
    }

    if (res.curve.empty()) {
        CurvePoint p;
        p.round = round;
        p.env_steps = steps_done;
        p.eval = eval_now(PolicySpec{PolicySpec::Kind::Actors, &hooks.policy(), {}});
        res.curve.push_back(p);
        append_curve(p);
    }
    res.final_eval = res.curve.back().eval;
    for (const auto& p : res.curve) {
        res.best_wt = std::max(res.best_wt, p.eval.wt_mean);
        res.best_sl = std::max(res.best_sl, p.eval.sl_mean);
    }
    res.env_steps = steps_done;
    return res;
}

int64_t Trainer::replay_check(std::span<const Transition* const> batch) {
    CascadeContext ctx = bench_.ctx();
    int64_t mismatches = 0;
    for (const Transition* tp : batch) {
        auto it = ckpt_store_.find(tp->checkpoint_id);
        if (it == ckpt_store_.end()) {
            ++replay_check_skipped_;
            continue;
        }
        const CascadePolicy& pol = it->second;
        std::vector<Vec> noise =
            window_noise(*tp, pol.first_controlled, bench_.layout.n_stages);
        CascadeTrace replayed =
            replay_cascade(ctx, obs_prefix(tp->obs, pol.first_controlled), pol, &noise);
        bool ok = replayed.obs.flatten() == tp->obs.flatten();
        std::vector<Vec> logged = tp->logged_actions();
        for (size_t i = 0; ok && i < logged.size(); ++i)
            ok = replayed.actions[i] == logged[i];
        if (!ok) ++mismatches;
    }
    return mismatches;
}

TrainResult Trainer::run_cem() {
    const TrainConfig& tc = cfg_.train;
    const Environment& env = *bench_.env;
    CascadeContext ctx = bench_.ctx();
    const int n_stages = env.config().n_stages();
    const Index dims = static_cast<Index>(n_stages) * bench_.layout.action_dim;

    CemOptimizer::Params cp;
    cp.pop = tc.cem_pop;
    cp.elite_frac = tc.cem_elite;
    cp.lo = 0.0;
    cp.hi = 2.0;
    cp.sigma_floor = tc.cem_sigma_floor;
    cp.seed = tc.seed;
    CemOptimizer opt(Vec::Constant(dims, 1.0), Vec::Constant(dims, tc.cem_init_sigma), cp);

    int64_t steps_done = 0;
    int64_t next_eval = tc.eval_every;
    int iter = 0;
    TrainResult res;

    auto as_actions = [&](const Vec& x) {
        std::vector<Vec> acts;
        for (int s = 0; s < n_stages; ++s)
            acts.push_back(x.segment(static_cast<Index>(s) * bench_.layout.action_dim,
                                     bench_.layout.action_dim));
        return acts;
    };

    auto objective = [&](const Vec& x) {
        std::vector<Vec> acts = as_actions(x);
        double total = 0.0;
        for (int k = 0; k < tc.cem_rollouts; ++k) {
            UserState user = env.reset(mix(tc.seed, 0xCE11, static_cast<uint64_t>(iter),
                                           static_cast<uint64_t>(k)));
            while (!user.done) {
                CascadeTrace trace = run_cascade_constant(ctx, user, acts);
                total += env.step(user, trace.slate).reward;
                ++steps_done;
            }
        }
        return total / static_cast<double>(tc.cem_rollouts);
    };

    while (steps_done < tc.steps) {
        opt.step(objective);
        ++iter;
        if (steps_done >= next_eval || steps_done >= tc.steps) {
            CurvePoint p;
            p.round = iter;
            p.env_steps = steps_done;
            PolicySpec spec;
            spec.kind = PolicySpec::Kind::Constant;
            spec.constants = as_actions(opt.mean());
            p.eval = eval_now(spec);
            res.curve.push_back(p);
            append_curve(p);
            next_eval = (steps_done / tc.eval_every + 1) * tc.eval_every;
        }
    }

    cem_mean_ = opt.mean();
    res.final_eval = res.curve.back().eval;
    for (const auto& p : res.curve) {
        res.best_wt = std::max(res.best_wt, p.eval.wt_mean);
        res.best_sl = std::max(res.best_sl, p.eval.sl_mean);
    }
    res.env_steps = steps_done;
    nlohmann::json state{{"cem_mean", vec_to_json(cem_mean_)},
                         {"cem_sigma", vec_to_json(opt.sigma())}};
    write_artifacts(res, state);
    return res;
}

TrainResult Trainer::run_eval_only(Algo algo) {
    TrainResult res;
    CurvePoint p;
    p.round = 0;
    p.env_steps = 0;
    PolicySpec spec;
    spec.kind = algo == Algo::Oracle ? PolicySpec::Kind::Oracle : PolicySpec::Kind::Random;
    p.eval = eval_now(spec);
    res.curve.push_back(p);
    append_curve(p);
    res.final_eval = p.eval;
    res.best_wt = p.eval.wt_mean;
    res.best_sl = p.eval.sl_mean;
    write_artifacts(res, nlohmann::json());
    return res;
}

PolicySpec Trainer::final_policy() const {
    PolicySpec spec;
    Algo a = cfg_.algo();
    if (algo_uses_stack(a)) {
        spec.kind = PolicySpec::Kind::Actors;
        spec.actors = &stack_->policy();
    } else if (a == Algo::Iddpg) {
        spec.kind = PolicySpec::Kind::Actors;
        spec.actors = &istacks_->policy();
    } else if (a == Algo::Cem) {
        spec.kind = PolicySpec::Kind::Constant;
        for (int s = 0; s < bench_.layout.n_stages; ++s)
            spec.constants.push_back(cem_mean_.segment(
                static_cast<Index>(s) * bench_.layout.action_dim, bench_.layout.action_dim));
    } else if (a == Algo::Oracle) {
        spec.kind = PolicySpec::Kind::Oracle;
    } else {
        spec.kind = PolicySpec::Kind::Random;
    }
    return spec;
}

void Trainer::write_artifacts(const TrainResult& res, const nlohmann::json& agents_state) {
    if (out_dir_.empty()) return;

    nlohmann::json summary{{"algo", cfg_.train.algo},
                           {"agents", cfg_.effective_agents()},
                           {"sg", cfg_.train.sg},
                           {"cqr", cfg_.train.cqr},
                           {"seed", cfg_.train.seed},
                           {"env_steps", res.env_steps},
                           {"watch_time", res.final_eval.wt_mean},
                           {"watch_time_std", res.final_eval.wt_std},
                           {"session_len", res.final_eval.sl_mean},
                           {"session_len_std", res.final_eval.sl_std},
                           {"best_watch_time", res.best_wt},
                           {"best_session_len", res.best_sl},
                           {"violations", res.violations},
                           {"valid", res.violations == 0},
                           {"config_hash", hash_},
                           {"code_version", kCodeVersion}};
    {
        std::ofstream f(fs::path(out_dir_) / "run_summary.json");
        f << summary.dump(2) << "\n";
    }

    nlohmann::json ckpt{{"format", "casrl-ckpt-v1"},
                        {"config_hash", hash_},
                        {"code_version", kCodeVersion},
                        {"config", nlohmann::json(cfg_)},
                        {"agents_state", agents_state}};
    Algo a = cfg_.algo();
    if (algo_uses_stack(a)) {
        ckpt["policy_kind"] = "actors";
        ckpt["policy"] = policy_to_json(stack_->policy());
    } else if (a == Algo::Iddpg) {
        ckpt["policy_kind"] = "actors";
        ckpt["policy"] = policy_to_json(istacks_->policy());
    } else if (a == Algo::Cem) {
        ckpt["policy_kind"] = "constant";
        ckpt["constants"] = vec_to_json(cem_mean_);
    } else if (a == Algo::Oracle) {
        ckpt["policy_kind"] = "oracle";
    } else {
        ckpt["policy_kind"] = "random";
    }
    {
        std::ofstream f(fs::path(out_dir_) / "checkpoint_final.json");
        f << ckpt.dump() << "\n";
    }

    if (cqr_live_) {
        std::ofstream f(fs::path(out_dir_) / "cqr_table.json");
        nlohmann::json tj = cqr_live_->to_json();
        tj["config_hash"] = hash_;
        tj["code_version"] = kCodeVersion;
        tj["seed"] = cfg_.train.seed;
        f << tj.dump() << "\n";
    }
}

EvalStats evaluate_checkpoint(const std::string& ckpt_path, int n_sessions, uint64_t seed) {
    std::ifstream f(ckpt_path);
    if (!f) throw ContractError("evaluate: cannot open checkpoint " + ckpt_path);
    nlohmann::json j = nlohmann::json::parse(f);
    if (j.at("format").get<std::string>() != "casrl-ckpt-v1")
        throw ContractError("evaluate: unsupported checkpoint format");
    ExperimentConfig cfg = j.at("config").get<ExperimentConfig>();
    if (cfg.config_hash() != j.at("config_hash").get<std::string>())
        throw ContractError("evaluate: checkpoint/config hash mismatch");

    Bench bench(cfg.world);
    std::string kind = j.at("policy_kind").get<std::string>();
    PolicySpec spec;
    CascadePolicy policy;
    CascadeContext ctx = bench.ctx();
    if (kind == "actors") {
        policy = policy_from_json(j.at("policy"));
        spec.kind = PolicySpec::Kind::Actors;
        spec.actors = &policy;
    } else if (kind == "constant") {
        Vec flat = vec_from_json(j.at("constants"));
        spec.kind = PolicySpec::Kind::Constant;
        for (int s = 0; s < bench.layout.n_stages; ++s)
            spec.constants.push_back(
                flat.segment(static_cast<Index>(s) * bench.layout.action_dim,
                             bench.layout.action_dim));
    } else if (kind == "oracle") {
        spec.kind = PolicySpec::Kind::Oracle;
    } else {
        spec.kind = PolicySpec::Kind::Random;
    }
    return evaluate_policy(ctx, spec, n_sessions, seed);
}

}  // namespace casrl
