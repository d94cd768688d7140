#include "casrl/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <thread>

#include "casrl/serialize.hpp"
#include "casrl/version.hpp"

namespace casrl {

namespace fs = std::filesystem;

std::string fmt_double(double x) { return nlohmann::json(x).dump(); }

SuiteConfig SuiteConfig::from_json(const nlohmann::json& j) {
    SuiteConfig s;
    s.base = j.get<ExperimentConfig>();
    if (!j.contains("suite")) throw ContractError("suite: config has no \"suite\" section");
    const auto& sj = j.at("suite");
    for (const auto& cj : sj.at("cells")) {
        SuiteCell c;
        c.algo = cj.at("algo").get<std::string>();
        c.agents = cj.value("agents", s.base.train.agents);
        c.sg = cj.value("sg", true);
        c.cqr = cj.value("cqr", true);
        s.cells.push_back(c);
    }
    for (const auto& e : sj.at("seeds")) s.seeds.push_back(e.get<uint64_t>());
    s.jobs = sj.value("jobs", 2);
    if (s.cells.empty() || s.seeds.empty())
        throw ContractError("suite: needs at least one cell and one seed");
    return s;
}

ExperimentConfig cell_config(const SuiteConfig& suite, const SuiteCell& cell, uint64_t seed) {
    ExperimentConfig cfg = suite.base;
    cfg.train.algo = cell.algo;
    cfg.train.agents = cell.agents;
    cfg.train.sg = cell.sg;
    cfg.train.cqr = cell.cqr;
    cfg.train.seed = seed;
    cfg.validate();
    return cfg;
}

std::string cell_name(const SuiteCell& cell) {
    std::string name = cell.algo;
    Algo a = algo_from_name(cell.algo);
    if (a == Algo::UnexCic || a == Algo::UnexCtde || a == Algo::Iddpg)
        name += "_ag" + std::to_string(cell.agents);
    if (!cell.sg) name += "_nosg";
    if (!cell.cqr) name += "_nocqr";
    return name;
}

namespace {

double median_of(std::vector<double> xs) {
    if (xs.empty()) return std::nan("");
    std::sort(xs.begin(), xs.end());
    size_t n = xs.size();
    return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace

std::vector<double> SuiteResult::watch_times(const SuiteCell& cell) const {
    std::vector<double> out;
    for (const auto& r : cells) {
        if (r.failed || r.result.violations != 0) continue;
        if (cell_name(r.cell) == cell_name(cell)) out.push_back(r.result.final_eval.wt_mean);
    }
    return out;
}

double SuiteResult::median_watch_time(const SuiteCell& cell) const {
    return median_of(watch_times(cell));
}

double SuiteResult::median_session_len(const SuiteCell& cell) const {
    std::vector<double> out;
    for (const auto& r : cells) {
        if (r.failed || r.result.violations != 0) continue;
        if (cell_name(r.cell) == cell_name(cell)) out.push_back(r.result.final_eval.sl_mean);
    }
    return median_of(out);
}

SuiteResult run_suite(const SuiteConfig& cfg) {
    if (!cfg.out_dir.empty()) fs::create_directories(cfg.out_dir);

    struct Job {
        SuiteCell cell;
        uint64_t seed;
    };
    std::vector<Job> jobs;
    for (const auto& cell : cfg.cells)
        for (uint64_t seed : cfg.seeds) jobs.push_back({cell, seed});

    SuiteResult res;
    res.cells.resize(jobs.size());

    // One catalog per world config, shared read-only across workers.
    auto catalog = std::make_shared<ItemCatalog>(ItemCatalog::build(cfg.base.world));

    std::atomic<size_t> next{0};
    auto worker = [&]() {
        while (true) {
            size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            CellResult& out = res.cells[i];
            out.cell = jobs[i].cell;
            out.seed = jobs[i].seed;
            try {
                ExperimentConfig cc = cell_config(cfg, jobs[i].cell, jobs[i].seed);
                std::string dir;
                if (!cfg.out_dir.empty())
                    dir = (fs::path(cfg.out_dir) / "cells" /
                           (cell_name(jobs[i].cell) + "_seed" + std::to_string(jobs[i].seed)))
                              .string();
                Trainer trainer(cc, dir, catalog);
                out.config_hash = cc.config_hash();
                out.result = trainer.run();
            } catch (const std::exception& e) {
                out.failed = true;
                out.error = e.what();
            }
        }
    };

    int n_threads = std::max(1, cfg.jobs);
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();

    bool any_failed = false;
    bool any_violation = false;
    for (const auto& r : res.cells) {
        any_failed |= r.failed;
        any_violation |= (!r.failed && r.result.violations != 0);
    }
    res.exit_code = any_failed ? 1 : (any_violation ? 2 : 0);

    if (!cfg.out_dir.empty()) {
        res.csv_path = (fs::path(cfg.out_dir) / "suite_summary.csv").string();
        std::ofstream f(res.csv_path);
        f << "algo,agents,sg,cqr,seed,env_steps,watch_time,session_len,best_watch_time,"
             "best_session_len,violations,valid,config_hash,code_version\n";
        auto row = [&](const CellResult& r) {
            f << r.cell.algo << ',' << r.cell.agents << ',' << (r.cell.sg ? 1 : 0) << ','
              << (r.cell.cqr ? 1 : 0) << ',' << r.seed << ',';
            if (r.failed) {
                f << ",,,,," << "1,0," << r.config_hash << ',' << kCodeVersion << "\n";
                return;
            }
            f << r.result.env_steps << ',' << fmt_double(r.result.final_eval.wt_mean) << ','
              << fmt_double(r.result.final_eval.sl_mean) << ',' << fmt_double(r.result.best_wt)
              << ',' << fmt_double(r.result.best_sl) << ',' << r.result.violations << ','
              << (r.result.violations == 0 ? 1 : 0) << ',' << r.config_hash << ','
              << kCodeVersion << "\n";
        };
        for (const auto& r : res.cells) row(r);

        for (const auto& cell : cfg.cells) {
            std::vector<double> wt = res.watch_times(cell);
            f << cell.algo << ',' << cell.agents << ',' << (cell.sg ? 1 : 0) << ','
              << (cell.cqr ? 1 : 0) << ",median,,";
            if (wt.empty()) {
                f << ",,,,0," << kCodeVersion << "\n";
            } else {
                f << fmt_double(res.median_watch_time(cell)) << ','
                  << fmt_double(res.median_session_len(cell)) << ",,,," << "1,"
                  << kCodeVersion << "\n";
            }
        }
    }
    return res;
}

void VerifyReport::add(const std::string& check, bool ok) {
    auto& [pass, fail] = checks[check];
    (ok ? pass : fail) += 1;
}

int64_t VerifyReport::failures() const {
    int64_t n = 0;
    for (const auto& [name, pf] : checks) n += pf.second;
    return n;
}

int VerifyReport::exit_code() const {
    if (status == "error") return 1;
    if (failures() > 0 || !malformed_lines.empty()) return 2;
    return 0;
}

nlohmann::json VerifyReport::to_json() const {
    nlohmann::json cj = nlohmann::json::object();
    for (const auto& [name, pf] : checks)
        cj[name] = nlohmann::json{{"pass", pf.first}, {"fail", pf.second}};
    return nlohmann::json{{"records", records},
                          {"checks", cj},
                          {"malformed_lines", malformed_lines},
                          {"status", status},
                          {"detail", detail},
                          {"code_version", kCodeVersion}};
}

VerifyReport verify_trace_log(const std::string& traces_path, const std::string& ckpt_dir,
                              const ExperimentConfig& cfg) {
    VerifyReport rep;
    std::ifstream f(traces_path);
    if (!f) {
        rep.status = "error";
        rep.detail = "cannot open trace log " + traces_path;
        return rep;
    }

    Bench bench(cfg.world);
    const auto& world = bench.env->config();
    const int n_stages = world.n_stages();

    std::map<int64_t, CascadePolicy> ckpts;
    if (fs::exists(ckpt_dir)) {
        for (const auto& entry : fs::directory_iterator(ckpt_dir)) {
            if (entry.path().extension() != ".json") continue;
            std::ifstream cf(entry.path());
            nlohmann::json cj = nlohmann::json::parse(cf, nullptr, false);
            if (cj.is_discarded() || !cj.contains("id")) continue;
            ckpts[cj.at("id").get<int64_t>()] = policy_from_json(cj.at("policy"));
        }
    }

    // Per-bucket shaped rewards for the uniformity check.
    std::map<std::pair<int, int>, std::vector<double>> shaped;

    std::string line;
    int64_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json row = nlohmann::json::parse(line, nullptr, false);
        if (row.is_discarded()) {
            rep.malformed_lines.push_back(line_no);
            continue;
        }
        try {
            Vec tau1 = vec_from_json(row.at("tau1"));
            rep.add("dim_recursion", tau1.size() == bench.layout.obs_dim(1));
            Observation tau = obs_from_flat(bench.layout, 1, tau1);

            std::vector<Vec> actions;
            for (const auto& aj : row.at("actions")) actions.push_back(vec_from_json(aj));
            std::vector<Vec> noise;
            for (const auto& nj : row.at("noise")) noise.push_back(vec_from_json(nj));
            if (static_cast<int>(actions.size()) != n_stages ||
                static_cast<int>(noise.size()) != n_stages)
                throw ContractError("wrong action/noise arity");

            bool bounds_ok = true;
            for (const Vec& a : actions)
                bounds_ok = bounds_ok && a.minCoeff() >= 0.0 && a.maxCoeff() <= 2.0;
            rep.add("action_bounds", bounds_ok);

            double r = row.at("r").get<double>();
            rep.add("reward_nonnegative", r >= 0.0);
            if (row.contains("r_tilde")) {
                double rt = row.at("r_tilde").get<double>();
                rep.add("cqr_range", rt >= 0.0 && rt <= 1.0);
                shaped[{row.at("user_group").get<int>(), row.at("item_group").get<int>()}]
                    .push_back(rt);
            }

            int64_t ckpt_id = row.at("ckpt").get<int64_t>();
            auto it = ckpts.find(ckpt_id);
            rep.add("checkpoint_resolution", it != ckpts.end());
            if (it != ckpts.end()) {
                const CascadePolicy& pol = it->second;
                // Replay the whole chain; one mismatched stage flags the
                // record, downstream stages continue from the logged action.
                UserFeatures feat = bench.env->features_from_state(tau.state);
                CandidateSet cands;
                cands.stage = 1;
                cands.ids.resize(bench.catalog->items.size());
                for (size_t k = 0; k < cands.ids.size(); ++k)
                    cands.ids[k] = static_cast<int32_t>(k);
                Mat preds = bench.env->predict(cands.ids, bench.predictors[0], feat);

                bool replay_ok = true;
                bool nesting_ok = true;
                for (int stage = 1; stage <= n_stages; ++stage) {
                    Vec expected;
                    if (pol.controls(stage)) {
                        const Vec& nz = noise[static_cast<size_t>(stage - 1)];
                        expected = act(pol.actor_for(stage), tau.flatten(),
                                       nz.size() > 0 ? &nz : nullptr);
                    } else {
                        expected = pol.fixed_action;
                    }
                    replay_ok =
                        replay_ok && expected == actions[static_cast<size_t>(stage - 1)];

                    Index k = stage < n_stages ? world.ladder[static_cast<size_t>(stage)]
                                               : world.slate_size;
                    CandidateSet next =
                        stage_select(cands, preds, actions[static_cast<size_t>(stage - 1)], k);
                    nesting_ok = nesting_ok &&
                                 static_cast<Index>(next.ids.size()) == k &&
                                 next.ids.size() < cands.ids.size();
                    if (stage < n_stages) {
                        preds = bench.env->predict(
                            next.ids, bench.predictors[static_cast<size_t>(stage)], feat);
                        tau = compose_obs(tau, actions[static_cast<size_t>(stage - 1)],
                                          extract_stats(preds));
                        rep.add("dim_recursion",
                                tau.flatten().size() == bench.layout.obs_dim(stage + 1));
                    }
                    cands = std::move(next);
                }
                rep.add("replay_fidelity", replay_ok);
                rep.add("nesting", nesting_ok);
            }
            ++rep.records;
        } catch (const std::exception&) {
            rep.malformed_lines.push_back(line_no);
        }
    }

    for (const auto& [key, values] : shaped) {
        if (values.size() < 1000) continue;
        std::vector<double> xs = values;
        std::sort(xs.begin(), xs.end());
        double n = static_cast<double>(xs.size());
        double d = 0.0;
        for (size_t i = 0; i < xs.size(); ++i) {
            d = std::max(d, std::abs((static_cast<double>(i) + 1.0) / n - xs[i]));
            d = std::max(d, std::abs(xs[i] - static_cast<double>(i) / n));
        }
        rep.add("cqr_uniformity", d < 0.05);
    }

    if (rep.records == 0 && rep.malformed_lines.empty()) {
        rep.status = "no_data";
    } else if (rep.failures() > 0 || !rep.malformed_lines.empty()) {
        rep.status = "violations";
    } else {
        rep.status = "ok";
    }
    return rep;
}

VerifyReport verify_run(const std::string& run_dir) {
    fs::path dir(run_dir);
    std::ifstream cf(dir / "config.json");
    if (!cf) {
        VerifyReport rep;
        rep.status = "error";
        rep.detail = "cannot open " + (dir / "config.json").string();
        return rep;
    }
    nlohmann::json cj = nlohmann::json::parse(cf);
    ExperimentConfig cfg = cj.get<ExperimentConfig>();
    return verify_trace_log((dir / "traces.jsonl").string(), (dir / "checkpoints").string(),
                            cfg);
}

void dump_quantiles_csv(const std::string& table_path, const std::string& out_csv) {
    std::ifstream f(table_path);
    if (!f) throw ContractError("dump-quantiles: cannot open " + table_path);
    nlohmann::json j = nlohmann::json::parse(f);
    QuantileTable table = QuantileTable::from_json(j);

    std::ofstream out(out_csv);
    out << "user_group,item_group,count,level,reward\n";
    std::vector<double> levels;
    for (int i = 1; i <= 99; ++i) levels.push_back(static_cast<double>(i) / 100.0);
    for (int ug = 0; ug < table.config().user_groups; ++ug) {
        for (int ig = 0; ig < table.config().item_groups; ++ig) {
            std::vector<double> qs = table.bucket_quantiles(ug, ig, levels);
            for (size_t i = 0; i < levels.size(); ++i)
                out << ug << ',' << ig << ',' << table.bucket_count(ug, ig) << ','
                    << fmt_double(levels[i]) << ',' << fmt_double(qs[i]) << "\n";
        }
    }
}

}  // namespace casrl
