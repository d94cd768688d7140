#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "casrl/harness.hpp"
#include "casrl/serialize.hpp"
#include "casrl/trainer.hpp"
#include "casrl/version.hpp"

using namespace casrl;

namespace {

nlohmann::json load_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ContractError("cannot open " + path);
    return nlohmann::json::parse(f);
}

ExperimentConfig load_config(const std::string& path) {
    if (path.empty()) return ExperimentConfig{};
    return load_json_file(path).get<ExperimentConfig>();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"casrl: multi-stage cascade recommendation RL lab"};
    app.set_version_flag("--version", kCodeVersion);
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir = "out";
    std::string algo;
    int64_t seed = -1;
    int agents = -1;
    bool no_sg = false, no_cqr = false, log_traces = false, check_replay = false;
    int64_t steps = -1;

    auto* train = app.add_subcommand("train", "train one algorithm on the synthetic world");
    train->add_option("--config", config_path, "experiment config JSON");
    train->add_option("--out", out_dir, "output directory");
    train->add_option("--algo", algo,
                      "unex-cic|unex-ctde|ddpg|td3|iddpg|cem|random|oracle");
    train->add_option("--seed", seed, "run seed");
    train->add_option("--agents", agents, "controlled stages, counted from the last");
    train->add_option("--steps", steps, "environment-step budget");
    train->add_flag("--no-sg", no_sg, "disable gradient stopping");
    train->add_flag("--no-cqr", no_cqr, "train on raw rewards");
    train->add_flag("--log-traces", log_traces, "write traces.jsonl and replay checkpoints");
    train->add_flag("--check-replay", check_replay, "verify replay of every sampled batch");

    std::string ckpt_path;
    int sessions = 100;
    int64_t eval_seed = 1;
    auto* evaluate = app.add_subcommand("evaluate", "roll out a saved checkpoint");
    evaluate->add_option("--ckpt", ckpt_path, "checkpoint_final.json path")->required();
    evaluate->add_option("--sessions", sessions, "number of evaluation sessions");
    evaluate->add_option("--seed", eval_seed, "evaluation seed");

    int jobs = 2;
    auto* suite = app.add_subcommand("suite", "run an algorithm x seed grid");
    suite->add_option("--config", config_path, "config JSON with a \"suite\" section")
        ->required();
    suite->add_option("--out", out_dir, "suite output directory");
    suite->add_option("--jobs", jobs, "concurrent cells");

    std::string run_dir, trace_log, ckpt_dir;
    auto* verify = app.add_subcommand("verify", "replay-check a trace log");
    verify->add_option("--run", run_dir, "run directory (config + traces + checkpoints)");
    verify->add_option("--log", trace_log, "trace log path (with --config and --ckpt-dir)");
    verify->add_option("--ckpt-dir", ckpt_dir, "replay checkpoint directory");
    verify->add_option("--config", config_path, "experiment config JSON");
    std::string report_path;
    verify->add_option("--out", report_path, "write the verification report JSON here");

    std::string table_path, csv_path = "quantiles.csv";
    auto* dumpq = app.add_subcommand("dump-quantiles", "export per-bucket quantile curves");
    dumpq->add_option("--table", table_path, "cqr_table.json path");
    dumpq->add_option("--run", run_dir, "run directory containing cqr_table.json");
    dumpq->add_option("--out", csv_path, "output CSV path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) {
            ExperimentConfig cfg = load_config(config_path);
            if (!algo.empty()) cfg.train.algo = algo;
            if (seed >= 0) cfg.train.seed = static_cast<uint64_t>(seed);
            if (agents > 0) cfg.train.agents = agents;
            if (steps > 0) cfg.train.steps = steps;
            if (no_sg) cfg.train.sg = false;
            if (no_cqr) cfg.train.cqr = false;
            if (log_traces) cfg.train.log_traces = true;
            if (check_replay) cfg.train.check_replay = true;
            cfg.validate();

            Trainer trainer(cfg, out_dir);
            auto t0 = std::chrono::steady_clock::now();
            TrainResult res = trainer.run();
            double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                              .count();
            std::cout << "algo=" << cfg.train.algo << " seed=" << cfg.train.seed
                      << " steps=" << res.env_steps
                      << " watch_time=" << fmt_double(res.final_eval.wt_mean)
                      << " session_len=" << fmt_double(res.final_eval.sl_mean)
                      << " violations=" << res.violations << " wall_s=" << fmt_double(secs)
                      << "\n";
            return res.violations == 0 ? 0 : 2;
        }
        if (*evaluate) {
            EvalStats e = evaluate_checkpoint(ckpt_path, sessions,
                                              static_cast<uint64_t>(eval_seed));
            std::cout << "watch_time_mean=" << fmt_double(e.wt_mean)
                      << " watch_time_std=" << fmt_double(e.wt_std)
                      << " session_len_mean=" << fmt_double(e.sl_mean)
                      << " session_len_std=" << fmt_double(e.sl_std) << "\n";
            return 0;
        }
        if (*suite) {
            SuiteConfig sc = SuiteConfig::from_json(load_json_file(config_path));
            sc.out_dir = out_dir;
            sc.jobs = jobs;
            SuiteResult res = run_suite(sc);
            for (const auto& r : res.cells) {
                std::cout << cell_name(r.cell) << " seed=" << r.seed;
                if (r.failed)
                    std::cout << " FAILED: " << r.error << "\n";
                else
                    std::cout << " watch_time=" << fmt_double(r.result.final_eval.wt_mean)
                              << " violations=" << r.result.violations << "\n";
            }
            std::cout << "summary: " << res.csv_path << "\n";
            return res.exit_code;
        }
        if (*verify) {
            VerifyReport rep;
            if (!run_dir.empty()) {
                rep = verify_run(run_dir);
            } else if (!trace_log.empty() && !config_path.empty()) {
                rep = verify_trace_log(trace_log, ckpt_dir, load_config(config_path));
            } else {
                std::cerr << "verify: pass --run DIR or --log FILE --config FILE\n";
                return 1;
            }
            nlohmann::json rj = rep.to_json();
            if (!report_path.empty()) {
                std::ofstream f(report_path);
                f << rj.dump(2) << "\n";
            }
            std::cout << rj.dump(2) << "\n";
            return rep.exit_code();
        }
        if (*dumpq) {
            if (table_path.empty()) {
                if (run_dir.empty())
                    throw ContractError("dump-quantiles: pass --table or --run");
                table_path =
                    (std::filesystem::path(run_dir) / "cqr_table.json").string();
            }
            dump_quantiles_csv(table_path, csv_path);
            std::cout << "wrote " << csv_path << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
