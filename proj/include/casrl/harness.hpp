#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "casrl/trainer.hpp"

namespace casrl {

struct SuiteCell {
    std::string algo = "unex-cic";
    int agents = 3;
    bool sg = true;
    bool cqr = true;
};

struct SuiteConfig {
    ExperimentConfig base;
    std::vector<SuiteCell> cells;
    std::vector<uint64_t> seeds;
    int jobs = 2;
    std::string out_dir;

    static SuiteConfig from_json(const nlohmann::json& j);
};

ExperimentConfig cell_config(const SuiteConfig& suite, const SuiteCell& cell, uint64_t seed);
std::string cell_name(const SuiteCell& cell);

struct CellResult {
    SuiteCell cell;
    uint64_t seed = 0;
    bool failed = false;
    std::string error;
    TrainResult result;
    std::string config_hash;
};

struct SuiteResult {
    std::vector<CellResult> cells;  // declaration order: cells x seeds
    std::string csv_path;
    int exit_code = 0;  // 0 all valid, 1 cell failure, 2 invariant violation

    // Median of final WatchTime over valid seeds for one cell; NaN if none.
    double median_watch_time(const SuiteCell& cell) const;
    double median_session_len(const SuiteCell& cell) const;
    std::vector<double> watch_times(const SuiteCell& cell) const;
};

// Executes all (cell, seed) combinations, possibly concurrently, each in its
// own subdirectory, then writes a suite CSV with one row per run plus one
// median row per cell.
SuiteResult run_suite(const SuiteConfig& cfg);

struct VerifyReport {
    int64_t records = 0;
    // check name -> (pass count, fail count)
    std::map<std::string, std::pair<int64_t, int64_t>> checks;
    std::vector<int64_t> malformed_lines;
    std::string status = "no_data";  // ok | violations | no_data | error
    std::string detail;

    void add(const std::string& check, bool ok);
    int64_t failures() const;
    int exit_code() const;  // 0 ok/no_data, 1 error, 2 violations
    nlohmann::json to_json() const;
};

// Replays every logged trace record against its checkpoint and runs the full
// invariant battery (replay fidelity, nesting, action bounds, dimension
// recursion, reward shaping range/uniformity).
VerifyReport verify_trace_log(const std::string& traces_path, const std::string& ckpt_dir,
                              const ExperimentConfig& cfg);
VerifyReport verify_run(const std::string& run_dir);

void dump_quantiles_csv(const std::string& table_path, const std::string& out_csv);

// Deterministic float formatting shared by CSV writers (shortest round trip).
std::string fmt_double(double x);

}  // namespace casrl
