// csb: command-line driver for probe planning, agent runs, scoring and reports.

#include "csb/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

using namespace csb;

struct Flags {
    std::string out = "run";
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string backend;
    std::string endpoint;
    std::string families;
    std::string conditions;
    std::string controls;
    std::string guard_visibility;
    std::optional<int> bootstrap_draws;
    std::optional<int> replicates;
    std::optional<int> events;
    std::string features;
    std::string baseline_cols;
    std::string augmented_cols;
    int folds = 5;
};

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s + ",") {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else if (c != ' ') {
            cur += c;
        }
    }
    return out;
}

RunConfig build_config(const Flags& f) {
    RunConfig c;
    std::string cfg_path = f.config;
    if (cfg_path.empty() && fs::exists(fs::path(f.out) / "run_config.json"))
        cfg_path = (fs::path(f.out) / "run_config.json").string();
    if (!cfg_path.empty()) c = json::parse(read_file(cfg_path)).get<RunConfig>();
    if (f.seed) c.master_seed = *f.seed;
    if (f.backend == "remote") c.backend = Backend::Remote;
    else if (f.backend == "simulated") c.backend = Backend::Simulated;
    else if (!f.backend.empty()) throw Error("config", "unknown backend '" + f.backend + "'");
    if (!f.endpoint.empty()) {
        if (f.endpoint.rfind("http://", 0) == 0 || f.endpoint.rfind("https://", 0) == 0) c.endpoint.base_url = f.endpoint;
        else c.endpoint = json::parse(read_file(f.endpoint)).get<EndpointConfig>();
    }
    if (!f.families.empty()) c.families = load_families(f.families);
    if (f.events)
        for (auto& fam : c.families) fam.event_count = *f.events;
    if (!f.conditions.empty()) {
        c.conditions.clear();
        for (const auto& s : split_list(f.conditions)) c.conditions.push_back(condition_from_string(s));
    }
    if (!f.controls.empty()) {
        c.controls.clear();
        for (const auto& s : split_list(f.controls)) c.controls.push_back(control_from_string(s));
    }
    if (!f.guard_visibility.empty()) c.guard_visibility = guard_visibility_from_string(f.guard_visibility);
    if (f.bootstrap_draws) c.bootstrap_draws = *f.bootstrap_draws;
    if (f.replicates) c.replicates = *f.replicates;
    c.validate();
    return c;
}

std::optional<PredictorReport> predictor_from(const Flags& f, std::uint64_t seed, int draws) {
    if (f.features.empty()) return std::nullopt;
    const auto table = read_feature_csv(f.features);
    auto base = split_list(f.baseline_cols), aug = split_list(f.augmented_cols);
    if (base.empty()) throw Error("config", "--baseline names no feature columns");
    if (aug.empty()) {
        aug = base;
        for (const auto& [name, _] : table.features)
            if (std::find(base.begin(), base.end(), name) == base.end()) aug.push_back(name);
    }
    PredictorReport r;
    r.delta = delta_auc(table, base, aug, f.folds, seed, draws);
    const auto probs = grouped_cv_predict(table, aug, f.folds, seed);
    std::vector<double> grid;
    for (int i = 1; i <= 9; ++i) grid.push_back(i / 10.0);
    r.thresholds = threshold_analysis(probs, table.outcome, table.violation, grid);
    r.bins = calibration_bins(probs, table.outcome, 10);
    return r;
}

void add_common(CLI::App* cmd, Flags& f) {
    cmd->add_option("--out", f.out, "Run directory");
    cmd->add_option("--config", f.config, "Run configuration (JSON)");
    cmd->add_option("--seed", f.seed, "Master seed");
    cmd->add_option("--backend", f.backend, "simulated or remote");
    cmd->add_option("--endpoint", f.endpoint, "Endpoint base URL or endpoint config file");
    cmd->add_option("--families", f.families, "Task family definition file (JSON)");
    cmd->add_option("--conditions", f.conditions, "Comma-separated condition names");
    cmd->add_option("--controls", f.controls, "Comma-separated control tags run as extra variants");
    cmd->add_option("--guard-visibility", f.guard_visibility, "full or prompt-only");
    cmd->add_option("--bootstrap-draws", f.bootstrap_draws, "Dataset-cluster bootstrap draws");
    cmd->add_option("--replicates", f.replicates, "Replicates per probe");
    cmd->add_option("--events", f.events, "Events per family (overrides the family files)");
}

void add_predictor(CLI::App* cmd, Flags& f) {
    cmd->add_option("--features", f.features, "Feature table (CSV with group, outcome, violation columns)");
    cmd->add_option("--baseline", f.baseline_cols, "Comma-separated baseline feature columns");
    cmd->add_option("--augmented", f.augmented_cols, "Comma-separated augmented feature columns (default: all)");
    cmd->add_option("--folds", f.folds, "Grouped cross-validation folds");
}

int run_guard(const Flags& f) {
    const auto cfg = build_config(f);
    const fs::path dir(f.out);
    const Lexicon lex = cfg.lexicon_path.empty() ? Lexicon::builtin() : Lexicon::load(cfg.lexicon_path);
    std::map<std::string, ProbeRecord> probes;
    for (const auto* name : {"probes.jsonl", "control_probes.jsonl", "sufficiency_probes.jsonl"})
        if (fs::exists(dir / name))
            for (auto& p : read_jsonl<ProbeRecord>((dir / name).string())) probes.emplace(p.key.str(), std::move(p));
    std::map<GuardVerdict, std::size_t> tally;
    std::size_t raw_ok = 0, wrapped_ok = 0;
    std::vector<ScoredRecord> out;
    for (const auto* name : {"scored.jsonl", "sufficiency_scored.jsonl"}) {
        if (!fs::exists(dir / name)) throw Error("missing", (dir / name).string() + " does not exist; run score first");
        for (auto& r : read_jsonl<ScoredRecord>((dir / name).string())) {
            const auto it = probes.find(r.key.str());
            if (it == probes.end()) throw Error("wiring", "no probe for " + r.key.str());
            r.guard = wrap(r.canonical_action, it->second, cfg.guard_visibility, lex);
            ++tally[r.guard->verdict];
            raw_ok += r.correct ? 1 : 0;
            wrapped_ok += r.guard->action_out == r.expected_after ? 1 : 0;
            out.push_back(std::move(r));
        }
    }
    const auto receipt = write_jsonl((dir / "guarded.jsonl").string(), out);
    std::cout << "guard visibility " << to_string(cfg.guard_visibility) << ": " << out.size() << " rows\n";
    for (const auto& [v, n] : tally) std::cout << "  " << to_string(v) << " " << n << "\n";
    if (!out.empty())
        std::cout << "raw accuracy " << fmt_fixed(static_cast<double>(raw_ok) / out.size(), 4) << ", wrapped accuracy "
                  << fmt_fixed(static_cast<double>(wrapped_ok) / out.size(), 4) << "\n";
    std::cout << "wrote " << receipt.path << " sha256 " << receipt.sha256 << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Causal state-binding measurement harness"};
    app.require_subcommand(1);
    Flags f;
    auto* plan = app.add_subcommand("plan", "Instantiate probes and write the run configuration");
    auto* run = app.add_subcommand("run", "Run every stage, resuming from the manifest");
    auto* score = app.add_subcommand("score", "Score generations in a run directory");
    auto* analyze = app.add_subcommand("analyze", "Compute contrasts, gates and entropy layers");
    auto* report = app.add_subcommand("report", "Render report.md from scored artifacts");
    auto* guard = app.add_subcommand("guard", "Apply the control-binding wrapper to scored rows");
    auto* predict = app.add_subcommand("predict", "Grouped-CV reliability predictor on a feature table");
    for (auto* c : {plan, run, score, analyze, report, guard}) add_common(c, f);
    for (auto* c : {run, report, predict}) add_predictor(c, f);
    predict->add_option("--seed", f.seed, "Fold and bootstrap seed");
    predict->add_option("--bootstrap-draws", f.bootstrap_draws, "Group bootstrap draws");
    predict->add_option("--out", f.out, "Directory for predictor.json");

    CLI11_PARSE(app, argc, argv);
    try {
        if (predict->parsed()) {
            if (f.features.empty()) throw Error("config", "predict needs --features");
            const auto r = predictor_from(f, f.seed.value_or(20240601), f.bootstrap_draws.value_or(2000));
            json j{{"auc_baseline", r->delta.auc_baseline},
                   {"auc_augmented", r->delta.auc_augmented},
                   {"delta_auc", r->delta.delta},
                   {"bootstrap_lower", r->delta.bootstrap_lower},
                   {"draws_used", r->delta.draws_used}};
            fs::create_directories(f.out);
            write_file((fs::path(f.out) / "predictor.json").string(), j.dump(2) + "\n");
            std::cout << j.dump(2) << "\n";
            return 0;
        }
        if (guard->parsed()) return run_guard(f);

        Runner runner(build_config(f), f.out, &std::cerr);
        if (run->parsed() || report->parsed())
            runner.set_predictor(predictor_from(f, runner.config().master_seed, runner.config().bootstrap_draws));
        if (run->parsed()) runner.run();
        else if (plan->parsed()) runner.run_stage("plan");
        else if (score->parsed()) runner.run_stage("score");
        else if (analyze->parsed()) runner.run_stage("analyze");
        else runner.run_stage("report");
        std::cerr << "artifacts in " << f.out << "\n";
        return 0;
    } catch (const Error& e) {
        std::cerr << "csb: " << e.category() << " error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "csb: " << e.what() << "\n";
        return 1;
    }
}
