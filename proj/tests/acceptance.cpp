// Acceptance checks: prints one PASS/FAIL line per criterion and exits
// nonzero if any fails.

#include "csb/guard.hpp"
#include "csb/pipeline.hpp"
#include "fake_endpoint.hpp"
#include "oracles.hpp"

#include <chrono>
#include <cstdlib>
#include <iostream>
#include <random>

using namespace csb;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int n, const std::string& what, bool ok, const std::string& detail) {
    std::cout << (ok ? "PASS" : "FAIL") << " criterion " << n << ": " << what;
    if (!detail.empty()) std::cout << " (" << detail << ")";
    std::cout << std::endl;
    failures += ok ? 0 : 1;
}

// Runs a criterion body; an exception counts as failure with its message.
template <class F>
void criterion(int n, const std::string& what, F&& body) {
    std::string detail;
    bool ok = false;
    try {
        ok = body(detail);
    } catch (const std::exception& e) {
        detail = std::string("exception: ") + e.what();
    }
    report(n, what, ok, detail);
}

fs::path scratch(const std::string& tag) {
    auto p = fs::temp_directory_path() / ("csb_accept_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    return p;
}

std::string f6(double v) { return fmt_fixed(v, 6); }

std::vector<ScoredRecord> scored_rows(const fs::path& dir) { return read_jsonl<ScoredRecord>((dir / "scored.jsonl").string()); }

bool c1(std::string& d) {
    const auto t0 = Clock::now();
    ComponentTable t;
    const double v[4] = {0.997222, 0.852778, 0.994444, 0.997222};
    for (std::size_t i = 0; i < 4; ++i) t.scores.push_back({kAllComponentIds[i], v[i]});
    const double comp = *t.composite();
    const double secs = seconds_since(t0);
    d = "composite " + f6(comp) + ", " + fmt_fixed(secs, 4) + "s";
    return std::abs(comp - 0.960417) <= 1e-6 && secs < 1.0;
}

bool c2(std::string& d) {
    const double a = AfciTerms{0.494461, 0.503968, 1.0, 0.00285714}.composite();
    const auto delta = contrast_table("AFCI", {{"ds000210", 0.494167 - 0.178611}}, 100, 1).mean;
    d = "AFCI " + f6(a) + ", delta " + f6(delta);
    return std::abs(a - 0.500322) <= 1e-6 && std::abs(delta - 0.315556) <= 1e-6;
}

bool c3(std::string& d) {
    const std::vector<double> seven(7, 0.25);
    const double p = sign_test(seven).p_one_sided;
    int mismatches = 0;
    for (int n = 1; n <= 12; ++n)
        for (int pos = 0; pos <= n; ++pos) {
            std::vector<double> x(static_cast<std::size_t>(n), -1.0);
            std::fill_n(x.begin(), pos, 1.0);
            if (sign_test(x).p_one_sided != oracle::sign_tail_by_enumeration(n, pos)) ++mismatches;
        }
    d = "7/7 p=" + fmt_fixed(p, 7) + ", enumeration mismatches " + std::to_string(mismatches);
    return p == 0.0078125 && mismatches == 0;
}

bool c4(std::string& d) {
    std::mt19937 g(4);
    std::uniform_real_distribution<double> u(-1, 1);
    double worst = 0.0;
    bool within = true, deterministic = true;
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> x(4);
        for (auto& v : x) v = u(g);
        const double exact = quantile(oracle::enumerate_resample_means(x), 0.025);
        const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
        const double granule = (*hi - *lo) / 4.0;
        const double boot = cluster_bootstrap_lower(x, 10000, 20240601 + trial);
        worst = std::max(worst, std::abs(boot - exact) / granule);
        within &= std::abs(boot - exact) <= granule;
        for (int r = 0; r < 3; ++r) deterministic &= cluster_bootstrap_lower(x, 10000, 20240601 + trial) == boot;
    }
    d = "worst error " + fmt_fixed(worst, 3) + " granules, deterministic " + (deterministic ? "yes" : "no");
    return within && deterministic;
}

// Shared by criteria 5 and 12.
struct DefaultRun {
    fs::path dir;
    double seconds = 0.0;
};

DefaultRun default_run(const std::string& tag) {
    DefaultRun r{scratch(tag), 0.0};
    const auto t0 = Clock::now();
    Runner(RunConfig{}, r.dir).run();
    r.seconds = seconds_since(t0);
    return r;
}

bool c5(const DefaultRun& run, std::string& d) {
    const RunConfig cfg;
    const auto s = summarize(scored_rows(run.dir), cfg);
    int composite_wins = 0;
    double rsi_lesioned = -1e9, vei_kept = 1e9, vei_lesioned = -1e9, rsi_kept = 1e9;
    for (const auto& ds : s.datasets) {
        const auto* a4 = find_cell(s, ds, "A4");
        const auto* a5 = find_cell(s, ds, "A5");
        const auto* nr = find_cell(s, ds, "A4_no_reason");
        const auto* nv = find_cell(s, ds, "A4_no_veto");
        if (!a4 || !a5 || !nr || !nv) return false;
        composite_wins += *a4->components.composite() > *a5->components.composite() ? 1 : 0;
        rsi_lesioned = std::max(rsi_lesioned, nr->components.find(ComponentId::RSI)->value);
        vei_kept = std::min(vei_kept, nr->components.find(ComponentId::VEI)->value);
        vei_lesioned = std::max(vei_lesioned, nv->components.find(ComponentId::VEI)->value);
        rsi_kept = std::min(rsi_kept, nv->components.find(ComponentId::RSI)->value);
    }
    const double fp = s.structured_irrelevant_fp.value_or(1.0);
    d = "composite wins " + std::to_string(composite_wins) + "/" + std::to_string(s.datasets.size()) + ", no_reason B_RSI max " +
        f6(rsi_lesioned) + " B_VEI min " + f6(vei_kept) + ", no_veto B_VEI max " + f6(vei_lesioned) + " B_RSI min " +
        f6(rsi_kept) + ", irrelevant FP " + f6(fp) + ", parse " + f6(s.parse_error_rate) + ", unmapped " +
        f6(s.unmapped_rate) + ", " + fmt_fixed(run.seconds, 1) + "s";
    return s.datasets.size() == 7 && composite_wins == 7 && rsi_lesioned <= 0.05 && vei_kept >= 0.9 && vei_lesioned <= 0.05 &&
           rsi_kept >= 0.9 && fp < 0.15 && s.parse_error_rate < 0.02 && s.unmapped_rate < 0.02 && run.seconds < 60.0;
}

bool c6(std::string& d) {
    const double h4 = shannon_entropy(std::vector<int>{0, 1, 2, 3});
    const std::size_t counts[2] = {3, 1};
    const double h31 = entropy_from_counts(counts);
    std::vector<ScoredRecord> rows;
    for (const auto* v : {"A4", "A5"})
        for (int i = 0; i < 8; ++i) {
            ScoredRecord r;
            r.key = {"d1", "e" + std::to_string(i), "baseline", v, 0};
            r.canonical_action = i % 2 ? ActionCode::Veto : ActionCode::ActionB;
            r.raw_output = std::string(to_string(r.canonical_action));
            rows.push_back(r);
        }
    const auto same = calibration_gap("A5", "A4", entropy_layers(rows));
    const auto wide = calibration_gap_from_layer_gaps({{"rule_canonical", 1.17146}});
    d = "H4=" + f6(h4) + " H(3,1)=" + f6(h31) + " identical gap " + f6(same.gamma) + " constructed gap " +
        (wide.pass ? "passes" : "rejected");
    return h4 == 2.0 && std::abs(h31 - 0.811278) <= 1e-6 && same.gamma == 0.0 && same.pass && !wide.pass;
}

bool c7(std::string& d) {
    const auto fam = default_families(20);
    const auto a4 = variant_a4();
    std::size_t scrambled = 0, followed = 0, irrelevant = 0, irr_raw_ok = 0, irr_wrapped_ok = 0;
    std::vector<std::pair<ActionCode, ProbeRecord>> decisions;
    for (const auto& f : fam) {
        const auto pool = generate_events(f, 11);
        for (const auto& base : pool) {
            const auto p = apply_control(base, ControlTag::ScrambledDecisiveField, pool, nullptr, 11);
            const ActionCode foreign = canonicalize(p.decisive_field->text);
            const ActionCode raw = canonicalize(simulated_agent(p, a4, 11).raw_output);
            ++scrambled;
            followed += wrap(raw, p, GuardVisibility::Full).action_out == foreign ? 1 : 0;
            decisions.emplace_back(raw, p);
            if (base.condition == ConditionName::IrrelevantCue) {
                const ActionCode a = canonicalize(simulated_agent(base, a4, 11).raw_output);
                ++irrelevant;
                irr_raw_ok += a == base.expected_after ? 1 : 0;
                irr_wrapped_ok += wrap(a, base).action_out == base.expected_after ? 1 : 0;
            }
            decisions.emplace_back(canonicalize(simulated_agent(base, a4, 11).raw_output), base);
        }
    }
    std::mt19937 g(7);
    std::size_t violations = 0;
    for (int i = 0; i < 10000; ++i) {
        const auto& [_, p] = decisions[g() % decisions.size()];
        const auto a = kAllActions[g() % kAllActions.size()];
        const auto vis = g() & 1 ? GuardVisibility::Full : GuardVisibility::PromptOnly;
        const auto once = wrap(a, p, vis);
        violations += wrap(once.action_out, p, vis).action_out != once.action_out ? 1 : 0;
    }
    const double follow_rate = static_cast<double>(followed) / static_cast<double>(scrambled);
    const double irr_raw = static_cast<double>(irr_raw_ok) / static_cast<double>(irrelevant);
    const double irr_wrapped = static_cast<double>(irr_wrapped_ok) / static_cast<double>(irrelevant);
    d = "wrapped following " + fmt_fixed(follow_rate, 3) + " over " + std::to_string(scrambled) + " rows, irrelevant accuracy " +
        fmt_fixed(irr_raw, 3) + " -> " + fmt_fixed(irr_wrapped, 3) + ", idempotence violations " + std::to_string(violations);
    return followed == 0 && irr_raw == 1.0 && irr_wrapped == 1.0 && violations == 0;
}

bool c8(std::string& d) {
    const auto r = recovery_fraction(1.0, 1.0, 0.208);
    const auto u = recovery_fraction(0.3, 0.3, 0.4);
    d = "recovery " + (r.value ? fmt_fixed(*r.value, 3) : std::string("NA")) + ", undefined case: " + u.note;
    return r.value && *r.value == 1.0 && !u.value && !u.note.empty();
}

bool c9(std::string& d) {
    const auto t0 = Clock::now();
    std::mt19937 g(9);
    int auc_mismatch = 0, tables = 0;
    for (int trial = 0; trial < 2000; ++trial) {
        const std::size_t n = 2 + static_cast<std::size_t>(trial % 11);
        std::vector<double> s(n);
        std::vector<int> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = static_cast<double>(g() % 5);
            y[i] = static_cast<int>(g() & 1);
        }
        if (std::count(y.begin(), y.end(), 1) == 0 || std::count(y.begin(), y.end(), 0) == 0) continue;
        ++tables;
        if (std::abs(auc(s, y) - oracle::auc_by_pairs(s, y)) > 1e-12) ++auc_mismatch;
    }

    FeatureTable perfect;
    for (int i = 0; i < 150; ++i) {
        const int y = (i / 3) % 2;
        perfect.groups.push_back("g" + std::to_string(i / 3));
        perfect.outcome.push_back(y);
        perfect.violation.push_back(0);
        perfect.features["x"].push_back((y ? 1.0 : -1.0) * (1.0 + 0.01 * i));
    }
    const double perfect_auc = auc(grouped_cv_predict(perfect, {"x"}, 5, 3), perfect.outcome);

    std::normal_distribution<double> nd(0, 1);
    std::uniform_real_distribution<double> u(0, 1);
    FeatureTable t;
    for (int grp = 0; grp < 200; ++grp)
        for (int k = 0; k < 3; ++k) {
            const double x = nd(g);
            t.groups.push_back("g" + std::to_string(grp));
            t.features["signal"].push_back(x);
            t.features["noise"].push_back(nd(g));
            t.outcome.push_back(u(g) < 1.0 / (1.0 + std::exp(-1.5 * x)) ? 1 : 0);
            t.violation.push_back(0);
        }
    const auto delta = delta_auc(t, {"signal"}, {"signal", "noise"}, 5, 1, 500);
    std::vector<double> null;
    auto shuffled = t;
    for (int s = 0; s < 1000; ++s) {
        std::shuffle(shuffled.features["noise"].begin(), shuffled.features["noise"].end(), g);
        null.push_back(auc(grouped_cv_predict(shuffled, {"signal", "noise"}, 5, 1), t.outcome) - delta.auc_baseline);
    }
    const double lo = quantile(null, 0.005), hi = quantile(null, 0.995);
    const double secs = seconds_since(t0);
    d = std::to_string(tables) + " small tables, " + std::to_string(auc_mismatch) + " mismatches; perfect AUC " + f6(perfect_auc) +
        "; noise delta " + f6(delta.delta) + " in null [" + f6(lo) + ", " + f6(hi) + "]; " + fmt_fixed(secs, 1) + "s";
    return auc_mismatch == 0 && perfect_auc == 1.0 && std::abs(delta.delta) < 0.05 && delta.delta >= lo && delta.delta <= hi &&
           secs < 120.0;
}

bool c10(std::string& d) {
    const auto reported = matching_gate(MatchingValues{1.0, 1.0, 1.0, 0.997, 0.020});
    const auto ratio = matching_gate(MatchingValues{1.0, 1.0, 1.06, 0.997, 0.020});
    const auto gap = matching_gate(MatchingValues{1.0, 1.0, 1.0, 0.997, 0.151});
    d = std::string("tuple ") + (reported.pass() ? "passes" : "fails") + ", ratio 1.06 " + (ratio.total_ratio_pass ? "passes" : "fails") +
        ", gap 0.151 " + (gap.entropy_pass ? "passes" : "fails");
    return reported.pass() && !ratio.total_ratio_pass && !ratio.pass() && !gap.entropy_pass && !gap.pass();
}

bool c11(const DefaultRun& run, std::string& d) {
    // Leakage audit over every serialized prompt of the default run.
    std::size_t prompts = 0, leaks = 0, scrambled = 0, scrambled_ok = 0;
    for (const auto* name : {"probes.jsonl", "control_probes.jsonl", "sufficiency_probes.jsonl"}) {
        if (!fs::exists(run.dir / name)) continue;
        for (const auto& p : read_jsonl<ProbeRecord>((run.dir / name).string())) {
            ++prompts;
            const std::string text = p.visible_prompt.dump();
            bool leaked = leaks_hidden_target(p);
            for (auto key : kHiddenTargetKeys) leaked |= text.find(std::string(key)) != std::string::npos;
            leaks += leaked ? 1 : 0;
            if (p.control == ControlTag::ScrambledDecisiveField || p.control == ControlTag::ScrambledContext) {
                ++scrambled;
                scrambled_ok += p.field_event_id && *p.field_event_id != p.key.base_event ? 1 : 0;
            }
        }
    }
    // Dedicated scrambled constructions across all families.
    for (const auto& f : default_families(20)) {
        const auto pool = generate_events(f, 3);
        for (const auto& base : pool) {
            const auto p = apply_control(base, ControlTag::ScrambledDecisiveField, pool, nullptr, 3);
            ++scrambled;
            scrambled_ok += p.field_event_id && *p.field_event_id != p.key.base_event ? 1 : 0;
        }
    }

    // Remote run against a local endpoint with a canary key.
    const std::string canary = "sk-canary-" + std::to_string(::getpid()) + "-7f3a9c";
    csb::fake::FakeEndpoint server(canary);
    const auto dir = scratch("remote");
    ::setenv("CSB_API_KEY", canary.c_str(), 1);
    RunConfig cfg;
    cfg.families = default_families(2);
    cfg.replicates = 1;
    cfg.bootstrap_draws = 200;
    cfg.sufficiency.events_per_family = 2;
    cfg.backend = Backend::Remote;
    cfg.endpoint.base_url = server.base_url();
    cfg.endpoint.model = "local-test-model";
    cfg.endpoint.cache_dir = (dir / "cache").string();
    Runner(cfg, dir).run();
    ::unsetenv("CSB_API_KEY");
    std::size_t files = 0, canary_hits = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        ++files;
        canary_hits += read_file(e.path().string()).find(canary) != std::string::npos ? 1 : 0;
    }
    fs::remove_all(dir);
    d = std::to_string(leaks) + "/" + std::to_string(prompts) + " prompts leak, scrambled foreign " + std::to_string(scrambled_ok) +
        "/" + std::to_string(scrambled) + ", canary in " + std::to_string(canary_hits) + "/" + std::to_string(files) +
        " files after " + std::to_string(server.calls()) + " endpoint calls";
    return prompts > 0 && leaks == 0 && scrambled > 0 && scrambled_ok == scrambled && files > 0 && canary_hits == 0 &&
           server.calls() > 0;
}

bool c12(const DefaultRun& first, std::string& d) {
    const auto second = default_run("det");
    const auto a = read_file((first.dir / "manifest.json").string());
    const auto b = read_file((second.dir / "manifest.json").string());
    const auto m = json::parse(b).get<Manifest>();
    const auto bad = m.verify(second.dir);
    d = "manifest sha256 " + sha256_hex(a).substr(0, 16) + " vs " + sha256_hex(b).substr(0, 16) + ", " +
        std::to_string(m.files.size()) + " artifacts, " + std::to_string(bad.size()) + " failing verification";
    fs::remove_all(second.dir);
    return a == b && bad.empty();
}

}  // namespace

int main() {
    criterion(1, "composite identity", c1);
    criterion(2, "AFCI identity", c2);
    criterion(3, "exact sign test", c3);
    criterion(4, "bootstrap against enumeration", c4);
    DefaultRun run;
    bool run_ok = true;
    try {
        run = default_run("sim");
    } catch (const std::exception& e) {
        run_ok = false;
        std::cout << "default simulated run failed: " << e.what() << std::endl;
    }
    criterion(5, "simulated-family signature", [&](std::string& d) { return run_ok && c5(run, d); });
    criterion(6, "entropy and calibration gap", c6);
    criterion(7, "control-binding wrapper", c7);
    criterion(8, "recovery fraction", c8);
    criterion(9, "AUC and grouped CV", c9);
    criterion(10, "matching gate", c10);
    criterion(11, "hygiene", [&](std::string& d) { return run_ok && c11(run, d); });
    criterion(12, "determinism", [&](std::string& d) { return run_ok && c12(run, d); });
    fs::remove_all(run.dir);
    std::cout << (failures == 0 ? "all criteria pass" : std::to_string(failures) + " criteria fail") << std::endl;
    return failures == 0 ? 0 : 1;
}
