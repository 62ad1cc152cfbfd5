#include "csb/pipeline.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

using namespace csb;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("csb_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::size_t line_count(const fs::path& p) {
    std::istringstream in(read_file(p.string()));
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) n += line.empty() ? 0 : 1;
    return n;
}

RunConfig small_config() {
    RunConfig c;
    c.families = default_families(4);
    c.replicates = 1;
    c.bootstrap_draws = 200;
    c.sufficiency.events_per_family = 2;
    return c;
}

// One default-sized run shared by the report tests.
class FullRun : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new TempDir("full");
        RunConfig c;
        c.bootstrap_draws = 1000;
        Runner r(c, dir_->path);
        r.run();
    }
    static void TearDownTestSuite() {
        delete dir_;
        dir_ = nullptr;
    }
    static fs::path path(const std::string& rel) { return dir_->path / rel; }
    static TempDir* dir_;
};
TempDir* FullRun::dir_ = nullptr;

}  // namespace

TEST(Plan, DefaultSizeMatchesEnumeration) {
    const RunConfig c;
    EXPECT_EQ(planned_rows(c), 7u * 20u * 6u * 4u * 3u);
    EXPECT_EQ(planned_rows(c), 10080u);
    TempDir d("plan");
    Runner r(c, d.path);
    r.run("plan");
    EXPECT_EQ(line_count(d.path / "probes.jsonl"), 10080u);
    EXPECT_EQ(r.manifest().info.at("planned_rows").get<std::size_t>(), 10080u);
    for (const auto& p : read_jsonl<ProbeRecord>((d.path / "probes.jsonl").string())) ASSERT_FALSE(leaks_hidden_target(p));
}

TEST(Plan, ConfigRoundTrip) {
    auto c = small_config();
    c.controls = {ControlTag::NoFields, ControlTag::DistributionMatchedPrior};
    c.guard_visibility = GuardVisibility::PromptOnly;
    const auto back = json::parse(serialize_config(c)).get<RunConfig>();
    EXPECT_EQ(serialize_config(back), serialize_config(c));
}

TEST(Plan, InvalidConfigRejected) {
    auto c = small_config();
    c.replicates = 0;
    EXPECT_THROW(c.validate(), Error);
}

TEST(Plan, ShippedDataFilesLoad) {
    const auto families = load_families(std::string(CSB_SOURCE_DIR) + "/data/families.json");
    ASSERT_EQ(families.size(), 3u);
    auto c = small_config();
    c.families = families;
    EXPECT_NO_THROW(c.validate());
    EXPECT_GT(planned_rows(c), 0u);
    const auto ep = json::parse(read_file(std::string(CSB_SOURCE_DIR) + "/data/endpoint.example.json")).get<EndpointConfig>();
    EXPECT_EQ(ep.api_key_env, "CSB_API_KEY");
    EXPECT_EQ(ep.cache_dir, "cache");
    EXPECT_EQ(json(ep), json::parse(read_file(std::string(CSB_SOURCE_DIR) + "/data/endpoint.example.json")));
}

TEST(Pipeline, ScoredRowsMatchPlan) {
    TempDir d("scored");
    const auto c = small_config();
    Runner r(c, d.path);
    r.run();
    EXPECT_EQ(line_count(d.path / "scored.jsonl"), planned_rows(c));
    EXPECT_TRUE(r.manifest().verify(d.path.string()).empty());
}

TEST(Pipeline, RerunsAreByteIdentical) {
    TempDir a("det_a"), b("det_b");
    Runner(small_config(), a.path).run();
    Runner(small_config(), b.path).run();
    EXPECT_EQ(read_file((a.path / "manifest.json").string()), read_file((b.path / "manifest.json").string()));
    EXPECT_EQ(read_file((a.path / "report.md").string()), read_file((b.path / "report.md").string()));
}

TEST(Pipeline, ResumeMatchesUninterruptedRun) {
    TempDir whole("resume_whole");
    Runner(small_config(), whole.path).run();
    const auto expected = read_file((whole.path / "manifest.json").string());
    for (const auto* stop : {"plan", "generate", "score", "analyze"}) {
        TempDir part(std::string("resume_") + stop);
        Runner(small_config(), part.path).run(stop);
        EXPECT_FALSE(fs::exists(part.path / "report.md"));
        Runner(small_config(), part.path).run();
        EXPECT_EQ(read_file((part.path / "manifest.json").string()), expected) << "stopped after " << stop;
    }
}

TEST(Pipeline, TamperedArtifactIsRegenerated) {
    TempDir d("tamper");
    Runner(small_config(), d.path).run();
    const auto scored = read_file((d.path / "scored.jsonl").string());
    write_file((d.path / "scored.jsonl").string(), "{}\n");
    const auto m = json::parse(read_file((d.path / "manifest.json").string())).get<Manifest>();
    EXPECT_EQ(m.verify(d.path), std::vector<std::string>{"scored.jsonl"});
    Runner(small_config(), d.path).run();
    EXPECT_EQ(read_file((d.path / "scored.jsonl").string()), scored);
}

TEST(Pipeline, ChangedConfigInvalidatesStages) {
    TempDir d("reconfig");
    Runner(small_config(), d.path).run();
    auto c = small_config();
    c.master_seed += 1;
    std::ostringstream log;
    Runner(c, d.path, &log).run();
    EXPECT_EQ(log.str().find("up to date"), std::string::npos);
}

TEST(Pipeline, MissingArtifactsEnumerated) {
    TempDir d("missing");
    Runner r(small_config(), d.path);
    r.run();
    fs::remove(d.path / "contrasts.json");
    fs::remove(d.path / "entropy.json");
    try {
        r.run_stage("report");
        FAIL() << "report rendered without its inputs";
    } catch (const Error& e) {
        EXPECT_EQ(e.category(), "missing");
        const std::string msg = e.what();
        EXPECT_NE(msg.find("contrasts.json"), std::string::npos);
        EXPECT_NE(msg.find("entropy.json"), std::string::npos);
    }
    EXPECT_EQ(r.missing_artifacts("analyze").size(), 2u);
}

TEST(Pipeline, StageWithoutPlanFails) {
    TempDir d("noplan");
    Runner r(small_config(), d.path);
    EXPECT_THROW(r.run_stage("score"), Error);
}

TEST(Pipeline, IrrelevantConditionExcludedIsFlagged) {
    TempDir d("no_irr");
    auto c = small_config();
    c.conditions = {ConditionName::Baseline, ConditionName::ReasonFlip, ConditionName::MemoryConflict, ConditionName::VetoCue,
                    ConditionName::SelfContinuity};
    Runner(c, d.path).run();
    EXPECT_NE(read_file((d.path / "report.md").string()).find("irrelevant set empty"), std::string::npos);
}

TEST(Pipeline, ControlVariantsScored) {
    TempDir d("controls");
    auto c = small_config();
    c.controls = {ControlTag::NoFields, ControlTag::DistributionMatchedPrior};
    Runner r(c, d.path);
    r.run();
    std::set<std::string> variants;
    for (const auto& row : read_jsonl<ScoredRecord>((d.path / "scored.jsonl").string())) variants.insert(row.key.variant);
    EXPECT_TRUE(variants.count("ctl_no_fields"));
    EXPECT_TRUE(variants.count("ctl_distribution_matched_prior"));
    const auto contrasts = json::parse(read_file((d.path / "contrasts.json").string()));
    bool found = false;
    for (const auto& t : contrasts["contrasts"]) found |= t["name"] == "accuracy: A4 - ctl_no_fields";
    EXPECT_TRUE(found);
}

TEST_F(FullRun, ReportShowsPassingGates) {
    const auto report = read_file(path("report.md").string());
    EXPECT_NE(report.find("**PASS**"), std::string::npos);
    const auto gates = json::parse(read_file(path("gates.json").string()));
    EXPECT_TRUE(gates["ledger"]["pass"].get<bool>());
    EXPECT_GE(gates["ledger"]["entries"].size(), 5u);
    for (const auto& e : gates["ledger"]["entries"]) EXPECT_NE(report.find(e["name"].get<std::string>()), std::string::npos);
}

TEST_F(FullRun, RecoveryTableMatchesSummary) {
    const auto suff = json::parse(read_file(path("sufficiency.json").string()));
    ASSERT_TRUE(suff["enabled"].get<bool>());
    for (const auto& v : suff["variants"])
        for (const auto& [vis, s] : v["guard_visibility"].items()) {
            const auto expected = recovery_fraction(s["a_full"].get<double>(), s["a_only"].get<double>(), s["a_control"].get<double>());
            if (expected.value) EXPECT_NEAR(s["recovery_fraction"].get<double>(), *expected.value, 1e-12) << vis;
            else EXPECT_TRUE(s["recovery_fraction"].is_null());
        }
    EXPECT_NE(read_file(path("report.md").string()).find("recovery"), std::string::npos);
}

TEST_F(FullRun, ScrambledRowsPointElsewhere) {
    for (const auto& p : read_jsonl<ProbeRecord>(path("sufficiency_probes.jsonl").string()))
        if (p.control == ControlTag::ScrambledDecisiveField) {
            ASSERT_TRUE(p.field_event_id.has_value());
            EXPECT_NE(*p.field_event_id, p.key.base_event);
        }
}

#ifdef CSB_CLI_PATH
TEST(Cli, RemoteWithoutCredentialsStopsBeforeGeneration) {
    TempDir d("cli_remote");
    const std::string cmd = "env -u CSB_API_KEY " + std::string(CSB_CLI_PATH) + " run --backend remote --endpoint http://127.0.0.1:9 --out " +
                            d.path.string() + " > " + (d.path / "stderr.txt").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    ASSERT_TRUE(WIFEXITED(status));
    EXPECT_EQ(WEXITSTATUS(status), 2);
    EXPECT_FALSE(fs::exists(d.path / "generations.jsonl"));
    const auto err = read_file((d.path / "stderr.txt").string());
    EXPECT_NE(err.find("credentials"), std::string::npos);
    EXPECT_NE(err.find("CSB_API_KEY"), std::string::npos);
}

TEST(Cli, PlanWritesConfig) {
    TempDir d("cli_plan");
    const std::string cmd = std::string(CSB_CLI_PATH) + " plan --events 2 --replicates 1 --out " + d.path.string() + " 2>/dev/null";
    ASSERT_EQ(std::system(cmd.c_str()), 0);
    const auto cfg = json::parse(read_file((d.path / "run_config.json").string())).get<RunConfig>();
    EXPECT_EQ(cfg.replicates, 1);
    EXPECT_EQ(line_count(d.path / "probes.jsonl"), planned_rows(cfg));
}
#endif
