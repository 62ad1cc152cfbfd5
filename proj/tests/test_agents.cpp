#include "csb/agents.hpp"
#include "csb/probes.hpp"
#include "csb/scoring.hpp"
#include "fake_endpoint.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace csb;
namespace fs = std::filesystem;

namespace {

ProbeRecord probe_for(ConditionName c, int event = 0, int replicate = 0) {
    auto fam = default_families(event + 1).front();
    for (auto p : generate_events(fam, 1, {c}))
        if (p.key.base_event == detail::event_id(event)) {
            p.key.variant = "A4";
            p.key.replicate = replicate;
            return p;
        }
    throw std::logic_error("no probe");
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("csb_agents_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

EndpointConfig endpoint_for(const fake::FakeEndpoint& ep, const std::string& key_file) {
    EndpointConfig cfg;
    cfg.base_url = ep.base_url();
    cfg.model = "fake-model-1";
    cfg.timeout_s = 5;
    cfg.api_key_env = "CSB_TEST_KEY_NOT_SET";
    cfg.api_key_file = key_file;
    return cfg;
}

std::string key_file(const fs::path& dir, const std::string& key) {
    const auto p = (dir / "key.txt").string();
    write_file(p, key + "\n");
    return p;
}

}  // namespace

TEST(Variants, PresetsAndValidation) {
    EXPECT_EQ(variant_preset("A4"), variant_a4());
    EXPECT_EQ(variant_preset("A4_no_reason").reason, 0);
    EXPECT_EQ(variant_preset("A4_no_veto").veto, 0);
    EXPECT_TRUE(variant_a5().stochastic());
    EXPECT_FALSE(variant_a4().stochastic());
    EXPECT_THROW((void)variant_preset("A9"), Error);
    auto v = variant_a4();
    v.reason = 2;
    EXPECT_THROW(v.validate(), Error);
    EXPECT_EQ(json(variant_a5()).get<VariantSpec>(), variant_a5());
    EXPECT_EQ(json("A4_no_veto").get<VariantSpec>(), variant_preset("A4_no_veto"));
}

TEST(SimulatedAgent, StructuredFollowsDecisiveField) {
    EXPECT_EQ(canonicalize(simulated_agent(probe_for(ConditionName::VetoCue), variant_a4(), 1).raw_output), ActionCode::Veto);
    EXPECT_EQ(canonicalize(simulated_agent(probe_for(ConditionName::ReasonFlip), variant_a4(), 1).raw_output),
              ActionCode::ActionB);
    EXPECT_EQ(canonicalize(simulated_agent(probe_for(ConditionName::MemoryConflict), variant_a4(), 1).raw_output),
              ActionCode::RecallPrior);
}

TEST(SimulatedAgent, ReasonLesionStaysAtFirstImpulse) {
    const auto r = simulated_agent(probe_for(ConditionName::ReasonFlip), variant_preset("A4_no_reason"), 1);
    EXPECT_EQ(r.raw_output, "final_action: ACTION_A");
    // Other components still respond.
    EXPECT_EQ(canonicalize(simulated_agent(probe_for(ConditionName::VetoCue), variant_preset("A4_no_reason"), 1).raw_output),
              ActionCode::Veto);
}

TEST(SimulatedAgent, StochasticUniformOverValidCodes) {
    for (ConditionName c : kAllConditions) {
        const auto& spec = condition_spec(c);
        std::map<ActionCode, int> counts;
        int mapped = 0;
        const int draws = 6000;
        auto p = probe_for(c);
        for (int i = 0; i < draws; ++i) {
            p.key.replicate = i;
            const auto code = canonicalize(simulated_agent(p, variant_a5(), 99).raw_output);
            if (code == ActionCode::InvalidOrUnmapped) continue;
            ++counts[code];
            ++mapped;
        }
        EXPECT_NEAR(1.0 - mapped / double(draws), 0.02, 0.01) << to_string(c);
        for (ActionCode a : spec.valid_codes)
            EXPECT_NEAR(counts[a] / double(mapped), 1.0 / spec.valid_codes.size(), 0.02) << to_string(c) << " " << to_string(a);
        EXPECT_EQ(counts.size(), spec.valid_codes.size());
    }
}

TEST(SimulatedAgent, PureFunctionOfInputs) {
    const auto p = probe_for(ConditionName::VetoCue, 0, 2);
    EXPECT_EQ(simulated_agent(p, variant_a5(), 5), simulated_agent(p, variant_a5(), 5));
    EXPECT_EQ(simulated_agent(p, variant_a4(), 5), simulated_agent(p, variant_a4(), 5));
}

TEST(SimulatedAgent, TraceProvenanceFollowsVariant) {
    const auto p = probe_for(ConditionName::VetoCue);
    const auto r = simulated_agent(p, variant_preset("A4_scrambled_fields"), 1);
    ASSERT_TRUE(r.trace.has_value());
    EXPECT_EQ(r.trace->source_of("reason_graph"), Provenance::Scrambled);
    EXPECT_FALSE(simulated_agent(p, variant_a5(), 1).trace.has_value());
    EXPECT_EQ(simulated_agent(p, variant_a4(), 1).trace->source_of("final_action"), Provenance::Generated);
}

TEST(SimulatedAgent, ForeignFieldFollowRate) {
    const auto fam = default_families(40).front();
    const auto pool = generate_events(fam, 2);
    auto skeptical = variant_preset("A4_skeptical");
    int follow = 0, n = 0;
    for (const auto& p0 : pool) {
        auto p = apply_control(p0, ControlTag::ScrambledDecisiveField, pool, nullptr, 2);
        p.key.variant = skeptical.variant_id;
        const ActionCode foreign = canonicalize(p.decisive_field->text);
        if (foreign == p.expected_before) continue;  // following and falling back look the same
        follow += canonicalize(simulated_agent(p, skeptical, 2).raw_output) == foreign;
        ++n;
    }
    ASSERT_GT(n, 100);
    EXPECT_NEAR(follow / double(n), 0.5, 0.1);
}

TEST(Credentials, MissingSourcesNamed) {
    EndpointConfig cfg;
    cfg.base_url = "http://127.0.0.1:9";
    cfg.api_key_env = "CSB_TEST_KEY_NOT_SET";
    cfg.api_key_file = "/nonexistent/csb.key";
    try {
        RemoteAgent agent(cfg);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.category(), "credentials");
        const std::string msg = e.what();
        EXPECT_NE(msg.find("CSB_TEST_KEY_NOT_SET"), std::string::npos);
        EXPECT_NE(msg.find("/nonexistent/csb.key"), std::string::npos);
    }
}

TEST(RemoteAgent, ParsesResponseAndCaches) {
    const auto dir = scratch("cache");
    const std::string key = "sk-canary-7f3a9c";
    fake::FakeEndpoint ep(key);
    auto cfg = endpoint_for(ep, key_file(dir, key));
    cfg.cache_dir = (dir / "cache").string();
    const auto probe = probe_for(ConditionName::VetoCue);
    AgentResponse first;
    {
        RemoteAgent agent(cfg, [](double) {});
        first = agent.call(probe, 0.2, 1.0, 11);
        EXPECT_EQ(first.status, ParseStatus::Ok);
        EXPECT_EQ(first.raw_output, "VETO");
        EXPECT_EQ(first.meta.total_tokens, 46);
        EXPECT_EQ(agent.network_calls(), 1u);
        const auto again = agent.call(probe, 0.2, 1.0, 11);
        EXPECT_EQ(again, first);
        EXPECT_EQ(agent.network_calls(), 1u);
        // A different temperature is a different cache entry.
        (void)agent.call(probe, 0.9, 1.0, 11);
        EXPECT_EQ(agent.network_calls(), 2u);
    }
    RemoteAgent fresh(cfg, [](double) {});
    EXPECT_EQ(fresh.call(probe, 0.2, 1.0, 11), first);
    EXPECT_EQ(fresh.network_calls(), 0u);
    for (const auto& f : fs::recursive_directory_iterator(dir / "cache"))
        EXPECT_EQ(read_file(f.path().string()).find(key), std::string::npos);
}

TEST(RemoteAgent, MalformedPayloadsBecomeDiagnosticRows) {
    const auto dir = scratch("malformed");
    const std::string key = "k-123";
    auto base = fake::FakeEndpoint::default_handler();
    fake::FakeEndpoint ep(key, [base](const json& req, std::size_t i) {
        if (i == 100) return std::make_pair(200, fake::FakeEndpoint::envelope("this is not json"));
        if (i == 1500) return std::make_pair(200, fake::FakeEndpoint::envelope("{\"rationale\":\"no action\"}"));
        return base(req, i);
    });
    RemoteAgent agent(endpoint_for(ep, key_file(dir, key)), [](double) {});
    const auto fam = default_families(333).front();
    const auto probes = generate_events(fam, 4);
    std::vector<ScoredRecord> rows;
    std::map<std::string, int> diagnostics;
    for (std::size_t i = 0; i < 1995; ++i) {
        auto p = probes[i];
        p.key.variant = "remote";
        const auto r = agent.call(p, 0.2, 1.0, i);
        GenerationRecord g{p.key, r.raw_output, r.status, r.trace, r.meta, r.diagnostic, "fake-model-1", json::object()};
        if (r.diagnostic) ++diagnostics[*r.diagnostic];
        rows.push_back(score_behavior(g, p));
    }
    EXPECT_EQ(agent.network_calls(), 1995u);
    EXPECT_EQ(diagnostics["payload not json"], 1);
    EXPECT_EQ(diagnostics["missing final_action"], 1);
    int parse_errors = 0;
    for (const auto& r : rows) parse_errors += r.parse_error;
    EXPECT_EQ(parse_errors, 2);
    const auto table = component_scores(rows, "remote", fam.family_id);
    ASSERT_TRUE(table.composite().has_value());
    EXPECT_GT(*table.composite(), 0.99);
}

TEST(RemoteAgent, RetriesWithBoundedBackoff) {
    const auto dir = scratch("retry");
    const std::string key = "k";
    auto base = fake::FakeEndpoint::default_handler();
    fake::FakeEndpoint ep(key, [base](const json& req, std::size_t i) {
        if (i < 2) return std::make_pair(i == 0 ? 503 : 429, std::string("{}"));
        return base(req, i);
    });
    std::vector<double> sleeps;
    RemoteAgent agent(endpoint_for(ep, key_file(dir, key)), [&](double s) { sleeps.push_back(s); });
    const auto r = agent.call(probe_for(ConditionName::ReasonFlip), 0.2, 1.0, 3);
    EXPECT_EQ(r.status, ParseStatus::Ok);
    EXPECT_EQ(r.raw_output, "ACTION_B");
    EXPECT_EQ(agent.network_calls(), 3u);
    ASSERT_EQ(sleeps.size(), 2u);
    EXPECT_GE(sleeps[0], 0.0);
    EXPECT_LT(sleeps[0], 1.0);
    EXPECT_LT(sleeps[1], 4.0);
}

TEST(RemoteAgent, ExhaustedRetriesAreUnrecovered) {
    const auto dir = scratch("exhaust");
    fake::FakeEndpoint ep("k", [](const json&, std::size_t) { return std::make_pair(500, std::string("oops")); });
    RemoteAgent agent(endpoint_for(ep, key_file(dir, "k")), [](double) {});
    const auto r = agent.call(probe_for(ConditionName::Baseline), 0.2, 1.0, 1);
    EXPECT_EQ(r.status, ParseStatus::Unrecovered);
    EXPECT_EQ(r.diagnostic, "server");
    EXPECT_EQ(agent.network_calls(), 4u);
}

TEST(RemoteAgent, AuthFailureIsNotRetried) {
    const auto dir = scratch("auth");
    fake::FakeEndpoint ep("right-key");
    RemoteAgent agent(endpoint_for(ep, key_file(dir, "wrong-key")), [](double) {});
    const auto r = agent.call(probe_for(ConditionName::Baseline), 0.2, 1.0, 1);
    EXPECT_EQ(r.status, ParseStatus::Unrecovered);
    EXPECT_EQ(r.diagnostic, "auth");
    EXPECT_EQ(agent.network_calls(), 1u);
}

TEST(RemoteAgent, MalformedEnvelopeIsRetried) {
    const auto dir = scratch("envelope");
    fake::FakeEndpoint ep("k", [](const json&, std::size_t) { return std::make_pair(200, std::string("<html>")); });
    RemoteAgent agent(endpoint_for(ep, key_file(dir, "k")), [](double) {});
    const auto r = agent.call(probe_for(ConditionName::Baseline), 0.2, 1.0, 1);
    EXPECT_EQ(r.status, ParseStatus::Unrecovered);
    EXPECT_EQ(r.diagnostic, "malformed_payload");
}
