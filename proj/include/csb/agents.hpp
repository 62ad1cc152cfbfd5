#pragma once

// Agent variants, the simulated reference policy, and an HTTP chat-endpoint
// adapter with retries and a response cache.

#include "csb/ontology.hpp"
#include "csb/records.hpp"
#include "csb/util.hpp"

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>

namespace csb {

/// Component vector of an agent variant plus simulation knobs.
struct VariantSpec {
    std::string variant_id;
    int branch = 0;
    int self_state = 0;
    int memory = 0;
    int reason = 0;
    int veto = 0;
    double temperature = 0.0;
    double top_p = 1.0;
    // Probability that the simulated policy follows a decisive field from a
    // different event instead of falling back to its first impulse.
    double foreign_follow_rate = 1.0;
    Provenance trace_source = Provenance::Generated;
    ControlTag control = ControlTag::Structured;

    bool stochastic() const noexcept { return temperature >= 0.9; }

    bool enables(Component c) const noexcept {
        switch (c) {
            case Component::Reason: return reason == 1;
            case Component::Memory: return memory == 1;
            case Component::Veto: return veto == 1;
            case Component::Self: return self_state == 1;
        }
        return false;
    }

    void validate() const {
        for (int flag : {branch, self_state, memory, reason, veto})
            if (flag != 0 && flag != 1)
                throw Error("config", "variant " + variant_id + " has a component flag outside {0,1}");
        if (!(temperature >= 0.0)) throw Error("config", "variant " + variant_id + " has negative temperature");
        if (!(foreign_follow_rate >= 0.0 && foreign_follow_rate <= 1.0))
            throw Error("config", "variant " + variant_id + " has foreign_follow_rate outside [0,1]");
        if (variant_id.empty() || variant_id.find('/') != std::string::npos)
            throw Error("config", "variant id must be non-empty and contain no '/'");
    }

    bool operator==(const VariantSpec&) const = default;
};

inline VariantSpec variant_a4() { return {"A4", 1, 1, 1, 1, 1, 0.2}; }
inline VariantSpec variant_a5() {
    VariantSpec v{"A5", 1, 0, 0, 0, 0, 0.9};
    v.trace_source = Provenance::Absent;
    v.control = ControlTag::StochasticFull;
    return v;
}

/// Named presets; unknown names are a configuration defect.
inline VariantSpec variant_preset(std::string_view name) {
    VariantSpec v = variant_a4();
    if (name == "A4") return v;
    if (name == "A5") return variant_a5();
    v.variant_id = std::string(name);
    if (name == "A4_no_reason") v.reason = 0;
    else if (name == "A4_no_veto") v.veto = 0;
    else if (name == "A4_no_memory") v.memory = 0;
    else if (name == "A4_no_self") v.self_state = 0;
    else if (name == "A4_skeptical") v.foreign_follow_rate = 0.5;
    else if (name == "A4_posthoc_fields") v.trace_source = Provenance::Posthoc;
    else if (name == "A4_scrambled_fields") v.trace_source = Provenance::Scrambled;
    else if (name == "A4_random_fields") v.trace_source = Provenance::Random;
    else throw Error("config", "unknown variant preset '" + std::string(name) + "'");
    return v;
}

inline void to_json(json& j, const VariantSpec& v) {
    j = json{{"variant_id", v.variant_id},   {"branch", v.branch},
             {"self_state", v.self_state},   {"memory", v.memory},
             {"reason", v.reason},           {"veto", v.veto},
             {"temperature", v.temperature}, {"top_p", v.top_p},
             {"foreign_follow_rate", v.foreign_follow_rate},
             {"trace_source", to_string(v.trace_source)},
             {"control", to_string(v.control)}};
}
inline void from_json(const json& j, VariantSpec& v) {
    if (j.is_string()) {
        v = variant_preset(j.get<std::string>());
        return;
    }
    v.variant_id = detail::get_field<std::string>(j, "variant_id");
    v.branch = j.value("branch", 0);
    v.self_state = j.value("self_state", 0);
    v.memory = j.value("memory", 0);
    v.reason = j.value("reason", 0);
    v.veto = j.value("veto", 0);
    v.temperature = j.value("temperature", 0.0);
    v.top_p = j.value("top_p", 1.0);
    v.foreign_follow_rate = j.value("foreign_follow_rate", 1.0);
    v.trace_source = provenance_from_string(j.value("trace_source", std::string("generated")));
    v.control = control_from_string(j.value("control", std::string("structured")));
    v.validate();
}

struct AgentResponse {
    std::string raw_output;
    std::optional<TraceBundle> trace;
    ProviderMeta meta;
    ParseStatus status = ParseStatus::Ok;
    std::optional<std::string> diagnostic;

    bool operator==(const AgentResponse&) const = default;
};

// ---------------------------------------------------------------------------
// Simulated reference policy

struct SimulationSettings {
    // Probability that a stochastic variant emits free text outside the ontology.
    double unmapped_noise = 0.02;
    int max_memory_depth = 10;
};

namespace detail {

inline constexpr std::array<std::string_view, 4> kNoiseOutputs = {
    "unclear, more context needed", "no decision reached", "[garbled output]", "the situation seems complicated"};

inline std::string action_phrase(ActionCode a) {
    switch (a) {
        case ActionCode::ActionA: return "option A";
        case ActionCode::ActionB: return "option B";
        case ActionCode::Veto: return "veto";
        case ActionCode::Defer: return "defer";
        case ActionCode::RecallPrior: return "recall the prior commitment";
        case ActionCode::InvalidOrUnmapped: return "nothing";
    }
    return "nothing";
}

inline std::string stochastic_rendering(ActionCode a, Rng& rng) {
    switch (rng.below(3)) {
        case 0: return std::string(to_string(a));
        case 1: return "final_action: " + std::string(to_string(a));
        default: return "I will go with " + action_phrase(a) + ".";
    }
}

inline long long token_count(std::string_view text) { return static_cast<long long>(normalize_tokens(text).size()); }

inline TraceBundle simulated_trace(const ProbeRecord& probe, const VariantSpec& v, ActionCode action,
                                   bool field_current, int max_depth) {
    TraceBundle t;
    const auto& spec = condition_spec(probe.condition);
    const auto& field = probe.decisive_field;
    const std::string code(to_string(action));
    t.first_impulse = std::string(to_string(probe.expected_before));
    if (v.branch)
        for (ActionCode a : spec.valid_codes) t.candidate_actions.emplace_back(to_string(a));
    else
        t.candidate_actions.push_back(code);
    if (v.reason) {
        if (field && field_current && field->kind == Component::Reason)
            t.reason_graph = {field->text, "this reason supports " + code};
        else
            t.reason_graph = {"weighed the visible context"};
    }
    if (v.memory) {
        if (field && field_current && field->kind == Component::Memory)
            t.memory_trace = {field->text};
        else
            t.memory_trace = {"no conflicting memory on record"};
        t.memory_trace.emplace_back("episode log consulted");
        if (static_cast<int>(t.memory_trace.size()) > max_depth) t.memory_trace.resize(static_cast<std::size_t>(max_depth));
    }
    if (v.self_state) {
        t.self_state.identity_weight = 0.8;
        t.self_state.continuity_weight = 0.7;
        if (field && field_current && field->kind == Component::Self) t.self_state.commitment = field->text;
    }
    if (v.veto) {
        t.veto_state.applied = action == ActionCode::Veto;
        t.veto_state.rationale = t.veto_state.applied ? "constraint blocks the step" : "no blocking constraint";
    }
    t.final_action = code;
    t.final_action_rationale = "selected " + code;
    auto tag = [&](std::string_view name, bool emitted) {
        t.provenance[std::string(name)] = emitted ? v.trace_source : Provenance::Absent;
    };
    tag("first_impulse", true);
    tag("candidate_actions", true);
    tag("reason_graph", v.reason == 1);
    tag("memory_trace", v.memory == 1);
    tag("self_state", v.self_state == 1);
    tag("veto_state", v.veto == 1);
    tag("final_action", true);
    return t;
}

}  // namespace detail

/// Deterministic reference agent: a pure function of (probe, variant, seed).
///
/// Low-temperature variants follow the visible decisive field when the
/// component it exercises is enabled, fall back to the first impulse when the
/// field is absent, lesioned or its component is disabled, and follow a field
/// from a different event with probability `foreign_follow_rate`. An exposed
/// prior action (prior controls) is emitted as-is. Stochastic variants draw
/// uniformly over the condition's valid codes, with a small free-text channel.
inline AgentResponse simulated_agent(const ProbeRecord& probe, const VariantSpec& variant, std::uint64_t seed,
                                     const SimulationSettings& settings = {}) {
    variant.validate();
    Rng rng(derive_seed(seed, "agent/" + variant.variant_id + "/" + probe.key.str()));
    const auto& spec = condition_spec(probe.condition);
    AgentResponse resp;
    std::optional<ActionCode> action;
    bool field_current = false;

    if (variant.stochastic()) {
        if (rng.bernoulli(settings.unmapped_noise)) {
            resp.raw_output = std::string(detail::kNoiseOutputs[rng.below(detail::kNoiseOutputs.size())]);
        } else {
            action = spec.valid_codes[rng.below(spec.valid_codes.size())];
            resp.raw_output = detail::stochastic_rendering(*action, rng);
        }
    } else {
        const auto& field = probe.decisive_field;
        const ActionCode implied = field ? canonicalize(field->text) : ActionCode::InvalidOrUnmapped;
        field_current = field && probe.field_event_id && *probe.field_event_id == probe.key.base_event;
        if (!field && probe.prior_action) {
            action = *probe.prior_action;
        } else if (!field || implied == ActionCode::InvalidOrUnmapped) {
            action = probe.expected_before;
        } else if (!field_current) {
            action = rng.bernoulli(variant.foreign_follow_rate) ? implied : probe.expected_before;
        } else if (!variant.enables(field->kind)) {
            action = probe.expected_before;
        } else {
            action = implied;
        }
        resp.raw_output = "final_action: " + std::string(to_string(*action));
    }

    if (variant.trace_source != Provenance::Absent)
        resp.trace = detail::simulated_trace(probe, variant, action.value_or(ActionCode::InvalidOrUnmapped),
                                             field_current, settings.max_memory_depth);

    resp.meta.prompt_tokens = detail::token_count(probe.visible_prompt.dump());
    resp.meta.completion_tokens = detail::token_count(resp.raw_output);
    resp.meta.total_tokens = resp.meta.prompt_tokens + resp.meta.completion_tokens;
    resp.meta.latency_ms = 400.0 + 5.0 * static_cast<double>(resp.meta.completion_tokens) +
                           static_cast<double>(rng.below(50));
    resp.meta.temperature = variant.temperature;
    resp.meta.top_p = variant.top_p;
    return resp;
}

// ---------------------------------------------------------------------------
// Remote chat endpoint

struct EndpointConfig {
    std::string base_url;  // scheme://host[:port]
    std::string path = "/v1/chat/completions";
    std::string model;
    double timeout_s = 60.0;
    int max_in_flight = 4;
    std::string api_key_env = "CSB_API_KEY";
    std::string api_key_file;
    int max_retries = 3;
    double backoff_base_s = 1.0;
    double backoff_factor = 4.0;
    std::string cache_dir;

    std::string identity() const { return base_url + path + "#" + model; }
};

inline void to_json(json& j, const EndpointConfig& e) {
    j = json{{"base_url", e.base_url},       {"path", e.path},
             {"model", e.model},             {"timeout_s", e.timeout_s},
             {"max_in_flight", e.max_in_flight}, {"api_key_env", e.api_key_env},
             {"api_key_file", e.api_key_file}, {"max_retries", e.max_retries},
             {"backoff_base_s", e.backoff_base_s}, {"backoff_factor", e.backoff_factor},
             {"cache_dir", e.cache_dir}};
}
inline void from_json(const json& j, EndpointConfig& e) {
    e.base_url = j.value("base_url", "");
    e.path = j.value("path", std::string("/v1/chat/completions"));
    e.model = j.value("model", "");
    e.timeout_s = j.value("timeout_s", 60.0);
    e.max_in_flight = j.value("max_in_flight", 4);
    e.api_key_env = j.value("api_key_env", std::string("CSB_API_KEY"));
    e.api_key_file = j.value("api_key_file", "");
    e.max_retries = j.value("max_retries", 3);
    e.backoff_base_s = j.value("backoff_base_s", 1.0);
    e.backoff_factor = j.value("backoff_factor", 4.0);
    e.cache_dir = j.value("cache_dir", "");
}

/// Loads the API key from the environment variable, then the private file.
/// Fails naming both sources when neither yields a key.
inline std::string load_credentials(const EndpointConfig& cfg) {
    if (!cfg.api_key_env.empty()) {
        if (const char* v = std::getenv(cfg.api_key_env.c_str()); v && *v) return v;
    }
    if (!cfg.api_key_file.empty()) {
        std::ifstream f(cfg.api_key_file);
        std::string key;
        if (f && std::getline(f, key)) {
            while (!key.empty() && (key.back() == '\r' || key.back() == ' ')) key.pop_back();
            if (!key.empty()) return key;
        }
    }
    throw Error("credentials", "no API key: environment variable '" + cfg.api_key_env + "' is unset and key file '" +
                                   (cfg.api_key_file.empty() ? std::string("<none configured>") : cfg.api_key_file) +
                                   "' is absent or empty");
}

inline constexpr std::string_view kSystemInstruction =
    "You are choosing one action for the task described in the user message. "
    "Reply with a compact JSON object holding \"final_action\" (one of the allowed action codes) and \"rationale\".";

class RemoteAgent {
public:
    using Sleeper = std::function<void(double seconds)>;

    explicit RemoteAgent(EndpointConfig cfg, Sleeper sleeper = {})
        : cfg_(std::move(cfg)), api_key_(load_credentials(cfg_)), sleeper_(std::move(sleeper)) {
        if (cfg_.base_url.empty()) throw Error("config", "remote endpoint base_url is empty");
        if (!sleeper_)
            sleeper_ = [](double s) { std::this_thread::sleep_for(std::chrono::duration<double>(s)); };
    }

    std::string cache_key(const ProbeRecord& probe, double temperature, std::uint64_t seed) const {
        return sha256_hex(sha256_hex(probe.visible_prompt.dump()) + "|" + cfg_.identity() + "|" +
                          fmt_fixed(temperature, 6) + "|" + std::to_string(seed));
    }

    AgentResponse call(const ProbeRecord& probe, double temperature, double top_p, std::uint64_t seed) {
        const auto key = cache_key(probe, temperature, seed);
        if (auto hit = cache_get(key)) return *hit;

        json body{{"model", cfg_.model},
                  {"temperature", temperature},
                  {"top_p", top_p},
                  {"seed", seed},
                  {"messages",
                   json::array({json{{"role", "system"}, {"content", kSystemInstruction}},
                                json{{"role", "user"}, {"content", probe.visible_prompt.dump()}}})}};
        const auto payload = body.dump();

        AgentResponse resp;
        resp.meta.temperature = temperature;
        resp.meta.top_p = top_p;
        std::string last_category = "transport";
        for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
            if (attempt > 0) {
                // Full jitter: uniform in [0, base * factor^(attempt-1)).
                Rng jitter(derive_seed(seed, key + "/retry/" + std::to_string(attempt)));
                double cap = cfg_.backoff_base_s;
                for (int i = 1; i < attempt; ++i) cap *= cfg_.backoff_factor;
                sleeper_(jitter.uniform() * cap);
            }
            auto outcome = attempt_once(payload, resp);
            if (outcome == Outcome::Done) {
                cache_put(key, resp);
                return resp;
            }
            last_category = resp.diagnostic.value_or("transport");
            if (outcome == Outcome::Fatal) break;
        }
        resp.status = ParseStatus::Unrecovered;
        resp.diagnostic = last_category;
        resp.raw_output.clear();
        return resp;
    }

    std::size_t network_calls() const noexcept { return network_calls_.load(); }
    const EndpointConfig& config() const noexcept { return cfg_; }

private:
    enum class Outcome { Done, Retry, Fatal };

    Outcome attempt_once(const std::string& payload, AgentResponse& resp) {
        httplib::Client client(cfg_.base_url);
        const auto secs = static_cast<time_t>(cfg_.timeout_s);
        const auto usecs = static_cast<time_t>((cfg_.timeout_s - static_cast<double>(secs)) * 1e6);
        client.set_connection_timeout(secs, usecs);
        client.set_read_timeout(secs, usecs);
        client.set_write_timeout(secs, usecs);
        httplib::Headers headers{{"Authorization", "Bearer " + api_key_}};
        const auto t0 = std::chrono::steady_clock::now();
        ++network_calls_;
        auto res = client.Post(cfg_.path, headers, payload, "application/json");
        resp.meta.latency_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        if (!res) {
            const auto err = res.error();
            resp.diagnostic = (err == httplib::Error::Read || err == httplib::Error::ConnectionTimeout) ? "timeout" : "transport";
            return Outcome::Retry;
        }
        if (res->status == 401 || res->status == 403) {
            resp.diagnostic = "auth";
            return Outcome::Fatal;
        }
        if (res->status == 429) {
            resp.diagnostic = "quota";
            return Outcome::Retry;
        }
        if (res->status >= 500) {
            resp.diagnostic = "server";
            return Outcome::Retry;
        }
        if (res->status != 200) {
            resp.diagnostic = "http_" + std::to_string(res->status);
            return Outcome::Fatal;
        }
        json envelope;
        try {
            envelope = json::parse(res->body);
        } catch (const json::exception&) {
            resp.diagnostic = "malformed_payload";
            return Outcome::Retry;
        }
        if (!envelope.is_object() || !envelope.contains("choices") || !envelope["choices"].is_array() ||
            envelope["choices"].empty()) {
            resp.diagnostic = "malformed_payload";
            return Outcome::Retry;
        }
        std::string content;
        try {
            content = envelope["choices"][0].at("message").at("content").get<std::string>();
        } catch (const json::exception&) {
            resp.diagnostic = "malformed_payload";
            return Outcome::Retry;
        }
        if (envelope.contains("usage") && envelope["usage"].is_object()) {
            const auto& u = envelope["usage"];
            resp.meta.prompt_tokens = std::max<long long>(0, u.value("prompt_tokens", 0LL));
            resp.meta.completion_tokens = std::max<long long>(0, u.value("completion_tokens", 0LL));
            resp.meta.total_tokens =
                std::max<long long>(0, u.value("total_tokens", resp.meta.prompt_tokens + resp.meta.completion_tokens));
        }
        parse_content(content, resp);
        return Outcome::Done;
    }

    // Provider content is expected to be a JSON object; anything else is a
    // parse error recorded with its category, not a transport failure.
    static void parse_content(const std::string& content, AgentResponse& resp) {
        resp.diagnostic.reset();
        json obj;
        try {
            obj = json::parse(content);
        } catch (const json::exception&) {
            resp.status = ParseStatus::ParseError;
            resp.diagnostic = "payload not json";
            resp.raw_output = content;
            return;
        }
        if (!obj.is_object()) {
            resp.status = ParseStatus::ParseError;
            resp.diagnostic = "payload not object";
            resp.raw_output = content;
            return;
        }
        if (!obj.contains("final_action") || !obj["final_action"].is_string() ||
            obj["final_action"].get<std::string>().empty()) {
            resp.status = ParseStatus::ParseError;
            resp.diagnostic = "missing final_action";
            resp.raw_output = content;
            return;
        }
        resp.status = ParseStatus::Ok;
        resp.raw_output = obj["final_action"].get<std::string>();
        if (obj.contains("trace") && obj["trace"].is_object()) {
            try {
                resp.trace = obj["trace"].get<TraceBundle>();
            } catch (const std::exception&) {
                resp.diagnostic = "trace not parseable";
            }
        }
    }

    std::optional<AgentResponse> cache_get(const std::string& key) {
        std::lock_guard lock(mu_);
        if (auto it = cache_.find(key); it != cache_.end()) return it->second;
        if (!cfg_.cache_dir.empty()) {
            const auto path = std::filesystem::path(cfg_.cache_dir) / (key + ".json");
            std::error_code ec;
            if (std::filesystem::exists(path, ec)) {
                try {
                    auto j = json::parse(read_file(path.string()));
                    AgentResponse r;
                    r.raw_output = j.at("raw_output").get<std::string>();
                    r.status = parse_status_from_string(j.at("status").get<std::string>());
                    r.meta = j.at("meta").get<ProviderMeta>();
                    if (!j["trace"].is_null()) r.trace = j["trace"].get<TraceBundle>();
                    if (!j["diagnostic"].is_null()) r.diagnostic = j["diagnostic"].get<std::string>();
                    cache_.emplace(key, r);
                    return r;
                } catch (const std::exception&) {
                    // A corrupt cache entry is treated as a miss.
                }
            }
        }
        return std::nullopt;
    }

    void cache_put(const std::string& key, const AgentResponse& r) {
        std::lock_guard lock(mu_);
        cache_[key] = r;
        if (cfg_.cache_dir.empty()) return;
        std::filesystem::create_directories(cfg_.cache_dir);
        json j{{"raw_output", r.raw_output},
               {"status", to_string(r.status)},
               {"meta", r.meta},
               {"trace", r.trace ? json(*r.trace) : json(nullptr)},
               {"diagnostic", r.diagnostic ? json(*r.diagnostic) : json(nullptr)}};
        write_file((std::filesystem::path(cfg_.cache_dir) / (key + ".json")).string(), j.dump());
    }

    EndpointConfig cfg_;
    std::string api_key_;
    Sleeper sleeper_;
    std::mutex mu_;
    std::unordered_map<std::string, AgentResponse> cache_;
    std::atomic<std::size_t> network_calls_{0};
};

}  // namespace csb
