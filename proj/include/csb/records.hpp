#pragma once

// Record types shared by every stage, their JSON forms, first-wins
// deduplication, and JSONL persistence with SHA-256 receipts.

#include "csb/ontology.hpp"
#include "csb/util.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

namespace csb {

using json = nlohmann::json;

struct RecordKey {
    std::string dataset;
    std::string base_event;
    std::string condition;
    std::string variant;
    int replicate = 0;

    std::string str() const {
        return dataset + "/" + base_event + "/" + condition + "/" + variant + "/" + std::to_string(replicate);
    }

    static RecordKey parse(std::string_view s) {
        std::vector<std::string> parts;
        std::size_t start = 0;
        for (;;) {
            const auto slash = s.find('/', start);
            parts.emplace_back(s.substr(start, slash == std::string_view::npos ? s.npos : slash - start));
            if (slash == std::string_view::npos) break;
            start = slash + 1;
        }
        if (parts.size() != 5) throw Error("schema", "record key must have five '/'-separated parts: " + std::string(s));
        RecordKey k{parts[0], parts[1], parts[2], parts[3], 0};
        try {
            std::size_t used = 0;
            k.replicate = std::stoi(parts[4], &used);
            if (used != parts[4].size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw Error("schema", "record key replicate is not an integer: " + std::string(s));
        }
        return k;
    }

    auto operator<=>(const RecordKey&) const = default;
};

enum class ControlTag : std::uint8_t {
    Structured,
    StochasticFull,
    NoFields,
    ScrambledContext,
    DistributionMatchedPrior,
    TargetLesion,
    StrictTargetLesion,
    EntropyPriorNoField,
    FullState,
    OnlyDecisiveField,
    SurfaceOnly,
    ActionPriorOnly,
    ScrambledDecisiveField,
    IrrelevantCueAdded,
};

inline constexpr std::array<ControlTag, 14> kAllControlTags = {
    ControlTag::Structured,         ControlTag::StochasticFull,     ControlTag::NoFields,
    ControlTag::ScrambledContext,   ControlTag::DistributionMatchedPrior, ControlTag::TargetLesion,
    ControlTag::StrictTargetLesion, ControlTag::EntropyPriorNoField, ControlTag::FullState,
    ControlTag::OnlyDecisiveField,  ControlTag::SurfaceOnly,        ControlTag::ActionPriorOnly,
    ControlTag::ScrambledDecisiveField, ControlTag::IrrelevantCueAdded};

constexpr std::string_view to_string(ControlTag t) noexcept {
    switch (t) {
        case ControlTag::Structured: return "structured";
        case ControlTag::StochasticFull: return "stochastic_full";
        case ControlTag::NoFields: return "no_fields";
        case ControlTag::ScrambledContext: return "scrambled_context";
        case ControlTag::DistributionMatchedPrior: return "distribution_matched_prior";
        case ControlTag::TargetLesion: return "target_lesion";
        case ControlTag::StrictTargetLesion: return "strict_target_lesion";
        case ControlTag::EntropyPriorNoField: return "entropy_prior_no_field";
        case ControlTag::FullState: return "full_state";
        case ControlTag::OnlyDecisiveField: return "only_decisive_field";
        case ControlTag::SurfaceOnly: return "surface_only";
        case ControlTag::ActionPriorOnly: return "action_prior_only";
        case ControlTag::ScrambledDecisiveField: return "scrambled_decisive_field";
        case ControlTag::IrrelevantCueAdded: return "irrelevant_cue_added";
    }
    return "structured";
}

inline ControlTag control_from_string(std::string_view s) {
    for (ControlTag t : kAllControlTags)
        if (to_string(t) == s) return t;
    throw Error("config", "unknown control tag '" + std::string(s) + "'");
}

/// A decisive piece of event state as the evaluator knows it. `event_ref_visible`
/// marks payloads whose prompt rendering names the originating event.
struct FieldPayload {
    Component kind = Component::Reason;
    std::string text;
    std::string source_event;
    bool event_ref_visible = false;

    bool operator==(const FieldPayload&) const = default;
};

struct ProbeRecord {
    RecordKey key;
    ConditionName condition = ConditionName::Baseline;
    ConditionClass condition_class = ConditionClass::Placebo;
    ControlTag control = ControlTag::Structured;
    json visible_prompt = json::object();
    ActionCode expected_before = ActionCode::ActionA;
    ActionCode expected_after = ActionCode::ActionA;
    std::optional<FieldPayload> decisive_field;
    std::optional<std::string> field_event_id;
    std::optional<ActionCode> prior_action;
    json extra = json::object();

    bool operator==(const ProbeRecord&) const = default;
};

enum class ParseStatus : std::uint8_t { Ok, ParseError, Unrecovered };

constexpr std::string_view to_string(ParseStatus p) noexcept {
    switch (p) {
        case ParseStatus::Ok: return "ok";
        case ParseStatus::ParseError: return "parse_error";
        case ParseStatus::Unrecovered: return "unrecovered";
    }
    return "ok";
}

inline ParseStatus parse_status_from_string(std::string_view s) {
    for (ParseStatus p : {ParseStatus::Ok, ParseStatus::ParseError, ParseStatus::Unrecovered})
        if (to_string(p) == s) return p;
    throw Error("schema", "unknown parse status '" + std::string(s) + "'");
}

enum class Provenance : std::uint8_t { Generated, Posthoc, Scrambled, Random, Absent };

constexpr std::string_view to_string(Provenance p) noexcept {
    switch (p) {
        case Provenance::Generated: return "generated";
        case Provenance::Posthoc: return "posthoc";
        case Provenance::Scrambled: return "scrambled";
        case Provenance::Random: return "random";
        case Provenance::Absent: return "absent";
    }
    return "absent";
}

inline Provenance provenance_from_string(std::string_view s) {
    for (Provenance p : {Provenance::Generated, Provenance::Posthoc, Provenance::Scrambled, Provenance::Random,
                         Provenance::Absent})
        if (to_string(p) == s) return p;
    throw Error("schema", "unknown provenance tag '" + std::string(s) + "'");
}

struct SelfState {
    double identity_weight = 0.0;
    double continuity_weight = 0.0;
    std::string commitment;

    bool operator==(const SelfState&) const = default;
};

struct VetoState {
    bool applied = false;
    std::string rationale;

    bool operator==(const VetoState&) const = default;
};

/// Matched-interface reporting schema emitted alongside the final action.
struct TraceBundle {
    std::string first_impulse;
    std::vector<std::string> candidate_actions;
    std::vector<std::string> reason_graph;
    std::vector<std::string> memory_trace;
    SelfState self_state;
    VetoState veto_state;
    std::string final_action;
    std::string final_action_rationale;
    std::map<std::string, Provenance> provenance;

    static constexpr std::array<std::string_view, 7> kFields = {"first_impulse", "candidate_actions", "reason_graph",
                                                                "memory_trace",  "self_state",        "veto_state",
                                                                "final_action"};

    Provenance source_of(std::string_view field) const {
        auto it = provenance.find(std::string(field));
        if (it == provenance.end()) throw Error("schema", "trace provenance missing for field '" + std::string(field) + "'");
        return it->second;
    }

    void validate() const {
        for (auto f : kFields) (void)source_of(f);
        auto in01 = [](double w) { return w >= 0.0 && w <= 1.0; };
        if (!in01(self_state.identity_weight) || !in01(self_state.continuity_weight))
            throw Error("schema", "self_state weights must lie in [0,1]");
    }

    bool operator==(const TraceBundle&) const = default;
};

struct ProviderMeta {
    long long prompt_tokens = 0;
    long long completion_tokens = 0;
    long long total_tokens = 0;
    double latency_ms = 0.0;
    double temperature = 0.0;
    double top_p = 1.0;

    bool operator==(const ProviderMeta&) const = default;
};

struct GenerationRecord {
    RecordKey key;
    std::string raw_output;
    ParseStatus parse_status = ParseStatus::Ok;
    std::optional<TraceBundle> trace;
    std::optional<ProviderMeta> provider_meta;
    std::optional<std::string> diagnostic;
    std::string model_id;
    json extra = json::object();

    bool operator==(const GenerationRecord&) const = default;
};

struct AfciTerms {
    double reason = 0.0;
    double memory = 0.0;
    double veto = 0.0;
    double self = 0.0;

    double composite() const noexcept { return (reason + memory + veto + self) / 4.0; }
    bool operator==(const AfciTerms&) const = default;
};

struct TraceMetrics {
    double sci = 0.0;
    double rsi = 0.0;
    double vei = 0.0;
    double aci = 0.0;

    double composite() const noexcept { return (sci + rsi + vei + aci) / 4.0; }
    bool operator==(const TraceMetrics&) const = default;
};

enum class GuardVerdict : std::uint8_t { Accepted, Corrected, Deferred, UnchangedNoField };

constexpr std::string_view to_string(GuardVerdict v) noexcept {
    switch (v) {
        case GuardVerdict::Accepted: return "accepted";
        case GuardVerdict::Corrected: return "corrected";
        case GuardVerdict::Deferred: return "deferred";
        case GuardVerdict::UnchangedNoField: return "unchanged_no_field";
    }
    return "accepted";
}

inline GuardVerdict guard_verdict_from_string(std::string_view s) {
    for (GuardVerdict v : {GuardVerdict::Accepted, GuardVerdict::Corrected, GuardVerdict::Deferred,
                           GuardVerdict::UnchangedNoField})
        if (to_string(v) == s) return v;
    throw Error("schema", "unknown guard verdict '" + std::string(s) + "'");
}

struct GuardDecision {
    ActionCode action_in = ActionCode::InvalidOrUnmapped;
    ActionCode action_out = ActionCode::InvalidOrUnmapped;
    GuardVerdict verdict = GuardVerdict::UnchangedNoField;
    std::string reason;

    bool operator==(const GuardDecision&) const = default;
};

struct ScoredRecord {
    RecordKey key;
    ConditionName condition = ConditionName::Baseline;
    ConditionClass condition_class = ConditionClass::Placebo;
    ControlTag control = ControlTag::Structured;
    ActionCode canonical_action = ActionCode::InvalidOrUnmapped;
    ActionCode expected_before = ActionCode::ActionA;
    ActionCode expected_after = ActionCode::ActionA;
    bool correct = false;
    bool unnecessary_change = false;
    bool unmapped = false;
    bool parse_error = false;
    std::string raw_output;
    std::optional<AfciTerms> afci_terms;
    std::optional<TraceMetrics> trace_metrics;
    std::optional<GuardDecision> guard;
    json extra = json::object();

    bool operator==(const ScoredRecord&) const = default;
};

// ---------------------------------------------------------------------------
// JSON forms. Objects use nlohmann's default sorted map, so field order is
// stable. Unknown fields read from disk land in `extra` and are re-emitted.

namespace detail {

inline json take_extra(const json& j, std::initializer_list<std::string_view> known) {
    json extra = json::object();
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool is_known = false;
        for (auto k : known) is_known = is_known || it.key() == k;
        if (!is_known) extra[it.key()] = it.value();
    }
    return extra;
}

inline void merge_extra(json& j, const json& extra) {
    for (auto it = extra.begin(); it != extra.end(); ++it)
        if (!j.contains(it.key())) j[it.key()] = it.value();
}

template <class T>
T get_field(const json& j, const char* name) {
    if (!j.contains(name)) throw Error("schema", std::string("missing field '") + name + "'");
    try {
        return j.at(name).get<T>();
    } catch (const json::exception& e) {
        throw Error("schema", std::string("field '") + name + "': " + e.what());
    }
}

}  // namespace detail

inline void to_json(json& j, const RecordKey& k) { j = k.str(); }
inline void from_json(const json& j, RecordKey& k) { k = RecordKey::parse(j.get<std::string>()); }

inline void to_json(json& j, const FieldPayload& f) {
    j = json{{"kind", to_string(f.kind)},
             {"text", f.text},
             {"source_event", f.source_event},
             {"event_ref_visible", f.event_ref_visible}};
}
inline void from_json(const json& j, FieldPayload& f) {
    f.kind = component_from_string(detail::get_field<std::string>(j, "kind"));
    f.text = detail::get_field<std::string>(j, "text");
    f.source_event = detail::get_field<std::string>(j, "source_event");
    f.event_ref_visible = j.value("event_ref_visible", false);
}

inline void to_json(json& j, const ProbeRecord& p) {
    j = json{{"key", p.key},
             {"condition", to_string(p.condition)},
             {"condition_class", to_string(p.condition_class)},
             {"control", to_string(p.control)},
             {"visible_prompt", p.visible_prompt},
             {"expected_before", to_string(p.expected_before)},
             {"expected_after", to_string(p.expected_after)}};
    j["decisive_field"] = p.decisive_field ? json(*p.decisive_field) : json(nullptr);
    j["field_event_id"] = p.field_event_id ? json(*p.field_event_id) : json(nullptr);
    j["prior_action"] = p.prior_action ? json(to_string(*p.prior_action)) : json(nullptr);
    detail::merge_extra(j, p.extra);
}
inline void from_json(const json& j, ProbeRecord& p) {
    p.key = detail::get_field<RecordKey>(j, "key");
    p.condition = condition_from_string(detail::get_field<std::string>(j, "condition"));
    p.condition_class = condition_class_from_string(detail::get_field<std::string>(j, "condition_class"));
    p.control = control_from_string(detail::get_field<std::string>(j, "control"));
    p.visible_prompt = j.at("visible_prompt");
    p.expected_before = action_from_string(detail::get_field<std::string>(j, "expected_before"));
    p.expected_after = action_from_string(detail::get_field<std::string>(j, "expected_after"));
    p.decisive_field.reset();
    if (j.contains("decisive_field") && !j["decisive_field"].is_null()) p.decisive_field = j["decisive_field"].get<FieldPayload>();
    p.field_event_id.reset();
    if (j.contains("field_event_id") && !j["field_event_id"].is_null()) p.field_event_id = j["field_event_id"].get<std::string>();
    p.prior_action.reset();
    if (j.contains("prior_action") && !j["prior_action"].is_null())
        p.prior_action = action_from_string(j["prior_action"].get<std::string>());
    p.extra = detail::take_extra(j, {"key", "condition", "condition_class", "control", "visible_prompt", "expected_before",
                                     "expected_after", "decisive_field", "field_event_id", "prior_action"});
}

inline void to_json(json& j, const TraceBundle& t) {
    json prov = json::object();
    for (const auto& [field, tag] : t.provenance) prov[field] = to_string(tag);
    j = json{{"first_impulse", t.first_impulse},
             {"candidate_actions", t.candidate_actions},
             {"reason_graph", t.reason_graph},
             {"memory_trace", t.memory_trace},
             {"self_state",
              {{"identity_weight", t.self_state.identity_weight},
               {"continuity_weight", t.self_state.continuity_weight},
               {"commitment", t.self_state.commitment}}},
             {"veto_state", {{"applied", t.veto_state.applied}, {"rationale", t.veto_state.rationale}}},
             {"final_action", t.final_action},
             {"final_action_rationale", t.final_action_rationale},
             {"provenance", prov}};
}
inline void from_json(const json& j, TraceBundle& t) {
    t.first_impulse = j.value("first_impulse", "");
    t.candidate_actions = j.value("candidate_actions", std::vector<std::string>{});
    t.reason_graph = j.value("reason_graph", std::vector<std::string>{});
    t.memory_trace = j.value("memory_trace", std::vector<std::string>{});
    t.self_state = {};
    if (j.contains("self_state") && j["self_state"].is_object()) {
        const auto& s = j["self_state"];
        t.self_state.identity_weight = s.value("identity_weight", 0.0);
        t.self_state.continuity_weight = s.value("continuity_weight", 0.0);
        t.self_state.commitment = s.value("commitment", "");
    }
    t.veto_state = {};
    if (j.contains("veto_state") && j["veto_state"].is_object()) {
        t.veto_state.applied = j["veto_state"].value("applied", false);
        t.veto_state.rationale = j["veto_state"].value("rationale", "");
    }
    t.final_action = j.value("final_action", "");
    t.final_action_rationale = j.value("final_action_rationale", "");
    t.provenance.clear();
    if (j.contains("provenance") && j["provenance"].is_object())
        for (auto it = j["provenance"].begin(); it != j["provenance"].end(); ++it)
            t.provenance[it.key()] = provenance_from_string(it.value().get<std::string>());
}

inline void to_json(json& j, const ProviderMeta& m) {
    j = json{{"prompt_tokens", m.prompt_tokens}, {"completion_tokens", m.completion_tokens},
             {"total_tokens", m.total_tokens},   {"latency_ms", m.latency_ms},
             {"temperature", m.temperature},     {"top_p", m.top_p}};
}
inline void from_json(const json& j, ProviderMeta& m) {
    auto tokens = [&](const char* name) {
        const auto& v = j.at(name);
        if (!v.is_number_integer() || v.get<long long>() < 0)
            throw Error("schema", std::string("provider_meta.") + name + " must be a non-negative integer");
        return v.get<long long>();
    };
    m.prompt_tokens = tokens("prompt_tokens");
    m.completion_tokens = tokens("completion_tokens");
    m.total_tokens = tokens("total_tokens");
    m.latency_ms = j.value("latency_ms", 0.0);
    m.temperature = j.value("temperature", 0.0);
    m.top_p = j.value("top_p", 1.0);
}

inline void to_json(json& j, const GenerationRecord& g) {
    j = json{{"key", g.key},
             {"raw_output", g.raw_output},
             {"parse_status", to_string(g.parse_status)},
             {"model_id", g.model_id}};
    j["trace"] = g.trace ? json(*g.trace) : json(nullptr);
    j["provider_meta"] = g.provider_meta ? json(*g.provider_meta) : json(nullptr);
    j["diagnostic"] = g.diagnostic ? json(*g.diagnostic) : json(nullptr);
    detail::merge_extra(j, g.extra);
}
inline void from_json(const json& j, GenerationRecord& g) {
    g.key = detail::get_field<RecordKey>(j, "key");
    g.raw_output = detail::get_field<std::string>(j, "raw_output");
    g.parse_status = parse_status_from_string(detail::get_field<std::string>(j, "parse_status"));
    g.model_id = j.value("model_id", "");
    g.trace.reset();
    if (j.contains("trace") && !j["trace"].is_null()) g.trace = j["trace"].get<TraceBundle>();
    g.provider_meta.reset();
    if (j.contains("provider_meta") && !j["provider_meta"].is_null()) g.provider_meta = j["provider_meta"].get<ProviderMeta>();
    g.diagnostic.reset();
    if (j.contains("diagnostic") && !j["diagnostic"].is_null()) g.diagnostic = j["diagnostic"].get<std::string>();
    if (g.parse_status == ParseStatus::Ok && g.raw_output.empty())
        throw Error("schema", "generation " + g.key.str() + " has parse_status ok but empty raw_output");
    g.extra = detail::take_extra(j, {"key", "raw_output", "parse_status", "model_id", "trace", "provider_meta", "diagnostic"});
}

inline void to_json(json& j, const GuardDecision& d) {
    j = json{{"action_in", to_string(d.action_in)},
             {"action_out", to_string(d.action_out)},
             {"verdict", to_string(d.verdict)},
             {"reason", d.reason}};
}
inline void from_json(const json& j, GuardDecision& d) {
    d.action_in = action_from_string(detail::get_field<std::string>(j, "action_in"));
    d.action_out = action_from_string(detail::get_field<std::string>(j, "action_out"));
    d.verdict = guard_verdict_from_string(detail::get_field<std::string>(j, "verdict"));
    d.reason = j.value("reason", "");
}

inline void to_json(json& j, const ScoredRecord& s) {
    j = json{{"key", s.key},
             {"condition", to_string(s.condition)},
             {"condition_class", to_string(s.condition_class)},
             {"control", to_string(s.control)},
             {"canonical_action", to_string(s.canonical_action)},
             {"expected_before", to_string(s.expected_before)},
             {"expected_after", to_string(s.expected_after)},
             {"correct", s.correct ? 1 : 0},
             {"unnecessary_change", s.unnecessary_change ? 1 : 0},
             {"unmapped", s.unmapped ? 1 : 0},
             {"parse_error", s.parse_error ? 1 : 0},
             {"raw_output", s.raw_output}};
    if (s.afci_terms)
        j["afci_terms"] = {{"R", s.afci_terms->reason},
                           {"M", s.afci_terms->memory},
                           {"Q", s.afci_terms->veto},
                           {"S", s.afci_terms->self}};
    else
        j["afci_terms"] = nullptr;
    if (s.trace_metrics)
        j["trace_metrics"] = {{"sci", s.trace_metrics->sci},
                              {"rsi", s.trace_metrics->rsi},
                              {"vei", s.trace_metrics->vei},
                              {"aci", s.trace_metrics->aci}};
    else
        j["trace_metrics"] = nullptr;
    if (s.guard) j["guard"] = *s.guard;
    detail::merge_extra(j, s.extra);
}
inline void from_json(const json& j, ScoredRecord& s) {
    s.key = detail::get_field<RecordKey>(j, "key");
    s.condition = condition_from_string(detail::get_field<std::string>(j, "condition"));
    s.condition_class = condition_class_from_string(detail::get_field<std::string>(j, "condition_class"));
    s.control = control_from_string(detail::get_field<std::string>(j, "control"));
    s.canonical_action = action_from_string(detail::get_field<std::string>(j, "canonical_action"));
    s.expected_before = action_from_string(detail::get_field<std::string>(j, "expected_before"));
    s.expected_after = action_from_string(detail::get_field<std::string>(j, "expected_after"));
    s.correct = detail::get_field<int>(j, "correct") != 0;
    s.unnecessary_change = detail::get_field<int>(j, "unnecessary_change") != 0;
    s.unmapped = detail::get_field<int>(j, "unmapped") != 0;
    s.parse_error = detail::get_field<int>(j, "parse_error") != 0;
    s.raw_output = j.value("raw_output", "");
    s.afci_terms.reset();
    if (j.contains("afci_terms") && !j["afci_terms"].is_null()) {
        const auto& a = j["afci_terms"];
        s.afci_terms = AfciTerms{a.at("R").get<double>(), a.at("M").get<double>(), a.at("Q").get<double>(),
                                 a.at("S").get<double>()};
    }
    s.trace_metrics.reset();
    if (j.contains("trace_metrics") && !j["trace_metrics"].is_null()) {
        const auto& t = j["trace_metrics"];
        s.trace_metrics = TraceMetrics{t.at("sci").get<double>(), t.at("rsi").get<double>(), t.at("vei").get<double>(),
                                       t.at("aci").get<double>()};
    }
    s.guard.reset();
    if (j.contains("guard") && !j["guard"].is_null()) s.guard = j["guard"].get<GuardDecision>();
    s.extra = detail::take_extra(j, {"key", "condition", "condition_class", "control", "canonical_action",
                                     "expected_before", "expected_after", "correct", "unnecessary_change", "unmapped",
                                     "parse_error", "raw_output", "afci_terms", "trace_metrics", "guard"});
}

// ---------------------------------------------------------------------------
// Deduplication

template <class Row>
struct DedupResult {
    std::vector<Row> retained;
    std::size_t dropped = 0;
};

/// Keeps the first row seen for each RecordKey; relative order is preserved.
template <class Row>
DedupResult<Row> dedup(std::vector<Row> rows) {
    DedupResult<Row> out;
    std::unordered_set<std::string> seen;
    seen.reserve(rows.size());
    out.retained.reserve(rows.size());
    for (auto& r : rows) {
        if (seen.insert(r.key.str()).second)
            out.retained.push_back(std::move(r));
        else
            ++out.dropped;
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSONL persistence

struct WriteReceipt {
    std::string path;
    std::size_t count = 0;
    std::size_t bytes = 0;
    std::string sha256;
};

namespace detail {

// Dumps strictly; on invalid UTF-8 or similar, names the top-level field at fault.
inline std::string dump_line(const json& j) {
    try {
        return j.dump(-1, ' ', false, json::error_handler_t::strict);
    } catch (const json::exception&) {
        if (j.is_object()) {
            for (auto it = j.begin(); it != j.end(); ++it) {
                try {
                    (void)it.value().dump(-1, ' ', false, json::error_handler_t::strict);
                } catch (const json::exception& e) {
                    throw Error("serialization", "field '" + it.key() + "' is not serializable: " + e.what());
                }
            }
        }
        throw Error("serialization", "record is not serializable");
    }
}

}  // namespace detail

template <class Row>
std::string serialize_jsonl(const std::vector<Row>& rows) {
    std::string out;
    for (const auto& r : rows) {
        out += detail::dump_line(json(r));
        out.push_back('\n');
    }
    return out;
}

/// Appends one JSON object per line. The receipt digest covers exactly the
/// bytes written by this call.
template <class Row>
WriteReceipt append_jsonl(const std::string& path, const std::vector<Row>& rows) {
    const std::string bytes = serialize_jsonl(rows);
    std::ofstream f(path, std::ios::binary | std::ios::app);
    if (!f) throw Error("io", "cannot open " + path + " for append");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f) throw Error("io", "write failed on " + path);
    return {path, rows.size(), bytes.size(), sha256_hex(bytes)};
}

template <class Row>
WriteReceipt write_jsonl(const std::string& path, const std::vector<Row>& rows) {
    std::error_code ec;
    std::filesystem::remove(path, ec);
    return append_jsonl(path, rows);
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("io", "cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, std::string_view bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("io", "cannot open " + path + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("io", "write failed on " + path);
}

template <class Row>
std::vector<Row> read_jsonl(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("io", "cannot open " + path);
    std::vector<Row> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            rows.push_back(json::parse(line).get<Row>());
        } catch (const json::exception& e) {
            throw Error("schema", path + ":" + std::to_string(lineno) + ": " + e.what());
        } catch (const Error& e) {
            throw Error("schema", path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Manifest: path, row count and SHA-256 per artifact, plus completed stages.

struct ManifestEntry {
    std::string path;
    std::size_t rows = 0;
    std::string sha256;

    bool operator==(const ManifestEntry&) const = default;
};

struct Manifest {
    std::vector<ManifestEntry> files;
    std::vector<std::string> stages_completed;
    json info = json::object();

    void record(const std::filesystem::path& dir, const std::string& rel) {
        const auto bytes = read_file((dir / rel).string());
        std::size_t rows = 0;
        for (char c : bytes) rows += c == '\n';
        ManifestEntry e{rel, rows, sha256_hex(bytes)};
        for (auto& f : files)
            if (f.path == rel) {
                f = e;
                return;
            }
        files.push_back(std::move(e));
    }

    const ManifestEntry* find(std::string_view rel) const {
        for (const auto& f : files)
            if (f.path == rel) return &f;
        return nullptr;
    }

    bool stage_done(std::string_view s) const {
        return std::find(stages_completed.begin(), stages_completed.end(), s) != stages_completed.end();
    }

    void mark(const std::string& stage) {
        if (!stage_done(stage)) stages_completed.push_back(stage);
    }

    /// Paths whose on-disk bytes no longer hash to the recorded digest.
    std::vector<std::string> verify(const std::filesystem::path& dir) const {
        std::vector<std::string> bad;
        for (const auto& f : files) {
            std::error_code ec;
            if (!std::filesystem::exists(dir / f.path, ec) || sha256_hex(read_file((dir / f.path).string())) != f.sha256)
                bad.push_back(f.path);
        }
        return bad;
    }
};

inline void to_json(json& j, const Manifest& m) {
    json files = json::array();
    for (const auto& f : m.files) files.push_back({{"path", f.path}, {"rows", f.rows}, {"sha256", f.sha256}});
    j = json{{"files", files}, {"stages_completed", m.stages_completed}, {"info", m.info}};
}
inline void from_json(const json& j, Manifest& m) {
    m.files.clear();
    for (const auto& f : j.at("files"))
        m.files.push_back({f.at("path").get<std::string>(), f.at("rows").get<std::size_t>(), f.at("sha256").get<std::string>()});
    m.stages_completed = j.value("stages_completed", std::vector<std::string>{});
    m.info = j.value("info", json::object());
}

}  // namespace csb
