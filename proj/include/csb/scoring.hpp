#pragma once

// Behavioral binding scores (c_i, u_i, B_k), action-field coupling terms,
// baseline trace metrics, and the criterion-gate ledger.

#include "csb/ontology.hpp"
#include "csb/records.hpp"
#include "csb/util.hpp"

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace csb {

/// Canonicalizes the generation and compares it with the hidden labels.
inline ScoredRecord score_behavior(const GenerationRecord& gen, const ProbeRecord& probe,
                                   const Lexicon& lex = Lexicon::builtin()) {
    if (!(gen.key == probe.key))
        throw Error("wiring", "generation key " + gen.key.str() + " does not match probe key " + probe.key.str());
    ScoredRecord s;
    s.key = gen.key;
    s.condition = probe.condition;
    s.condition_class = probe.condition_class;
    s.control = probe.control;
    s.expected_before = probe.expected_before;
    s.expected_after = probe.expected_after;
    s.raw_output = gen.raw_output;
    s.parse_error = gen.parse_status != ParseStatus::Ok;
    s.canonical_action = s.parse_error ? ActionCode::InvalidOrUnmapped : canonicalize(gen.raw_output, lex);
    s.correct = s.canonical_action == probe.expected_after;
    s.unnecessary_change = probe.condition_class == ConditionClass::Irrelevant && s.canonical_action != probe.expected_before;
    s.unmapped = s.canonical_action == ActionCode::InvalidOrUnmapped;
    return s;
}

// ---------------------------------------------------------------------------
// Component scores

enum class ComponentId : std::uint8_t { RSI, MCI, VEI, SCI };

inline constexpr std::array<ComponentId, 4> kAllComponentIds = {ComponentId::RSI, ComponentId::MCI, ComponentId::VEI,
                                                                ComponentId::SCI};

constexpr std::string_view to_string(ComponentId c) noexcept {
    switch (c) {
        case ComponentId::RSI: return "B_RSI";
        case ComponentId::MCI: return "B_MCI";
        case ComponentId::VEI: return "B_VEI";
        case ComponentId::SCI: return "B_SCI";
    }
    return "B_RSI";
}

constexpr ConditionName target_condition(ComponentId c) noexcept {
    switch (c) {
        case ComponentId::RSI: return ConditionName::ReasonFlip;
        case ComponentId::MCI: return ConditionName::MemoryConflict;
        case ComponentId::VEI: return ConditionName::VetoCue;
        case ComponentId::SCI: return ConditionName::SelfContinuity;
    }
    return ConditionName::ReasonFlip;
}

struct ComponentScore {
    ComponentId component = ComponentId::RSI;
    double value = 0.0;
    double target_rate = 0.0;
    double irrelevant_fp_rate = 0.0;
    std::size_t target_n = 0;
    std::size_t irrelevant_n = 0;
    bool irrelevant_empty = false;
};

struct ComponentTable {
    std::string dataset;
    std::string variant;
    std::vector<ComponentScore> scores;
    std::vector<std::string> diagnostics;

    const ComponentScore* find(ComponentId c) const {
        for (const auto& s : scores)
            if (s.component == c) return &s;
        return nullptr;
    }

    /// Unweighted mean of the four B values; empty when any is missing.
    std::optional<double> composite() const {
        if (scores.size() != 4) return std::nullopt;
        double s = 0.0;
        for (const auto& c : scores) s += c.value;
        return s / 4.0;
    }
};

/// B_k = Pr(correct | target set T_k) - Pr(unnecessary change | irrelevant set).
/// A component with an empty target set is omitted with a diagnostic; an empty
/// irrelevant set is flagged on every component.
inline ComponentTable component_scores(const std::vector<ScoredRecord>& rows, const std::string& variant,
                                       const std::string& dataset, bool include_placebo = false) {
    ComponentTable table{dataset, variant, {}, {}};
    std::map<ConditionName, std::pair<std::size_t, std::size_t>> target;  // condition -> (correct, n)
    std::size_t fp = 0, irr_n = 0;
    for (const auto& r : rows) {
        if (r.key.variant != variant || r.key.dataset != dataset) continue;
        auto& t = target[r.condition];
        t.first += r.correct ? 1 : 0;
        ++t.second;
        const bool negative = r.condition_class == ConditionClass::Irrelevant ||
                              (include_placebo && r.condition_class == ConditionClass::Placebo);
        if (negative) {
            ++irr_n;
            // Placebo rows count as a change when they leave expected_before.
            fp += (r.unnecessary_change || (r.condition_class == ConditionClass::Placebo && r.canonical_action != r.expected_before)) ? 1 : 0;
        }
    }
    const double fp_rate = irr_n ? static_cast<double>(fp) / static_cast<double>(irr_n) : 0.0;
    if (irr_n == 0) table.diagnostics.push_back("irrelevant set empty");
    for (ComponentId c : kAllComponentIds) {
        auto it = target.find(target_condition(c));
        if (it == target.end() || it->second.second == 0) {
            table.diagnostics.push_back(std::string(to_string(c)) + ": target set empty (" +
                                        std::string(to_string(target_condition(c))) + ")");
            continue;
        }
        ComponentScore s;
        s.component = c;
        s.target_n = it->second.second;
        s.target_rate = static_cast<double>(it->second.first) / static_cast<double>(s.target_n);
        s.irrelevant_n = irr_n;
        s.irrelevant_fp_rate = fp_rate;
        s.irrelevant_empty = irr_n == 0;
        s.value = s.target_rate - s.irrelevant_fp_rate;
        table.scores.push_back(s);
    }
    return table;
}

// ---------------------------------------------------------------------------
// Action-field coupling (AFCI) and trace metrics

/// Three-level content rubric per term (1 names the chosen action, 0.5 present
/// but non-committal, 0 absent); the veto term is binary. Any field whose
/// provenance is not `generated` contributes 0.
inline AfciTerms afci(const TraceBundle& trace, const Lexicon& lex = Lexicon::builtin()) {
    trace.validate();
    const ActionCode final_code = canonicalize(trace.final_action, lex);
    auto generated = [&](std::string_view field) { return trace.source_of(field) == Provenance::Generated; };
    auto graded = [&](const std::vector<std::string>& items, std::string_view field) {
        if (items.empty() || !generated(field)) return 0.0;
        for (const auto& item : items)
            if (canonicalize(item, lex) == final_code && final_code != ActionCode::InvalidOrUnmapped) return 1.0;
        return 0.5;
    };
    AfciTerms t;
    t.reason = graded(trace.reason_graph, "reason_graph");
    t.memory = graded(trace.memory_trace, "memory_trace");
    t.veto = generated("veto_state") && trace.veto_state.applied == (final_code == ActionCode::Veto) ? 1.0 : 0.0;
    if (generated("self_state") && !trace.self_state.commitment.empty())
        t.self = canonicalize(trace.self_state.commitment, lex) == final_code ? 1.0 : 0.5;
    if (!generated("final_action")) t = {};
    return t;
}

inline TraceMetrics trace_metrics(const TraceBundle& trace, int max_memory_depth = 10,
                                  const Lexicon& lex = Lexicon::builtin()) {
    if (max_memory_depth < 1) throw Error("config", "max memory depth must be positive");
    TraceMetrics m;
    m.sci = (trace.self_state.identity_weight + trace.self_state.continuity_weight) / 2.0;
    m.rsi = (!trace.reason_graph.empty() && canonicalize(trace.final_action, lex) != canonicalize(trace.first_impulse, lex))
                ? 1.0
                : 0.0;
    m.vei = trace.veto_state.applied ? 1.0 : 0.0;
    m.aci = std::clamp(static_cast<double>(trace.memory_trace.size()) / static_cast<double>(max_memory_depth), 0.0, 1.0);
    return m;
}

/// Scores a generation and, when a trace is present, attaches AFCI terms and
/// trace metrics.
inline ScoredRecord score_row(const GenerationRecord& gen, const ProbeRecord& probe, int max_memory_depth = 10,
                              const Lexicon& lex = Lexicon::builtin()) {
    ScoredRecord s = score_behavior(gen, probe, lex);
    if (gen.trace) {
        s.afci_terms = afci(*gen.trace, lex);
        s.trace_metrics = trace_metrics(*gen.trace, max_memory_depth, lex);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Criterion gates

struct GateEntry {
    std::string name;
    double observed = 0.0;
    double threshold = 0.0;
    std::string comparator;  // "<", "<=", ">", ">="
    bool pass = false;
};

struct GateLedger {
    std::vector<GateEntry> entries;

    bool pass() const {
        for (const auto& e : entries)
            if (!e.pass) return false;
        return !entries.empty();
    }
};

inline void to_json(json& j, const GateEntry& e) {
    j = json{{"name", e.name},
             {"observed", e.observed},
             {"threshold", e.threshold},
             {"comparator", e.comparator},
             {"pass", e.pass}};
}
inline void to_json(json& j, const GateLedger& g) {
    j = json{{"entries", g.entries}, {"pass", g.pass()}};
}

/// Values the gate ledger is evaluated on. Optional component-direction
/// counts are gated only when present.
struct GateInputs {
    std::optional<double> parse_error_rate;
    std::optional<double> unmapped_rate;
    std::optional<double> structured_irrelevant_fp;
    std::optional<int> dataset_count;
    std::optional<int> composite_direction_count;
    std::optional<double> bootstrap_lower;
    std::map<std::string, int> component_direction_counts;
};

/// Minimum directional dataset count: 6 of 7, scaled for other dataset counts.
inline int required_direction_count(int datasets) { return static_cast<int>(std::ceil(6.0 * datasets / 7.0)); }

inline GateLedger gate_check(const GateInputs& in) {
    std::vector<std::string> missing;
    if (!in.parse_error_rate) missing.emplace_back("parse_error_rate");
    if (!in.unmapped_rate) missing.emplace_back("unmapped_rate");
    if (!in.structured_irrelevant_fp) missing.emplace_back("structured_irrelevant_fp");
    if (!in.dataset_count) missing.emplace_back("dataset_count");
    if (!in.composite_direction_count) missing.emplace_back("composite_direction_count");
    if (!in.bootstrap_lower) missing.emplace_back("bootstrap_lower");
    if (!missing.empty()) {
        std::string msg = "gate summary is missing:";
        for (const auto& m : missing) msg += " " + m;
        throw Error("missing", msg);
    }
    GateLedger g;
    auto below = [&](std::string name, double v, double t) { g.entries.push_back({std::move(name), v, t, "<", v < t}); };
    below("parse_error_rate", *in.parse_error_rate, 0.02);
    below("unmapped_rate", *in.unmapped_rate, 0.02);
    below("structured_irrelevant_fp", *in.structured_irrelevant_fp, 0.15);
    const int need = required_direction_count(*in.dataset_count);
    g.entries.push_back({"composite_direction_datasets", static_cast<double>(*in.composite_direction_count),
                         static_cast<double>(need), ">=", *in.composite_direction_count >= need});
    for (const auto& [name, count] : in.component_direction_counts)
        g.entries.push_back({name, static_cast<double>(count), static_cast<double>(need), ">=", count >= need});
    g.entries.push_back({"bootstrap_lower_bound", *in.bootstrap_lower, 0.0, ">", *in.bootstrap_lower > 0.0});
    return g;
}

}  // namespace csb
