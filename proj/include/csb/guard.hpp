#pragma once

// Deterministic control-binding wrapper applied after generation, and the
// bookkeeping for the minimal decisive-field (sufficiency) experiment.

#include "csb/ontology.hpp"
#include "csb/records.hpp"
#include "csb/stats.hpp"

#include <map>
#include <string>
#include <vector>

namespace csb {

/// What the guard may consult to decide whether a decisive field is foreign.
/// `Full` reads evaluator-side field_event_id; `PromptOnly` sees only an event
/// reference rendered in the prompt, which not every field kind carries.
enum class GuardVisibility : std::uint8_t { Full, PromptOnly };

constexpr std::string_view to_string(GuardVisibility v) noexcept {
    return v == GuardVisibility::Full ? "full" : "prompt-only";
}

inline GuardVisibility guard_visibility_from_string(std::string_view s) {
    if (s == "full") return GuardVisibility::Full;
    if (s == "prompt-only" || s == "prompt_only") return GuardVisibility::PromptOnly;
    throw Error("config", "unknown guard visibility '" + std::string(s) + "' (expected full or prompt-only)");
}

inline bool field_is_foreign(const ProbeRecord& probe, GuardVisibility visibility) {
    if (visibility == GuardVisibility::Full)
        return probe.field_event_id && *probe.field_event_id != probe.key.base_event;
    const auto& prompt = probe.visible_prompt;
    if (!prompt.contains("decisive_field") || !prompt["decisive_field"].is_object()) return false;
    const auto& f = prompt["decisive_field"];
    return f.contains("event_ref") && f["event_ref"].is_string() && f["event_ref"].get<std::string>() != probe.key.base_event;
}

/// Accept when the visible field is current and agrees; correct to the field's
/// action when it is current and disagrees; defer when it is foreign; leave the
/// action alone when no field (or no readable field) is visible. Pure; no agent
/// call is made.
inline GuardDecision wrap(ActionCode action, const ProbeRecord& probe, GuardVisibility visibility = GuardVisibility::Full,
                          const Lexicon& lex = Lexicon::builtin()) {
    GuardDecision d;
    d.action_in = action;
    if (!probe.decisive_field) {
        d.action_out = action;
        d.verdict = GuardVerdict::UnchangedNoField;
        d.reason = "no decisive field visible";
        return d;
    }
    if (field_is_foreign(probe, visibility)) {
        d.action_out = ActionCode::Defer;
        d.verdict = GuardVerdict::Deferred;
        d.reason = "decisive field belongs to a different event";
        return d;
    }
    const ActionCode implied = canonicalize(probe.decisive_field->text, lex);
    if (implied == ActionCode::InvalidOrUnmapped) {
        d.action_out = action;
        d.verdict = GuardVerdict::UnchangedNoField;
        d.reason = "decisive field implies no action";
        return d;
    }
    if (implied == action) {
        d.action_out = action;
        d.verdict = GuardVerdict::Accepted;
        d.reason = "current field agrees with action";
    } else {
        d.action_out = implied;
        d.verdict = GuardVerdict::Corrected;
        d.reason = "corrected to current field " + std::string(to_string(implied));
    }
    return d;
}

// ---------------------------------------------------------------------------
// Sufficiency bookkeeping

struct SufficiencyCell {
    std::size_t n = 0;
    double raw_accuracy = 0.0;
    double wrapped_accuracy = 0.0;
    std::optional<double> raw_following;      // scrambled rows: followed the foreign field
    std::optional<double> wrapped_following;
};

struct SufficiencySummary {
    std::string variant;
    std::map<std::string, SufficiencyCell> conditions;  // by control tag name
    double a_full = 0.0;
    double a_only = 0.0;
    double a_control = 0.0;
    std::string best_control;
    Recovery recovery;
};

inline constexpr std::array<ControlTag, 3> kNonDecisiveControls = {ControlTag::SurfaceOnly, ControlTag::ActionPriorOnly,
                                                                  ControlTag::ScrambledDecisiveField};

/// Per-condition accuracy before and after wrapping, scrambled-field
/// following, and the recovery fraction against the best non-decisive control.
/// `rows` must carry guard sub-records; `probes` are joined by key.
inline SufficiencySummary sufficiency_summary(const std::vector<ScoredRecord>& rows, const std::vector<ProbeRecord>& probes,
                                              const std::string& variant, const Lexicon& lex = Lexicon::builtin()) {
    std::map<std::string, const ProbeRecord*> by_key;
    for (const auto& p : probes) by_key[p.key.str()] = &p;
    struct Acc {
        std::size_t n = 0, raw = 0, wrapped = 0, follow_n = 0, raw_follow = 0, wrapped_follow = 0;
    };
    std::map<std::string, Acc> acc;
    for (const auto& r : rows) {
        if (r.key.variant != variant) continue;
        auto it = by_key.find(r.key.str());
        if (it == by_key.end()) throw Error("wiring", "no probe for scored row " + r.key.str());
        if (!r.guard) throw Error("wiring", "scored row " + r.key.str() + " has no guard sub-record");
        const auto& probe = *it->second;
        auto& a = acc[std::string(to_string(r.control))];
        ++a.n;
        a.raw += r.canonical_action == r.expected_after ? 1 : 0;
        a.wrapped += r.guard->action_out == r.expected_after ? 1 : 0;
        if (probe.decisive_field && probe.field_event_id && *probe.field_event_id != probe.key.base_event) {
            const ActionCode foreign = canonicalize(probe.decisive_field->text, lex);
            ++a.follow_n;
            a.raw_follow += r.canonical_action == foreign ? 1 : 0;
            a.wrapped_follow += r.guard->action_out == foreign ? 1 : 0;
        }
    }
    SufficiencySummary s;
    s.variant = variant;
    for (const auto& [tag, a] : acc) {
        SufficiencyCell c;
        c.n = a.n;
        c.raw_accuracy = static_cast<double>(a.raw) / static_cast<double>(a.n);
        c.wrapped_accuracy = static_cast<double>(a.wrapped) / static_cast<double>(a.n);
        if (a.follow_n) {
            c.raw_following = static_cast<double>(a.raw_follow) / static_cast<double>(a.follow_n);
            c.wrapped_following = static_cast<double>(a.wrapped_follow) / static_cast<double>(a.follow_n);
        }
        s.conditions[tag] = c;
    }
    auto rate = [&](ControlTag t) -> std::optional<double> {
        auto it = s.conditions.find(std::string(to_string(t)));
        if (it == s.conditions.end()) return std::nullopt;
        return it->second.raw_accuracy;
    };
    const auto full = rate(ControlTag::FullState), only = rate(ControlTag::OnlyDecisiveField);
    if (!full || !only) throw Error("missing", "sufficiency summary needs full_state and only_decisive_field rows");
    s.a_full = *full;
    s.a_only = *only;
    bool any_control = false;
    for (ControlTag t : kNonDecisiveControls)
        if (auto r = rate(t); r && (!any_control || *r > s.a_control)) {
            s.a_control = *r;
            s.best_control = std::string(to_string(t));
            any_control = true;
        }
    if (!any_control) throw Error("missing", "sufficiency summary needs at least one non-decisive control condition");
    s.recovery = recovery_fraction(s.a_full, s.a_only, s.a_control);
    return s;
}

}  // namespace csb
