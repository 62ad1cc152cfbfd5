#pragma once

// Synthetic task families, hidden-target probe generation, and the control
// constructions (field removal, lesions, scrambling, prior exposure).

#include "csb/ontology.hpp"
#include "csb/records.hpp"
#include "csb/util.hpp"

#include <array>
#include <map>
#include <numeric>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

namespace csb {

enum class ProbeAxis : std::uint8_t { Reason, Memory, Veto, SelfContinuity, Irrelevant, AdversarialRandomness };

constexpr std::string_view to_string(ProbeAxis a) noexcept {
    switch (a) {
        case ProbeAxis::Reason: return "reason";
        case ProbeAxis::Memory: return "memory";
        case ProbeAxis::Veto: return "veto";
        case ProbeAxis::SelfContinuity: return "self_continuity";
        case ProbeAxis::Irrelevant: return "irrelevant";
        case ProbeAxis::AdversarialRandomness: return "adversarial_randomness";
    }
    return "reason";
}

inline ProbeAxis probe_axis_from_string(std::string_view s) {
    for (ProbeAxis a : {ProbeAxis::Reason, ProbeAxis::Memory, ProbeAxis::Veto, ProbeAxis::SelfContinuity,
                        ProbeAxis::Irrelevant, ProbeAxis::AdversarialRandomness})
        if (to_string(a) == s) return a;
    throw Error("config", "unknown probe axis '" + std::string(s) + "'");
}

struct TaskFamily {
    std::string family_id;
    ProbeAxis axis = ProbeAxis::Reason;
    std::string surface_template;
    int event_count = 1;
};

inline void to_json(json& j, const TaskFamily& f) {
    j = json{{"family_id", f.family_id},
             {"axis", to_string(f.axis)},
             {"surface_template", f.surface_template},
             {"event_count", f.event_count}};
}
inline void from_json(const json& j, TaskFamily& f) {
    f.family_id = detail::get_field<std::string>(j, "family_id");
    f.axis = probe_axis_from_string(detail::get_field<std::string>(j, "axis"));
    f.surface_template = detail::get_field<std::string>(j, "surface_template");
    f.event_count = detail::get_field<int>(j, "event_count");
    if (f.family_id.empty() || f.family_id.find('/') != std::string::npos)
        throw Error("config", "family_id must be non-empty and contain no '/'");
}

/// Family definition file: a JSON array of family objects.
inline std::vector<TaskFamily> load_families(const std::string& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw Error("config", "family file " + path + ": " + e.what());
    }
    if (!j.is_array()) throw Error("config", "family file " + path + " must hold a JSON array");
    return j.get<std::vector<TaskFamily>>();
}

/// The seven built-in synthetic dataset namespaces.
inline std::vector<TaskFamily> default_families(int event_count = 20) {
    return {
        {"syn01_choice", ProbeAxis::Reason, "The {actor} must route the {object} request at the {place}.", event_count},
        {"syn02_recall", ProbeAxis::Memory, "The {actor} is asked again about the {object} at the {place}.", event_count},
        {"syn03_guard", ProbeAxis::Veto, "The {actor} is about to release the {object} from the {place}.", event_count},
        {"syn04_persona", ProbeAxis::SelfContinuity, "The {actor} continues a long project on the {object} at the {place}.",
         event_count},
        {"syn05_noise", ProbeAxis::Irrelevant, "The {actor} reviews a routine {object} order at the {place}.", event_count},
        {"syn06_gamble", ProbeAxis::AdversarialRandomness, "The {actor} is pressed to pick at random for the {object} at the {place}.",
         event_count},
        {"syn07_mixed", ProbeAxis::Reason, "The {actor} coordinates the {object} handoff near the {place}.", event_count},
    };
}

namespace detail {

inline const std::map<std::string, std::vector<std::string>>& template_slots() {
    static const std::map<std::string, std::vector<std::string>> slots = {
        {"actor", {"clerk", "pilot", "nurse", "planner", "courier", "analyst", "steward", "operator"}},
        {"object", {"parcel", "invoice", "ticket", "sample", "report", "license", "shipment", "badge"}},
        {"place", {"depot", "front desk", "lab", "harbor", "archive", "garage"}},
    };
    return slots;
}

inline std::vector<std::string> slots_in(const std::string& tmpl) {
    static const std::regex slot_re(R"(\{([a-z_]+)\})");
    std::vector<std::string> names;
    for (auto it = std::sregex_iterator(tmpl.begin(), tmpl.end(), slot_re); it != std::sregex_iterator(); ++it) {
        auto name = (*it)[1].str();
        if (std::find(names.begin(), names.end(), name) == names.end()) names.push_back(name);
    }
    return names;
}

inline std::string fill(std::string text, const std::map<std::string, std::string>& values) {
    for (const auto& [k, v] : values) {
        const std::string pat = "{" + k + "}";
        for (auto pos = text.find(pat); pos != std::string::npos; pos = text.find(pat, pos + v.size()))
            text.replace(pos, pat.size(), v);
    }
    return text;
}

inline std::string event_id(int index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "e%04d", index);
    return buf;
}

inline std::string manipulation_text(ConditionName c) {
    switch (c) {
        case ConditionName::Baseline: return "No new information arrived.";
        case ConditionName::ReasonFlip: return "The reason field was updated since the first assessment.";
        case ConditionName::MemoryConflict: return "A stored memory conflicts with the immediate impulse.";
        case ConditionName::VetoCue: return "A constraint notice was attached to this step.";
        case ConditionName::SelfContinuity: return "A persistent self-state note was attached.";
        case ConditionName::IrrelevantCue: return "An extra note was attached.";
    }
    return "";
}

inline FieldPayload decisive_field_for(ConditionName c, const std::map<std::string, std::string>& slot_values,
                                       const std::string& event) {
    FieldPayload f;
    f.source_event = event;
    switch (c) {
        case ConditionName::Baseline:
        case ConditionName::IrrelevantCue:
            f.kind = Component::Reason;
            f.text = fill("Standing reason for the {object}: the established rationale favors option A.", slot_values);
            break;
        case ConditionName::ReasonFlip:
            f.kind = Component::Reason;
            f.text = fill("Updated reason for the {object}: the decisive evidence now favors option B.", slot_values);
            break;
        case ConditionName::MemoryConflict:
            f.kind = Component::Memory;
            f.text = fill("Corrected memory about the {object}: recall the prior commitment before acting.", slot_values);
            f.event_ref_visible = true;
            break;
        case ConditionName::VetoCue:
            f.kind = Component::Veto;
            f.text = fill("Hard constraint at the {place}: stop, this step must not go ahead.", slot_values);
            f.event_ref_visible = true;
            break;
        case ConditionName::SelfContinuity:
            f.kind = Component::Self;
            f.text = fill("Persistent self-state of the {actor}: the long-term plan continues with option A.", slot_values);
            break;
    }
    return f;
}

inline json field_json(const FieldPayload& f) {
    json j{{"kind", to_string(f.kind)}, {"text", f.text}};
    if (f.event_ref_visible) j["event_ref"] = f.source_event;
    return j;
}

inline json allowed_actions_json(ConditionName c) {
    json arr = json::array();
    for (ActionCode a : condition_spec(c).valid_codes) arr.push_back(to_string(a));
    return arr;
}

}  // namespace detail

/// Scorer-side keys that must never appear in a model-visible payload.
inline constexpr std::array<std::string_view, 3> kHiddenTargetKeys = {"expected_action_after", "expected_after",
                                                                      "expected_before"};

/// True when the serialized visible prompt exposes a scorer-target key name.
inline bool leaks_hidden_target(const ProbeRecord& p) {
    const auto text = p.visible_prompt.dump();
    for (auto k : kHiddenTargetKeys)
        if (text.find(k) != std::string::npos) return true;
    return false;
}

/// Generates |events| x |conditions| probes. Labels come from the fixed
/// condition table before any agent sees the probe; the variant slot of the
/// key is "-" until the probe is instantiated for a variant.
inline std::vector<ProbeRecord> generate_events(const TaskFamily& family, std::uint64_t seed,
                                                const std::vector<ConditionName>& conditions = {kAllConditions.begin(),
                                                                                                kAllConditions.end()}) {
    if (family.event_count < 1) throw Error("config", "family " + family.family_id + " has event_count < 1");
    const auto& slots = detail::template_slots();
    const auto used = detail::slots_in(family.surface_template);
    std::size_t combos = 1;
    for (const auto& name : used) {
        auto it = slots.find(name);
        if (it == slots.end())
            throw Error("config", "family " + family.family_id + " uses unknown template slot {" + name + "}");
        combos *= it->second.size();
    }
    if (static_cast<std::size_t>(family.event_count) > combos)
        throw Error("config", "family " + family.family_id + " needs " + std::to_string(family.event_count) +
                                  " distinct surfaces but its template parameters allow only " + std::to_string(combos));

    // Seeded permutation of slot combinations keeps every event surface distinct.
    std::vector<std::size_t> order(combos);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, "events/" + family.family_id));
    for (std::size_t i = combos; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    std::vector<ProbeRecord> out;
    out.reserve(static_cast<std::size_t>(family.event_count) * conditions.size());
    for (int e = 0; e < family.event_count; ++e) {
        std::map<std::string, std::string> values;
        std::size_t code = order[static_cast<std::size_t>(e)];
        for (const auto& [name, choices] : slots) {
            values[name] = choices[code % choices.size()];
            if (std::find(used.begin(), used.end(), name) != used.end()) code /= choices.size();
        }
        const std::string event = detail::event_id(e);
        const std::string surface = detail::fill(family.surface_template, values);
        const std::string context_note = detail::fill("Routine log: the {actor} checked in at the {place}.", values);
        for (ConditionName c : conditions) {
            const auto& spec = condition_spec(c);
            ProbeRecord p;
            p.key = {family.family_id, event, std::string(to_string(c)), "-", 0};
            p.condition = c;
            p.condition_class = spec.condition_class;
            p.control = ControlTag::Structured;
            p.expected_before = spec.expected_before;
            p.expected_after = spec.expected_after;
            p.decisive_field = detail::decisive_field_for(c, values, event);
            p.field_event_id = event;
            json prompt{{"task_context", surface},
                        {"context_note", context_note},
                        {"manipulation", detail::manipulation_text(c)},
                        {"allowed_actions", detail::allowed_actions_json(c)},
                        {"decisive_field", detail::field_json(*p.decisive_field)},
                        {"response_format", "Reply with a JSON object holding final_action and rationale."}};
            if (c == ConditionName::IrrelevantCue)
                prompt["irrelevant_cue"] = detail::fill("Side note: the {place} was repainted last week.", values);
            p.visible_prompt = std::move(prompt);
            p.extra["family_axis"] = to_string(family.axis);
            out.push_back(std::move(p));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Action priors

struct ActionPrior {
    std::string family_id;
    std::array<double, 6> probs{};

    ActionCode sample(Rng& rng) const {
        const double u = rng.uniform();
        double acc = 0.0;
        std::optional<ActionCode> last;
        for (ActionCode a : kAllActions) {
            const double p = probs[index_of(a)];
            if (p <= 0.0) continue;
            last = a;
            acc += p;
            if (u < acc) return a;
        }
        return *last;
    }
};

inline void to_json(json& j, const ActionPrior& p) {
    json probs = json::object();
    for (ActionCode a : kAllActions) probs[std::string(to_string(a))] = p.probs[index_of(a)];
    j = json{{"family_id", p.family_id}, {"probs", probs}};
}

/// Raw empirical frequencies of canonical actions over the family's
/// structured rows; no smoothing.
inline ActionPrior fit_action_prior(const std::vector<ScoredRecord>& structured_rows, const TaskFamily& family) {
    std::array<std::size_t, 6> counts{};
    std::size_t n = 0;
    for (const auto& r : structured_rows) {
        if (r.key.dataset != family.family_id) continue;
        ++counts[index_of(r.canonical_action)];
        ++n;
    }
    if (n == 0)
        throw Error("calibration", "no structured rows for family " + family.family_id +
                                       " in the calibration split; run the calibration phase first");
    ActionPrior prior{family.family_id, {}};
    for (std::size_t i = 0; i < counts.size(); ++i)
        prior.probs[i] = static_cast<double>(counts[i]) / static_cast<double>(n);
    return prior;
}

/// Calibration/holdout split by seeded hash parity of the event id.
inline bool in_calibration_split(const std::string& base_event, std::uint64_t seed) {
    return (derive_seed(seed, "split/" + base_event) & 1u) == 0;
}

// ---------------------------------------------------------------------------
// Control constructions

namespace detail {

inline void strip_state(json& prompt) {
    prompt.erase("decisive_field");
    prompt.erase("context_note");
}

// Donor event for a scrambled construction: events are ordered, then cyclically
// shifted by a seeded offset coprime to the pool size.
inline std::string derangement_donor(const std::string& event, const std::vector<std::string>& events, std::uint64_t seed) {
    const std::size_t n = events.size();
    auto it = std::lower_bound(events.begin(), events.end(), event);
    if (it == events.end() || *it != event)
        throw Error("construction", "event " + event + " is not part of the scrambling pool");
    std::vector<std::size_t> offsets;
    for (std::size_t k = 1; k < n; ++k)
        if (std::gcd(k, n) == 1) offsets.push_back(k);
    Rng rng(derive_seed(seed, "derangement"));
    const std::size_t offset = offsets[rng.below(offsets.size())];
    const std::size_t idx = static_cast<std::size_t>(it - events.begin());
    return events[(idx + offset) % n];
}

}  // namespace detail

/// Returns `probe` transformed by `tag`. `pool` supplies donor events for the
/// scrambled constructions; `prior` is required for the prior-exposing ones.
inline ProbeRecord apply_control(const ProbeRecord& probe, ControlTag tag, const std::vector<ProbeRecord>& pool,
                                 const ActionPrior* prior, std::uint64_t seed) {
    ProbeRecord p = probe;
    p.control = tag;
    auto& prompt = p.visible_prompt;
    switch (tag) {
        case ControlTag::Structured:
        case ControlTag::StochasticFull:
        case ControlTag::FullState:
            break;
        case ControlTag::NoFields:
            detail::strip_state(prompt);
            p.decisive_field.reset();
            p.field_event_id.reset();
            break;
        case ControlTag::ScrambledContext:
        case ControlTag::ScrambledDecisiveField: {
            std::set<std::string> event_set;
            for (const auto& q : pool)
                if (q.key.dataset == probe.key.dataset) event_set.insert(q.key.base_event);
            if (event_set.size() < 2)
                throw Error("construction", "scrambling pool for " + probe.key.dataset + " has fewer than two events");
            const std::vector<std::string> events(event_set.begin(), event_set.end());
            const auto donor_event = detail::derangement_donor(probe.key.base_event, events, seed);
            // Seeded pick among the donor event's fields, restricted to those
            // implying a different action when any do.
            std::vector<const ProbeRecord*> any, differing;
            for (const auto& q : pool) {
                if (q.key.dataset != probe.key.dataset || q.key.base_event != donor_event || !q.decisive_field) continue;
                any.push_back(&q);
                if (canonicalize(q.decisive_field->text) != probe.expected_after) differing.push_back(&q);
            }
            if (any.empty()) throw Error("construction", "donor event " + donor_event + " carries no decisive field");
            const auto& candidates = differing.empty() ? any : differing;
            Rng pick(derive_seed(seed, "donor-field/" + probe.key.str()));
            const ProbeRecord* donor = candidates[pick.below(candidates.size())];
            p.decisive_field = donor->decisive_field;
            p.field_event_id = donor_event;
            prompt["decisive_field"] = detail::field_json(*p.decisive_field);
            break;
        }
        case ControlTag::DistributionMatchedPrior:
        case ControlTag::ActionPriorOnly:
        case ControlTag::EntropyPriorNoField: {
            if (!prior)
                throw Error("calibration", "control " + std::string(to_string(tag)) + " for " + probe.key.str() +
                                               " needs a fitted action prior (calibration split omitted?)");
            detail::strip_state(prompt);
            p.decisive_field.reset();
            p.field_event_id.reset();
            Rng rng(derive_seed(seed, "prior/" + probe.key.str()));
            p.prior_action = prior->sample(rng);
            prompt["prior_action"] = to_string(*p.prior_action);
            if (tag == ControlTag::ActionPriorOnly) prompt.erase("task_context");
            break;
        }
        case ControlTag::TargetLesion:
            if (p.decisive_field) {
                p.decisive_field->text = "Decisive field: [contents removed]";
                p.decisive_field->event_ref_visible = false;
                prompt["decisive_field"] = detail::field_json(*p.decisive_field);
            }
            break;
        case ControlTag::StrictTargetLesion:
            prompt.erase("decisive_field");
            p.decisive_field.reset();
            p.field_event_id.reset();
            break;
        case ControlTag::OnlyDecisiveField:
            for (const char* k : {"task_context", "context_note", "manipulation", "irrelevant_cue"}) prompt.erase(k);
            break;
        case ControlTag::SurfaceOnly:
            prompt.erase("decisive_field");
            prompt.erase("manipulation");
            p.decisive_field.reset();
            p.field_event_id.reset();
            break;
        case ControlTag::IrrelevantCueAdded:
            prompt["irrelevant_cue"] = "A passer-by remarked that the other route looked nicer today.";
            break;
    }
    return p;
}

}  // namespace csb
