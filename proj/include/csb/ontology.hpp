#pragma once

// Finite action alphabet, the condition -> expected-label table, and the
// rule-based canonicalizer that maps free text onto the alphabet.

#include "csb/util.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace csb {

enum class ActionCode : std::uint8_t { ActionA, ActionB, Veto, Defer, RecallPrior, InvalidOrUnmapped };

inline constexpr std::array<ActionCode, 6> kAllActions = {ActionCode::ActionA,     ActionCode::ActionB,
                                                          ActionCode::Veto,        ActionCode::Defer,
                                                          ActionCode::RecallPrior, ActionCode::InvalidOrUnmapped};

constexpr std::string_view to_string(ActionCode a) noexcept {
    switch (a) {
        case ActionCode::ActionA: return "ACTION_A";
        case ActionCode::ActionB: return "ACTION_B";
        case ActionCode::Veto: return "VETO";
        case ActionCode::Defer: return "DEFER";
        case ActionCode::RecallPrior: return "RECALL_PRIOR";
        case ActionCode::InvalidOrUnmapped: return "INVALID_OR_UNMAPPED";
    }
    return "INVALID_OR_UNMAPPED";
}

constexpr std::size_t index_of(ActionCode a) noexcept { return static_cast<std::size_t>(a); }

inline ActionCode action_from_string(std::string_view s) {
    for (ActionCode a : kAllActions)
        if (to_string(a) == s) return a;
    throw Error("schema", "unknown action code '" + std::string(s) + "'");
}

enum class ConditionName : std::uint8_t { Baseline, ReasonFlip, MemoryConflict, VetoCue, SelfContinuity, IrrelevantCue };

inline constexpr std::array<ConditionName, 6> kAllConditions = {
    ConditionName::Baseline,      ConditionName::ReasonFlip,     ConditionName::MemoryConflict,
    ConditionName::VetoCue,       ConditionName::SelfContinuity, ConditionName::IrrelevantCue};

constexpr std::string_view to_string(ConditionName c) noexcept {
    switch (c) {
        case ConditionName::Baseline: return "baseline";
        case ConditionName::ReasonFlip: return "reason_flip";
        case ConditionName::MemoryConflict: return "memory_conflict";
        case ConditionName::VetoCue: return "veto_cue";
        case ConditionName::SelfContinuity: return "self_continuity";
        case ConditionName::IrrelevantCue: return "irrelevant_cue";
    }
    return "baseline";
}

inline ConditionName condition_from_string(std::string_view s) {
    for (ConditionName c : kAllConditions)
        if (to_string(c) == s) return c;
    throw Error("config", "unknown condition name '" + std::string(s) + "'");
}

enum class Component : std::uint8_t { Reason, Memory, Veto, Self };

constexpr std::string_view to_string(Component c) noexcept {
    switch (c) {
        case Component::Reason: return "reason";
        case Component::Memory: return "memory";
        case Component::Veto: return "veto";
        case Component::Self: return "self";
    }
    return "reason";
}

inline Component component_from_string(std::string_view s) {
    for (Component c : {Component::Reason, Component::Memory, Component::Veto, Component::Self})
        if (to_string(c) == s) return c;
    throw Error("schema", "unknown component '" + std::string(s) + "'");
}

enum class ConditionClass : std::uint8_t { Target, Irrelevant, Placebo };

constexpr std::string_view to_string(ConditionClass c) noexcept {
    switch (c) {
        case ConditionClass::Target: return "target";
        case ConditionClass::Irrelevant: return "irrelevant";
        case ConditionClass::Placebo: return "placebo";
    }
    return "placebo";
}

inline ConditionClass condition_class_from_string(std::string_view s) {
    for (ConditionClass c : {ConditionClass::Target, ConditionClass::Irrelevant, ConditionClass::Placebo})
        if (to_string(c) == s) return c;
    throw Error("schema", "unknown condition class '" + std::string(s) + "'");
}

struct ConditionSpec {
    ConditionName name;
    std::vector<ActionCode> valid_codes;
    ActionCode expected_before;
    ActionCode expected_after;
    std::optional<Component> required_component;
    ConditionClass condition_class;
};

inline const ConditionSpec& condition_spec(ConditionName name) {
    using A = ActionCode;
    static const std::array<ConditionSpec, 6> table = {{
        {ConditionName::Baseline, {A::ActionA, A::ActionB}, A::ActionA, A::ActionA, std::nullopt,
         ConditionClass::Placebo},
        {ConditionName::ReasonFlip, {A::ActionA, A::ActionB}, A::ActionA, A::ActionB, Component::Reason,
         ConditionClass::Target},
        {ConditionName::MemoryConflict, {A::ActionA, A::RecallPrior, A::Defer}, A::ActionA, A::RecallPrior,
         Component::Memory, ConditionClass::Target},
        {ConditionName::VetoCue, {A::ActionA, A::Veto, A::Defer}, A::ActionA, A::Veto, Component::Veto,
         ConditionClass::Target},
        {ConditionName::SelfContinuity, {A::ActionA, A::ActionB, A::Defer}, A::ActionA, A::ActionA, Component::Self,
         ConditionClass::Target},
        {ConditionName::IrrelevantCue, {A::ActionA, A::ActionB}, A::ActionA, A::ActionA, std::nullopt,
         ConditionClass::Irrelevant},
    }};
    return table[static_cast<std::size_t>(name)];
}

inline std::pair<ActionCode, ActionCode> expected_labels(ConditionName name) {
    const auto& spec = condition_spec(name);
    return {spec.expected_before, spec.expected_after};
}

inline std::pair<ActionCode, ActionCode> expected_labels(std::string_view name) {
    return expected_labels(condition_from_string(name));
}

// ---------------------------------------------------------------------------
// Canonicalizer

/// Cue families in precedence order. A family earlier in the list wins when
/// several fire; ActionA and ActionB together are a conflict.
enum class CueFamily : std::uint8_t { Veto, RecallPrior, Defer, ActionA, ActionB };

inline constexpr std::array<CueFamily, 5> kCuePrecedence = {CueFamily::Veto, CueFamily::RecallPrior, CueFamily::Defer,
                                                           CueFamily::ActionA, CueFamily::ActionB};

constexpr std::string_view to_string(CueFamily f) noexcept {
    switch (f) {
        case CueFamily::Veto: return "VETO";
        case CueFamily::RecallPrior: return "RECALL_PRIOR";
        case CueFamily::Defer: return "DEFER";
        case CueFamily::ActionA: return "ACTION_A";
        case CueFamily::ActionB: return "ACTION_B";
    }
    return "VETO";
}

inline constexpr ActionCode action_of(CueFamily f) noexcept {
    switch (f) {
        case CueFamily::Veto: return ActionCode::Veto;
        case CueFamily::RecallPrior: return ActionCode::RecallPrior;
        case CueFamily::Defer: return ActionCode::Defer;
        case CueFamily::ActionA: return ActionCode::ActionA;
        case CueFamily::ActionB: return ActionCode::ActionB;
    }
    return ActionCode::InvalidOrUnmapped;
}

/// Lowercases ASCII and splits on anything that is not a letter or digit.
/// "ACTION_A" and "action-a" both become {"action", "a"}.
inline std::vector<std::string> normalize_tokens(std::string_view text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (unsigned char c : text) {
        if (std::isalnum(c) && c < 0x80) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            tokens.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) tokens.push_back(std::move(cur));
    return tokens;
}

// Embedded copy of data/lexicon.tsv; a unit test keeps the two identical.
inline constexpr std::string_view kDefaultLexicon =
    "# action-cue lexicon\n"
    "# version: 1\n"
    "VETO\tveto\n"
    "VETO\tstop\n"
    "VETO\twithhold\n"
    "VETO\tcancel\n"
    "VETO\tabort\n"
    "VETO\thalt\n"
    "VETO\trefuse\n"
    "RECALL_PRIOR\trecall\n"
    "RECALL_PRIOR\trecall prior\n"
    "RECALL_PRIOR\tprior commitment\n"
    "RECALL_PRIOR\tearlier commitment\n"
    "DEFER\tdefer\n"
    "DEFER\tdelay\n"
    "DEFER\twait\n"
    "DEFER\tpostpone\n"
    "DEFER\thold off\n"
    "ACTION_A\taction a\n"
    "ACTION_A\toption a\n"
    "ACTION_A\tchoice a\n"
    "ACTION_B\taction b\n"
    "ACTION_B\toption b\n"
    "ACTION_B\tchoice b\n";

class Lexicon {
public:
    struct Phrase {
        CueFamily family;
        std::vector<std::string> tokens;
    };

    /// Parses the line-oriented `FAMILY<TAB>phrase` format. Blank lines and
    /// `#` comments are skipped; a `# version: N` comment sets the version.
    static Lexicon parse(std::string_view text) {
        Lexicon lex;
        lex.source_sha256_ = sha256_hex(text);
        std::istringstream in{std::string(text)};
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            if (line[0] == '#') {
                constexpr std::string_view tag = "# version:";
                if (line.rfind(tag, 0) == 0) {
                    auto v = line.substr(tag.size());
                    v.erase(0, v.find_first_not_of(' '));
                    lex.version_ = v;
                }
                continue;
            }
            const auto tab = line.find('\t');
            if (tab == std::string::npos)
                throw Error("config", "lexicon line " + std::to_string(lineno) + " has no TAB separator");
            const auto fam_name = line.substr(0, tab);
            std::optional<CueFamily> fam;
            for (CueFamily f : kCuePrecedence)
                if (to_string(f) == fam_name) fam = f;
            if (!fam) throw Error("config", "lexicon line " + std::to_string(lineno) + ": unknown family '" + fam_name + "'");
            auto toks = normalize_tokens(line.substr(tab + 1));
            if (toks.empty()) throw Error("config", "lexicon line " + std::to_string(lineno) + ": empty phrase");
            lex.by_first_[toks.front()].push_back(lex.phrases_.size());
            lex.phrases_.push_back({*fam, std::move(toks)});
        }
        if (lex.phrases_.empty()) throw Error("config", "lexicon has no phrases");
        return lex;
    }

    static Lexicon load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw Error("io", "cannot open lexicon file " + path);
        std::ostringstream ss;
        ss << f.rdbuf();
        return parse(ss.str());
    }

    static const Lexicon& builtin() {
        static const Lexicon lex = parse(kDefaultLexicon);
        return lex;
    }

    /// Bitmask of cue families (bit = CueFamily value) present in `tokens`.
    unsigned fired(const std::vector<std::string>& tokens) const {
        unsigned mask = 0;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            auto it = by_first_.find(tokens[i]);
            if (it == by_first_.end()) continue;
            for (std::size_t pi : it->second) {
                const auto& p = phrases_[pi];
                if (i + p.tokens.size() > tokens.size()) continue;
                if (std::equal(p.tokens.begin(), p.tokens.end(), tokens.begin() + static_cast<std::ptrdiff_t>(i)))
                    mask |= 1u << static_cast<unsigned>(p.family);
            }
        }
        return mask;
    }

    const std::vector<Phrase>& phrases() const noexcept { return phrases_; }
    const std::string& version() const noexcept { return version_; }
    const std::string& sha256() const noexcept { return source_sha256_; }

private:
    std::vector<Phrase> phrases_;
    std::unordered_map<std::string, std::vector<std::size_t>> by_first_;
    std::string version_ = "unversioned";
    std::string source_sha256_;
};

/// Resolves a fired-family mask to a code. VETO > RECALL_PRIOR > DEFER >
/// explicit option; A together with B (and nothing stronger) is unmapped.
constexpr ActionCode resolve_cues(unsigned mask) noexcept {
    auto has = [mask](CueFamily f) { return (mask >> static_cast<unsigned>(f)) & 1u; };
    if (has(CueFamily::Veto)) return ActionCode::Veto;
    if (has(CueFamily::RecallPrior)) return ActionCode::RecallPrior;
    if (has(CueFamily::Defer)) return ActionCode::Defer;
    const bool a = has(CueFamily::ActionA), b = has(CueFamily::ActionB);
    if (a && b) return ActionCode::InvalidOrUnmapped;
    if (a) return ActionCode::ActionA;
    if (b) return ActionCode::ActionB;
    return ActionCode::InvalidOrUnmapped;
}

/// Total function: any text (empty, binary, very large) yields a code.
/// Negated cues ("do not veto") are not special-cased.
inline ActionCode canonicalize(std::string_view raw_output, const Lexicon& lex = Lexicon::builtin()) {
    return resolve_cues(lex.fired(normalize_tokens(raw_output)));
}

/// Coarser grouping used by the action-family entropy layer.
constexpr std::string_view action_family(ActionCode a) noexcept {
    switch (a) {
        case ActionCode::ActionA:
        case ActionCode::ActionB: return "option";
        case ActionCode::Veto:
        case ActionCode::Defer: return "inhibit";
        case ActionCode::RecallPrior: return "memory";
        case ActionCode::InvalidOrUnmapped: return "unmapped";
    }
    return "unmapped";
}

}  // namespace csb
