#pragma once

// Run orchestration: plan -> generate -> score -> analyze -> report, with a
// SHA-256 manifest that also drives resumption.

#include "csb/agents.hpp"
#include "csb/guard.hpp"
#include "csb/ontology.hpp"
#include "csb/probes.hpp"
#include "csb/records.hpp"
#include "csb/scoring.hpp"
#include "csb/stats.hpp"

#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace csb {

namespace fs = std::filesystem;

enum class Backend : std::uint8_t { Simulated, Remote };

struct SufficiencyConfig {
    bool enabled = true;
    int events_per_family = 6;
    std::vector<VariantSpec> variants = {variant_a4(), variant_preset("A4_skeptical")};
};

struct RunConfig {
    std::uint64_t master_seed = 20240601;
    std::vector<TaskFamily> families = default_families(20);
    std::vector<ConditionName> conditions = {kAllConditions.begin(), kAllConditions.end()};
    std::vector<VariantSpec> variants = {variant_a4(), variant_preset("A4_no_reason"), variant_preset("A4_no_veto"),
                                         variant_a5()};
    std::vector<ControlTag> controls;  // extra structured-agent control variants
    int replicates = 3;
    Backend backend = Backend::Simulated;
    EndpointConfig endpoint;
    std::string structured_variant = "A4";
    std::string comparator_variant = "A5";
    std::string reason_lesion_variant = "A4_no_reason";
    std::string veto_lesion_variant = "A4_no_veto";
    int bootstrap_draws = kDefaultBootstrapDraws;
    GuardVisibility guard_visibility = GuardVisibility::Full;
    SufficiencyConfig sufficiency;
    bool include_placebo = false;
    int max_memory_depth = 10;
    double unmapped_noise = 0.02;
    std::string lexicon_path;  // empty: built-in lexicon

    void validate() const {
        if (families.empty()) throw Error("config", "no task families configured");
        if (variants.empty()) throw Error("config", "no variants configured");
        if (replicates < 1) throw Error("config", "replicates must be >= 1");
        if (bootstrap_draws < 1) throw Error("config", "bootstrap draws must be >= 1");
        std::set<std::string> ids;
        for (const auto& v : variants) {
            v.validate();
            if (!ids.insert(v.variant_id).second) throw Error("config", "duplicate variant id " + v.variant_id);
        }
        std::set<std::string> fams;
        for (const auto& f : families)
            if (!fams.insert(f.family_id).second) throw Error("config", "duplicate family id " + f.family_id);
        if (backend == Backend::Remote && endpoint.base_url.empty())
            throw Error("config", "remote backend needs an endpoint base_url");
    }
};

inline std::string control_variant_id(ControlTag t) { return "ctl_" + std::string(to_string(t)); }

inline void to_json(json& j, const RunConfig& c) {
    json conds = json::array();
    for (auto cn : c.conditions) conds.push_back(to_string(cn));
    json ctls = json::array();
    for (auto t : c.controls) ctls.push_back(to_string(t));
    j = json{{"master_seed", c.master_seed},
             {"families", c.families},
             {"conditions", conds},
             {"variants", c.variants},
             {"controls", ctls},
             {"replicates", c.replicates},
             {"backend", c.backend == Backend::Simulated ? "simulated" : "remote"},
             {"endpoint", c.endpoint},
             {"structured_variant", c.structured_variant},
             {"comparator_variant", c.comparator_variant},
             {"reason_lesion_variant", c.reason_lesion_variant},
             {"veto_lesion_variant", c.veto_lesion_variant},
             {"bootstrap_draws", c.bootstrap_draws},
             {"guard_visibility", to_string(c.guard_visibility)},
             {"sufficiency",
              {{"enabled", c.sufficiency.enabled},
               {"events_per_family", c.sufficiency.events_per_family},
               {"variants", c.sufficiency.variants}}},
             {"include_placebo", c.include_placebo},
             {"max_memory_depth", c.max_memory_depth},
             {"unmapped_noise", c.unmapped_noise},
             {"lexicon_path", c.lexicon_path}};
}

inline void from_json(const json& j, RunConfig& c) {
    c = RunConfig{};
    c.master_seed = j.value("master_seed", c.master_seed);
    if (j.contains("families")) c.families = j["families"].get<std::vector<TaskFamily>>();
    if (j.contains("conditions")) {
        c.conditions.clear();
        for (const auto& s : j["conditions"]) c.conditions.push_back(condition_from_string(s.get<std::string>()));
    }
    if (j.contains("variants")) c.variants = j["variants"].get<std::vector<VariantSpec>>();
    if (j.contains("controls")) {
        c.controls.clear();
        for (const auto& s : j["controls"]) c.controls.push_back(control_from_string(s.get<std::string>()));
    }
    c.replicates = j.value("replicates", c.replicates);
    const auto backend = j.value("backend", std::string("simulated"));
    if (backend == "simulated") c.backend = Backend::Simulated;
    else if (backend == "remote") c.backend = Backend::Remote;
    else throw Error("config", "unknown backend '" + backend + "'");
    if (j.contains("endpoint")) c.endpoint = j["endpoint"].get<EndpointConfig>();
    c.structured_variant = j.value("structured_variant", c.structured_variant);
    c.comparator_variant = j.value("comparator_variant", c.comparator_variant);
    c.reason_lesion_variant = j.value("reason_lesion_variant", c.reason_lesion_variant);
    c.veto_lesion_variant = j.value("veto_lesion_variant", c.veto_lesion_variant);
    c.bootstrap_draws = j.value("bootstrap_draws", c.bootstrap_draws);
    c.guard_visibility = guard_visibility_from_string(j.value("guard_visibility", std::string("full")));
    if (j.contains("sufficiency")) {
        const auto& s = j["sufficiency"];
        c.sufficiency.enabled = s.value("enabled", true);
        c.sufficiency.events_per_family = s.value("events_per_family", 6);
        if (s.contains("variants")) c.sufficiency.variants = s["variants"].get<std::vector<VariantSpec>>();
    }
    c.include_placebo = j.value("include_placebo", false);
    c.max_memory_depth = j.value("max_memory_depth", 10);
    c.unmapped_noise = j.value("unmapped_noise", 0.02);
    c.lexicon_path = j.value("lexicon_path", "");
}

inline std::string serialize_config(const RunConfig& c) { return json(c).dump(2) + "\n"; }

/// Main-benchmark rows a config produces, control variants included.
inline std::size_t planned_rows(const RunConfig& c) {
    std::size_t events = 0;
    for (const auto& f : c.families) events += static_cast<std::size_t>(f.event_count);
    return events * c.conditions.size() * (c.variants.size() + c.controls.size()) * static_cast<std::size_t>(c.replicates);
}

// ---------------------------------------------------------------------------
// Probe instantiation

inline std::string lesion_rule(const VariantSpec& v) {
    std::vector<std::string> off;
    if (!v.reason) off.emplace_back("reason");
    if (!v.memory) off.emplace_back("memory");
    if (!v.veto) off.emplace_back("veto");
    if (!v.self_state) off.emplace_back("self-state");
    if (off.empty()) return "All state modules are enabled.";
    std::string s = "Disabled modules (ignore their fields):";
    for (const auto& o : off) s += " " + o;
    return s + ".";
}

inline bool needs_prior(ControlTag t) {
    return t == ControlTag::DistributionMatchedPrior || t == ControlTag::ActionPriorOnly ||
           t == ControlTag::EntropyPriorNoField;
}

inline ProbeRecord instantiate(const ProbeRecord& base, const VariantSpec& v, int replicate,
                               const std::vector<ProbeRecord>& pool, const ActionPrior* prior, std::uint64_t seed) {
    ProbeRecord p = base;
    p.key.variant = v.variant_id;
    p.key.replicate = replicate;
    p = apply_control(p, v.control, pool, prior, seed);
    p.visible_prompt["module_lesion_rule"] = lesion_rule(v);
    return p;
}

// ---------------------------------------------------------------------------
// Agents behind one call signature

using AgentFn = std::function<AgentResponse(const ProbeRecord&, const VariantSpec&)>;

inline GenerationRecord to_generation(const ProbeRecord& p, AgentResponse r, const std::string& model_id) {
    GenerationRecord g;
    g.key = p.key;
    g.raw_output = std::move(r.raw_output);
    g.parse_status = r.status;
    if (g.parse_status == ParseStatus::Ok && g.raw_output.empty()) g.parse_status = ParseStatus::ParseError;
    g.trace = std::move(r.trace);
    g.provider_meta = r.meta;
    g.diagnostic = std::move(r.diagnostic);
    g.model_id = model_id;
    return g;
}

/// Runs `agent` over probes with at most `in_flight` concurrent calls. Results
/// are stored by probe index, so output order never depends on scheduling.
inline std::vector<GenerationRecord> fan_out(const std::vector<ProbeRecord>& probes,
                                             const std::map<std::string, VariantSpec>& variants, const AgentFn& agent,
                                             const std::string& model_id, int in_flight) {
    std::vector<GenerationRecord> out(probes.size());
    auto one = [&](std::size_t i) {
        const auto& p = probes[i];
        out[i] = to_generation(p, agent(p, variants.at(p.key.variant)), model_id);
    };
    if (in_flight <= 1 || probes.size() < 2) {
        for (std::size_t i = 0; i < probes.size(); ++i) one(i);
        return out;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    std::exception_ptr failure;
    std::mutex fail_mu;
    for (int w = 0; w < in_flight; ++w)
        workers.emplace_back([&] {
            for (std::size_t i = next++; i < probes.size(); i = next++) {
                try {
                    one(i);
                } catch (...) {
                    std::lock_guard lock(fail_mu);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    for (auto& t : workers) t.join();
    if (failure) std::rethrow_exception(failure);
    return out;
}

// ---------------------------------------------------------------------------
// Analysis summary

struct CellSummary {
    ComponentTable components;
    std::size_t rows = 0;
    std::size_t correct = 0;
    std::optional<double> afci_mean;
    std::optional<double> trace_composite_mean;
};

struct Summary {
    std::map<std::pair<std::string, std::string>, CellSummary> cells;  // (dataset, variant)
    std::vector<std::string> datasets;
    std::size_t total_rows = 0;
    double parse_error_rate = 0.0;
    double unmapped_rate = 0.0;
    std::optional<double> structured_irrelevant_fp;
    std::vector<ContrastTable> contrasts;
    std::optional<GateLedger> gates;
    std::vector<std::string> diagnostics;
    std::vector<EntropyLayerReport> entropy;
    std::optional<CalibrationGap> calibration;
    std::optional<MatchingGate> matching;
};

inline const CellSummary* find_cell(const Summary& s, const std::string& dataset, const std::string& variant) {
    auto it = s.cells.find({dataset, variant});
    return it == s.cells.end() ? nullptr : &it->second;
}

inline Summary summarize(const std::vector<ScoredRecord>& rows, const RunConfig& cfg) {
    Summary s;
    std::set<std::string> datasets, variants;
    std::size_t parse = 0, unmapped = 0, fp = 0, irr = 0;
    std::map<std::pair<std::string, std::string>, std::vector<const ScoredRecord*>> by_cell;
    for (const auto& r : rows) {
        datasets.insert(r.key.dataset);
        variants.insert(r.key.variant);
        by_cell[{r.key.dataset, r.key.variant}].push_back(&r);
        parse += r.parse_error ? 1 : 0;
        unmapped += (r.unmapped && !r.parse_error) ? 1 : 0;
        if (r.key.variant == cfg.structured_variant && r.condition_class == ConditionClass::Irrelevant) {
            ++irr;
            fp += r.unnecessary_change ? 1 : 0;
        }
    }
    s.datasets.assign(datasets.begin(), datasets.end());
    s.total_rows = rows.size();
    if (!rows.empty()) {
        s.parse_error_rate = static_cast<double>(parse) / static_cast<double>(rows.size());
        s.unmapped_rate = static_cast<double>(unmapped) / static_cast<double>(rows.size());
    }
    if (irr) s.structured_irrelevant_fp = static_cast<double>(fp) / static_cast<double>(irr);
    else s.diagnostics.push_back("structured variant has no irrelevant-cue rows");

    for (const auto& [cell, members] : by_cell) {
        CellSummary c;
        c.components = component_scores(rows, cell.second, cell.first, cfg.include_placebo);
        c.rows = members.size();
        double afci_sum = 0, tm_sum = 0;
        std::size_t afci_n = 0, tm_n = 0;
        for (const auto* r : members) {
            c.correct += r->correct ? 1 : 0;
            if (r->afci_terms) {
                afci_sum += r->afci_terms->composite();
                ++afci_n;
            }
            if (r->trace_metrics) {
                tm_sum += r->trace_metrics->composite();
                ++tm_n;
            }
        }
        // Rows without a trace count as zero coupling when any row has one.
        if (afci_n) c.afci_mean = afci_sum / static_cast<double>(members.size());
        if (tm_n) c.trace_composite_mean = tm_sum / static_cast<double>(members.size());
        s.cells[cell] = std::move(c);
    }

    auto metric_contrast = [&](const std::string& name, const std::string& comparator,
                               const std::function<std::optional<double>(const CellSummary&)>& metric) {
        if (!variants.count(cfg.structured_variant) || !variants.count(comparator)) return;
        std::map<std::string, double> deltas;
        for (const auto& d : s.datasets) {
            const auto* a = find_cell(s, d, cfg.structured_variant);
            const auto* b = find_cell(s, d, comparator);
            if (!a || !b) {
                s.diagnostics.push_back(name + ": missing cell for dataset " + d);
                continue;
            }
            auto ma = metric(*a), mb = metric(*b);
            if (!ma || !mb) {
                s.diagnostics.push_back(name + ": metric undefined for dataset " + d);
                continue;
            }
            deltas[d] = *ma - *mb;
        }
        if (deltas.empty()) return;
        s.contrasts.push_back(contrast_table(name, deltas, cfg.bootstrap_draws, derive_seed(cfg.master_seed, name)));
    };
    auto composite = [](const CellSummary& c) { return c.components.composite(); };
    auto component = [](ComponentId id) {
        return [id](const CellSummary& c) -> std::optional<double> {
            if (const auto* k = c.components.find(id)) return k->value;
            return std::nullopt;
        };
    };
    const auto& sv = cfg.structured_variant;
    metric_contrast("composite: " + sv + " - " + cfg.comparator_variant, cfg.comparator_variant, composite);
    metric_contrast("B_RSI: " + sv + " - " + cfg.reason_lesion_variant, cfg.reason_lesion_variant, component(ComponentId::RSI));
    metric_contrast("B_VEI: " + sv + " - " + cfg.veto_lesion_variant, cfg.veto_lesion_variant, component(ComponentId::VEI));
    metric_contrast("B_MCI: " + sv + " - " + cfg.comparator_variant, cfg.comparator_variant, component(ComponentId::MCI));
    metric_contrast("B_SCI: " + sv + " - " + cfg.comparator_variant, cfg.comparator_variant, component(ComponentId::SCI));
    metric_contrast("AFCI: " + sv + " - " + cfg.comparator_variant, cfg.comparator_variant,
                    [](const CellSummary& c) { return c.afci_mean ? c.afci_mean : std::optional<double>(0.0); });
    for (ControlTag t : cfg.controls) {
        const auto id = control_variant_id(t);
        metric_contrast("accuracy: " + sv + " - " + id, id, [](const CellSummary& c) -> std::optional<double> {
            return static_cast<double>(c.correct) / static_cast<double>(c.rows);
        });
    }

    auto find_contrast = [&](std::string_view prefix, const std::string& comparator) -> const ContrastTable* {
        const std::string name = std::string(prefix) + sv + " - " + comparator;
        for (const auto& c : s.contrasts)
            if (c.name == name) return &c;
        return nullptr;
    };
    GateInputs in;
    in.parse_error_rate = s.parse_error_rate;
    in.unmapped_rate = s.unmapped_rate;
    in.structured_irrelevant_fp = s.structured_irrelevant_fp;
    in.dataset_count = static_cast<int>(s.datasets.size());
    if (const auto* c = find_contrast("composite: ", cfg.comparator_variant)) {
        in.composite_direction_count = c->positive;
        in.bootstrap_lower = c->bootstrap_lower;
    }
    if (const auto* c = find_contrast("B_RSI: ", cfg.reason_lesion_variant))
        in.component_direction_counts["reason_lesion_B_RSI_direction_datasets"] = c->positive;
    if (const auto* c = find_contrast("B_VEI: ", cfg.veto_lesion_variant))
        in.component_direction_counts["veto_lesion_B_VEI_direction_datasets"] = c->positive;
    try {
        s.gates = gate_check(in);
    } catch (const Error& e) {
        s.diagnostics.push_back(e.what());
    }

    s.entropy = entropy_layers(rows);
    if (variants.count(cfg.structured_variant) && variants.count(cfg.comparator_variant)) {
        s.calibration = calibration_gap(cfg.comparator_variant, cfg.structured_variant, s.entropy);
        // Forced-budget matching between structured and comparator rows, paired by event key.
        std::map<std::string, ProviderMeta> a, b;
        std::vector<std::string> ca, cb;
        (void)ca;
        (void)cb;
        std::vector<ActionCode> acts_a, acts_b;
        for (const auto& r : rows) {
            if (!r.extra.contains("provider_meta")) continue;
            const auto meta = r.extra["provider_meta"].get<ProviderMeta>();
            const auto pair_key = r.key.dataset + "/" + r.key.base_event + "/" + r.key.condition + "/" + std::to_string(r.key.replicate);
            if (r.key.variant == cfg.structured_variant) {
                a[pair_key] = meta;
                acts_a.push_back(r.canonical_action);
            } else if (r.key.variant == cfg.comparator_variant) {
                b[pair_key] = meta;
                acts_b.push_back(r.canonical_action);
            }
        }
        if (!a.empty() && !b.empty()) {
            try {
                s.matching = matching_gate(a, b, {shannon_entropy(acts_a), shannon_entropy(acts_b)});
            } catch (const Error& e) {
                s.diagnostics.push_back(e.what());
            }
        }
    }
    return s;
}

inline json cells_json(const Summary& s) {
    json arr = json::array();
    for (const auto& [cell, c] : s.cells) {
        json comps = json::object();
        for (const auto& k : c.components.scores)
            comps[std::string(to_string(k.component))] = {{"value", k.value},
                                                          {"target_rate", k.target_rate},
                                                          {"irrelevant_fp_rate", k.irrelevant_fp_rate},
                                                          {"target_n", k.target_n},
                                                          {"irrelevant_n", k.irrelevant_n}};
        const auto comp = c.components.composite();
        arr.push_back({{"dataset", cell.first},
                       {"variant", cell.second},
                       {"rows", c.rows},
                       {"accuracy", static_cast<double>(c.correct) / static_cast<double>(c.rows)},
                       {"components", comps},
                       {"behavioral_composite", comp ? json(*comp) : json(nullptr)},
                       {"afci_mean", c.afci_mean ? json(*c.afci_mean) : json(nullptr)},
                       {"trace_composite_C", c.trace_composite_mean ? json(*c.trace_composite_mean) : json(nullptr)},
                       {"diagnostics", c.components.diagnostics}});
    }
    return arr;
}

inline json entropy_json(const Summary& s) {
    json layers = json::array();
    for (const auto& l : s.entropy) {
        json cells = json::array();
        for (const auto& [cell, e] : l.cells)
            cells.push_back({{"dataset", cell.first}, {"variant", cell.second}, {"bits", e.bits}, {"support", e.support}});
        layers.push_back({{"layer", to_string(l.layer)}, {"cells", cells}});
    }
    json j{{"layers", layers}};
    if (s.calibration)
        j["calibration_gap"] = {{"gamma", s.calibration->gamma},
                                {"criterion", "<= 0.15"},
                                {"pass", s.calibration->pass},
                                {"layer_gaps", s.calibration->layer_gaps}};
    return j;
}

inline json sufficiency_json(const SufficiencySummary& s) {
    json conds = json::object();
    for (const auto& [tag, c] : s.conditions)
        conds[tag] = {{"n", c.n},
                      {"raw_accuracy", c.raw_accuracy},
                      {"wrapped_accuracy", c.wrapped_accuracy},
                      {"raw_foreign_following", c.raw_following ? json(*c.raw_following) : json(nullptr)},
                      {"wrapped_foreign_following", c.wrapped_following ? json(*c.wrapped_following) : json(nullptr)}};
    return {{"variant", s.variant},
            {"conditions", conds},
            {"a_full", s.a_full},
            {"a_only", s.a_only},
            {"a_control", s.a_control},
            {"best_control", s.best_control},
            {"recovery_fraction", s.recovery.value ? json(*s.recovery.value) : json(nullptr)},
            {"recovery_note", s.recovery.note}};
}

// ---------------------------------------------------------------------------
// Report rendering

inline std::string ascii_bar(double v, double scale = 1.0, int width = 30) {
    const int n = static_cast<int>(std::round(std::clamp(std::abs(v) / scale, 0.0, 1.0) * width));
    return (v < 0 ? "-" : "+") + std::string(static_cast<std::size_t>(n), '#');
}

struct PredictorReport {
    DeltaAuc delta;
    std::vector<ThresholdRow> thresholds;
    std::vector<CalibrationBin> bins;
};

inline std::string render_report(const Summary& s, const RunConfig& cfg, const json& sufficiency,
                                 const std::optional<PredictorReport>& predictor = std::nullopt) {
    std::ostringstream o;
    o << "# Causal state-binding run report\n\n";
    o << "Master seed " << cfg.master_seed << "; " << s.datasets.size() << " datasets; " << s.total_rows
      << " scored rows; bootstrap draws " << cfg.bootstrap_draws << ".\n\n";

    const bool pass = s.gates && s.gates->pass();
    o << (pass ? "**PASS**" : "**FAIL**") << ": criterion gates\n\n";
    if (s.gates) {
        o << "| gate | observed | criterion | result |\n|---|---|---|---|\n";
        for (const auto& e : s.gates->entries)
            o << "| " << e.name << " | " << fmt_fixed(e.observed, 6) << " | " << e.comparator << " " << fmt_fixed(e.threshold, 4)
              << " | " << (e.pass ? "pass" : "FAIL") << " |\n";
        o << "\n";
    }
    for (const auto& d : s.diagnostics) o << "- diagnostic: " << d << "\n";
    if (!s.diagnostics.empty()) o << "\n";

    o << "## Component scores per dataset\n\n```csv\ndataset,variant,B_RSI,B_MCI,B_VEI,B_SCI,composite,accuracy,afci,trace_C,flags\n";
    for (const auto& [cell, c] : s.cells) {
        o << cell.first << "," << cell.second;
        for (ComponentId id : kAllComponentIds) {
            const auto* k = c.components.find(id);
            o << "," << (k ? fmt_fixed(k->value, 6) : std::string("NA"));
        }
        const auto comp = c.components.composite();
        o << "," << (comp ? fmt_fixed(*comp, 6) : std::string("NA"));
        o << "," << fmt_fixed(static_cast<double>(c.correct) / static_cast<double>(c.rows), 6);
        o << "," << (c.afci_mean ? fmt_fixed(*c.afci_mean, 6) : std::string("NA"));
        o << "," << (c.trace_composite_mean ? fmt_fixed(*c.trace_composite_mean, 6) : std::string("NA"));
        std::string flags;
        for (const auto& d : c.components.diagnostics) flags += (flags.empty() ? "" : "; ") + d;
        o << "," << (flags.empty() ? "" : "\"" + flags + "\"") << "\n";
    }
    o << "```\n\n";

    o << "## Dataset contrasts\n\n";
    for (const auto& c : s.contrasts) {
        o << "### " << c.name << "\n\n```\n";
        for (std::size_t i = 0; i < c.datasets.size(); ++i) {
            char line[160];
            std::snprintf(line, sizeof line, "%-16s %+9.6f  %s\n", c.datasets[i].c_str(), c.deltas[i], ascii_bar(c.deltas[i]).c_str());
            o << line;
        }
        o << "positive " << c.positive << "/" << c.deltas.size() << "  mean " << fmt_fixed(c.mean) << "  min " << fmt_fixed(c.min);
        if (c.lodo_min) o << "  LODO-min " << fmt_fixed(*c.lodo_min);
        if (c.top_removed_mean) o << "  top-removed " << fmt_fixed(*c.top_removed_mean);
        o << "  sign-p " << (c.sign ? fmt_fixed(c.sign->p_one_sided, 7) : std::string("NA"));
        o << "  boot-lower95 " << fmt_fixed(c.bootstrap_lower) << "\n```\n\n";
    }

    o << "## Entropy layers (dataset-mean bits)\n\n```csv\nvariant";
    for (const auto& l : s.entropy) o << "," << to_string(l.layer);
    o << "\n";
    std::set<std::string> vs;
    for (const auto& [cell, _] : s.cells) vs.insert(cell.second);
    for (const auto& v : vs) {
        o << v;
        for (const auto& l : s.entropy) {
            double sum = 0;
            int n = 0;
            for (const auto& [cell, e] : l.cells)
                if (cell.second == v) {
                    sum += e.bits;
                    ++n;
                }
            o << "," << (n ? fmt_fixed(sum / n, 6) : std::string("NA"));
        }
        o << "\n";
    }
    o << "```\n\n";
    if (s.calibration)
        o << "Calibration gap " << cfg.comparator_variant << " vs " << cfg.structured_variant << ": Gamma = "
          << fmt_fixed(s.calibration->gamma) << " (criterion <= 0.15): " << (s.calibration->pass ? "pass" : "fail") << "\n\n";
    if (s.matching) {
        const auto& m = *s.matching;
        o << "Budget matching " << cfg.structured_variant << " vs " << cfg.comparator_variant << ": prompt-match "
          << fmt_fixed(m.values.prompt_match_rate, 3) << ", completion-match " << fmt_fixed(m.values.completion_match_rate, 3)
          << ", total-token ratio " << fmt_fixed(m.values.total_token_ratio, 3) << ", latency ratio "
          << fmt_fixed(m.values.latency_ratio, 3) << ", entropy gap " << fmt_fixed(m.values.entropy_gap, 3) << " bits: "
          << (m.pass() ? "pass" : "fail") << " (informational)\n\n";
    }

    if (sufficiency.is_object() && sufficiency.contains("variants")) {
        o << "## Minimal decisive-field sufficiency and wrapper\n\n```csv\nvariant,a_full,a_only,a_control,best_control,recovery_fraction\n";
        for (const auto& v : sufficiency["variants"]) {
            const auto& f = v["guard_visibility"][std::string(to_string(cfg.guard_visibility))];
            o << f["variant"].get<std::string>() << "," << fmt_fixed(f["a_full"].get<double>(), 3) << ","
              << fmt_fixed(f["a_only"].get<double>(), 3) << "," << fmt_fixed(f["a_control"].get<double>(), 3) << ","
              << f["best_control"].get<std::string>() << ","
              << (f["recovery_fraction"].is_null() ? "undefined" : fmt_fixed(f["recovery_fraction"].get<double>(), 3)) << "\n";
        }
        o << "```\n\n```csv\nvariant,guard_visibility,condition,n,raw_accuracy,wrapped_accuracy,raw_foreign_following,wrapped_foreign_following\n";
        for (const auto& v : sufficiency["variants"])
            for (auto it = v["guard_visibility"].begin(); it != v["guard_visibility"].end(); ++it)
                for (auto c = it.value()["conditions"].begin(); c != it.value()["conditions"].end(); ++c) {
                    const auto& cc = c.value();
                    auto num = [](const json& x) { return x.is_null() ? std::string("NA") : fmt_fixed(x.get<double>(), 3); };
                    o << it.value()["variant"].get<std::string>() << "," << it.key() << "," << c.key() << ","
                      << cc["n"].get<std::size_t>() << "," << num(cc["raw_accuracy"]) << "," << num(cc["wrapped_accuracy"])
                      << "," << num(cc["raw_foreign_following"]) << "," << num(cc["wrapped_foreign_following"]) << "\n";
                }
        o << "```\n\n";
    }

    if (predictor) {
        const auto& d = predictor->delta;
        o << "## Reliability predictor\n\nBaseline AUC " << fmt_fixed(d.auc_baseline, 3) << ", augmented AUC "
          << fmt_fixed(d.auc_augmented, 3) << ", delta " << fmt_fixed(d.delta, 3) << ", group-bootstrap lower 95% "
          << fmt_fixed(d.bootstrap_lower, 3) << " (" << d.draws_used << " draws).\n\n";
        o << "```csv\nthreshold,accepted_fraction,accepted_hit_rate,accepted_violation_rate,net_benefit,flag\n";
        for (const auto& r : predictor->thresholds)
            o << fmt_fixed(r.threshold, 2) << "," << fmt_fixed(r.accepted_fraction, 4) << "," << fmt_fixed(r.accepted_hit_rate, 4)
              << "," << fmt_fixed(r.accepted_violation_rate, 4) << "," << fmt_fixed(r.net_benefit, 4) << ","
              << (r.degenerate ? "empty-acceptance" : "") << "\n";
        o << "```\n\n```csv\nbin_lo,bin_hi,count,mean_prob,observed_rate\n";
        for (const auto& b : predictor->bins)
            o << fmt_fixed(b.lo, 2) << "," << fmt_fixed(b.hi, 2) << "," << b.count << "," << fmt_fixed(b.mean_prob, 4) << ","
              << fmt_fixed(b.observed_rate, 4) << "\n";
        o << "```\n";
    }
    return o.str();
}

// ---------------------------------------------------------------------------
// Runner

inline constexpr std::array<std::string_view, 5> kStages = {"plan", "generate", "score", "analyze", "report"};

inline const std::map<std::string, std::vector<std::string>>& stage_outputs() {
    static const std::map<std::string, std::vector<std::string>> outs = {
        {"plan", {"run_config.json", "lexicon.tsv", "probes.jsonl", "sufficiency_probes.jsonl"}},
        {"generate", {"control_probes.jsonl", "generations.jsonl", "sufficiency_generations.jsonl"}},
        {"score", {"scored.jsonl", "sufficiency_scored.jsonl"}},
        {"analyze", {"contrasts.json", "gates.json", "entropy.json", "sufficiency.json"}},
        {"report", {"report.md"}},
    };
    return outs;
}

class Runner {
public:
    Runner(RunConfig cfg, fs::path dir, std::ostream* log = nullptr)
        : cfg_(std::move(cfg)), dir_(std::move(dir)), log_(log) {
        cfg_.validate();
        lexicon_text_ = cfg_.lexicon_path.empty() ? std::string(kDefaultLexicon) : read_file(cfg_.lexicon_path);
        lexicon_ = Lexicon::parse(lexicon_text_);
        variants_by_id_ = all_variants();
    }

    const RunConfig& config() const noexcept { return cfg_; }
    const Manifest& manifest() const noexcept { return manifest_; }

    /// Runs every stage, skipping stages whose recorded outputs still verify.
    void run(std::string_view stop_after = "report") {
        if (cfg_.backend == Backend::Remote) (void)load_credentials(cfg_.endpoint);
        fs::create_directories(dir_);
        load_manifest_for_resume();
        bool invalidate = false;
        for (auto stage : kStages) {
            const std::string st(stage);
            if (!invalidate && manifest_.stage_done(st) && outputs_verify(st)) {
                note("stage " + st + ": up to date");
            } else {
                invalidate = true;
                run_stage(st);
            }
            if (stage == stop_after) break;
        }
    }

    void run_stage(const std::string& stage) {
        fs::create_directories(dir_);
        if (stage != "plan" && !fs::exists(dir_ / "manifest.json")) throw Error("missing", "no manifest in " + dir_.string() + "; run plan first");
        if (stage != "plan") load_manifest();
        // Drop this stage and everything after it from the completed list.
        auto& done = manifest_.stages_completed;
        auto pos = std::find(kStages.begin(), kStages.end(), stage);
        if (pos == kStages.end()) throw Error("config", "unknown stage " + stage);
        for (auto it = pos; it != kStages.end(); ++it) done.erase(std::remove(done.begin(), done.end(), std::string(*it)), done.end());
        note("stage " + stage + ": running");
        if (stage == "plan") stage_plan();
        else if (stage == "generate") stage_generate();
        else if (stage == "score") stage_score();
        else if (stage == "analyze") stage_analyze();
        else stage_report();
        for (const auto& f : stage_outputs().at(stage)) manifest_.record(dir_, f);
        manifest_.mark(stage);
        save_manifest();
    }

    void set_predictor(std::optional<PredictorReport> p) { predictor_ = std::move(p); }

    /// Inject a custom agent (tests); defaults to the configured backend.
    void set_agent(AgentFn fn, std::string model_id) {
        agent_override_ = std::move(fn);
        model_id_override_ = std::move(model_id);
    }

    fs::path path(const std::string& rel) const { return dir_ / rel; }

    std::vector<std::string> missing_artifacts(const std::string& stage) const {
        std::vector<std::string> missing;
        for (const auto& f : stage_outputs().at(stage))
            if (!fs::exists(dir_ / f)) missing.push_back(f);
        return missing;
    }

private:
    std::map<std::string, VariantSpec> all_variants() const {
        std::map<std::string, VariantSpec> m;
        for (const auto& v : cfg_.variants) m[v.variant_id] = v;
        for (ControlTag t : cfg_.controls) {
            VariantSpec v = variant_a4();
            v.variant_id = control_variant_id(t);
            v.control = t;
            m[v.variant_id] = v;
        }
        if (cfg_.sufficiency.enabled)
            for (const auto& v : cfg_.sufficiency.variants) m.emplace(v.variant_id, v);
        return m;
    }

    void note(const std::string& msg) {
        if (log_) *log_ << msg << "\n";
    }

    void load_manifest() {
        manifest_ = json::parse(read_file((dir_ / "manifest.json").string())).get<Manifest>();
    }

    void load_manifest_for_resume() {
        manifest_ = Manifest{};
        if (!fs::exists(dir_ / "manifest.json")) return;
        load_manifest();
        // A different configuration invalidates everything.
        if (!fs::exists(dir_ / "run_config.json") || read_file((dir_ / "run_config.json").string()) != serialize_config(cfg_)) {
            manifest_.stages_completed.clear();
            manifest_.info = json::object();
        }
    }

    bool outputs_verify(const std::string& stage) const {
        for (const auto& f : stage_outputs().at(stage)) {
            const auto* e = manifest_.find(f);
            if (!e || !fs::exists(dir_ / f) || sha256_hex(read_file((dir_ / f).string())) != e->sha256) return false;
        }
        return true;
    }

    void save_manifest() {
        // Keys recorded by stages skipped on resume stay as loaded.
        if (!manifest_.info.is_object()) manifest_.info = json::object();
        manifest_.info["config_sha256"] = sha256_hex(serialize_config(cfg_));
        manifest_.info["lexicon_sha256"] = lexicon_.sha256();
        manifest_.info["lexicon_version"] = lexicon_.version();
        manifest_.info["planned_rows"] = planned_rows(cfg_);
        for (const auto& [k, v] : extra_info_.items()) manifest_.info[k] = v;
        write_file((dir_ / "manifest.json").string(), json(manifest_).dump(2) + "\n");
    }

    AgentFn make_agent() {
        if (agent_override_) return agent_override_;
        if (cfg_.backend == Backend::Simulated) {
            SimulationSettings sim{cfg_.unmapped_noise, cfg_.max_memory_depth};
            const auto seed = cfg_.master_seed;
            return [sim, seed](const ProbeRecord& p, const VariantSpec& v) { return simulated_agent(p, v, seed, sim); };
        }
        remote_ = std::make_shared<RemoteAgent>(cfg_.endpoint);
        auto remote = remote_;
        const auto seed = cfg_.master_seed;
        return [remote, seed](const ProbeRecord& p, const VariantSpec& v) {
            return remote->call(p, v.temperature, v.top_p, derive_seed(seed, p.key.str()));
        };
    }

    std::string model_id() const {
        if (agent_override_) return model_id_override_;
        return cfg_.backend == Backend::Simulated ? "simulated-reference" : cfg_.endpoint.model;
    }

    int in_flight() const { return cfg_.backend == Backend::Remote ? std::max(1, cfg_.endpoint.max_in_flight) : 1; }

    // -- plan ---------------------------------------------------------------

    std::vector<ProbeRecord> base_probes(const TaskFamily& f) const {
        return generate_events(f, cfg_.master_seed, cfg_.conditions);
    }

    std::vector<ProbeRecord> sufficiency_base(const TaskFamily& fam, std::vector<ProbeRecord>& pool) const {
        TaskFamily f = fam;
        f.event_count = cfg_.sufficiency.events_per_family;
        pool = generate_events(f, derive_seed(cfg_.master_seed, "sufficiency"));
        static constexpr std::array<ConditionName, 5> rotation = {ConditionName::ReasonFlip, ConditionName::MemoryConflict,
                                                                  ConditionName::VetoCue, ConditionName::SelfContinuity,
                                                                  ConditionName::Baseline};
        std::vector<ProbeRecord> chosen;
        for (int e = 0; e < f.event_count; ++e) {
            const auto want = rotation[static_cast<std::size_t>(e) % rotation.size()];
            for (const auto& p : pool)
                if (p.key.base_event == detail::event_id(e) && p.condition == want) chosen.push_back(p);
        }
        return chosen;
    }

    void stage_plan() {
        write_file((dir_ / "run_config.json").string(), serialize_config(cfg_));
        write_file((dir_ / "lexicon.tsv").string(), lexicon_text_);
        std::vector<ProbeRecord> probes;
        for (const auto& fam : cfg_.families) {
            const auto base = base_probes(fam);
            std::vector<VariantSpec> planned = cfg_.variants;
            for (ControlTag t : cfg_.controls)
                if (!needs_prior(t)) planned.push_back(variants_by_id_.at(control_variant_id(t)));
            for (const auto& v : planned)
                for (int r = 0; r < cfg_.replicates; ++r)
                    for (const auto& b : base) probes.push_back(instantiate(b, v, r, base, nullptr, cfg_.master_seed));
        }
        for (const auto& p : probes)
            if (leaks_hidden_target(p)) throw Error("hygiene", "visible prompt of " + p.key.str() + " exposes a scorer-target key");
        write_jsonl((dir_ / "probes.jsonl").string(), probes);

        // Sufficiency probes that need no prior; the prior-only condition is
        // constructed in the generate stage once structured rows exist.
        std::vector<ProbeRecord> suff;
        if (cfg_.sufficiency.enabled)
            for (const auto& fam : cfg_.families) {
                std::vector<ProbeRecord> pool;
                const auto chosen = sufficiency_base(fam, pool);
                for (const auto& v : cfg_.sufficiency.variants)
                    for (ControlTag t : {ControlTag::FullState, ControlTag::OnlyDecisiveField, ControlTag::SurfaceOnly,
                                         ControlTag::ScrambledDecisiveField, ControlTag::IrrelevantCueAdded})
                        for (const auto& b : chosen) {
                            VariantSpec vv = v;
                            vv.control = t;
                            auto p = instantiate(b, vv, 0, pool, nullptr, cfg_.master_seed);
                            p.key.condition = std::string(to_string(t));
                            suff.push_back(std::move(p));
                        }
            }
        write_jsonl((dir_ / "sufficiency_probes.jsonl").string(), suff);
    }

    // -- generate -----------------------------------------------------------

    std::map<std::string, ActionPrior> fit_priors(const std::vector<ScoredRecord>& structured, bool calibration_only) const {
        std::map<std::string, ActionPrior> priors;
        for (const auto& fam : cfg_.families) {
            std::vector<ScoredRecord> rows;
            for (const auto& r : structured)
                if (r.key.dataset == fam.family_id &&
                    (!calibration_only || in_calibration_split(r.key.base_event, cfg_.master_seed)))
                    rows.push_back(r);
            priors.emplace(fam.family_id, fit_action_prior(rows, fam));
        }
        return priors;
    }

    std::vector<ScoredRecord> score_all(const std::vector<GenerationRecord>& gens, const std::vector<ProbeRecord>& probes) const {
        std::map<std::string, const ProbeRecord*> by_key;
        for (const auto& p : probes) by_key[p.key.str()] = &p;
        std::vector<ScoredRecord> out;
        out.reserve(gens.size());
        for (const auto& g : gens) {
            auto it = by_key.find(g.key.str());
            if (it == by_key.end()) throw Error("wiring", "generation " + g.key.str() + " has no probe");
            auto s = score_row(g, *it->second, cfg_.max_memory_depth, lexicon_);
            if (g.provider_meta) s.extra["provider_meta"] = *g.provider_meta;
            if (g.diagnostic) s.extra["diagnostic"] = *g.diagnostic;
            out.push_back(std::move(s));
        }
        return out;
    }

    void stage_generate() {
        auto agent = make_agent();
        const auto mid = model_id();
        auto probes = read_jsonl<ProbeRecord>((dir_ / "probes.jsonl").string());
        auto gens = fan_out(probes, variants_by_id_, agent, mid, in_flight());

        std::vector<ProbeRecord> control_probes;
        std::vector<ControlTag> prior_controls;
        for (ControlTag t : cfg_.controls)
            if (needs_prior(t)) prior_controls.push_back(t);
        if (!prior_controls.empty()) {
            std::vector<ScoredRecord> structured;
            for (const auto& s : score_all(gens, probes))
                if (s.key.variant == cfg_.structured_variant) structured.push_back(s);
            const auto priors = fit_priors(structured, true);
            for (const auto& fam : cfg_.families) {
                const auto base = base_probes(fam);
                for (ControlTag t : prior_controls)
                    for (int r = 0; r < cfg_.replicates; ++r)
                        for (const auto& b : base)
                            control_probes.push_back(instantiate(b, variants_by_id_.at(control_variant_id(t)), r, base,
                                                                 &priors.at(fam.family_id), cfg_.master_seed));
            }
            auto more = fan_out(control_probes, variants_by_id_, agent, mid, in_flight());
            gens.insert(gens.end(), std::make_move_iterator(more.begin()), std::make_move_iterator(more.end()));
        }

        std::vector<GenerationRecord> suff_gens;
        if (cfg_.sufficiency.enabled) {
            auto suff = read_jsonl<ProbeRecord>((dir_ / "sufficiency_probes.jsonl").string());
            suff_gens = fan_out(suff, variants_by_id_, agent, mid, in_flight());
            // Action-prior-only rows use the structured variant's full-state action prior.
            std::vector<ScoredRecord> full_rows;
            for (const auto& s : score_all(suff_gens, suff))
                if (s.control == ControlTag::FullState && s.key.variant == cfg_.sufficiency.variants.front().variant_id)
                    full_rows.push_back(s);
            const auto priors = fit_priors(full_rows, false);
            for (const auto& fam : cfg_.families) {
                std::vector<ProbeRecord> pool;
                const auto chosen = sufficiency_base(fam, pool);
                for (const auto& v : cfg_.sufficiency.variants)
                    for (const auto& b : chosen) {
                        VariantSpec vv = v;
                        vv.control = ControlTag::ActionPriorOnly;
                        auto p = instantiate(b, vv, 0, pool, &priors.at(fam.family_id), cfg_.master_seed);
                        p.key.condition = std::string(to_string(ControlTag::ActionPriorOnly));
                        control_probes.push_back(p);
                        auto extra = fan_out({p}, variants_by_id_, agent, mid, 1);
                        suff_gens.push_back(std::move(extra.front()));
                    }
            }
        }
        write_jsonl((dir_ / "control_probes.jsonl").string(), control_probes);
        write_jsonl((dir_ / "generations.jsonl").string(), gens);
        write_jsonl((dir_ / "sufficiency_generations.jsonl").string(), suff_gens);
        if (remote_) extra_info_["remote_network_calls"] = remote_->network_calls();
    }

    // -- score --------------------------------------------------------------

    std::vector<ProbeRecord> all_probes() const {
        auto probes = read_jsonl<ProbeRecord>((dir_ / "probes.jsonl").string());
        for (auto& p : read_jsonl<ProbeRecord>((dir_ / "control_probes.jsonl").string())) probes.push_back(std::move(p));
        for (auto& p : read_jsonl<ProbeRecord>((dir_ / "sufficiency_probes.jsonl").string())) probes.push_back(std::move(p));
        return probes;
    }

    void stage_score() {
        const auto probes = all_probes();
        auto main = dedup(read_jsonl<GenerationRecord>((dir_ / "generations.jsonl").string()));
        auto suff = dedup(read_jsonl<GenerationRecord>((dir_ / "sufficiency_generations.jsonl").string()));
        extra_info_["dedup_dropped"] = main.dropped + suff.dropped;
        write_jsonl((dir_ / "scored.jsonl").string(), score_all(main.retained, probes));

        std::map<std::string, const ProbeRecord*> by_key;
        for (const auto& p : probes) by_key[p.key.str()] = &p;
        auto suff_scored = score_all(suff.retained, probes);
        for (auto& s : suff_scored) s.guard = wrap(s.canonical_action, *by_key.at(s.key.str()), cfg_.guard_visibility, lexicon_);
        write_jsonl((dir_ / "sufficiency_scored.jsonl").string(), suff_scored);
    }

    // -- analyze ------------------------------------------------------------

    json sufficiency_analysis() const {
        if (!cfg_.sufficiency.enabled) return json{{"enabled", false}};
        const auto probes = all_probes();
        std::map<std::string, const ProbeRecord*> by_key;
        for (const auto& p : probes) by_key[p.key.str()] = &p;
        auto rows = read_jsonl<ScoredRecord>((dir_ / "sufficiency_scored.jsonl").string());
        json variants = json::array();
        for (const auto& v : cfg_.sufficiency.variants) {
            json per_vis = json::object();
            for (GuardVisibility vis : {GuardVisibility::Full, GuardVisibility::PromptOnly}) {
                auto rewrapped = rows;
                for (auto& r : rewrapped) r.guard = wrap(r.canonical_action, *by_key.at(r.key.str()), vis, lexicon_);
                per_vis[std::string(to_string(vis))] = sufficiency_json(sufficiency_summary(rewrapped, probes, v.variant_id, lexicon_));
            }
            variants.push_back({{"variant", v.variant_id}, {"guard_visibility", per_vis}});
        }
        return json{{"enabled", true}, {"variants", variants}};
    }

    void stage_analyze() {
        const auto rows = read_jsonl<ScoredRecord>((dir_ / "scored.jsonl").string());
        const auto s = summarize(rows, cfg_);
        json contrasts = json::array();
        for (const auto& c : s.contrasts) contrasts.push_back(c);
        write_file((dir_ / "contrasts.json").string(),
                   json{{"cells", cells_json(s)}, {"contrasts", contrasts}, {"diagnostics", s.diagnostics}}.dump(2) + "\n");
        json gates{{"ledger", s.gates ? json(*s.gates) : json(nullptr)},
                   {"parse_error_rate", s.parse_error_rate},
                   {"unmapped_rate", s.unmapped_rate},
                   {"structured_irrelevant_fp", s.structured_irrelevant_fp ? json(*s.structured_irrelevant_fp) : json(nullptr)},
                   {"budget_matching", s.matching ? json(*s.matching) : json(nullptr)}};
        write_file((dir_ / "gates.json").string(), gates.dump(2) + "\n");
        write_file((dir_ / "entropy.json").string(), entropy_json(s).dump(2) + "\n");
        write_file((dir_ / "sufficiency.json").string(), sufficiency_analysis().dump(2) + "\n");
    }

    // -- report -------------------------------------------------------------

    void stage_report() {
        std::vector<std::string> missing;
        for (const auto& stage : {"score", "analyze"})
            for (const auto& m : missing_artifacts(stage)) missing.push_back(m);
        if (!missing.empty()) {
            std::string msg = "report needs missing artifacts:";
            for (const auto& m : missing) msg += " " + m;
            throw Error("missing", msg);
        }
        const auto rows = read_jsonl<ScoredRecord>((dir_ / "scored.jsonl").string());
        const auto s = summarize(rows, cfg_);
        const auto suff = json::parse(read_file((dir_ / "sufficiency.json").string()));
        write_file((dir_ / "report.md").string(), render_report(s, cfg_, suff, predictor_));
    }

    RunConfig cfg_;
    fs::path dir_;
    std::ostream* log_;
    std::string lexicon_text_;
    Lexicon lexicon_;
    std::map<std::string, VariantSpec> variants_by_id_;
    Manifest manifest_;
    json extra_info_ = json::object();
    std::optional<PredictorReport> predictor_;
    AgentFn agent_override_;
    std::string model_id_override_;
    std::shared_ptr<RemoteAgent> remote_;
};

}  // namespace csb
