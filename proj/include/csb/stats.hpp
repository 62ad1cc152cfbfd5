#pragma once

// Entropy layers and calibration gaps, dataset-cluster bootstrap, exact sign
// tests, sensitivity summaries, agreement, matching gates, and the
// reliability-predictor math (AUC, grouped CV, threshold analysis).

#include "csb/ontology.hpp"
#include "csb/records.hpp"
#include "csb/util.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace csb {

// ---------------------------------------------------------------------------
// Entropy

inline double entropy_from_counts(std::span<const std::size_t> counts) {
    std::size_t n = 0;
    for (auto c : counts) n += c;
    if (n == 0) throw Error("missing", "entropy of an empty cell");
    double h = 0.0;
    for (auto c : counts) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / static_cast<double>(n);
        h -= p * std::log2(p);
    }
    return h;
}

/// Plug-in Shannon entropy in bits of the empirical label distribution.
template <class Label>
double shannon_entropy(const std::vector<Label>& labels) {
    if (labels.empty()) throw Error("missing", "entropy of an empty cell");
    std::map<Label, std::size_t> counts;
    for (const auto& l : labels) ++counts[l];
    std::vector<std::size_t> c;
    c.reserve(counts.size());
    for (const auto& [_, n] : counts) c.push_back(n);
    return entropy_from_counts(c);
}

// ---------------------------------------------------------------------------
// Semantic clusters over character n-gram TF-IDF

namespace detail {

using SparseVec = std::vector<std::pair<std::string, double>>;  // sorted by n-gram

inline std::map<std::string, double> char_ngrams(std::string_view text, int lo, int hi) {
    std::string s = " ";
    for (unsigned char c : text) s.push_back(static_cast<char>(std::tolower(c)));
    s.push_back(' ');
    std::map<std::string, double> grams;
    for (int n = lo; n <= hi; ++n)
        for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= s.size(); ++i) grams[s.substr(i, static_cast<std::size_t>(n))] += 1.0;
    return grams;
}

inline double dot(const SparseVec& a, const SparseVec& b) {
    double s = 0.0;
    auto ia = a.begin(), ib = b.begin();
    while (ia != a.end() && ib != b.end()) {
        if (ia->first < ib->first) ++ia;
        else if (ib->first < ia->first) ++ib;
        else {
            s += ia->second * ib->second;
            ++ia;
            ++ib;
        }
    }
    return s;
}

inline double norm(const SparseVec& a) { return std::sqrt(dot(a, a)); }

inline double cosine(const SparseVec& a, const SparseVec& b) {
    const double na = norm(a), nb = norm(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot(a, b) / (na * nb);
}

}  // namespace detail

/// L2-normalized TF-IDF vectors over character 3..5-grams of the
/// space-padded, lowercased text. IDF is smoothed: ln((1+N)/(1+df)) + 1.
inline std::vector<detail::SparseVec> tfidf_vectors(const std::vector<std::string>& texts, int lo = 3, int hi = 5) {
    std::vector<std::map<std::string, double>> tf;
    tf.reserve(texts.size());
    std::map<std::string, std::size_t> df;
    for (const auto& t : texts) {
        tf.push_back(detail::char_ngrams(t, lo, hi));
        for (const auto& [g, _] : tf.back()) ++df[g];
    }
    const double n = static_cast<double>(texts.size());
    std::vector<detail::SparseVec> out;
    out.reserve(texts.size());
    for (const auto& doc : tf) {
        detail::SparseVec v;
        v.reserve(doc.size());
        double ss = 0.0;
        for (const auto& [g, c] : doc) {
            const double w = c * (std::log((1.0 + n) / (1.0 + static_cast<double>(df[g]))) + 1.0);
            v.emplace_back(g, w);
            ss += w * w;
        }
        if (ss > 0.0)
            for (auto& [_, w] : v) w /= std::sqrt(ss);
        out.push_back(std::move(v));
    }
    return out;
}

/// Greedy single-link clustering: distinct texts are visited in lexicographic
/// order and join the first cluster whose centroid cosine reaches `threshold`.
/// Identical texts always share a label. Labels are numbered by founding order.
inline std::vector<int> semantic_clusters(const std::vector<std::string>& texts, double threshold = 0.90) {
    if (!(threshold > 0.0 && threshold <= 1.0)) throw Error("config", "cluster threshold must lie in (0,1]");
    if (texts.empty()) return {};
    const auto vecs = tfidf_vectors(texts);
    std::map<std::string, std::size_t> first_index;
    for (std::size_t i = 0; i < texts.size(); ++i) first_index.emplace(texts[i], i);

    struct Cluster {
        std::map<std::string, double> sum;
        detail::SparseVec centroid;
    };
    std::vector<Cluster> clusters;
    std::map<std::string, int> label_of;
    for (const auto& [text, idx] : first_index) {
        const auto& v = vecs[idx];
        int chosen = -1;
        for (std::size_t c = 0; c < clusters.size(); ++c)
            if (detail::cosine(v, clusters[c].centroid) >= threshold) {
                chosen = static_cast<int>(c);
                break;
            }
        if (chosen < 0) {
            clusters.emplace_back();
            chosen = static_cast<int>(clusters.size() - 1);
        }
        auto& cl = clusters[static_cast<std::size_t>(chosen)];
        for (const auto& [g, w] : v) cl.sum[g] += w;
        cl.centroid.assign(cl.sum.begin(), cl.sum.end());  // direction of the mean
        label_of[text] = chosen;
    }
    std::vector<int> labels;
    labels.reserve(texts.size());
    for (const auto& t : texts) labels.push_back(label_of[t]);
    return labels;
}

// ---------------------------------------------------------------------------
// Entropy layers and calibration gap

enum class EntropyLayer : std::uint8_t { Raw, RuleCanonical, SemanticCluster, ActionFamily };

inline constexpr std::array<EntropyLayer, 4> kAllLayers = {EntropyLayer::Raw, EntropyLayer::RuleCanonical,
                                                          EntropyLayer::SemanticCluster, EntropyLayer::ActionFamily};

constexpr std::string_view to_string(EntropyLayer l) noexcept {
    switch (l) {
        case EntropyLayer::Raw: return "raw";
        case EntropyLayer::RuleCanonical: return "rule_canonical";
        case EntropyLayer::SemanticCluster: return "semantic_cluster";
        case EntropyLayer::ActionFamily: return "action_family";
    }
    return "raw";
}

struct EntropyCell {
    double bits = 0.0;
    std::size_t support = 0;
};

struct EntropyLayerReport {
    EntropyLayer layer = EntropyLayer::Raw;
    std::map<std::pair<std::string, std::string>, EntropyCell> cells;  // (dataset, variant)
};

inline std::vector<EntropyLayerReport> entropy_layers(const std::vector<ScoredRecord>& rows, double cluster_threshold = 0.90) {
    std::map<std::pair<std::string, std::string>, std::vector<const ScoredRecord*>> by_cell;
    for (const auto& r : rows) by_cell[{r.key.dataset, r.key.variant}].push_back(&r);
    std::vector<EntropyLayerReport> out;
    for (EntropyLayer l : kAllLayers) out.push_back({l, {}});
    for (const auto& [cell, members] : by_cell) {
        std::vector<std::string> raw, canon, fam;
        for (const auto* r : members) {
            raw.push_back(r->raw_output);
            canon.emplace_back(to_string(r->canonical_action));
            fam.emplace_back(action_family(r->canonical_action));
        }
        const auto clusters = semantic_clusters(raw, cluster_threshold);
        auto support = [](const auto& v) { return std::set<std::decay_t<decltype(v[0])>>(v.begin(), v.end()).size(); };
        out[0].cells[cell] = {shannon_entropy(raw), support(raw)};
        out[1].cells[cell] = {shannon_entropy(canon), support(canon)};
        out[2].cells[cell] = {shannon_entropy(clusters), support(clusters)};
        out[3].cells[cell] = {shannon_entropy(fam), support(fam)};
    }
    return out;
}

struct CalibrationGap {
    double gamma = 0.0;
    bool pass = false;
    std::map<std::string, double> layer_gaps;  // signed candidate - reference
};

inline constexpr double kCalibrationTolerance = 0.15;

/// Gamma = max over layers of |mean_d H(candidate) - mean_d H(reference)|.
inline CalibrationGap calibration_gap(const std::string& candidate, const std::string& reference,
                                      const std::vector<EntropyLayerReport>& tables) {
    std::vector<std::string> problems;
    for (EntropyLayer l : kAllLayers) {
        const bool present = std::any_of(tables.begin(), tables.end(), [&](const auto& t) { return t.layer == l; });
        if (!present) problems.push_back("layer " + std::string(to_string(l)) + " missing");
    }
    CalibrationGap out;
    out.gamma = 0.0;
    for (const auto& t : tables) {
        auto dataset_mean = [&](const std::string& variant) -> std::optional<double> {
            double s = 0.0;
            int n = 0;
            for (const auto& [cell, e] : t.cells)
                if (cell.second == variant) {
                    s += e.bits;
                    ++n;
                }
            if (n == 0) return std::nullopt;
            return s / n;
        };
        const auto hc = dataset_mean(candidate), hr = dataset_mean(reference);
        if (!hc) problems.push_back("variant " + candidate + " absent from layer " + std::string(to_string(t.layer)));
        if (!hr) problems.push_back("variant " + reference + " absent from layer " + std::string(to_string(t.layer)));
        if (!hc || !hr) continue;
        const double gap = *hc - *hr;
        out.layer_gaps[std::string(to_string(t.layer))] = gap;
        out.gamma = std::max(out.gamma, std::abs(gap));
    }
    if (!problems.empty()) {
        std::string msg = "calibration gap undefined:";
        for (const auto& p : problems) msg += " [" + p + "]";
        throw Error("missing", msg);
    }
    out.pass = out.gamma <= kCalibrationTolerance;
    return out;
}

/// The same criterion applied to already-computed per-layer gaps.
inline CalibrationGap calibration_gap_from_layer_gaps(const std::map<std::string, double>& gaps) {
    CalibrationGap out;
    out.layer_gaps = gaps;
    for (const auto& [_, g] : gaps) out.gamma = std::max(out.gamma, std::abs(g));
    out.pass = out.gamma <= kCalibrationTolerance;
    return out;
}

// ---------------------------------------------------------------------------
// Dataset-cluster bootstrap

/// Linear-interpolation quantile (Hyndman-Fan type 7) of a sample.
inline double quantile(std::vector<double> xs, double q) {
    if (xs.empty()) throw Error("empty", "quantile of an empty sample");
    std::sort(xs.begin(), xs.end());
    const double h = q * static_cast<double>(xs.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, xs.size() - 1);
    return xs[lo] + (h - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

inline constexpr int kDefaultBootstrapDraws = 10000;

/// Resamples cluster indices with replacement and evaluates `statistic` per
/// draw. Draw i uses its own stream derived from (seed, i), so the result does
/// not depend on evaluation order. Draws where the statistic is undefined
/// (returns nullopt) are skipped.
inline std::vector<double> bootstrap_distribution(
    std::size_t n_clusters, int draws, std::uint64_t seed,
    const std::function<std::optional<double>(std::span<const std::size_t>)>& statistic) {
    if (n_clusters == 0) throw Error("empty", "bootstrap over zero clusters");
    if (draws < 1) throw Error("config", "bootstrap needs at least one draw");
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(draws));
    std::vector<std::size_t> idx(n_clusters);
    for (int d = 0; d < draws; ++d) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(d)));
        for (auto& i : idx) i = rng.below(n_clusters);
        if (auto v = statistic(idx)) out.push_back(*v);
    }
    return out;
}

/// Empirical 2.5th percentile of the resampled cluster mean.
inline double cluster_bootstrap_lower(std::span<const double> deltas, int draws = kDefaultBootstrapDraws,
                                      std::uint64_t seed = 20240601) {
    if (deltas.empty()) throw Error("empty", "cluster bootstrap over an empty analysis");
    const std::vector<double> d(deltas.begin(), deltas.end());
    auto dist = bootstrap_distribution(d.size(), draws, seed, [&](std::span<const std::size_t> idx) -> std::optional<double> {
        double s = 0.0;
        for (auto i : idx) s += d[i];
        return s / static_cast<double>(idx.size());
    });
    return quantile(std::move(dist), 0.025);
}

// ---------------------------------------------------------------------------
// Exact sign test

struct SignTest {
    double p_one_sided = 1.0;
    double p_two_sided = 1.0;
    int n = 0;
    int positive = 0;
};

/// Upper binomial tail P(K >= k), K ~ Bin(n, 1/2).
inline double binomial_upper_tail_half(int n, int k) {
    if (k <= 0) return 1.0;
    if (k > n) return 0.0;
    if (n <= 62) {
        std::uint64_t c = 1, sum = 0;  // C(n, j) accumulated from j = n downward
        for (int j = n; j >= k; --j) {
            sum += c;
            c = static_cast<std::uint64_t>(static_cast<unsigned __int128>(c) * static_cast<unsigned>(j) /
                                           static_cast<unsigned>(n - j + 1));
        }
        return std::ldexp(static_cast<double>(sum), -n);
    }
    long double total = 0.0L;
    for (int j = k; j <= n; ++j)
        total += std::exp(std::lgamma(n + 1.0L) - std::lgamma(j + 1.0L) - std::lgamma(n - j + 1.0L) - n * std::log(2.0L));
    return static_cast<double>(std::min<long double>(1.0L, total));
}

/// One-sided exact sign test for positive direction; exact zeros are dropped.
inline SignTest sign_test(std::span<const double> deltas) {
    SignTest t;
    for (double d : deltas) {
        if (d == 0.0) continue;
        ++t.n;
        t.positive += d > 0.0 ? 1 : 0;
    }
    if (t.n == 0) throw Error("degenerate", "sign test: every contrast is an exact tie");
    t.p_one_sided = binomial_upper_tail_half(t.n, t.positive);
    const int extreme = std::max(t.positive, t.n - t.positive);
    t.p_two_sided = std::min(1.0, 2.0 * binomial_upper_tail_half(t.n, extreme));
    return t;
}

// ---------------------------------------------------------------------------
// Sensitivity summaries and contrast tables

struct Sensitivity {
    std::vector<double> lodo_means;
    double lodo_min = 0.0;
    double min = 0.0;
    double mean = 0.0;
    double top_removed_mean = 0.0;
};

inline Sensitivity sensitivity_summaries(std::span<const double> deltas) {
    if (deltas.size() < 2) throw Error("insufficient", "sensitivity summaries need at least two clusters");
    Sensitivity s;
    const double total = std::accumulate(deltas.begin(), deltas.end(), 0.0);
    const double n = static_cast<double>(deltas.size());
    s.mean = total / n;
    s.min = *std::min_element(deltas.begin(), deltas.end());
    for (double d : deltas) s.lodo_means.push_back((total - d) / (n - 1.0));
    s.lodo_min = *std::min_element(s.lodo_means.begin(), s.lodo_means.end());
    s.top_removed_mean = (total - *std::max_element(deltas.begin(), deltas.end())) / (n - 1.0);
    return s;
}

struct ContrastTable {
    std::string name;
    std::vector<std::string> datasets;
    std::vector<double> deltas;
    double mean = 0.0;
    double min = 0.0;
    std::optional<double> lodo_min;
    std::optional<double> top_removed_mean;
    std::optional<SignTest> sign;
    double bootstrap_lower = 0.0;
    int positive = 0;
};

inline ContrastTable contrast_table(std::string name, const std::map<std::string, double>& per_dataset,
                                    int draws = kDefaultBootstrapDraws, std::uint64_t seed = 20240601) {
    ContrastTable t;
    t.name = std::move(name);
    for (const auto& [d, v] : per_dataset) {
        t.datasets.push_back(d);
        t.deltas.push_back(v);
        t.positive += v > 0.0 ? 1 : 0;
    }
    if (t.deltas.empty()) throw Error("empty", "contrast " + t.name + " has no datasets");
    t.mean = mean_of(t.deltas);
    t.min = *std::min_element(t.deltas.begin(), t.deltas.end());
    if (t.deltas.size() >= 2) {
        const auto s = sensitivity_summaries(t.deltas);
        t.lodo_min = s.lodo_min;
        t.top_removed_mean = s.top_removed_mean;
    }
    try {
        t.sign = sign_test(t.deltas);
    } catch (const Error&) {
        t.sign.reset();
    }
    t.bootstrap_lower = cluster_bootstrap_lower(t.deltas, draws, seed);
    return t;
}

inline void to_json(json& j, const ContrastTable& t) {
    json per = json::object();
    for (std::size_t i = 0; i < t.datasets.size(); ++i) per[t.datasets[i]] = t.deltas[i];
    j = json{{"name", t.name},
             {"per_dataset", per},
             {"units", t.deltas.size()},
             {"positive_units", t.positive},
             {"mean", t.mean},
             {"min", t.min},
             {"lodo_min_mean", t.lodo_min ? json(*t.lodo_min) : json(nullptr)},
             {"top_effect_removed_mean", t.top_removed_mean ? json(*t.top_removed_mean) : json(nullptr)},
             {"sign_p_one_sided", t.sign ? json(t.sign->p_one_sided) : json(nullptr)},
             {"bootstrap_lower_95", t.bootstrap_lower}};
}

// ---------------------------------------------------------------------------
// Agreement

struct Kappa {
    double value = 0.0;
    bool degenerate = false;  // both raters constant and identical
};

template <class Label>
Kappa cohen_kappa(const std::vector<Label>& a, const std::vector<Label>& b) {
    if (a.size() != b.size()) throw Error("config", "kappa: rater label lists differ in length");
    if (a.empty()) throw Error("config", "kappa: no labels");
    const double n = static_cast<double>(a.size());
    std::map<Label, double> ca, cb;
    double agree = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ca[a[i]] += 1.0;
        cb[b[i]] += 1.0;
        agree += a[i] == b[i] ? 1.0 : 0.0;
    }
    const double po = agree / n;
    double pe = 0.0;
    for (const auto& [l, c] : ca)
        if (auto it = cb.find(l); it != cb.end()) pe += (c / n) * (it->second / n);
    if (pe >= 1.0) return {1.0, true};
    return {(po - pe) / (1.0 - pe), false};
}

// ---------------------------------------------------------------------------
// Forced-budget matching gate

struct MatchingValues {
    double prompt_match_rate = 0.0;
    double completion_match_rate = 0.0;
    double total_token_ratio = 0.0;
    double latency_ratio = 0.0;
    double entropy_gap = 0.0;
};

struct MatchingGate {
    MatchingValues values;
    bool prompt_pass = false;
    bool completion_pass = false;
    bool total_ratio_pass = false;
    bool latency_pass = false;
    bool entropy_pass = false;
    std::vector<std::string> unpaired;

    bool pass() const { return prompt_pass && completion_pass && total_ratio_pass && latency_pass && entropy_pass; }
};

inline MatchingGate matching_gate(const MatchingValues& v) {
    MatchingGate g;
    g.values = v;
    g.prompt_pass = v.prompt_match_rate == 1.0;
    g.completion_pass = v.completion_match_rate == 1.0;
    g.total_ratio_pass = v.total_token_ratio >= 0.95 && v.total_token_ratio <= 1.05;
    g.latency_pass = v.latency_ratio >= 0.50 && v.latency_ratio <= 1.50;
    g.entropy_pass = v.entropy_gap <= 0.15;
    return g;
}

/// Pairs rows by event identifier. Ratios are condition-B totals over
/// condition-A totals.
inline MatchingGate matching_gate(const std::map<std::string, ProviderMeta>& meta_a,
                                  const std::map<std::string, ProviderMeta>& meta_b, std::pair<double, double> entropies) {
    std::vector<std::string> unpaired;
    for (const auto& [k, _] : meta_a)
        if (!meta_b.count(k)) unpaired.push_back(k);
    for (const auto& [k, _] : meta_b)
        if (!meta_a.count(k)) unpaired.push_back(k);
    if (!unpaired.empty()) {
        std::string msg = "matching gate has unpaired events:";
        for (const auto& u : unpaired) msg += " " + u;
        throw Error("unpaired", msg);
    }
    if (meta_a.empty()) throw Error("empty", "matching gate over zero events");
    double prompt_eq = 0, completion_eq = 0, tot_a = 0, tot_b = 0, lat_a = 0, lat_b = 0;
    for (const auto& [k, a] : meta_a) {
        const auto& b = meta_b.at(k);
        prompt_eq += a.prompt_tokens == b.prompt_tokens ? 1 : 0;
        completion_eq += a.completion_tokens == b.completion_tokens ? 1 : 0;
        tot_a += static_cast<double>(a.total_tokens);
        tot_b += static_cast<double>(b.total_tokens);
        lat_a += a.latency_ms;
        lat_b += b.latency_ms;
    }
    const double n = static_cast<double>(meta_a.size());
    MatchingValues v{prompt_eq / n, completion_eq / n, tot_a > 0 ? tot_b / tot_a : 0.0, lat_a > 0 ? lat_b / lat_a : 0.0,
                     std::abs(entropies.first - entropies.second)};
    return matching_gate(v);
}

inline void to_json(json& j, const MatchingGate& g) {
    j = json{{"prompt_token_match_rate", {{"value", g.values.prompt_match_rate}, {"criterion", "== 1"}, {"pass", g.prompt_pass}}},
             {"completion_token_match_rate",
              {{"value", g.values.completion_match_rate}, {"criterion", "== 1"}, {"pass", g.completion_pass}}},
             {"total_token_ratio",
              {{"value", g.values.total_token_ratio}, {"criterion", "[0.95, 1.05]"}, {"pass", g.total_ratio_pass}}},
             {"latency_ratio", {{"value", g.values.latency_ratio}, {"criterion", "[0.50, 1.50]"}, {"pass", g.latency_pass}}},
             {"entropy_gap_bits", {{"value", g.values.entropy_gap}, {"criterion", "<= 0.15"}, {"pass", g.entropy_pass}}},
             {"pass", g.pass()}};
}

// ---------------------------------------------------------------------------
// Recovery fraction

struct Recovery {
    std::optional<double> value;
    std::string note;
};

/// (A_only - A_control) / (A_full - A_control); undefined unless A_full > A_control.
inline Recovery recovery_fraction(double a_full, double a_only, double a_control) {
    if (!(a_full > a_control))
        return {std::nullopt, "undefined: full-state accuracy " + fmt_fixed(a_full, 3) +
                                  " does not exceed best control accuracy " + fmt_fixed(a_control, 3)};
    return {(a_only - a_control) / (a_full - a_control), ""};
}

// ---------------------------------------------------------------------------
// AUC

/// Rank-based AUC; tied positive/negative pairs count one half.
inline double auc(std::span<const double> scores, std::span<const int> outcomes) {
    if (scores.size() != outcomes.size()) throw Error("config", "auc: scores and outcomes differ in length");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double pos = 0, neg = 0, rank_sum = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double mid_rank = (static_cast<double>(i) + static_cast<double>(j) + 1.0) / 2.0;  // 1-based average
        for (std::size_t k = i; k < j; ++k)
            if (outcomes[order[k]]) rank_sum += mid_rank;
        i = j;
    }
    for (int y : outcomes) (y ? pos : neg) += 1;
    if (pos == 0 || neg == 0) throw Error("undefined", "auc needs both outcome classes");
    return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

// ---------------------------------------------------------------------------
// Feature tables, logistic model and grouped cross-validation

struct FeatureTable {
    std::vector<std::string> groups;
    std::vector<int> outcome;
    std::vector<int> violation;
    std::map<std::string, std::vector<double>> features;

    std::size_t rows() const noexcept { return outcome.size(); }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur.push_back('"');
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur.push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(std::move(cur));
    return out;
}

}  // namespace detail

/// Reads a CSV whose header names the group key, the binary outcome, the
/// binary violation column and any number of numeric feature columns.
inline FeatureTable read_feature_csv(const std::string& path, const std::string& group_col = "group",
                                     const std::string& outcome_col = "outcome",
                                     const std::string& violation_col = "violation") {
    std::istringstream in(read_file(path));
    std::string line;
    if (!std::getline(in, line)) throw Error("schema", path + ": empty feature table");
    const auto header = detail::split_csv_line(line);
    auto col = [&](const std::string& name) -> std::size_t {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw Error("schema", path + ": header lacks required column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    };
    const auto gi = col(group_col), oi = col(outcome_col), vi = col(violation_col);
    FeatureTable t;
    for (std::size_t i = 0; i < header.size(); ++i)
        if (i != gi && i != oi && i != vi) t.features[header[i]];
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size())
            throw Error("schema", path + ":" + std::to_string(lineno) + ": expected " + std::to_string(header.size()) + " cells");
        auto binary = [&](std::size_t i) {
            if (cells[i] != "0" && cells[i] != "1")
                throw Error("schema", path + ":" + std::to_string(lineno) + ": column '" + header[i] + "' must be 0 or 1");
            return cells[i] == "1" ? 1 : 0;
        };
        t.groups.push_back(cells[gi]);
        t.outcome.push_back(binary(oi));
        t.violation.push_back(binary(vi));
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (i == gi || i == oi || i == vi) continue;
            try {
                t.features[header[i]].push_back(std::stod(cells[i]));
            } catch (const std::exception&) {
                throw Error("schema", path + ":" + std::to_string(lineno) + ": column '" + header[i] + "' is not numeric");
            }
        }
    }
    return t;
}

struct LogisticModel {
    std::vector<double> mean, scale, weights;  // weights[0] is the intercept
    int iterations = 0;

    double predict(std::span<const double> x) const {
        double z = weights[0];
        for (std::size_t j = 0; j < x.size(); ++j) z += weights[j + 1] * (x[j] - mean[j]) / scale[j];
        return 1.0 / (1.0 + std::exp(-z));
    }
};

struct LogisticOptions {
    double tolerance = 1e-8;
    int max_iterations = 10000;
};

/// Logistic-loss linear model with intercept, fit by full-batch gradient
/// descent on standardized features. The step is 1/L for the loss's
/// smoothness bound L = (1 + d) / 4.
inline LogisticModel fit_logistic(const std::vector<std::vector<double>>& x, std::span<const int> y,
                                  const LogisticOptions& opt = {}) {
    const std::size_t n = x.size();
    if (n == 0) throw Error("empty", "logistic fit on zero rows");
    const std::size_t d = x[0].size();
    LogisticModel m;
    m.mean.assign(d, 0.0);
    m.scale.assign(d, 1.0);
    for (std::size_t j = 0; j < d; ++j) {
        double s = 0, ss = 0;
        for (const auto& r : x) s += r[j];
        m.mean[j] = s / static_cast<double>(n);
        for (const auto& r : x) ss += (r[j] - m.mean[j]) * (r[j] - m.mean[j]);
        const double sd = std::sqrt(ss / static_cast<double>(n));
        m.scale[j] = sd > 0 ? sd : 1.0;
    }
    std::vector<std::vector<double>> z(n, std::vector<double>(d + 1, 1.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) z[i][j + 1] = (x[i][j] - m.mean[j]) / m.scale[j];
    m.weights.assign(d + 1, 0.0);
    const double lr = 4.0 / static_cast<double>(d + 1);
    std::vector<double> grad(d + 1);
    double prev = std::numeric_limits<double>::infinity();
    for (int it = 0; it < opt.max_iterations; ++it) {
        std::fill(grad.begin(), grad.end(), 0.0);
        double loss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j <= d; ++j) s += m.weights[j] * z[i][j];
            const double p = 1.0 / (1.0 + std::exp(-s));
            // log(1 + e^{-s}) for y=1, log(1 + e^{s}) for y=0, computed stably
            const double t = y[i] ? -s : s;
            loss += t > 0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
            const double r = p - static_cast<double>(y[i]);
            for (std::size_t j = 0; j <= d; ++j) grad[j] += r * z[i][j];
        }
        loss /= static_cast<double>(n);
        m.iterations = it + 1;
        if (std::abs(prev - loss) < opt.tolerance) break;
        prev = loss;
        for (std::size_t j = 0; j <= d; ++j) m.weights[j] -= lr * grad[j] / static_cast<double>(n);
    }
    return m;
}

/// Groups are ordered by a seeded hash and dealt round-robin into folds, so
/// every fold is non-empty and a group never straddles folds.
inline std::vector<int> assign_group_folds(const std::vector<std::string>& groups, int folds, std::uint64_t seed) {
    std::set<std::string> distinct(groups.begin(), groups.end());
    if (folds < 2) throw Error("config", "grouped CV needs at least two folds");
    if (distinct.size() < static_cast<std::size_t>(folds))
        throw Error("config", "grouped CV: " + std::to_string(distinct.size()) + " groups for " + std::to_string(folds) + " folds");
    std::vector<std::pair<std::uint64_t, std::string>> order;
    for (const auto& g : distinct) order.emplace_back(derive_seed(seed, "fold/" + g), g);
    std::sort(order.begin(), order.end());
    std::map<std::string, int> fold_of;
    for (std::size_t i = 0; i < order.size(); ++i) fold_of[order[i].second] = static_cast<int>(i % static_cast<std::size_t>(folds));
    std::vector<int> out;
    out.reserve(groups.size());
    for (const auto& g : groups) out.push_back(fold_of[g]);
    return out;
}

/// Out-of-fold probabilities from a per-fold logistic fit on `columns`.
inline std::vector<double> grouped_cv_predict(const FeatureTable& t, const std::vector<std::string>& columns, int folds,
                                              std::uint64_t seed, const LogisticOptions& opt = {}) {
    if (columns.empty()) throw Error("config", "grouped CV needs at least one feature column");
    for (const auto& c : columns)
        if (!t.features.count(c)) throw Error("config", "unknown feature column '" + c + "'");
    for (int y : t.outcome)
        if (y != 0 && y != 1) throw Error("config", "grouped CV needs a binary outcome");
    const auto fold = assign_group_folds(t.groups, folds, seed);
    const std::size_t n = t.rows();
    std::vector<std::vector<double>> x(n, std::vector<double>(columns.size()));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < columns.size(); ++j) x[i][j] = t.features.at(columns[j])[i];
    std::vector<double> probs(n, 0.0);
    for (int f = 0; f < folds; ++f) {
        std::vector<std::vector<double>> xtr;
        std::vector<int> ytr;
        for (std::size_t i = 0; i < n; ++i)
            if (fold[i] != f) {
                xtr.push_back(x[i]);
                ytr.push_back(t.outcome[i]);
            }
        const auto model = fit_logistic(xtr, ytr, opt);
        for (std::size_t i = 0; i < n; ++i)
            if (fold[i] == f) probs[i] = model.predict(x[i]);
    }
    return probs;
}

/// Row indices of each distinct group, in first-appearance order.
inline std::vector<std::vector<std::size_t>> group_rows(const std::vector<std::string>& groups) {
    std::map<std::string, std::size_t> id;
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < groups.size(); ++i) {
        auto [it, fresh] = id.emplace(groups[i], out.size());
        if (fresh) out.emplace_back();
        out[it->second].push_back(i);
    }
    return out;
}

struct DeltaAuc {
    double auc_baseline = 0.0;
    double auc_augmented = 0.0;
    double delta = 0.0;
    double bootstrap_lower = 0.0;
    int draws_used = 0;
};

inline DeltaAuc delta_auc(const FeatureTable& t, const std::vector<std::string>& baseline,
                          const std::vector<std::string>& augmented, int folds, std::uint64_t seed,
                          int draws = kDefaultBootstrapDraws) {
    const auto pb = grouped_cv_predict(t, baseline, folds, seed);
    const auto pa = grouped_cv_predict(t, augmented, folds, seed);
    DeltaAuc r;
    r.auc_baseline = auc(pb, t.outcome);
    r.auc_augmented = auc(pa, t.outcome);
    r.delta = r.auc_augmented - r.auc_baseline;
    const auto clusters = group_rows(t.groups);
    auto dist = bootstrap_distribution(clusters.size(), draws, seed, [&](std::span<const std::size_t> idx) -> std::optional<double> {
        std::vector<double> sb, sa;
        std::vector<int> y;
        for (auto g : idx)
            for (auto i : clusters[g]) {
                sb.push_back(pb[i]);
                sa.push_back(pa[i]);
                y.push_back(t.outcome[i]);
            }
        const auto pos = std::count(y.begin(), y.end(), 1);
        if (pos == 0 || pos == static_cast<long>(y.size())) return std::nullopt;
        return auc(sa, y) - auc(sb, y);
    });
    r.draws_used = static_cast<int>(dist.size());
    r.bootstrap_lower = dist.empty() ? std::numeric_limits<double>::quiet_NaN() : quantile(std::move(dist), 0.025);
    return r;
}

// ---------------------------------------------------------------------------
// Threshold analysis and calibration bins

struct ThresholdRow {
    double threshold = 0.0;
    double accepted_fraction = 0.0;
    double accepted_hit_rate = 0.0;
    double accepted_violation_rate = 0.0;
    double net_benefit = 0.0;
    bool degenerate = false;  // t >= 1 or nothing accepted
};

/// Accepts rows with prob >= t. Net benefit is (TP - FP * t/(1-t)) / n.
inline std::vector<ThresholdRow> threshold_analysis(std::span<const double> probs, std::span<const int> outcomes,
                                                    std::span<const int> violations, std::span<const double> grid) {
    if (probs.size() != outcomes.size() || probs.size() != violations.size())
        throw Error("config", "threshold analysis: vectors are not aligned");
    if (probs.empty()) throw Error("empty", "threshold analysis over zero rows");
    const double n = static_cast<double>(probs.size());
    std::vector<ThresholdRow> out;
    for (double t : grid) {
        ThresholdRow r;
        r.threshold = t;
        if (t >= 1.0) {
            r.degenerate = true;
            out.push_back(r);
            continue;
        }
        double acc = 0, tp = 0, fp = 0, viol = 0;
        for (std::size_t i = 0; i < probs.size(); ++i) {
            if (probs[i] < t) continue;
            ++acc;
            (outcomes[i] ? tp : fp) += 1;
            viol += violations[i] ? 1 : 0;
        }
        r.accepted_fraction = acc / n;
        if (acc > 0) {
            r.accepted_hit_rate = tp / acc;
            r.accepted_violation_rate = viol / acc;
        } else {
            r.degenerate = true;
        }
        r.net_benefit = (tp - fp * t / (1.0 - t)) / n;
        out.push_back(r);
    }
    return out;
}

struct ThresholdBand {
    double threshold = 0.0;
    std::array<double, 4> lower{};  // fraction, hit rate, violation rate, net benefit
    std::array<double, 4> upper{};
};

/// Percentile bands (2.5/97.5) of the threshold quantities under group resampling.
inline std::vector<ThresholdBand> threshold_bands(std::span<const double> probs, std::span<const int> outcomes,
                                                  std::span<const int> violations, const std::vector<std::string>& groups,
                                                  std::span<const double> grid, int draws, std::uint64_t seed) {
    const auto clusters = group_rows(groups);
    std::vector<std::array<std::vector<double>, 4>> samples(grid.size());
    std::vector<double> p;
    std::vector<int> y, v;
    (void)bootstrap_distribution(clusters.size(), draws, seed, [&](std::span<const std::size_t> idx) -> std::optional<double> {
        p.clear();
        y.clear();
        v.clear();
        for (auto g : idx)
            for (auto i : clusters[g]) {
                p.push_back(probs[i]);
                y.push_back(outcomes[i]);
                v.push_back(violations[i]);
            }
        const auto rows = threshold_analysis(p, y, v, grid);
        for (std::size_t k = 0; k < rows.size(); ++k) {
            samples[k][0].push_back(rows[k].accepted_fraction);
            samples[k][1].push_back(rows[k].accepted_hit_rate);
            samples[k][2].push_back(rows[k].accepted_violation_rate);
            samples[k][3].push_back(rows[k].net_benefit);
        }
        return 0.0;
    });
    std::vector<ThresholdBand> out;
    for (std::size_t k = 0; k < grid.size(); ++k) {
        ThresholdBand b;
        b.threshold = grid[k];
        for (std::size_t q = 0; q < 4; ++q) {
            b.lower[q] = quantile(samples[k][q], 0.025);
            b.upper[q] = quantile(samples[k][q], 0.975);
        }
        out.push_back(b);
    }
    return out;
}

struct CalibrationBin {
    double lo = 0.0, hi = 0.0;
    std::size_t count = 0;
    double mean_prob = 0.0;
    double observed_rate = 0.0;
};

inline std::vector<CalibrationBin> calibration_bins(std::span<const double> probs, std::span<const int> outcomes, int bins = 10) {
    if (bins < 1) throw Error("config", "calibration needs at least one bin");
    std::vector<CalibrationBin> out(static_cast<std::size_t>(bins));
    for (int b = 0; b < bins; ++b) {
        out[static_cast<std::size_t>(b)].lo = static_cast<double>(b) / bins;
        out[static_cast<std::size_t>(b)].hi = static_cast<double>(b + 1) / bins;
    }
    for (std::size_t i = 0; i < probs.size(); ++i) {
        auto b = static_cast<std::size_t>(std::clamp(static_cast<int>(probs[i] * bins), 0, bins - 1));
        auto& bin = out[b];
        ++bin.count;
        bin.mean_prob += probs[i];
        bin.observed_rate += outcomes[i];
    }
    for (auto& bin : out)
        if (bin.count) {
            bin.mean_prob /= static_cast<double>(bin.count);
            bin.observed_rate /= static_cast<double>(bin.count);
        }
    return out;
}

}  // namespace csb
