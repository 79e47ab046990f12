#pragma once

// Single-sample gene set enrichment.
//
// Genes of one sample are ranked by expression (descending; ties by gene id).
// Position i (1-based from the top) carries rank weight r = N - i + 1. For a
// gene set G restricted to the profile,
//
//   ES = sum_i [ P_in(i) - P_out(i) ]
//   P_in(i)  = sum_{g in G, pos(g) <= i} r_g^alpha / sum_{g in G} r_g^alpha
//   P_out(i) = #{g not in G, pos(g) <= i} / (N - |G|)
//
// Only ranks enter the score, so any strictly increasing transform of a
// sample's values leaves its scores unchanged.

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <tuple>
#include <unordered_set>
#include <vector>

#include "milpath/error.hpp"
#include "milpath/expression.hpp"
#include "milpath/gmt.hpp"
#include "milpath/labels.hpp"

namespace milpath {

inline constexpr double kDefaultSsgseaAlpha = 0.25;

struct RankedGene {
    std::string gene;
    double weight;  // N for the most expressed gene, 1 for the least

    friend bool operator==(const RankedGene&, const RankedGene&) = default;
};

inline std::vector<RankedGene> rank_normalize(const GeneExpressionProfile& profile) {
    const std::size_t n = profile.expression.size();
    if (n < 2) throw Error("rank_normalize: profile " + profile.sample_id + " has fewer than 2 genes");
    std::vector<std::pair<std::string, double>> order;
    order.reserve(n);
    for (const auto& [gene, value] : profile.expression) {
        if (!std::isfinite(value)) throw Error("rank_normalize: non-finite expression for gene " + gene);
        order.emplace_back(gene, value);
    }
    // std::map iteration is already gene-id ordered; stable_sort keeps that as the tie-break.
    std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<RankedGene> ranked;
    ranked.reserve(n);
    for (std::size_t i = 0; i < n; ++i) ranked.push_back({std::move(order[i].first), static_cast<double>(n - i)});
    return ranked;
}

struct RankedEnrichment {
    double score;
    std::size_t missing_genes;  // set members absent from the profile
};

// Core running sum over an already ranked profile.
inline RankedEnrichment enrichment_score_ranked(std::span<const RankedGene> ranked, const GeneSet& set, double alpha) {
    std::unordered_set<std::string> members(set.genes.begin(), set.genes.end());
    const std::size_t n = ranked.size();
    std::vector<char> in_set(n, 0);
    std::size_t hits = 0;
    double weight_total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (members.count(ranked[i].gene)) {
            in_set[i] = 1;
            ++hits;
            weight_total += std::pow(ranked[i].weight, alpha);
        }
    }
    if (hits == 0) throw Error("enrichment_score: gene set " + set.name + " shares no genes with the profile");
    if (hits == n) throw Error("enrichment_score: gene set " + set.name + " covers every profile gene");
    const double n_out = static_cast<double>(n - hits);

    double cum_in = 0.0;
    std::size_t count_out = 0;
    double es = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (in_set[i]) {
            cum_in += std::pow(ranked[i].weight, alpha);
        } else {
            ++count_out;
        }
        es += cum_in / weight_total - static_cast<double>(count_out) / n_out;
    }
    return {es, members.size() - hits};
}

inline EnrichmentScore enrichment_score(const GeneExpressionProfile& profile, const GeneSet& set,
                                        double alpha = kDefaultSsgseaAlpha) {
    auto ranked = rank_normalize(profile);
    return {profile.sample_id, set.name, enrichment_score_ranked(ranked, set, alpha).score};
}

struct PathwaySummary {
    std::string pathway;
    std::size_t label0 = 0;
    std::size_t label1 = 0;
    std::size_t failures = 0;
    std::size_t missing_genes = 0;  // set members absent from the matrix

    std::string class_proportion() const { return format_class_proportion(label0, label1); }
};

struct CohortScores {
    std::vector<LabelRow> rows;             // sorted by (sample_id, pathway)
    std::vector<PathwaySummary> summary;    // in gene-set order
    std::vector<std::string> failures;      // one message per failed (sample, pathway)
};

/// Scores every (sample, pathway) pair. A failing pair is recorded and
/// skipped; the rest of the cohort still runs.
inline CohortScores score_cohort(const ExpressionMatrix& matrix, std::span<const GeneSet> sets,
                                 double alpha = kDefaultSsgseaAlpha) {
    CohortScores out;
    std::map<std::string, std::size_t> summary_index;
    for (const auto& s : sets) {
        PathwaySummary ps;
        ps.pathway = s.name;
        for (const auto& g : s.genes) ps.missing_genes += matrix.gene_index(g) ? 0 : 1;
        summary_index.emplace(s.name, out.summary.size());
        out.summary.push_back(ps);
    }
    for (std::size_t si = 0; si < matrix.sample_count(); ++si) {
        const auto profile = matrix.profile(si);
        std::vector<RankedGene> ranked;
        try {
            ranked = rank_normalize(profile);
        } catch (const Error& e) {
            for (const auto& s : sets) {
                out.summary[summary_index[s.name]].failures++;
                out.failures.push_back(profile.sample_id + "/" + s.name + ": " + e.what());
            }
            continue;
        }
        for (const auto& s : sets) {
            auto& ps = out.summary[summary_index[s.name]];
            try {
                const double es = enrichment_score_ranked(ranked, s, alpha).score;
                const int label = binarize(es);
                out.rows.push_back({profile.sample_id, s.name, es, label});
                (label == 0 ? ps.label0 : ps.label1)++;
            } catch (const Error& e) {
                ps.failures++;
                out.failures.push_back(profile.sample_id + "/" + s.name + ": " + e.what());
            }
        }
    }
    std::sort(out.rows.begin(), out.rows.end(), [](const LabelRow& a, const LabelRow& b) {
        return std::tie(a.sample_id, a.pathway) < std::tie(b.sample_id, b.pathway);
    });
    return out;
}

inline std::string write_cohort_summary(const CohortScores& scores) {
    std::string out = "pathway,n_label0,n_label1,class_proportion,failures,missing_genes\n";
    for (const auto& s : scores.summary) {
        out += csv_field(s.pathway);
        out += ',' + std::to_string(s.label0) + ',' + std::to_string(s.label1) + ',' + s.class_proportion() + ',' +
               std::to_string(s.failures) + ',' + std::to_string(s.missing_genes) + '\n';
    }
    return out;
}

}  // namespace milpath
