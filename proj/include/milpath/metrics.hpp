#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "milpath/error.hpp"
#include "milpath/io.hpp"
#include "milpath/labels.hpp"

namespace milpath {

/// Area under the ROC curve as the normalised Mann-Whitney U statistic.
/// Tied scores contribute 1/2 per positive/negative pair (midranks).
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw ShapeError("auroc: scores and labels differ in length");
    std::size_t n1 = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1) throw Error("auroc: labels must be 0 or 1");
        if (std::isnan(scores[i])) throw Error("auroc: NaN score");
        n1 += static_cast<std::size_t>(labels[i]);
    }
    const std::size_t n0 = labels.size() - n1;
    if (n1 == 0 || n0 == 0) throw Error("auroc: undefined, labels contain a single class");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // Sum of (doubled) midranks of the positives, kept integral.
    unsigned long long rank_sum_x2 = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i + 1;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const unsigned long long midrank_x2 = i + 1 + j;  // (i+1) + j = 2 * mean of ranks i+1..j
        for (std::size_t k = i; k < j; ++k) {
            if (labels[order[k]] == 1) rank_sum_x2 += midrank_x2;
        }
        i = j;
    }
    const unsigned long long u_x2 = rank_sum_x2 - static_cast<unsigned long long>(n1) * (n1 + 1);
    return static_cast<double>(u_x2) / (2.0 * static_cast<double>(n1) * static_cast<double>(n0));
}

struct ConfusionCounts {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

    std::size_t total() const { return tp + fp + tn + fn; }
    friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

// Positive call when score > threshold.
inline ConfusionCounts confusion_at(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5) {
    ConfusionCounts c;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool call = scores[i] > threshold;
        if (labels[i] == 1) {
            (call ? c.tp : c.fn)++;
        } else {
            (call ? c.fp : c.tn)++;
        }
    }
    return c;
}

struct MetricsReport {
    std::string pathway;
    std::string architecture;
    std::string feature_tag;  // e.g. "dim-1024" / "dim-512"
    double auroc = 0.0;
    std::size_t label0 = 0;
    std::size_t label1 = 0;
    ConfusionCounts confusion;

    std::string class_proportion() const { return format_class_proportion(label0, label1); }
    friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

inline constexpr std::string_view kMetricsCsvHeader =
    "pathway,architecture,feature_tag,auroc,class_proportion,n_label0,n_label1,tp,fp,tn,fn";

inline std::string write_metrics_csv(std::span<const MetricsReport> reports) {
    std::string out = std::string(kMetricsCsvHeader) + "\n";
    for (const auto& r : reports) {
        out += std::string(csv_field(r.pathway)) + ',' + std::string(csv_field(r.architecture)) + ',' +
               std::string(csv_field(r.feature_tag)) + ',' + format_roundtrip(r.auroc) + ',' + r.class_proportion() +
               ',' + std::to_string(r.label0) + ',' + std::to_string(r.label1) + ',' + std::to_string(r.confusion.tp) +
               ',' + std::to_string(r.confusion.fp) + ',' + std::to_string(r.confusion.tn) + ',' +
               std::to_string(r.confusion.fn) + '\n';
    }
    return out;
}

inline std::vector<MetricsReport> read_metrics_csv(std::string_view text) {
    auto lines = split_lines(text);
    if (lines.empty() || lines[0] != kMetricsCsvHeader) throw FormatError("metrics CSV: unexpected header");
    std::vector<MetricsReport> out;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        auto f = split_view(lines[i], ',');
        if (f.size() != 11) throw FormatError("metrics CSV line " + std::to_string(i + 1) + ": expected 11 fields");
        MetricsReport r;
        r.pathway = f[0];
        r.architecture = f[1];
        r.feature_tag = f[2];
        r.auroc = parse_double(f[3], "metrics CSV auroc");
        r.label0 = parse_int<std::size_t>(f[5], "metrics CSV n_label0");
        r.label1 = parse_int<std::size_t>(f[6], "metrics CSV n_label1");
        r.confusion.tp = parse_int<std::size_t>(f[7], "metrics CSV tp");
        r.confusion.fp = parse_int<std::size_t>(f[8], "metrics CSV fp");
        r.confusion.tn = parse_int<std::size_t>(f[9], "metrics CSV tn");
        r.confusion.fn = parse_int<std::size_t>(f[10], "metrics CSV fn");
        out.push_back(std::move(r));
    }
    return out;
}

namespace detail {

template <typename T>
void push_unique(std::vector<T>& v, const T& x) {
    if (std::find(v.begin(), v.end(), x) == v.end()) v.push_back(x);
}

inline std::string bold_if(const std::string& s, bool on) { return on ? "**" + s + "**" : s; }

}  // namespace detail

/// Markdown table in the layout of a per-task AUROC grid: one row per
/// pathway, a class-proportion column, and one column per architecture whose
/// cells list the AUROC for each feature tag ("a / b"). Within a row, the
/// best architecture for each feature tag is bold. AUROCs use 4 decimals.
inline std::string metrics_markdown(std::span<const MetricsReport> reports) {
    std::vector<std::string> pathways, archs, tags;
    std::map<std::string, const MetricsReport*> first_for_pathway;
    std::map<std::tuple<std::string, std::string, std::string>, double> cell;
    for (const auto& r : reports) {
        detail::push_unique(pathways, r.pathway);
        detail::push_unique(archs, r.architecture);
        detail::push_unique(tags, r.feature_tag);
        first_for_pathway.emplace(r.pathway, &r);
        cell[{r.pathway, r.architecture, r.feature_tag}] = r.auroc;
    }
    std::string tag_header;
    for (std::size_t t = 0; t < tags.size(); ++t) tag_header += (t ? " / " : "") + tags[t];

    std::string out = "| Task | Class Proportion (0 / 1) |";
    for (const auto& a : archs) out += " " + a + " |";
    out += "\n|  |  |";
    for (std::size_t a = 0; a < archs.size(); ++a) out += " " + tag_header + " |";
    out += "\n|:--|:-:|";
    for (std::size_t a = 0; a < archs.size(); ++a) out += ":-:|";
    out += '\n';
    for (const auto& p : pathways) {
        std::map<std::string, double> best_for_tag;
        for (const auto& [key, v] : cell) {
            if (std::get<0>(key) != p) continue;
            auto [it, inserted] = best_for_tag.emplace(std::get<2>(key), v);
            if (!inserted) it->second = std::max(it->second, v);
        }
        out += "| " + p + " | " + first_for_pathway[p]->class_proportion() + " |";
        for (const auto& a : archs) {
            std::string c;
            for (std::size_t t = 0; t < tags.size(); ++t) {
                if (t) c += " / ";
                auto it = cell.find({p, a, tags[t]});
                if (it == cell.end()) {
                    c += "-";
                } else {
                    c += detail::bold_if(format_fixed(it->second, 4), it->second == best_for_tag[tags[t]]);
                }
            }
            out += " " + c + " |";
        }
        out += '\n';
    }
    return out;
}

struct ComparisonCell {
    std::string feature_tag;
    std::string architecture;  // architecture holding the best AUROC for this tag
    double auroc = 0.0;
    bool winner = false;
};

struct ComparisonRow {
    std::string pathway;
    std::vector<ComparisonCell> cells;  // one per feature tag, in first-seen order
    bool tie = false;                   // more than one tag shares the winning AUROC
};

/// Best model per feature tag for every pathway, with the winning tag(s)
/// flagged. Every pathway must be covered by the same set of feature tags.
inline std::vector<ComparisonRow> compare_runs(std::span<const MetricsReport> reports) {
    if (reports.size() < 2) throw Error("compare_runs: need at least 2 reports");
    std::vector<std::string> pathways, tags;
    for (const auto& r : reports) {
        detail::push_unique(pathways, r.pathway);
        detail::push_unique(tags, r.feature_tag);
    }
    std::vector<ComparisonRow> rows;
    bool any_shared = false;
    for (const auto& p : pathways) {
        ComparisonRow row;
        row.pathway = p;
        std::size_t count = 0;
        for (const auto& tag : tags) {
            const MetricsReport* best = nullptr;
            for (const auto& r : reports) {
                if (r.pathway != p || r.feature_tag != tag) continue;
                ++count;
                if (!best || r.auroc > best->auroc) best = &r;
            }
            if (!best) throw Error("compare_runs: mismatched pathways, " + p + " has no report for feature tag " + tag);
            row.cells.push_back({tag, best->architecture, best->auroc, false});
        }
        any_shared = any_shared || count >= 2;
        double top = row.cells.front().auroc;
        for (const auto& c : row.cells) top = std::max(top, c.auroc);
        std::size_t winners = 0;
        for (auto& c : row.cells) {
            c.winner = c.auroc == top;
            winners += c.winner ? 1 : 0;
        }
        row.tie = winners > 1;
        rows.push_back(std::move(row));
    }
    if (!any_shared) throw Error("compare_runs: mismatched pathways, no pathway has 2 reports to compare");
    return rows;
}

inline std::string comparison_csv(std::span<const ComparisonRow> rows) {
    std::string out = "pathway,feature_tag,architecture,auroc,winner,tie\n";
    for (const auto& row : rows) {
        for (const auto& c : row.cells) {
            out += std::string(csv_field(row.pathway)) + ',' + std::string(csv_field(c.feature_tag)) + ',' +
                   std::string(csv_field(c.architecture)) + ',' + format_fixed(c.auroc, 4) + ',' +
                   (c.winner ? "1" : "0") + ',' + (row.tie ? "1" : "0") + '\n';
        }
    }
    return out;
}

// Task | tag... grid, winners in bold.
inline std::string comparison_markdown(std::span<const ComparisonRow> rows) {
    if (rows.empty()) return {};
    std::string out = "| Task |";
    for (const auto& c : rows.front().cells) out += " " + c.feature_tag + " |";
    out += "\n|:--|";
    for (std::size_t i = 0; i < rows.front().cells.size(); ++i) out += ":-:|";
    out += '\n';
    for (const auto& row : rows) {
        out += "| " + row.pathway + (row.tie ? " (tie)" : "") + " |";
        for (const auto& c : row.cells) out += " " + detail::bold_if(format_fixed(c.auroc, 4), c.winner) + " |";
        out += '\n';
    }
    return out;
}

}  // namespace milpath
