#pragma once

// Enrichment scores, their sign-binarised labels, and the labels table:
//   sample_id,pathway,score,label   (UTF-8, LF, score with 6 significant digits)

#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "milpath/error.hpp"
#include "milpath/io.hpp"

namespace milpath {

struct EnrichmentScore {
    std::string sample_id;
    std::string pathway;
    double score = 0.0;
};

struct BinaryLabel {
    std::string sample_id;
    std::string pathway;
    int label = 0;
};

// 0 for negative scores, 1 otherwise (zero and -0.0 included).
inline int binarize(double score) {
    if (std::isnan(score)) throw Error("binarize: NaN enrichment score");
    return score < 0.0 ? 0 : 1;
}

inline BinaryLabel binarize(const EnrichmentScore& es) {
    return {es.sample_id, es.pathway, binarize(es.score)};
}

struct LabelRow {
    std::string sample_id;
    std::string pathway;
    double score = 0.0;
    int label = 0;
};

/// "60.45% / 39.55%" style class split, two decimals per side.
inline std::string format_class_proportion(std::size_t n0, std::size_t n1) {
    const std::size_t n = n0 + n1;
    if (n == 0) return "n/a";
    const double p0 = 100.0 * static_cast<double>(n0) / static_cast<double>(n);
    const double p1 = 100.0 * static_cast<double>(n1) / static_cast<double>(n);
    return format_fixed(p0, 2) + "% / " + format_fixed(p1, 2) + "%";
}

inline std::string write_labels_table(const std::vector<LabelRow>& rows) {
    std::string out = "sample_id,pathway,score,label\n";
    for (const auto& r : rows) {
        out += csv_field(r.sample_id);
        out += ',';
        out += csv_field(r.pathway);
        out += ',';
        out += format_significant(r.score, 6);
        out += ',';
        out += std::to_string(r.label);
        out += '\n';
    }
    return out;
}

inline std::vector<LabelRow> read_labels_table(std::string_view text) {
    auto lines = split_lines(text);
    if (lines.empty() || lines[0] != "sample_id,pathway,score,label") {
        throw FormatError("labels table: expected header 'sample_id,pathway,score,label'");
    }
    std::vector<LabelRow> rows;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        auto f = split_view(lines[i], ',');
        if (f.size() != 4) throw FormatError("labels table line " + std::to_string(i + 1) + ": expected 4 fields");
        LabelRow r{std::string(f[0]), std::string(f[1]), parse_double(f[2], "labels table score"),
                   parse_int<int>(f[3], "labels table label")};
        if (r.label != 0 && r.label != 1) throw FormatError("labels table line " + std::to_string(i + 1) + ": label must be 0 or 1");
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace milpath
