#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "milpath/error.hpp"
#include "milpath/io.hpp"

namespace milpath {

struct GeneExpressionProfile {
    std::string sample_id;
    std::map<std::string, double> expression;
};

/// Dense genes x samples matrix (rows = genes, columns = samples).
///
/// TSV layout: the first row holds a corner label followed by sample ids,
/// every following row a gene id followed by one value per sample.
class ExpressionMatrix {
public:
    ExpressionMatrix() = default;

    ExpressionMatrix(std::vector<std::string> genes, std::vector<std::string> samples, std::vector<double> values)
        : genes_(std::move(genes)), samples_(std::move(samples)), values_(std::move(values)) {
        if (values_.size() != genes_.size() * samples_.size()) {
            throw ShapeError("expression matrix: value count does not match genes x samples");
        }
        index(genes_, gene_index_, "gene");
        index(samples_, sample_index_, "sample");
        for (double v : values_) {
            if (!std::isfinite(v)) throw FormatError("expression matrix: non-finite value");
        }
    }

    const std::vector<std::string>& genes() const { return genes_; }
    const std::vector<std::string>& samples() const { return samples_; }
    std::size_t gene_count() const { return genes_.size(); }
    std::size_t sample_count() const { return samples_.size(); }

    double at(std::size_t gene, std::size_t sample) const { return values_[gene * samples_.size() + sample]; }

    std::optional<std::size_t> gene_index(const std::string& gene) const { return lookup(gene_index_, gene); }
    std::optional<std::size_t> sample_index(const std::string& sample) const { return lookup(sample_index_, sample); }

    double value(const std::string& gene, const std::string& sample) const {
        auto g = gene_index(gene);
        auto s = sample_index(sample);
        if (!g || !s) throw Error("expression matrix: no cell for (" + gene + ", " + sample + ")");
        return at(*g, *s);
    }

    GeneExpressionProfile profile(std::size_t sample) const {
        GeneExpressionProfile p;
        p.sample_id = samples_.at(sample);
        for (std::size_t g = 0; g < genes_.size(); ++g) p.expression.emplace(genes_[g], at(g, sample));
        return p;
    }

    friend bool operator==(const ExpressionMatrix& a, const ExpressionMatrix& b) {
        return a.genes_ == b.genes_ && a.samples_ == b.samples_ && a.values_ == b.values_;
    }

private:
    static void index(const std::vector<std::string>& ids, std::unordered_map<std::string, std::size_t>& out,
                      const char* what) {
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i].empty()) throw FormatError(std::string("expression matrix: empty ") + what + " id");
            if (!out.emplace(ids[i], i).second) {
                throw FormatError(std::string("expression matrix: duplicate ") + what + " id '" + ids[i] + "'");
            }
        }
    }

    static std::optional<std::size_t> lookup(const std::unordered_map<std::string, std::size_t>& m,
                                             const std::string& key) {
        auto it = m.find(key);
        if (it == m.end()) return std::nullopt;
        return it->second;
    }

    std::vector<std::string> genes_;
    std::vector<std::string> samples_;
    std::vector<double> values_;
    std::unordered_map<std::string, std::size_t> gene_index_;
    std::unordered_map<std::string, std::size_t> sample_index_;
};

inline ExpressionMatrix read_expression_tsv(std::string_view text) {
    auto lines = split_lines(text);
    if (lines.empty()) throw FormatError("expression TSV: empty input");
    auto header = split_view(lines[0], '\t');
    if (header.size() < 2) throw FormatError("expression TSV: header needs a corner cell and at least one sample id");
    std::vector<std::string> samples(header.begin() + 1, header.end());
    std::vector<std::string> genes;
    std::vector<double> values;
    std::unordered_map<std::string, std::size_t> seen;
    for (std::size_t li = 1; li < lines.size(); ++li) {
        if (lines[li].empty()) continue;
        auto cells = split_view(lines[li], '\t');
        if (cells.size() != header.size()) {
            throw FormatError("expression TSV line " + std::to_string(li + 1) + ": expected " +
                              std::to_string(header.size()) + " cells, got " + std::to_string(cells.size()));
        }
        std::string gene(cells[0]);
        if (!seen.emplace(gene, li).second) throw FormatError("expression TSV: duplicate gene id '" + gene + "'");
        for (std::size_t c = 1; c < cells.size(); ++c) {
            const std::string what = "expression TSV (gene " + gene + ", sample " + samples[c - 1] + ")";
            if (cells[c].empty()) throw FormatError(what + ": missing value");
            const double v = parse_double(cells[c], what);
            if (!std::isfinite(v)) throw FormatError(what + ": non-finite value");
            values.push_back(v);
        }
        genes.push_back(std::move(gene));
    }
    return ExpressionMatrix(std::move(genes), std::move(samples), std::move(values));
}

// Values use the shortest round-trip representation, so read(write(m)) == m.
inline std::string write_expression_tsv(const ExpressionMatrix& m) {
    auto check_id = [](const std::string& id) -> const std::string& {
        if (id.find_first_of("\t\n\r") != std::string::npos) throw FormatError("expression TSV: id contains a tab or newline");
        return id;
    };
    for (const auto& g : m.genes()) check_id(g);
    for (const auto& s : m.samples()) check_id(s);
    std::string out = "gene_id";
    for (const auto& s : m.samples()) {
        out += '\t';
        out += s;
    }
    out += '\n';
    for (std::size_t g = 0; g < m.gene_count(); ++g) {
        out += m.genes()[g];
        for (std::size_t s = 0; s < m.sample_count(); ++s) {
            out += '\t';
            out += format_roundtrip(m.at(g, s));
        }
        out += '\n';
    }
    return out;
}

}  // namespace milpath
