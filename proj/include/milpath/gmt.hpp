#pragma once

// GMT gene-set files: one set per line, tab-separated
//   name <TAB> description <TAB> gene <TAB> gene ...

#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "milpath/error.hpp"
#include "milpath/io.hpp"

namespace milpath {

struct GeneSet {
    std::string name;
    std::string description;
    std::vector<std::string> genes;  // unique, first-occurrence order

    friend bool operator==(const GeneSet&, const GeneSet&) = default;
};

/// Parses GMT text. Blank lines are skipped; empty gene fields (e.g. a
/// trailing tab) are ignored. Repeated genes within a set are dropped after
/// their first occurrence and reported through `warnings` when given.
inline std::vector<GeneSet> parse_gmt(std::string_view text, std::vector<std::string>* warnings = nullptr) {
    std::vector<GeneSet> sets;
    std::set<std::string, std::less<>> names;
    std::size_t line_no = 0;
    for (auto line : split_lines(text)) {
        ++line_no;
        if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
        auto fields = split_view(line, '\t');
        GeneSet gs;
        if (fields.size() >= 2) {
            gs.name = std::string(fields[0]);
            gs.description = std::string(fields[1]);
        }
        std::unordered_set<std::string_view> seen;
        std::size_t dropped = 0;
        for (std::size_t i = 2; i < fields.size(); ++i) {
            if (fields[i].empty()) continue;
            if (!seen.insert(fields[i]).second) {
                ++dropped;
                continue;
            }
            gs.genes.emplace_back(fields[i]);
        }
        if (gs.name.empty() || gs.genes.empty()) {
            throw FormatError("GMT line " + std::to_string(line_no) +
                              ": needs a name, a description and at least one gene (3 tab-separated fields)");
        }
        if (!names.insert(gs.name).second) {
            throw FormatError("GMT line " + std::to_string(line_no) + ": duplicate gene set name '" + gs.name + "'");
        }
        if (dropped && warnings) {
            warnings->push_back("gene set " + gs.name + ": dropped " + std::to_string(dropped) + " duplicate gene id(s)");
        }
        sets.push_back(std::move(gs));
    }
    return sets;
}

inline std::string write_gmt(std::span<const GeneSet> sets) {
    std::string out;
    for (const auto& s : sets) {
        if (s.name.find_first_of("\t\n") != std::string::npos || s.description.find_first_of("\t\n") != std::string::npos) {
            throw FormatError("gene set name/description may not contain tabs or newlines: " + s.name);
        }
        out += s.name;
        out += '\t';
        out += s.description;
        for (const auto& g : s.genes) {
            out += '\t';
            out += g;
        }
        out += '\n';
    }
    return out;
}

}  // namespace milpath
