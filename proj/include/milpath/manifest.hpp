#pragma once

// Cohort manifests: which bag file belongs to which slide/patient and its labels.
//   slide_id,patient_id,bag_path,<pathway>,<pathway>...

#include <algorithm>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "milpath/error.hpp"
#include "milpath/feature_bag.hpp"
#include "milpath/io.hpp"
#include "milpath/labels.hpp"

namespace milpath {

struct ManifestRow {
    std::string slide_id;
    std::string patient_id;
    std::string bag_path;
    std::map<std::string, int> labels;

    friend bool operator==(const ManifestRow&, const ManifestRow&) = default;
};

struct CohortManifest {
    std::vector<ManifestRow> rows;  // sorted by slide_id

    std::vector<std::string> patients() const {
        std::set<std::string> ids;
        for (const auto& r : rows) ids.insert(r.patient_id);
        return {ids.begin(), ids.end()};
    }

    friend bool operator==(const CohortManifest&, const CohortManifest&) = default;
};

struct ManifestBuild {
    CohortManifest manifest;
    std::vector<std::string> skipped;  // "slide_id: reason"
};

/// Joins every *.fbag under bags_dir with the labels for one pathway.
///
/// Label rows are matched to slides by patient id (the same prefix rule
/// applied to sample ids). Slides without a label, or whose patient carries
/// conflicting labels, are listed in `skipped` rather than failing the build.
inline ManifestBuild build_manifest(const std::filesystem::path& bags_dir, const std::vector<LabelRow>& labels,
                                    const std::string& pathway, std::size_t patient_prefix = kDefaultPatientPrefix) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(bags_dir)) throw Error("build_manifest: not a directory: " + bags_dir.string());
    std::vector<fs::path> bag_files;
    for (const auto& entry : fs::directory_iterator(bags_dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".fbag") bag_files.push_back(entry.path());
    }
    std::sort(bag_files.begin(), bag_files.end());

    // patient -> label, or -1 when samples of that patient disagree
    std::map<std::string, int> patient_label;
    for (const auto& row : labels) {
        if (row.pathway != pathway) continue;
        const auto pid = patient_id_from_slide(row.sample_id, patient_prefix);
        auto [it, inserted] = patient_label.emplace(pid, row.label);
        if (!inserted && it->second != row.label) it->second = -1;
    }
    if (bag_files.empty()) throw Error("build_manifest: empty join, no .fbag files in " + bags_dir.string());
    if (patient_label.empty()) throw Error("build_manifest: empty join, no labels for pathway " + pathway);

    ManifestBuild out;
    std::set<std::string> slide_ids;
    for (const auto& path : bag_files) {
        const auto slide = read_feature_bag_slide_id(read_file(path));
        if (!slide_ids.insert(slide).second) throw Error("build_manifest: slide " + slide + " appears in two bag files");
        const auto pid = patient_id_from_slide(slide, patient_prefix);
        auto it = patient_label.find(pid);
        if (it == patient_label.end()) {
            out.skipped.push_back(slide + ": no label for patient " + pid);
            continue;
        }
        if (it->second < 0) {
            out.skipped.push_back(slide + ": conflicting labels for patient " + pid);
            continue;
        }
        out.manifest.rows.push_back({slide, pid, path.lexically_normal().generic_string(), {{pathway, it->second}}});
    }
    std::sort(out.manifest.rows.begin(), out.manifest.rows.end(),
              [](const ManifestRow& a, const ManifestRow& b) { return a.slide_id < b.slide_id; });
    return out;
}

inline std::string write_manifest_csv(const CohortManifest& manifest) {
    std::set<std::string> pathways;
    for (const auto& r : manifest.rows)
        for (const auto& [p, _] : r.labels) pathways.insert(p);
    std::string out = "slide_id,patient_id,bag_path";
    for (const auto& p : pathways) out += "," + std::string(csv_field(p));
    out += '\n';
    for (const auto& r : manifest.rows) {
        out += std::string(csv_field(r.slide_id)) + ',' + std::string(csv_field(r.patient_id)) + ',' +
               std::string(csv_field(r.bag_path));
        for (const auto& p : pathways) {
            auto it = r.labels.find(p);
            out += ',';
            if (it != r.labels.end()) out += std::to_string(it->second);
        }
        out += '\n';
    }
    return out;
}

inline CohortManifest read_manifest_csv(std::string_view text) {
    auto lines = split_lines(text);
    if (lines.empty()) throw FormatError("manifest: empty file");
    auto header = split_view(lines[0], ',');
    if (header.size() < 3 || header[0] != "slide_id" || header[1] != "patient_id" || header[2] != "bag_path") {
        throw FormatError("manifest: header must start with slide_id,patient_id,bag_path");
    }
    CohortManifest m;
    std::set<std::string> seen;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        auto f = split_view(lines[i], ',');
        if (f.size() != header.size()) throw FormatError("manifest line " + std::to_string(i + 1) + ": wrong field count");
        ManifestRow r{std::string(f[0]), std::string(f[1]), std::string(f[2]), {}};
        if (!seen.insert(r.slide_id).second) throw FormatError("manifest: duplicate slide id " + r.slide_id);
        for (std::size_t c = 3; c < f.size(); ++c) {
            if (f[c].empty()) continue;
            const int label = parse_int<int>(f[c], "manifest label");
            if (label != 0 && label != 1) throw FormatError("manifest: label must be 0 or 1");
            r.labels.emplace(std::string(header[c]), label);
        }
        m.rows.push_back(std::move(r));
    }
    std::sort(m.rows.begin(), m.rows.end(), [](const ManifestRow& a, const ManifestRow& b) { return a.slide_id < b.slide_id; });
    return m;
}

}  // namespace milpath
