#pragma once

// Expression download from a cohort API.
//
// GET {api_url}/cohorts/{cohort_id}/expression returns molecular-profile rows
// of {"gene", "sample", "value"}, either as a bare array or under "rows".
// cBioPortal-style keys (hugoGeneSymbol / entrezGeneId, sampleId) are
// accepted as aliases. Rows are assembled into a dense matrix with genes and
// samples in lexicographic order. A "file://" api_url, or an explicit
// fixture path, reads the same JSON from disk instead.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "milpath/error.hpp"
#include "milpath/expression.hpp"
#include "milpath/io.hpp"

namespace milpath {

struct FetchOptions {
    int max_attempts = 3;
    std::chrono::milliseconds initial_backoff{500};  // doubled after every failed attempt
    std::chrono::seconds timeout{30};
};

namespace detail {

inline std::string json_key_string(const nlohmann::json& row, std::initializer_list<const char*> keys, const char* what) {
    for (const char* k : keys) {
        auto it = row.find(k);
        if (it == row.end()) continue;
        if (it->is_string()) return it->get<std::string>();
        if (it->is_number_integer()) return std::to_string(it->get<long long>());
        throw FormatError(std::string("expression payload: field '") + k + "' has the wrong type");
    }
    throw FormatError(std::string("expression payload: row without ") + what);
}

}  // namespace detail

inline ExpressionMatrix expression_from_json(std::string_view payload) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(payload);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("expression payload: ") + e.what());
    }
    const nlohmann::json* rows = &doc;
    if (doc.is_object()) {
        auto it = doc.find("rows");
        if (it == doc.end()) throw FormatError("expression payload: object without \"rows\"");
        rows = &*it;
    }
    if (!rows->is_array()) throw FormatError("expression payload: rows must be an array");
    if (rows->empty()) throw Error("expression payload: no samples");

    std::map<std::pair<std::string, std::string>, double> cells;
    std::set<std::string> genes, samples;
    for (const auto& row : *rows) {
        if (!row.is_object()) throw FormatError("expression payload: row is not an object");
        auto gene = detail::json_key_string(row, {"gene", "hugoGeneSymbol", "entrezGeneId"}, "gene");
        auto sample = detail::json_key_string(row, {"sample", "sampleId"}, "sample");
        auto v = row.find("value");
        if (v == row.end()) throw FormatError("expression payload: row without value");
        if (!v->is_number()) throw FormatError("expression payload: value for (" + gene + ", " + sample + ") is not a number");
        if (!cells.emplace(std::pair{gene, sample}, v->get<double>()).second) {
            throw FormatError("expression payload: duplicate row for (" + gene + ", " + sample + ")");
        }
        genes.insert(gene);
        samples.insert(sample);
    }
    if (cells.size() != genes.size() * samples.size()) {
        throw FormatError("expression payload: " + std::to_string(genes.size() * samples.size() - cells.size()) +
                          " (gene, sample) cells missing");
    }
    std::vector<double> values;
    values.reserve(cells.size());
    for (const auto& g : genes) {
        for (const auto& s : samples) values.push_back(cells.at({g, s}));
    }
    return ExpressionMatrix({genes.begin(), genes.end()}, {samples.begin(), samples.end()}, std::move(values));
}

inline std::string fetch_expression_offline(const std::filesystem::path& fixture) {
    return write_expression_tsv(expression_from_json(read_file(fixture)));
}

/// Downloads and assembles one cohort's expression matrix; returns TSV text.
///
/// Connection failures, 5xx and 429 are retried up to max_attempts with
/// exponential backoff; other non-2xx statuses fail at once.
inline std::string fetch_expression(const std::string& api_url, const std::string& cohort_id, const FetchOptions& opts = {}) {
    if (cohort_id.empty() || cohort_id.find('/') != std::string::npos) throw Error("fetch_expression: invalid cohort id");
    if (api_url.rfind("file://", 0) == 0) {
        return fetch_expression_offline(std::filesystem::path(api_url.substr(7)) / "cohorts" / cohort_id / "expression.json");
    }
    const auto scheme_end = api_url.find("://");
    if (scheme_end == std::string::npos) throw Error("fetch_expression: api url needs a scheme: " + api_url);
    const auto path_start = api_url.find('/', scheme_end + 3);
    const std::string origin = api_url.substr(0, path_start);
    std::string base = path_start == std::string::npos ? "" : api_url.substr(path_start);
    while (!base.empty() && base.back() == '/') base.pop_back();
    const std::string path = base + "/cohorts/" + cohort_id + "/expression";

    httplib::Client client(origin);
    if (!client.is_valid()) throw Error("fetch_expression: unsupported api url " + api_url);
    client.set_connection_timeout(opts.timeout);
    client.set_read_timeout(opts.timeout);

    auto backoff = opts.initial_backoff;
    std::string last_error;
    for (int attempt = 1; attempt <= std::max(1, opts.max_attempts); ++attempt) {
        if (attempt > 1) {
            std::this_thread::sleep_for(backoff);
            backoff *= 2;
        }
        auto res = client.Get(path);
        if (!res) {
            last_error = "request failed: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status >= 200 && res->status < 300) return write_expression_tsv(expression_from_json(res->body));
        last_error = "HTTP " + std::to_string(res->status) + " from " + origin + path;
        if (res->status < 500 && res->status != 429) throw NetworkError("fetch_expression: " + last_error, false);
    }
    throw NetworkError("fetch_expression: giving up after " + std::to_string(std::max(1, opts.max_attempts)) +
                           " attempts: " + last_error,
                       true);
}

}  // namespace milpath
