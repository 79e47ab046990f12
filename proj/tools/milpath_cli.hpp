#pragma once

// Command-line front end. `run` is the whole program minus process setup so
// tests can drive it in-process.
//
// Exit codes: 0 success (and --help), 1 domain error, 2 usage error.
// Events and errors go to `err` as JSON lines; `out` carries only data that
// a subcommand prints on purpose (validation summaries, top-k patches).

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "milpath/milpath.hpp"

namespace milpath::cli {

using json = nlohmann::json;

inline void log_event(std::ostream& err, json event) { err << event.dump() << '\n'; }

// --config files: key=value lines, '#' or ';' comments, optional [section]
// headers (only the section named after the subcommand applies). Values are
// turned into flags placed ahead of the user's own arguments, so explicit
// flags always win.
inline std::vector<std::string> expand_config(CLI::App& sub, const std::vector<std::string>& args) {
    std::string path;
    std::set<std::string> given;
    for (std::size_t i = 0; i < args.size(); ++i) {
        const auto& a = args[i];
        if (a.rfind("--", 0) != 0) continue;
        const auto eq = a.find('=');
        const std::string name = a.substr(0, eq);
        given.insert(name);
        if (name == "--config") {
            if (eq != std::string::npos) {
                path = a.substr(eq + 1);
            } else if (i + 1 < args.size()) {
                path = args[i + 1];
            }
        }
    }
    if (path.empty()) return args;
    std::ifstream in(path);
    if (!in) throw CLI::ValidationError("--config", "cannot read " + path);

    std::vector<std::string> expanded;
    std::string line, section;
    int lineno = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[' && line.back() == ']') {
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        if (!section.empty() && section != sub.get_name()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw CLI::ValidationError("--config", path + ":" + std::to_string(lineno) + ": expected key=value");
        }
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
        const std::string flag = "--" + key;
        auto* opt = sub.get_option_no_throw(flag);
        if (!opt || flag == "--config") {
            throw CLI::ValidationError("--config", path + ": unknown key '" + key + "' for " + sub.get_name());
        }
        if (given.count(flag)) continue;
        if (opt->get_expected_min() == 0) {
            if (value == "true" || value == "1" || value == "yes" || value == "on") {
                expanded.push_back(flag);
            } else if (!(value == "false" || value == "0" || value == "no" || value == "off")) {
                throw CLI::ValidationError("--config", path + ": '" + key + "' expects true or false");
            }
        } else {
            expanded.push_back(flag + "=" + value);
        }
    }
    expanded.insert(expanded.end(), args.begin(), args.end());
    return expanded;
}

inline std::vector<std::string> read_id_list(const std::filesystem::path& path) {
    std::vector<std::string> ids;
    const std::string text = read_file(path);
    for (auto line : split_lines(text)) {
        while (!line.empty() && (line.back() == ' ' || line.back() == '\t')) line.remove_suffix(1);
        if (!line.empty() && line[0] != '#') ids.emplace_back(line);
    }
    return ids;
}

// CSV "x,y,f0,...,f{D-1}" (header row required) to a FeatureBag.
inline FeatureBag bag_from_csv(std::string_view text, const std::string& slide_id, std::uint32_t patch_size,
                               std::size_t patient_prefix) {
    auto lines = split_lines(text);
    if (lines.empty()) throw FormatError("feature CSV: empty file");
    auto header = split_view(lines[0], ',');
    if (header.size() < 3 || header[0] != "x" || header[1] != "y") {
        throw FormatError("feature CSV: header must be x,y,<feature columns>");
    }
    FeatureBag bag;
    bag.slide_id = slide_id;
    bag.patient_id = patient_id_from_slide(slide_id, patient_prefix);
    bag.patch_size = patch_size;
    bag.dim = static_cast<std::uint32_t>(header.size() - 2);
    std::vector<float> f(bag.dim);
    for (std::size_t i = 1; i < lines.size(); ++i) {
        auto cells = split_view(lines[i], ',');
        if (cells.size() != header.size()) {
            throw FormatError("feature CSV line " + std::to_string(i + 1) + ": expected " + std::to_string(header.size()) +
                              " fields");
        }
        PatchCoord at{parse_int<std::uint32_t>(cells[0], "feature CSV x"), parse_int<std::uint32_t>(cells[1], "feature CSV y")};
        for (std::size_t c = 0; c < bag.dim; ++c) f[c] = static_cast<float>(parse_double(cells[c + 2], "feature CSV"));
        bag.add_patch(at, f);
    }
    validate_feature_bag(bag);
    return bag;
}

inline std::uint64_t parse_seed_env() {
    const char* v = std::getenv("MILPATH_SEED");
    if (!v || !*v) return 42;
    try {
        return parse_int<std::uint64_t>(v, "MILPATH_SEED");
    } catch (const FormatError&) {
        throw CLI::ValidationError("MILPATH_SEED", std::string("not an unsigned integer: ") + v);
    }
}

inline int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Pathway labels from expression data and attention-based MIL on slide feature bags."};
    app.name("milpath");
    app.require_subcommand(1);
    app.fallthrough(false);

    std::function<void()> action;
    std::string config_file;  // consumed by expand_config before parsing
    auto add_config_flag = [&](CLI::App* s) {
        s->add_option("--config", config_file, "key=value file; command-line flags take precedence");
    };
    auto seed_option = [](CLI::App* s, std::uint64_t& seed) {
        return s->add_option("--seed", seed, "PRNG seed (falls back to $MILPATH_SEED, then 42)");
    };

    // ssgsea -----------------------------------------------------------------
    struct {
        std::string expression, gene_sets, out, summary;
        double alpha = kDefaultSsgseaAlpha;
    } ss;
    auto* ssgsea = app.add_subcommand("ssgsea", "Score gene sets per sample and binarize into pathway labels");
    ssgsea->add_option("--expression", ss.expression, "Expression TSV (genes x samples)")->required();
    ssgsea->add_option("--gene-sets", ss.gene_sets, "GMT gene-set file")->required();
    ssgsea->add_option("--out", ss.out, "Output labels CSV")->required();
    ssgsea->add_option("--summary", ss.summary, "Optional per-pathway summary CSV");
    ssgsea->add_option("--alpha", ss.alpha, "Running-sum weight exponent")->capture_default_str();
    add_config_flag(ssgsea);
    ssgsea->callback([&] {
        action = [&] {
            log_event(err, {{"event", "config"}, {"subcommand", "ssgsea"},
                            {"config", {{"expression", ss.expression}, {"gene_sets", ss.gene_sets}, {"out", ss.out},
                                        {"summary", ss.summary}, {"alpha", ss.alpha}}}});
            auto matrix = read_expression_tsv(read_file(ss.expression));
            std::vector<std::string> warnings;
            auto sets = parse_gmt(read_file(ss.gene_sets), &warnings);
            for (const auto& w : warnings) log_event(err, {{"event", "warning"}, {"message", w}});
            auto scores = score_cohort(matrix, sets, ss.alpha);
            for (const auto& f : scores.failures) log_event(err, {{"event", "warning"}, {"message", f}});
            write_file_atomic(ss.out, write_labels_table(scores.rows));
            if (!ss.summary.empty()) write_file_atomic(ss.summary, write_cohort_summary(scores));
            for (const auto& s : scores.summary) {
                log_event(err, {{"event", "pathway"}, {"pathway", s.pathway}, {"label0", s.label0}, {"label1", s.label1},
                                {"class_proportion", s.class_proportion()}, {"failures", s.failures}});
            }
        };
    });

    // labels (manifest build) -----------------------------------------------
    struct {
        std::string bags, labels, pathway, out;
        std::size_t prefix = kDefaultPatientPrefix;
    } lb;
    auto* labels = app.add_subcommand("labels", "Join feature bags with pathway labels into a cohort manifest");
    labels->add_option("--bags", lb.bags, "Directory of .fbag files")->required();
    labels->add_option("--labels", lb.labels, "Labels CSV from ssgsea")->required();
    labels->add_option("--pathway", lb.pathway, "Pathway to join")->required();
    labels->add_option("--out", lb.out, "Output manifest CSV")->required();
    labels->add_option("--patient-prefix", lb.prefix, "Characters of a slide/sample id that form the patient id")
        ->capture_default_str();
    add_config_flag(labels);
    labels->callback([&] {
        action = [&] {
            log_event(err, {{"event", "config"}, {"subcommand", "labels"},
                            {"config", {{"bags", lb.bags}, {"labels", lb.labels}, {"pathway", lb.pathway},
                                        {"out", lb.out}, {"patient_prefix", lb.prefix}}}});
            auto rows = read_labels_table(read_file(lb.labels));
            auto built = build_manifest(lb.bags, rows, lb.pathway, lb.prefix);
            for (const auto& s : built.skipped) log_event(err, {{"event", "skipped"}, {"detail", s}});
            write_file_atomic(lb.out, write_manifest_csv(built.manifest));
            log_event(err, {{"event", "manifest"}, {"slides", built.manifest.rows.size()},
                            {"patients", built.manifest.patients().size()}, {"skipped", built.skipped.size()}});
        };
    });

    // split --------------------------------------------------------------------
    struct {
        std::string patients, manifest, out, stratify;
        std::uint64_t seed = 42;
        unsigned train = 70, val = 15;
    } sp;
    auto* split = app.add_subcommand("split", "Patient-level train/val/test split");
    auto* sp_patients = split->add_option("--patients", sp.patients, "Patient id list, one per line");
    auto* sp_manifest = split->add_option("--manifest", sp.manifest, "Take patients from a cohort manifest");
    sp_patients->excludes(sp_manifest);
    split->add_option("--out", sp.out, "Output split CSV")->required();
    seed_option(split, sp.seed);
    split->add_option("--train-percent", sp.train, "Share of patients in train")->capture_default_str();
    split->add_option("--val-percent", sp.val, "Share of patients in val; test gets the rest")->capture_default_str();
    split->add_option("--stratify", sp.stratify, "Stratify by this pathway's labels (needs --manifest)");
    add_config_flag(split);
    split->callback([&] {
        if (sp.patients.empty() && sp.manifest.empty()) throw CLI::RequiredError("--patients or --manifest");
        if (!sp.stratify.empty() && sp.manifest.empty()) throw CLI::ValidationError("--stratify", "requires --manifest");
        action = [&] {
            log_event(err, {{"event", "config"}, {"subcommand", "split"},
                            {"config", {{"patients", sp.patients}, {"manifest", sp.manifest}, {"out", sp.out},
                                        {"seed", sp.seed}, {"train_percent", sp.train}, {"val_percent", sp.val},
                                        {"stratify", sp.stratify}, {"algorithm", Rng::algorithm_name}}}});
            std::vector<std::string> ids;
            std::map<std::string, int> strata;
            if (!sp.patients.empty()) {
                ids = read_id_list(sp.patients);
            } else {
                auto m = read_manifest_csv(read_file(sp.manifest));
                ids = m.patients();
                if (!sp.stratify.empty()) {
                    for (const auto& r : m.rows) {
                        auto it = r.labels.find(sp.stratify);
                        if (it == r.labels.end()) throw Error("split: slide " + r.slide_id + " has no " + sp.stratify + " label");
                        strata[r.patient_id] = it->second;
                    }
                }
            }
            SplitOptions opts;
            opts.train_percent = sp.train;
            opts.val_percent = sp.val;
            if (!sp.stratify.empty()) opts.strata = &strata;
            auto s = make_split(ids, sp.seed, opts);
            write_file_atomic(sp.out, write_split_csv(s));
            auto c = s.counts();
            log_event(err, {{"event", "split"}, {"train", c[0]}, {"val", c[1]}, {"test", c[2]}});
        };
    });

    // pack-features --------------------------------------------------------------
    struct {
        std::string csv, slide_id, out, validate;
        std::uint32_t patch_size = 256;
        std::size_t prefix = kDefaultPatientPrefix;
    } pf;
    auto* pack = app.add_subcommand("pack-features", "Convert a patch-feature CSV to FBAG, or validate an FBAG file");
    auto* pf_csv = pack->add_option("--csv", pf.csv, "Feature CSV with header x,y,f0,...");
    pack->add_option("--slide-id", pf.slide_id, "Slide id stored in the bag");
    pack->add_option("--out", pf.out, "Output .fbag");
    pack->add_option("--patch-size", pf.patch_size, "Patch edge length in pixels")->capture_default_str();
    pack->add_option("--patient-prefix", pf.prefix, "Characters of the slide id that form the patient id")->capture_default_str();
    auto* pf_validate = pack->add_option("--validate", pf.validate, "Validate an existing .fbag and print its header as JSON");
    pf_validate->excludes(pf_csv);
    add_config_flag(pack);
    pack->callback([&] {
        if (pf.validate.empty() && (pf.csv.empty() || pf.slide_id.empty() || pf.out.empty())) {
            throw CLI::RequiredError("--csv, --slide-id and --out (or --validate)");
        }
        action = [&] {
            log_event(err, {{"event", "config"}, {"subcommand", "pack-features"},
                            {"config", {{"csv", pf.csv}, {"slide_id", pf.slide_id}, {"out", pf.out},
                                        {"patch_size", pf.patch_size}, {"validate", pf.validate}}}});
            if (!pf.validate.empty()) {
                auto bag = read_feature_bag(pf.validate, pf.prefix);
                out << json{{"slide_id", bag.slide_id}, {"patient_id", bag.patient_id}, {"dim", bag.dim},
                            {"patch_size", bag.patch_size}, {"n_patches", bag.size()}, {"valid", true}}
                           .dump()
                    << '\n';
                return;
            }
            auto bag = bag_from_csv(read_file(pf.csv), pf.slide_id, pf.patch_size, pf.prefix);
            write_feature_bag(pf.out, bag);
            log_event(err, {{"event", "packed"}, {"slide_id", bag.slide_id}, {"dim", bag.dim}, {"n_patches", bag.size()}});
        };
    });

    // train --------------------------------------------------------------------
    struct {
        std::string manifest, split, pathway, out_dir, bag_root, arch = "AM-SB";
        std::size_t epochs = 0, embed = 512, hidden = 256, heads = 8, landmarks = 256;
        double lr = 2e-4, wd = 1e-5;
        std::uint64_t seed = 42;
        bool nystrom = false;
    } tr;
    auto* train_cmd = app.add_subcommand("train", "Train one model for one pathway");
    train_cmd->add_option("--manifest", tr.manifest, "Cohort manifest CSV")->required();
    train_cmd->add_option("--split", tr.split, "Split CSV")->required();
    train_cmd->add_option("--pathway", tr.pathway, "Pathway label to learn")->required();
    train_cmd->add_option("--out-dir", tr.out_dir, "Directory for model.milc, model.milc.json and history.csv")->required();
    train_cmd->add_option("--arch", tr.arch, "AM-SB, AM-MB or TransMIL")->capture_default_str();
    train_cmd->add_option("--epochs", tr.epochs, "Epochs (default 300 for AM-SB/AM-MB, 200 for TransMIL)");
    train_cmd->add_option("--lr", tr.lr, "Adam learning rate (constant)")->capture_default_str();
    train_cmd->add_option("--wd", tr.wd, "Weight decay (L2)")->capture_default_str();
    seed_option(train_cmd, tr.seed);
    train_cmd->add_option("--embed-dim", tr.embed, "Instance embedding size")->capture_default_str();
    train_cmd->add_option("--hidden-dim", tr.hidden, "Gated-attention hidden size")->capture_default_str();
    train_cmd->add_option("--heads", tr.heads, "TransMIL attention heads")->capture_default_str();
    train_cmd->add_flag("--nystrom", tr.nystrom, "TransMIL: Nystrom-approximated attention");
    train_cmd->add_option("--landmarks", tr.landmarks, "Nystrom landmark count")->capture_default_str();
    train_cmd->add_option("--bag-root", tr.bag_root, "Resolve relative bag paths against this directory");
    add_config_flag(train_cmd);
    train_cmd->callback([&] {
        action = [&] {
            TrainConfig tc;
            tc.model.kind = parse_model_kind(tr.arch);
            tc.model.embed_dim = tr.embed;
            tc.model.hidden_dim = tr.hidden;
            tc.model.n_heads = tr.heads;
            tc.model.nystrom = tr.nystrom;
            tc.model.landmarks = tr.landmarks;
            tc.epochs = tr.epochs;
            tc.lr = tr.lr;
            tc.weight_decay = tr.wd;
            tc.seed = tr.seed;
            tc.pathway = tr.pathway;
            const std::filesystem::path dir = tr.out_dir;
            tc.checkpoint_path = dir / "model.milc";

            auto manifest = read_manifest_csv(read_file(tr.manifest));
            auto split_assignment = read_split_csv(read_file(tr.split));
            auto train_bags = load_partition(manifest, split_assignment, Partition::Train, tr.pathway, tr.bag_root);
            auto val_bags = load_partition(manifest, split_assignment, Partition::Val, tr.pathway, tr.bag_root);
            if (train_bags.empty()) throw Error("train: training partition is empty");
            tc.model.input_dim = train_bags.front().bag.dim;
            log_event(err, {{"event", "config"}, {"subcommand", "train"},
                            {"config", {{"manifest", tr.manifest}, {"split", tr.split}, {"pathway", tr.pathway},
                                        {"out_dir", tr.out_dir}, {"arch", std::string(model_kind_name(tc.model.kind))},
                                        {"epochs", tc.resolved_epochs()}, {"lr", tc.lr}, {"wd", tc.weight_decay},
                                        {"seed", tc.seed}, {"input_dim", tc.model.input_dim}, {"embed_dim", tr.embed},
                                        {"hidden_dim", tr.hidden}, {"heads", tr.heads}, {"nystrom", tr.nystrom},
                                        {"landmarks", tr.landmarks}, {"batch_bags", 1},
                                        {"train_bags", train_bags.size()}, {"val_bags", val_bags.size()}}}});
            auto result = train(tc, train_bags, val_bags, [&](const EpochRecord& r, bool improved) {
                json e{{"event", "epoch"}, {"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_loss", r.val_loss},
                       {"improved", improved}};
                e["val_auroc"] = std::isnan(r.val_auroc) ? json(nullptr) : json(r.val_auroc);
                log_event(err, e);
            });
            write_file_atomic(dir / "history.csv", write_history_csv(result.history));
            log_event(err, {{"event", "trained"}, {"best_epoch", result.history.best_epoch},
                            {"checkpoint", tc.checkpoint_path.string()}});
        };
    });

    // eval -------------------------------------------------------------------------
    struct {
        std::string checkpoint, manifest, split, pathway, partition = "test", tag, out, markdown, predictions, bag_root;
    } ev;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on one split partition");
    eval->add_option("--checkpoint", ev.checkpoint, "Model checkpoint (.milc with .json sidecar)")->required();
    eval->add_option("--manifest", ev.manifest, "Cohort manifest CSV")->required();
    eval->add_option("--split", ev.split, "Split CSV")->required();
    eval->add_option("--pathway", ev.pathway, "Pathway label to score against")->required();
    eval->add_option("--partition", ev.partition, "train, val or test")->capture_default_str();
    eval->add_option("--feature-tag", ev.tag, "Feature-set tag for reports (default dim-<D>)");
    eval->add_option("--out", ev.out, "Metrics CSV")->required();
    eval->add_option("--markdown", ev.markdown, "Also write a Markdown table");
    eval->add_option("--predictions", ev.predictions, "Per-slide probabilities CSV");
    eval->add_option("--bag-root", ev.bag_root, "Resolve relative bag paths against this directory");
    add_config_flag(eval);
    eval->callback([&] {
        action = [&] {
            log_event(err, {{"event", "config"}, {"subcommand", "eval"},
                            {"config", {{"checkpoint", ev.checkpoint}, {"manifest", ev.manifest}, {"split", ev.split},
                                        {"pathway", ev.pathway}, {"partition", ev.partition}, {"feature_tag", ev.tag},
                                        {"out", ev.out}}}});
            auto manifest = read_manifest_csv(read_file(ev.manifest));
            auto split_assignment = read_split_csv(read_file(ev.split));
            std::vector<BagScore> scores;
            auto report = evaluate(ev.checkpoint, manifest, split_assignment, parse_partition(ev.partition), ev.pathway,
                                   ev.tag, ev.bag_root, &scores);
            const MetricsReport reports[] = {report};
            write_file_atomic(ev.out, write_metrics_csv(reports));
            if (!ev.markdown.empty()) write_file_atomic(ev.markdown, metrics_markdown(reports));
            if (!ev.predictions.empty()) {
                std::string csv = "slide_id,label,positive_probability\n";
                for (const auto& s : scores) {
                    csv += std::string(csv_field(s.slide_id)) + ',' + std::to_string(s.label) + ',' +
                           format_roundtrip(s.positive_probability) + '\n';
                }
                write_file_atomic(ev.predictions, csv);
            }
            log_event(err, {{"event", "metrics"}, {"auroc", report.auroc}, {"class_proportion", report.class_proportion()},
                            {"tp", report.confusion.tp}, {"fp", report.confusion.fp}, {"tn", report.confusion.tn},
                            {"fn", report.confusion.fn}});
        };
    });

    // heatmap ------------------------------------------------------------------------
    struct {
        std::string checkpoint, bag, out, csv;
        std::uint32_t cell = 1;
        std::size_t top_k = 0;
    } hm;
    auto* heatmap = app.add_subcommand("heatmap", "Render a slide's attention map as PNG plus CSV");
    heatmap->add_option("--checkpoint", hm.checkpoint, "Model checkpoint (.milc with .json sidecar)")->required();
    heatmap->add_option("--bag", hm.bag, "Feature bag (.fbag)")->required();
    heatmap->add_option("--out", hm.out, "Output PNG")->required();
    heatmap->add_option("--csv", hm.csv, "Output CSV (default: PNG path with .csv)");
    heatmap->add_option("--cell-pixels", hm.cell, "Pixels per patch cell")->capture_default_str();
    heatmap->add_option("--top-k", hm.top_k, "Print the k highest/lowest attention patches as JSON");
    add_config_flag(heatmap);
    heatmap->callback([&] {
        action = [&] {
            std::filesystem::path csv_path = hm.csv.empty() ? std::filesystem::path(hm.out).replace_extension(".csv")
                                                            : std::filesystem::path(hm.csv);
            log_event(err, {{"event", "config"}, {"subcommand", "heatmap"},
                            {"config", {{"checkpoint", hm.checkpoint}, {"bag", hm.bag}, {"out", hm.out},
                                        {"csv", csv_path.string()}, {"cell_pixels", hm.cell}, {"top_k", hm.top_k}}}});
            auto loaded = load_model(hm.checkpoint);
            auto bag = read_feature_bag(hm.bag);
            auto pred = predict(loaded.model, bag);
            auto map = make_attention_map(bag, pred.display_attention());
            write_file_atomic(hm.out, render_heatmap(map, hm.cell));
            write_file_atomic(csv_path, write_attention_csv(map));
            if (hm.top_k > 0) {
                auto ex = top_bottom_patches(map, hm.top_k);
                auto list = [](const std::vector<AttentionEntry>& v) {
                    json a = json::array();
                    for (const auto& e : v) a.push_back({{"x", e.x}, {"y", e.y}, {"raw_weight", e.raw_weight}});
                    return a;
                };
                out << json{{"slide_id", bag.slide_id}, {"top", list(ex.top)}, {"bottom", list(ex.bottom)}}.dump() << '\n';
            }
            log_event(err, {{"event", "heatmap"}, {"slide_id", bag.slide_id}, {"predicted_class", pred.predicted_class},
                            {"positive_probability", pred.positive_probability()}});
        };
    });

    // compare ----------------------------------------------------------------------------
    struct {
        std::vector<std::string> metrics;
        std::string out, markdown;
    } cm;
    auto* compare = app.add_subcommand("compare", "Best model per feature tag for each pathway");
    compare->add_option("--metrics", cm.metrics, "Metrics CSV files from eval")->required()->expected(1, -1);
    compare->add_option("--out", cm.out, "Comparison CSV")->required();
    compare->add_option("--markdown", cm.markdown, "Also write a Markdown table");
    add_config_flag(compare);
    compare->callback([&] {
        action = [&] {
            log_event(err, {{"event", "config"}, {"subcommand", "compare"},
                            {"config", {{"metrics", cm.metrics}, {"out", cm.out}, {"markdown", cm.markdown}}}});
            std::vector<MetricsReport> reports;
            for (const auto& p : cm.metrics) {
                auto r = read_metrics_csv(read_file(p));
                reports.insert(reports.end(), r.begin(), r.end());
            }
            auto rows = compare_runs(reports);
            write_file_atomic(cm.out, comparison_csv(rows));
            if (!cm.markdown.empty()) write_file_atomic(cm.markdown, comparison_markdown(rows));
        };
    });

    // fetch-expression ------------------------------------------------------------------------
    struct {
        std::string api_url, cohort, out, fixture;
        int attempts = 3;
        long backoff_ms = 500;
    } fe;
    auto* fetch = app.add_subcommand("fetch-expression", "Download a cohort's expression matrix as TSV");
    fetch->add_option("--api-url", fe.api_url, "Base URL of the cohort API (http:// or file://)");
    fetch->add_option("--cohort", fe.cohort, "Cohort id");
    fetch->add_option("--fixture", fe.fixture, "Offline mode: read the JSON payload from this file");
    fetch->add_option("--out", fe.out, "Output TSV")->required();
    fetch->add_option("--attempts", fe.attempts, "Maximum request attempts")->capture_default_str();
    fetch->add_option("--backoff-ms", fe.backoff_ms, "Delay before the first retry, doubled per retry")->capture_default_str();
    add_config_flag(fetch);
    fetch->callback([&] {
        if (fe.fixture.empty() && (fe.api_url.empty() || fe.cohort.empty())) {
            throw CLI::RequiredError("--api-url and --cohort (or --fixture)");
        }
        action = [&] {
            log_event(err, {{"event", "config"}, {"subcommand", "fetch-expression"},
                            {"config", {{"api_url", fe.api_url}, {"cohort", fe.cohort}, {"fixture", fe.fixture},
                                        {"out", fe.out}, {"attempts", fe.attempts}, {"backoff_ms", fe.backoff_ms}}}});
            FetchOptions opts;
            opts.max_attempts = fe.attempts;
            opts.initial_backoff = std::chrono::milliseconds(fe.backoff_ms);
            auto tsv = fe.fixture.empty() ? fetch_expression(fe.api_url, fe.cohort, opts) : fetch_expression_offline(fe.fixture);
            write_file_atomic(fe.out, tsv);
        };
    });

    std::vector<std::string> args = argv;
    try {
        sp.seed = tr.seed = parse_seed_env();
        if (!args.empty()) {
            if (auto* sub = app.get_subcommand_no_throw(args.front())) {
                std::vector<std::string> rest(args.begin() + 1, args.end());
                rest = expand_config(*sub, rest);
                rest.insert(rest.begin(), args.front());
                args = std::move(rest);
            }
        }
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help("", CLI::AppFormatMode::Normal);
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        log_event(err, {{"event", "usage_error"}, {"message", e.what()}});
        const CLI::App* target = &app;
        for (auto* s : app.get_subcommands()) target = s;
        err << target->help();
        return 2;
    }

    try {
        action();
    } catch (const std::exception& e) {
        log_event(err, {{"event", "error"}, {"message", e.what()}});
        return 1;
    }
    return 0;
}

}  // namespace milpath::cli
