#pragma once

// Training loop and test-set evaluation.
//
// One Adam step per bag, bag order reshuffled every epoch from the run seed,
// cross-entropy on the bag label. The full epoch budget always runs; the
// parameters with the lowest validation loss (earliest on ties) are kept
// and checkpointed whenever the validation loss strictly improves.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "milpath/adam.hpp"
#include "milpath/error.hpp"
#include "milpath/feature_bag.hpp"
#include "milpath/manifest.hpp"
#include "milpath/metrics.hpp"
#include "milpath/model_io.hpp"
#include "milpath/models.hpp"
#include "milpath/rng.hpp"
#include "milpath/split.hpp"

namespace milpath {

inline constexpr std::size_t kAmEpochs = 300;
inline constexpr std::size_t kTransMilEpochs = 200;

inline std::size_t default_epochs(ModelKind kind) { return kind == ModelKind::TransMil ? kTransMilEpochs : kAmEpochs; }

struct LabeledBag {
    FeatureBag bag;
    int label = 0;
};

struct TrainConfig {
    ModelConfig model;
    std::size_t epochs = 0;  // 0 = architecture default
    double lr = 2e-4;
    double weight_decay = 1e-5;
    std::uint64_t seed = 42;
    std::string pathway;
    std::filesystem::path checkpoint_path;  // empty = keep the best model in memory only

    std::size_t resolved_epochs() const { return epochs ? epochs : default_epochs(model.kind); }

    void validate() const {
        if (!(lr > 0.0) || !std::isfinite(lr)) throw Error("train: lr must be positive");
        if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw Error("train: weight decay must be >= 0");
        model.validate();
    }
};

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_auroc = std::numeric_limits<double>::quiet_NaN();  // NaN when val holds one class

    friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct RunHistory {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;  // 1-based epoch with the minimum val loss, earliest on ties
    std::string checkpoint_path;
};

inline std::size_t best_epoch_of(std::span<const EpochRecord> epochs) {
    if (epochs.empty()) throw Error("run history is empty");
    std::size_t best = 0;
    for (std::size_t i = 1; i < epochs.size(); ++i) {
        if (epochs[i].val_loss < epochs[best].val_loss) best = i;
    }
    return epochs[best].epoch;
}

inline std::string write_history_csv(const RunHistory& h) {
    auto num = [](double v) { return std::isnan(v) ? std::string("nan") : format_roundtrip(v); };
    std::string out = "epoch,train_loss,val_loss,val_auroc\n";
    for (const auto& e : h.epochs) {
        out += std::to_string(e.epoch) + ',' + num(e.train_loss) + ',' + num(e.val_loss) + ',' + num(e.val_auroc) + '\n';
    }
    return out;
}

inline std::vector<EpochRecord> read_history_csv(std::string_view text) {
    auto lines = split_lines(text);
    if (lines.empty() || lines[0] != "epoch,train_loss,val_loss,val_auroc") throw FormatError("history CSV: unexpected header");
    auto num = [](std::string_view s) {
        return s == "nan" ? std::numeric_limits<double>::quiet_NaN() : parse_double(s, "history CSV");
    };
    std::vector<EpochRecord> out;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        auto f = split_view(lines[i], ',');
        if (f.size() != 4) throw FormatError("history CSV line " + std::to_string(i + 1) + ": expected 4 fields");
        out.push_back({parse_int<std::size_t>(f[0], "history CSV epoch"), num(f[1]), num(f[2]), num(f[3])});
    }
    return out;
}

struct TrainResult {
    RunHistory history;
    MilModel model;  // parameters from the best epoch
};

struct PreparedBag {
    Tensor features;
    std::size_t label = 0;
    const std::string* slide_id = nullptr;
};

namespace detail {

inline std::vector<PreparedBag> prepare_bags(std::span<const LabeledBag> bags, const ModelConfig& cfg, const char* what) {
    std::vector<PreparedBag> out;
    out.reserve(bags.size());
    for (const auto& b : bags) {
        if (b.bag.dim != cfg.input_dim) {
            throw ShapeError(std::string(what) + " bag " + b.bag.slide_id + " has dim " + std::to_string(b.bag.dim) +
                             ", model expects " + std::to_string(cfg.input_dim));
        }
        if (b.label != 0 && b.label != 1) throw Error("bag " + b.bag.slide_id + ": label must be 0 or 1");
        out.push_back({prepare_input(b.bag, cfg.kind).features, static_cast<std::size_t>(b.label), &b.bag.slide_id});
    }
    return out;
}

// Loss and class-1 probability without touching parameter gradients.
inline std::pair<double, double> forward_loss(MilModel& model, const PreparedBag& b) {
    Graph g;
    auto pass = model_forward(g, model, b.features);
    const std::size_t labels[] = {b.label};
    auto loss = cross_entropy(pass.logits, labels);
    const Tensor& L = pass.logits.value();
    const double p1 = 1.0 / (1.0 + std::exp(L(0, 0) - L(0, 1)));
    return {loss.value()(0, 0), p1};
}

}  // namespace detail

using EpochCallback = std::function<void(const EpochRecord&, bool improved)>;

inline TrainResult train(const TrainConfig& config, std::span<const LabeledBag> train_set,
                         std::span<const LabeledBag> val_set, const EpochCallback& on_epoch = {}) {
    config.validate();
    if (train_set.empty()) throw Error("train: training partition is empty");
    if (val_set.empty()) throw Error("train: validation partition is empty");

    ModelConfig mc = config.model;
    mc.seed = config.seed;
    MilModel model(mc);
    auto train_bags = detail::prepare_bags(train_set, mc, "training");
    auto val_bags = detail::prepare_bags(val_set, mc, "validation");
    std::vector<int> val_labels;
    for (const auto& b : val_bags) val_labels.push_back(static_cast<int>(b.label));
    const auto val_positives = static_cast<std::size_t>(std::count(val_labels.begin(), val_labels.end(), 1));
    const bool val_two_classes = val_positives > 0 && val_positives < val_labels.size();

    AdamState adam;
    adam.config.lr = config.lr;
    adam.config.weight_decay = config.weight_decay;
    auto params = model.params().tensors();
    Rng shuffle_rng(derive_seed(config.seed, 1));
    std::vector<std::size_t> order(train_bags.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    TrainResult result{{}, model};
    result.history.checkpoint_path = config.checkpoint_path.string();
    double best_val = std::numeric_limits<double>::infinity();
    const std::size_t epochs = config.resolved_epochs();
    for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
        shuffle_rng.shuffle(std::span<std::size_t>(order));
        double train_loss = 0.0;
        for (std::size_t idx : order) {
            const auto& b = train_bags[idx];
            model.params().zero_grad();
            double loss_value = 0.0;
            try {
                Graph g;
                auto pass = model_forward(g, model, b.features);
                const std::size_t labels[] = {b.label};
                auto loss = cross_entropy(pass.logits, labels);
                loss_value = loss.value()(0, 0);
                g.backward(loss);
            } catch (const NumericError& e) {
                throw NumericError("train: non-finite value at epoch " + std::to_string(epoch) + ", bag " + *b.slide_id +
                                   ": " + e.what());
            }
            adam_step(params, adam);
            train_loss += loss_value;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = train_loss / static_cast<double>(train_bags.size());
        std::vector<double> scores;
        double val_loss = 0.0;
        for (const auto& b : val_bags) {
            auto [loss, p1] = detail::forward_loss(model, b);
            val_loss += loss;
            scores.push_back(p1);
        }
        rec.val_loss = val_loss / static_cast<double>(val_bags.size());
        if (!std::isfinite(rec.val_loss)) {
            throw NumericError("train: non-finite validation loss at epoch " + std::to_string(epoch));
        }
        if (val_two_classes) rec.val_auroc = auroc(scores, val_labels);

        const bool improved = rec.val_loss < best_val;
        if (improved) {
            best_val = rec.val_loss;
            result.history.best_epoch = epoch;
            result.model = model;
            if (!config.checkpoint_path.empty()) save_model(config.checkpoint_path, model, static_cast<long long>(epoch), rec.val_loss);
        }
        result.history.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec, improved);
    }
    return result;
}

struct BagScore {
    std::string slide_id;
    int label = 0;
    double positive_probability = 0.0;
};

/// Scores bags in slide-id order and summarises them as a MetricsReport.
inline MetricsReport evaluate(MilModel& model, std::span<const LabeledBag> bags, const std::string& pathway,
                              const std::string& feature_tag, std::vector<BagScore>* per_bag = nullptr) {
    if (bags.empty()) throw Error("evaluate: partition is empty");
    std::vector<const LabeledBag*> sorted;
    for (const auto& b : bags) sorted.push_back(&b);
    std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->bag.slide_id < b->bag.slide_id; });

    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto* b : sorted) {
        auto pred = predict(model, b->bag);
        scores.push_back(pred.positive_probability());
        labels.push_back(b->label);
        if (per_bag) per_bag->push_back({b->bag.slide_id, b->label, pred.positive_probability()});
    }
    MetricsReport r;
    r.pathway = pathway;
    r.architecture = std::string(model_kind_name(model.kind()));
    r.feature_tag = feature_tag.empty() ? "dim-" + std::to_string(model.config().input_dim) : feature_tag;
    r.auroc = auroc(scores, labels);
    r.label1 = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
    r.label0 = labels.size() - r.label1;
    r.confusion = confusion_at(scores, labels, 0.5);
    return r;
}

/// Loads the bags of one split partition that carry a label for `pathway`,
/// ordered by slide id. Relative bag paths resolve against `base_dir`.
inline std::vector<LabeledBag> load_partition(const CohortManifest& manifest, const SplitAssignment& split,
                                              Partition partition, const std::string& pathway,
                                              const std::filesystem::path& base_dir = {}) {
    std::vector<LabeledBag> out;
    for (const auto& row : manifest.rows) {
        auto label = row.labels.find(pathway);
        if (label == row.labels.end()) continue;
        if (split.of(row.patient_id) != partition) continue;
        std::filesystem::path p = row.bag_path;
        if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
        LabeledBag lb{read_feature_bag(p), label->second};
        if (lb.bag.slide_id != row.slide_id) {
            throw FormatError("bag file " + p.string() + " holds slide " + lb.bag.slide_id + ", manifest says " + row.slide_id);
        }
        out.push_back(std::move(lb));
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.bag.slide_id < b.bag.slide_id; });
    return out;
}

inline TrainResult train(const TrainConfig& config, const CohortManifest& manifest, const SplitAssignment& split,
                         const std::filesystem::path& base_dir = {}, const EpochCallback& on_epoch = {}) {
    auto tr = load_partition(manifest, split, Partition::Train, config.pathway, base_dir);
    auto va = load_partition(manifest, split, Partition::Val, config.pathway, base_dir);
    return train(config, tr, va, on_epoch);
}

inline MetricsReport evaluate(const std::filesystem::path& checkpoint, const CohortManifest& manifest,
                              const SplitAssignment& split, Partition partition, const std::string& pathway,
                              const std::string& feature_tag = {}, const std::filesystem::path& base_dir = {},
                              std::vector<BagScore>* per_bag = nullptr) {
    auto loaded = load_model(checkpoint);
    auto bags = load_partition(manifest, split, partition, pathway, base_dir);
    return evaluate(loaded.model, bags, pathway, feature_tag, per_bag);
}

}  // namespace milpath
