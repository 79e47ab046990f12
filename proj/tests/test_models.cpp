#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "generators.hpp"
#include "grad_cases.hpp"
#include "oracles.hpp"

using namespace milpath;
namespace fs = std::filesystem;

// Plain row-major matrices, independent of the tape.
namespace ref {

struct Mat {
    std::size_t r = 0, c = 0;
    std::vector<double> v;
    Mat() = default;
    Mat(std::size_t rows, std::size_t cols, double fill = 0.0) : r(rows), c(cols), v(rows * cols, fill) {}
    explicit Mat(const Tensor& t) : r(t.rows()), c(t.cols()), v(t.values().begin(), t.values().end()) {}
    double& operator()(std::size_t i, std::size_t j) { return v[i * c + j]; }
    double operator()(std::size_t i, std::size_t j) const { return v[i * c + j]; }
};

Mat p(const MilModel& m, const std::string& name) { return Mat(m.params().at(name)); }

// x W^T + b
Mat linear(const Mat& x, const Mat& w, const Mat* b = nullptr) {
    Mat out(x.r, w.r);
    for (std::size_t i = 0; i < x.r; ++i)
        for (std::size_t o = 0; o < w.r; ++o) {
            double s = b ? b->v[o] : 0.0;
            for (std::size_t k = 0; k < x.c; ++k) s += x(i, k) * w(o, k);
            out(i, o) = s;
        }
    return out;
}

Mat mm(const Mat& a, const Mat& b) {
    Mat out(a.r, b.c);
    for (std::size_t i = 0; i < a.r; ++i)
        for (std::size_t j = 0; j < b.c; ++j)
            for (std::size_t k = 0; k < a.c; ++k) out(i, j) += a(i, k) * b(k, j);
    return out;
}

void softmax_row(double* row, std::size_t n) {
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double s = 0;
    for (std::size_t j = 0; j < n; ++j) s += row[j] = std::exp(row[j] - mx);
    for (std::size_t j = 0; j < n; ++j) row[j] /= s;
}

Mat embed(const MilModel& m, const Mat& x) {
    auto b = p(m, "embed.bias");
    Mat h = linear(x, p(m, "embed.weight"), &b);
    for (auto& e : h.v) e = std::max(0.0, e);
    return h;
}

// [branches x N]
Mat gated(const MilModel& m, const Mat& h) {
    auto vb = p(m, "attention.V.bias"), ub = p(m, "attention.U.bias");
    Mat a = linear(h, p(m, "attention.V.weight"), &vb);
    Mat g = linear(h, p(m, "attention.U.weight"), &ub);
    for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] = std::tanh(a.v[i]) / (1.0 + std::exp(-g.v[i]));
    Mat s = linear(a, p(m, "attention.w"));  // [N x branches]
    Mat out(s.c, s.r);
    for (std::size_t i = 0; i < s.r; ++i)
        for (std::size_t j = 0; j < s.c; ++j) out(j, i) = s(i, j);
    for (std::size_t b = 0; b < out.r; ++b) softmax_row(&out.v[b * out.c], out.c);
    return out;
}

std::vector<double> am_sb(const MilModel& m, const Mat& x) {
    Mat h = embed(m, x);
    Mat z = mm(gated(m, h), h);
    auto b = p(m, "classifier.bias");
    return linear(z, p(m, "classifier.weight"), &b).v;
}

std::vector<double> am_mb(const MilModel& m, const Mat& x) {
    Mat h = embed(m, x);
    Mat z = mm(gated(m, h), h);
    std::vector<double> out;
    for (std::size_t c = 0; c < m.config().n_classes; ++c) {
        const std::string pre = "classifier." + std::to_string(c) + ".";
        Mat w = p(m, pre + "weight");
        double s = p(m, pre + "bias").v[0];
        for (std::size_t k = 0; k < z.c; ++k) s += z(c, k) * w.v[k];
        out.push_back(s);
    }
    return out;
}

Mat layer_norm(const Mat& x, const Mat& gain, const Mat& bias) {
    Mat out(x.r, x.c);
    for (std::size_t i = 0; i < x.r; ++i) {
        double mean = 0, var = 0;
        for (std::size_t j = 0; j < x.c; ++j) mean += x(i, j);
        mean /= static_cast<double>(x.c);
        for (std::size_t j = 0; j < x.c; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
        var /= static_cast<double>(x.c);
        for (std::size_t j = 0; j < x.c; ++j) out(i, j) = (x(i, j) - mean) / std::sqrt(var + 1e-5) * gain.v[j] + bias.v[j];
    }
    return out;
}

// Exact multi-head attention; also returns the head-averaged attention row of token 0.
Mat attention(const MilModel& m, const std::string& pre, const Mat& x, std::vector<double>* cls_row) {
    const std::size_t E = m.config().embed_dim, H = m.config().n_heads, d = E / H, T = x.r;
    Mat q = linear(x, p(m, pre + "q.weight")), k = linear(x, p(m, pre + "k.weight")), v = linear(x, p(m, pre + "v.weight"));
    Mat merged(T, E);
    if (cls_row) cls_row->assign(T, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
        Mat s(T, T);
        for (std::size_t i = 0; i < T; ++i) {
            for (std::size_t j = 0; j < T; ++j) {
                double dot = 0;
                for (std::size_t t = 0; t < d; ++t) dot += q(i, h * d + t) * k(j, h * d + t);
                s(i, j) = dot / std::sqrt(static_cast<double>(d));
            }
            softmax_row(&s.v[i * T], T);
        }
        for (std::size_t i = 0; i < T; ++i)
            for (std::size_t t = 0; t < d; ++t) {
                double acc = 0;
                for (std::size_t j = 0; j < T; ++j) acc += s(i, j) * v(j, h * d + t);
                merged(i, h * d + t) = acc;
            }
        if (cls_row)
            for (std::size_t j = 0; j < T; ++j) (*cls_row)[j] += s(0, j) / static_cast<double>(H);
    }
    auto ob = p(m, pre + "out.bias");
    return linear(merged, p(m, pre + "out.weight"), &ob);
}

Mat block(const MilModel& m, int layer, const Mat& x, std::vector<double>* cls_row) {
    const std::string pre = "layer" + std::to_string(layer) + ".";
    Mat y = attention(m, pre, layer_norm(x, p(m, pre + "norm.gain"), p(m, pre + "norm.bias")), cls_row);
    for (std::size_t i = 0; i < y.v.size(); ++i) y.v[i] += x.v[i];
    return y;
}

std::vector<double> transmil(const MilModel& m, const Mat& x, std::vector<double>* attn = nullptr) {
    const std::size_t n = x.r, E = m.config().embed_dim;
    std::size_t side = 1;
    while (side * side < n) ++side;
    Mat h = embed(m, x);
    Mat tokens(1 + side * side, E);
    for (std::size_t j = 0; j < E; ++j) tokens(0, j) = p(m, "cls_token").v[j];
    for (std::size_t t = 0; t < side * side; ++t)
        for (std::size_t j = 0; j < E; ++j) tokens(1 + t, j) = h(t % n, j);
    std::vector<double> cls_row;
    tokens = block(m, 0, tokens, &cls_row);
    Mat conv = tokens;
    for (std::size_t k : {7, 5, 3}) {
        Mat w = p(m, "ppeg.conv" + std::to_string(k) + ".weight"), b = p(m, "ppeg.conv" + std::to_string(k) + ".bias");
        const long half = static_cast<long>(k / 2), s = static_cast<long>(side);
        for (long r = 0; r < s; ++r)
            for (long c = 0; c < s; ++c)
                for (std::size_t ch = 0; ch < E; ++ch) {
                    double acc = b.v[ch];
                    for (long dy = -half; dy <= half; ++dy)
                        for (long dx = -half; dx <= half; ++dx) {
                            const long rr = r + dy, cc = c + dx;
                            if (rr < 0 || cc < 0 || rr >= s || cc >= s) continue;
                            acc += w(ch, static_cast<std::size_t>((dy + half) * static_cast<long>(k) + dx + half)) *
                                   tokens(1 + static_cast<std::size_t>(rr * s + cc), ch);
                        }
                    conv(1 + static_cast<std::size_t>(r * s + c), ch) += acc;
                }
    }
    tokens = block(m, 1, conv, nullptr);
    Mat cls(1, E);
    for (std::size_t j = 0; j < E; ++j) cls(0, j) = tokens(0, j);
    cls = layer_norm(cls, p(m, "norm.gain"), p(m, "norm.bias"));
    auto hb = p(m, "head.bias");
    if (attn) attn->assign(cls_row.begin() + 1, cls_row.begin() + 1 + static_cast<long>(n));
    return linear(cls, p(m, "head.weight"), &hb).v;
}

}  // namespace ref

namespace {

ModelConfig config_for(ModelKind kind, std::uint64_t seed, bool nystrom = false) {
    ModelConfig c;
    c.kind = kind;
    c.input_dim = 12;
    c.embed_dim = 16;
    c.hidden_dim = 10;
    c.n_heads = 4;
    c.nystrom = nystrom;
    c.seed = seed;
    return c;
}

std::vector<double> forward_logits(MilModel& m, const Tensor& x) {
    Graph g;
    auto pass = model_forward(g, m, x);
    return {pass.logits.value().values().begin(), pass.logits.value().values().end()};
}

FeatureBag random_bag(Rng& rng, std::size_t n, std::size_t dim) {
    FeatureBag b;
    b.slide_id = "TCGA-XX-0000-01Z";
    b.dim = static_cast<std::uint32_t>(dim);
    std::vector<std::uint32_t> cells(n * 2);
    std::iota(cells.begin(), cells.end(), 0u);
    rng.shuffle(std::span<std::uint32_t>(cells));
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<float> f(dim);
        for (auto& v : f) v = static_cast<float>(rng.uniform(-1, 1));
        b.add_patch({cells[i] % 8 * 256, cells[i] / 8 * 256}, f);
    }
    return b;
}

FeatureBag permuted(const FeatureBag& bag, Rng& rng) {
    std::vector<std::size_t> idx(bag.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(idx));
    FeatureBag out = bag;
    out.coords.clear();
    out.features.clear();
    for (auto i : idx) out.add_patch(bag.coords[i], bag.feature(i));
    return out;
}

}  // namespace

TEST(SquaredSequence, PadsWithLeadingInstances) {
    EXPECT_EQ(squared_sequence(1), (std::vector<std::size_t>{0}));
    EXPECT_EQ(squared_sequence(4), (std::vector<std::size_t>{0, 1, 2, 3}));
    EXPECT_EQ(squared_sequence(5), (std::vector<std::size_t>{0, 1, 2, 3, 4, 0, 1, 2, 3}));
    for (std::size_t n = 1; n < 300; ++n) {
        const auto s = squared_sequence(n).size();
        const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(s))));
        EXPECT_EQ(side * side, s);
        EXPECT_GE(s, n);
        EXPECT_LT((side - 1) * (side - 1), n);
    }
    EXPECT_THROW(squared_sequence(0), Error);
}

TEST(Models, ParameterShapes) {
    MilModel sb(config_for(ModelKind::AmSb, 1));
    EXPECT_EQ(sb.params().at("embed.weight").shape(), (Shape{16, 12}));
    EXPECT_EQ(sb.params().at("attention.w").shape(), (Shape{1, 10}));
    MilModel mb(config_for(ModelKind::AmMb, 1));
    EXPECT_EQ(mb.params().at("attention.w").shape(), (Shape{2, 10}));
    MilModel tm(config_for(ModelKind::TransMil, 1));
    EXPECT_EQ(tm.params().at("ppeg.conv7.weight").shape(), (Shape{16, 49}));
    EXPECT_EQ(tm.params().at("norm.gain").values()[0], 1.0);
}

TEST(Models, ConfigValidation) {
    auto c = config_for(ModelKind::TransMil, 1);
    c.n_heads = 3;  // 16 is not divisible by 3
    EXPECT_THROW(MilModel{c}, Error);
    c = config_for(ModelKind::AmSb, 1);
    c.input_dim = 0;
    EXPECT_THROW(MilModel{c}, Error);
    EXPECT_EQ(parse_model_kind("am-sb"), ModelKind::AmSb);
    EXPECT_EQ(parse_model_kind("TransMIL"), ModelKind::TransMil);
    EXPECT_THROW(parse_model_kind("CLAM"), Error);
}

TEST(Models, ForwardMatchesReferenceImplementation) {
    Rng rng(77);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        for (std::size_t n : {1, 3, 9, 10, 17}) {
            Tensor x = oracle::random_tensor(rng, n, 12, -2, 2);
            MilModel sb(config_for(ModelKind::AmSb, seed)), mb(config_for(ModelKind::AmMb, seed)),
                tm(config_for(ModelKind::TransMil, seed));
            const ref::Mat rx(x);
            auto cmp = [](const std::vector<double>& a, const std::vector<double>& b) {
                ASSERT_EQ(a.size(), b.size());
                for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-8);
            };
            cmp(forward_logits(sb, x), ref::am_sb(sb, rx));
            cmp(forward_logits(mb, x), ref::am_mb(mb, rx));
            cmp(forward_logits(tm, x), ref::transmil(tm, rx));

            std::vector<double> attn_ref;
            ref::transmil(tm, rx, &attn_ref);
            Graph g;
            auto pass = model_forward(g, tm, x);
            ASSERT_EQ(pass.attention.value().cols(), n);
            for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(pass.attention.value()(0, i), attn_ref[i], 1e-10);
        }
    }
}

TEST(Models, WrongInputDimIsRejected) {
    MilModel sb(config_for(ModelKind::AmSb, 1));
    Graph g;
    EXPECT_THROW(model_forward(g, sb, Tensor({3, 11})), ShapeError);
    Rng rng(1);
    auto bag = random_bag(rng, 4, 11);
    EXPECT_THROW(predict(sb, bag), ShapeError);
}

TEST(Models, AttentionModelsArePermutationInvariant) {
    Rng rng(5);
    for (auto kind : {ModelKind::AmSb, ModelKind::AmMb}) {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            MilModel m(config_for(kind, seed));
            auto bag = random_bag(rng, 1 + rng.below(15), 12);
            auto base = predict(m, bag);
            auto perm = permuted(bag, rng);
            auto again = predict(m, perm);
            EXPECT_TRUE(gen::same_bits(base.logits, again.logits));
            // Attention follows its patch through the permutation.
            for (std::size_t i = 0; i < perm.size(); ++i) {
                auto it = std::find(bag.coords.begin(), bag.coords.end(), perm.coords[i]);
                const auto j = static_cast<std::size_t>(it - bag.coords.begin());
                for (std::size_t b = 0; b < base.attention.size(); ++b)
                    EXPECT_EQ(again.attention[b][i], base.attention[b][j]);
            }
        }
    }
}

TEST(Models, AttentionWeightsSumToOne) {
    Rng rng(8);
    for (auto kind : {ModelKind::AmSb, ModelKind::AmMb}) {
        for (int t = 0; t < 20; ++t) {
            MilModel m(config_for(kind, static_cast<std::uint64_t>(t)));
            auto pred = predict(m, random_bag(rng, 1 + rng.below(30), 12));
            for (const auto& row : pred.attention) {
                double s = 0;
                for (double a : row) {
                    EXPECT_GE(a, 0.0);
                    s += a;
                }
                EXPECT_NEAR(s, 1.0, 1e-9);
            }
        }
    }
}

TEST(Models, PredictionProbabilities) {
    Rng rng(3);
    MilModel m(config_for(ModelKind::AmMb, 2));
    auto pred = predict(m, random_bag(rng, 6, 12));
    EXPECT_NEAR(pred.probabilities[0] + pred.probabilities[1], 1.0, 1e-12);
    EXPECT_EQ(pred.predicted_class, pred.logits[1] > pred.logits[0] ? 1u : 0u);
    EXPECT_EQ(&pred.display_attention(), &pred.attention[pred.predicted_class]);
}

TEST(Models, GradientsMatchFiniteDifferences) {
    Rng rng(31);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        for (auto kind : {ModelKind::AmSb, ModelKind::AmMb, ModelKind::TransMil}) {
            MilModel m(oracle::small_model_config(kind, seed));
            Tensor x = oracle::random_tensor(rng, 6, 8);
            auto r = oracle::check_model_gradients(m, x, seed % 2);
            EXPECT_LT(r.max_rel_error, 1e-4) << model_kind_name(kind) << " " << r.worst;
        }
        MilModel ny(oracle::small_model_config(ModelKind::TransMil, seed, true));
        Tensor x = oracle::random_tensor(rng, 7, 8);
        auto r = oracle::check_model_gradients(ny, x, 1);
        EXPECT_LT(r.max_rel_error, 1e-4) << "nystrom " << r.worst;
    }
}

TEST(Models, NystromApproximatesExactAttention) {
    // Default landmark count and pseudo-inverse iterations, 64-instance bags.
    Rng rng(12);
    for (std::size_t E : {16, 64, 128}) {
        for (std::size_t heads : {2, 8}) {
            double worst = 0;
            for (std::uint64_t seed = 0; seed < 3; ++seed) {
                auto c = config_for(ModelKind::TransMil, seed);
                c.embed_dim = E;
                c.n_heads = heads;
                MilModel exact(c);
                c.nystrom = true;
                MilModel approx(c);
                Tensor x = oracle::random_tensor(rng, 64, 12);
                auto a = forward_logits(exact, x), b = forward_logits(approx, x);
                for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
            }
            EXPECT_LT(worst, 0.05) << "E=" << E << " heads=" << heads;
        }
    }
}

TEST(Models, NystromWithFewLandmarksStillRuns) {
    auto c = config_for(ModelKind::TransMil, 3, true);
    c.landmarks = 4;
    MilModel m(c);
    Rng rng(2);
    auto logits = forward_logits(m, oracle::random_tensor(rng, 40, 12));
    for (double v : logits) EXPECT_TRUE(std::isfinite(v));
}

TEST(Models, NystromWithAllTokensAsLandmarksIsClose) {
    // With one landmark per token the approximation is the pseudo-inverse identity.
    auto c = config_for(ModelKind::TransMil, 4);
    c.landmarks = 1000;
    c.pinv_iterations = 20;
    MilModel exact(c);
    c.nystrom = true;
    MilModel approx(c);
    Rng rng(2);
    Tensor x = oracle::random_tensor(rng, 9, 12);
    auto a = forward_logits(exact, x), b = forward_logits(approx, x);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
}

TEST(ModelIo, SaveLoadRoundTrip) {
    auto dir = fs::temp_directory_path() / "milpath_model_io";
    fs::remove_all(dir);
    for (auto kind : {ModelKind::AmSb, ModelKind::AmMb, ModelKind::TransMil}) {
        auto c = config_for(kind, 9, kind == ModelKind::TransMil);
        MilModel m(c);
        const auto path = dir / (std::string(model_kind_name(kind)) + ".milc");
        save_model(path, m, 12, 0.25);
        auto loaded = load_model(path);
        EXPECT_EQ(loaded.epoch, 12);
        EXPECT_EQ(loaded.val_loss, 0.25);
        EXPECT_EQ(loaded.model.config().kind, kind);
        EXPECT_EQ(loaded.model.config().nystrom, c.nystrom);
        EXPECT_EQ(loaded.model.params().entries(), m.params().entries());
        Rng rng(1);
        Tensor x = oracle::random_tensor(rng, 5, 12);
        EXPECT_TRUE(gen::same_bits(forward_logits(loaded.model, x), forward_logits(m, x)));
    }
}

TEST(ModelIo, MismatchedCheckpointIsRejected) {
    auto dir = fs::temp_directory_path() / "milpath_model_io_bad";
    fs::remove_all(dir);
    MilModel m(config_for(ModelKind::AmSb, 1));
    save_model(dir / "m.milc", m);
    auto meta = nlohmann::json::parse(read_file(sidecar_path(dir / "m.milc")));
    EXPECT_TRUE(meta["val_loss"].is_null());
    meta["E"] = 8;
    write_file_atomic(sidecar_path(dir / "m.milc"), meta.dump());
    EXPECT_THROW(load_model(dir / "m.milc"), FormatError);
    write_file_atomic(sidecar_path(dir / "m.milc"), "{not json");
    EXPECT_THROW(load_model(dir / "m.milc"), FormatError);
}
