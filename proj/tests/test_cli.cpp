#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "milpath_cli.hpp"

using namespace milpath;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("milpath_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string first_line(const fs::path& p) {
    auto text = read_file(p);
    return text.substr(0, text.find('\n'));
}

void write_patients(const fs::path& p, std::size_t n) {
    std::string text;
    for (std::size_t i = 0; i < n; ++i) text += "PAT-" + std::to_string(1000 + i) + "\n";
    write_file_atomic(p, text);
}

class SeedEnv {
public:
    explicit SeedEnv(const char* value) { ::setenv("MILPATH_SEED", value, 1); }
    ~SeedEnv() { ::unsetenv("MILPATH_SEED"); }
};

}  // namespace

TEST(Cli, HelpExitsZero) {
    auto r = run_cli({"--help"});
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("ssgsea"), std::string::npos);
    auto sub = run_cli({"train", "--help"});
    EXPECT_EQ(sub.code, 0);
    EXPECT_NE(sub.out.find("--manifest"), std::string::npos);
}

TEST(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(run_cli({}).code, 2);
    EXPECT_EQ(run_cli({"bogus"}).code, 2);
    auto r = run_cli({"train"});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("\"usage_error\""), std::string::npos);
    EXPECT_EQ(run_cli({"split", "--out", "x.csv"}).code, 2);  // needs --patients or --manifest
    EXPECT_EQ(run_cli({"split", "--patients", "p", "--out", "x", "--seed", "abc"}).code, 2);
}

TEST(Cli, DomainErrorsExitOne) {
    auto dir = fresh_dir("domain");
    auto r = run_cli({"ssgsea", "--expression", (dir / "missing.tsv").string(), "--gene-sets", "g.gmt", "--out",
                      (dir / "o.csv").string()});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("\"error\""), std::string::npos);
    write_patients(dir / "two.txt", 2);
    EXPECT_EQ(run_cli({"split", "--patients", (dir / "two.txt").string(), "--out", (dir / "s.csv").string()}).code, 1);
}

TEST(Cli, SplitIsDeterministicAndSeedable) {
    auto dir = fresh_dir("split");
    write_patients(dir / "p.txt", 40);
    const auto p = (dir / "p.txt").string();
    ASSERT_EQ(run_cli({"split", "--patients", p, "--out", (dir / "a.csv").string(), "--seed", "11"}).code, 0);
    ASSERT_EQ(run_cli({"split", "--patients", p, "--out", (dir / "b.csv").string(), "--seed", "11"}).code, 0);
    EXPECT_EQ(read_file(dir / "a.csv"), read_file(dir / "b.csv"));
    EXPECT_EQ(first_line(dir / "a.csv"), "# seed=11 algo=xoshiro256starstar-splitmix64");
    auto s = read_split_csv(read_file(dir / "a.csv"));
    EXPECT_EQ(s.counts(), (std::array<std::size_t, 3>{28, 6, 6}));

    ASSERT_EQ(run_cli({"split", "--patients", p, "--out", (dir / "d.csv").string()}).code, 0);
    EXPECT_EQ(first_line(dir / "d.csv"), "# seed=42 algo=xoshiro256starstar-splitmix64");
    {
        SeedEnv env("9");
        ASSERT_EQ(run_cli({"split", "--patients", p, "--out", (dir / "e.csv").string()}).code, 0);
        EXPECT_EQ(first_line(dir / "e.csv"), "# seed=9 algo=xoshiro256starstar-splitmix64");
        ASSERT_EQ(run_cli({"split", "--patients", p, "--out", (dir / "f.csv").string(), "--seed", "3"}).code, 0);
        EXPECT_EQ(first_line(dir / "f.csv"), "# seed=3 algo=xoshiro256starstar-splitmix64");
    }
    {
        SeedEnv env("nope");
        EXPECT_EQ(run_cli({"split", "--patients", p, "--out", (dir / "g.csv").string()}).code, 2);
    }
}

TEST(Cli, ConfigFilePrecedence) {
    auto dir = fresh_dir("config");
    write_patients(dir / "p.txt", 20);
    write_file_atomic(dir / "run.ini", "# shared settings\nseed = 7\n[train]\nepochs = 5\n[split]\npatients = " +
                                           (dir / "p.txt").string() + "\nval-percent=20\n");
    const auto cfg = (dir / "run.ini").string();
    ASSERT_EQ(run_cli({"split", "--config", cfg, "--out", (dir / "a.csv").string()}).code, 0);
    EXPECT_EQ(first_line(dir / "a.csv"), "# seed=7 algo=xoshiro256starstar-splitmix64");
    EXPECT_EQ(read_split_csv(read_file(dir / "a.csv")).counts(), (std::array<std::size_t, 3>{14, 4, 2}));
    ASSERT_EQ(run_cli({"split", "--config", cfg, "--out", (dir / "b.csv").string(), "--seed", "8"}).code, 0);
    EXPECT_EQ(first_line(dir / "b.csv"), "# seed=8 algo=xoshiro256starstar-splitmix64");

    write_file_atomic(dir / "bad.ini", "colour = blue\n");
    EXPECT_EQ(run_cli({"split", "--config", (dir / "bad.ini").string(), "--out", "x"}).code, 2);
    EXPECT_EQ(run_cli({"split", "--config", (dir / "missing.ini").string(), "--out", "x"}).code, 2);
}

TEST(Cli, PackFeaturesAndValidate) {
    auto dir = fresh_dir("pack");
    write_file_atomic(dir / "f.csv", "x,y,f0,f1\n0,0,0.5,1\n256,0,-2,3.25\n");
    auto r = run_cli({"pack-features", "--csv", (dir / "f.csv").string(), "--slide-id", "TCGA-AB-1234-01Z-00-DX1",
                      "--out", (dir / "b.fbag").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    auto bag = read_feature_bag(dir / "b.fbag");
    EXPECT_EQ(bag.dim, 2u);
    EXPECT_EQ(bag.features, (std::vector<float>{0.5f, 1.0f, -2.0f, 3.25f}));
    auto v = run_cli({"pack-features", "--validate", (dir / "b.fbag").string()});
    ASSERT_EQ(v.code, 0);
    auto j = nlohmann::json::parse(v.out);
    EXPECT_EQ(j["patient_id"], "TCGA-AB-1234");
    EXPECT_EQ(j["n_patches"], 2);
    write_file_atomic(dir / "bad.csv", "x,y,f0\n0,0,1\n0,0,2\n");
    EXPECT_EQ(run_cli({"pack-features", "--csv", (dir / "bad.csv").string(), "--slide-id", "S", "--out",
                       (dir / "c.fbag").string()})
                  .code,
              1);
}

TEST(Cli, FetchExpressionOffline) {
    auto dir = fresh_dir("fetch");
    const fs::path data = MILPATH_TEST_DATA;
    auto r = run_cli({"fetch-expression", "--fixture", (data / "cohorts/TCGA-TEST/expression.json").string(), "--out",
                      (dir / "e.tsv").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(read_file(dir / "e.tsv"), read_file(data / "expression_golden.tsv"));
    EXPECT_EQ(run_cli({"fetch-expression", "--out", "x"}).code, 2);
}

// ssgsea -> labels -> split -> train -> eval -> heatmap -> compare on a small synthetic cohort.
TEST(Cli, EndToEndPipeline) {
    auto dir = fresh_dir("e2e");
    SyntheticConfig sc;
    sc.n_bags = 40;
    sc.dim = 8;
    sc.min_instances = 4;
    sc.max_instances = 12;
    sc.shift = 1.5;
    sc.seed = 5;
    auto cohort = make_synthetic_cohort(sc);
    fs::create_directories(dir / "bags");
    // Expression: set genes sit at the top of positive samples and the bottom of negative ones.
    std::vector<std::string> genes = {"G1", "G2", "G3", "G4", "G5", "G6"}, samples;
    std::vector<double> values;
    for (const auto& b : cohort) samples.push_back(b.data.bag.patient_id + "-01A");
    for (std::size_t g = 0; g < genes.size(); ++g)
        for (const auto& b : cohort) {
            const double rank = static_cast<double>(g);
            values.push_back(b.data.label == 1 ? 10.0 - rank : rank);
        }
    for (const auto& b : cohort) write_feature_bag(dir / "bags" / (b.data.bag.slide_id + ".fbag"), b.data.bag);
    write_file_atomic(dir / "expr.tsv", write_expression_tsv(ExpressionMatrix(genes, samples, values)));
    write_file_atomic(dir / "sets.gmt", "Synthetic pathway\tdesc\tG1\tG2\n");

    auto ok = [](const Result& r) { return r.code == 0 ? ::testing::AssertionSuccess() : ::testing::AssertionFailure() << r.err; };
    const auto d = [&](const char* name) { return (dir / name).string(); };

    ASSERT_TRUE(ok(run_cli({"ssgsea", "--expression", d("expr.tsv"), "--gene-sets", d("sets.gmt"), "--out", d("labels.csv"),
                            "--summary", d("summary.csv")})));
    EXPECT_EQ(first_line(dir / "labels.csv"), "sample_id,pathway,score,label");
    auto labels = read_labels_table(read_file(dir / "labels.csv"));
    for (const auto& row : labels) {
        auto it = std::find_if(cohort.begin(), cohort.end(), [&](const auto& b) { return b.data.bag.patient_id + "-01A" == row.sample_id; });
        ASSERT_NE(it, cohort.end());
        EXPECT_EQ(row.label, it->data.label);
    }

    ASSERT_TRUE(ok(run_cli({"labels", "--bags", d("bags"), "--labels", d("labels.csv"), "--pathway", "Synthetic pathway",
                            "--out", d("manifest.csv")})));
    EXPECT_EQ(first_line(dir / "manifest.csv"), "slide_id,patient_id,bag_path,Synthetic pathway");
    ASSERT_TRUE(ok(run_cli({"split", "--manifest", d("manifest.csv"), "--stratify", "Synthetic pathway", "--out",
                            d("split.csv"), "--seed", "1"})));

    const std::vector<std::string> common = {"--manifest", d("manifest.csv"), "--split", d("split.csv"), "--pathway",
                                             "Synthetic pathway"};
    auto with = [&](std::vector<std::string> head, std::vector<std::string> tail) {
        head.insert(head.end(), common.begin(), common.end());
        head.insert(head.end(), tail.begin(), tail.end());
        return head;
    };
    auto train_run = run_cli(with({"train"}, {"--out-dir", d("sb"), "--arch", "AM-SB", "--epochs", "3", "--embed-dim", "8",
                                              "--hidden-dim", "6", "--lr", "1e-3"}));
    ASSERT_TRUE(ok(train_run));
    EXPECT_NE(train_run.err.find("\"event\":\"epoch\""), std::string::npos);
    EXPECT_NE(train_run.err.find("\"batch_bags\":1"), std::string::npos);
    EXPECT_EQ(first_line(dir / "sb/history.csv"), "epoch,train_loss,val_loss,val_auroc");
    EXPECT_EQ(read_history_csv(read_file(dir / "sb/history.csv")).size(), 3u);
    ASSERT_TRUE(fs::exists(dir / "sb/model.milc.json"));
    ASSERT_TRUE(ok(run_cli(with({"train"}, {"--out-dir", d("tm"), "--arch", "TransMIL", "--epochs", "2", "--embed-dim", "8",
                                            "--heads", "2"}))));

    ASSERT_TRUE(ok(run_cli(with({"eval", "--checkpoint", d("sb/model.milc")},
                                {"--out", d("m_sb.csv"), "--markdown", d("m_sb.md"), "--predictions", d("pred.csv"),
                                 "--feature-tag", "feat-a"}))));
    ASSERT_TRUE(ok(run_cli(with({"eval", "--checkpoint", d("tm/model.milc")}, {"--out", d("m_tm.csv"), "--feature-tag", "feat-b"}))));
    auto reports = read_metrics_csv(read_file(dir / "m_sb.csv"));
    ASSERT_EQ(reports.size(), 1u);
    EXPECT_EQ(reports[0].architecture, "AM-SB");
    EXPECT_EQ(reports[0].label0 + reports[0].label1, split_counts(20)[2] * 2);  // stratified test partition
    EXPECT_TRUE(read_file(dir / "m_sb.md").starts_with("| Task | Class Proportion (0 / 1) | AM-SB |"));
    EXPECT_EQ(first_line(dir / "pred.csv"), "slide_id,label,positive_probability");

    auto hm = run_cli({"heatmap", "--checkpoint", d("sb/model.milc"), "--bag", (dir / "bags" / (cohort[0].data.bag.slide_id + ".fbag")).string(),
                       "--out", d("heat.png"), "--cell-pixels", "4", "--top-k", "2"});
    ASSERT_TRUE(ok(hm));
    EXPECT_EQ(read_file(dir / "heat.png").substr(1, 3), "PNG");
    EXPECT_EQ(first_line(dir / "heat.csv"), "x,y,raw_weight,normalized_score");
    auto top = nlohmann::json::parse(hm.out);
    EXPECT_EQ(top["top"].size(), 2u);

    ASSERT_TRUE(ok(run_cli({"compare", "--metrics", d("m_sb.csv"), d("m_tm.csv"), "--out", d("cmp.csv"), "--markdown", d("cmp.md")})));
    EXPECT_EQ(first_line(dir / "cmp.csv"), "pathway,feature_tag,architecture,auroc,winner,tie");
    EXPECT_EQ(run_cli({"compare", "--metrics", d("m_sb.csv"), "--out", d("cmp1.csv")}).code, 1);

    // Same inputs and seed: byte-identical metrics.
    ASSERT_TRUE(ok(run_cli(with({"train"}, {"--out-dir", d("sb2"), "--arch", "AM-SB", "--epochs", "3", "--embed-dim", "8",
                                            "--hidden-dim", "6", "--lr", "1e-3"}))));
    ASSERT_TRUE(ok(run_cli(with({"eval", "--checkpoint", d("sb2/model.milc")}, {"--out", d("m_sb2.csv"), "--feature-tag", "feat-a"}))));
    EXPECT_EQ(read_file(dir / "m_sb.csv"), read_file(dir / "m_sb2.csv"));
}
