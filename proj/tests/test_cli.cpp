// Drives the triage_bench binary as a subprocess.

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <sys/wait.h>

#include "test_support.hpp"
#include "triage/io.hpp"
#include "triage/metrics.hpp"

namespace fs = std::filesystem;
using namespace triage;

namespace {

int run(const std::string& args) {
    const std::string cmd = std::string(TRIAGE_BENCH_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const char* kSmallConfig = R"({
  "seed": 3,
  "synth": {"image_size": 64, "patches": {"n_pos": 12, "n_neg": 12},
            "splits": [{"name": "train", "n_normal": 3, "n_benign": 2, "n_cancer": 3}]},
  "eval": {"split": "train"}
})";

void write_scores(const fs::path& dir) {
    io::write_file(dir / "derived.csv",
                   "study_id,laterality,breast_score,breast_uncertainty,study_score\n"
                   "s1,L,0.9,0.01,0.9\ns1,R,0.2,0.02,0.9\n"
                   "s2,L,0.3,0.03,0.4\ns2,R,0.4,0.01,0.4\n"
                   "s3,L,0.1,0.05,0.6\ns3,R,0.6,0.02,0.6\n"
                   "s4,L,0.7,0.04,0.7\ns4,R,0.5,0.01,0.7\n"
                   "s5,L,0.2,0.02,0.35\ns5,R,0.35,0.03,0.35\n");
    io::write_file(dir / "meta.csv",
                   "study_id,label,cancer_laterality,tumor_size_mm\n"
                   "s1,cancer,L,12\ns2,normal,,\ns3,benign,,\ns4,cancer,L,25\ns5,normal,,\n");
}

}  // namespace

TEST(Cli, VersionAndUsage) {
    EXPECT_EQ(run("--version"), 0);
    EXPECT_EQ(run(""), 2);
    EXPECT_EQ(run("frobnicate"), 2);
    EXPECT_EQ(run("synth"), 2);  // --out is required
}

TEST(Cli, SynthIsByteIdenticalAcrossRunsAndJobs) {
    const auto dir = triage::testing::scratch_dir("cli_synth");
    io::write_file(dir / "small.json", kSmallConfig);
    const auto cfg = (dir / "small.json").string();
    ASSERT_EQ(run("synth --config " + cfg + " --out " + (dir / "a").string()), 0);
    ASSERT_EQ(run("synth --config " + cfg + " --jobs 3 --out " + (dir / "b").string()), 0);
    const auto ma = io::read_file(dir / "a" / "manifest.json");
    // The manifest lists a sha256 for every file written.
    EXPECT_EQ(ma, io::read_file(dir / "b" / "manifest.json"));
    EXPECT_EQ(io::read_file(dir / "a" / "patches" / "patches.bin"), io::read_file(dir / "b" / "patches" / "patches.bin"));
    EXPECT_EQ(io::read_file(dir / "a" / "train" / "metadata.csv"), io::read_file(dir / "b" / "train" / "metadata.csv"));

    ASSERT_EQ(run("synth --config " + cfg + " --seed 4 --out " + (dir / "c").string()), 0);
    EXPECT_NE(ma, io::read_file(dir / "c" / "manifest.json"));
}

TEST(Cli, EvalReportMatchesLibrary) {
    const auto dir = triage::testing::scratch_dir("cli_eval");
    write_scores(dir);
    ASSERT_EQ(run("eval --scores " + (dir / "derived.csv").string() + " --meta " + (dir / "meta.csv").string() +
                  " --reps 200 --out " + (dir / "report").string()),
              0);
    const auto report = io::parse_json(io::read_file(dir / "report" / "report.json"), "report");
    const auto entries =
        eval::make_entries(io::read_derived_scores(dir / "derived.csv"), io::read_metadata(dir / "meta.csv"),
                           eval::Unit::Breast);
    EXPECT_EQ(report["auroc"].get<double>(), eval::auroc(entries));
    EXPECT_EQ(report["config"]["eval"]["reps"].get<int>(), 200);
    EXPECT_EQ(report["bootstrap"]["n_reps"].get<int>(), 200);
    EXPECT_TRUE(fs::exists(dir / "report" / "roc.csv"));
    EXPECT_TRUE(fs::exists(dir / "report" / "deferment.svg"));

    ASSERT_EQ(run("report --in " + (dir / "report" / "report.json").string() + " --out " + (dir / "again").string()), 0);
    EXPECT_EQ(io::read_file(dir / "again" / "roc.csv"), io::read_file(dir / "report" / "roc.csv"));
    EXPECT_EQ(io::read_file(dir / "again" / "deferment.csv"), io::read_file(dir / "report" / "deferment.csv"));
}

TEST(Cli, ExitCodes) {
    const auto dir = triage::testing::scratch_dir("cli_exit");
    write_scores(dir);
    const auto scores = (dir / "derived.csv").string(), meta = (dir / "meta.csv").string();
    const auto out = " --out " + (dir / "r").string();

    EXPECT_EQ(run("eval --scores " + (dir / "missing.csv").string() + " --meta " + meta + out), 3);
    EXPECT_EQ(run("train-patch --corpus " + (dir / "nocorpus").string() + out), 3);

    io::write_file(dir / "bad.json", R"({"seed": 1, "colour": "blue"})");
    EXPECT_EQ(run("synth --config " + (dir / "bad.json").string() + out), 4);
    io::write_file(dir / "bad2.json", R"({"eval": {"reps": 5}})");
    EXPECT_EQ(run("eval --config " + (dir / "bad2.json").string() + " --scores " + scores + " --meta " + meta + out), 4);
    EXPECT_EQ(run("eval --config " + (dir / "absent.json").string() + " --scores " + scores + " --meta " + meta + out), 3);

    io::write_file(dir / "broken.csv", "study_id,laterality,breast_score\ns1,L,0.5\n");
    EXPECT_EQ(run("eval --scores " + (dir / "broken.csv").string() + " --meta " + meta + out), 5);
    io::write_file(dir / "nan.csv",
                   "study_id,laterality,breast_score,breast_uncertainty,study_score\ns1,L,nan,0.1,0.5\n");
    EXPECT_EQ(run("eval --scores " + (dir / "nan.csv").string() + " --meta " + meta + out), 5);
}

TEST(Cli, StagesRunIndependently) {
    const auto dir = triage::testing::scratch_dir("cli_stages");
    io::write_file(dir / "small.json", R"({
      "seed": 5,
      "synth": {"image_size": 64, "patches": {"n_pos": 16, "n_neg": 16},
                "splits": [{"name": "train", "n_normal": 2, "n_benign": 1, "n_cancer": 2},
                           {"name": "test", "n_normal": 3, "n_benign": 1, "n_cancer": 3}]},
      "ensemble": {"size": 2},
      "train_patch": {"epochs": 1},
      "train_full": [{"split": "train", "epochs": 1}],
      "eval": {"reps": 100, "subgroup_tags": []}
    })");
    const auto c = " --config " + (dir / "small.json").string();
    const auto corpus = (dir / "corpus").string(), models = (dir / "models").string();
    ASSERT_EQ(run("synth" + c + " --out " + corpus), 0);
    ASSERT_EQ(run("train-patch" + c + " --corpus " + corpus + " --out " + models), 0);
    ASSERT_EQ(run("convert" + c + " --models " + models), 0);
    ASSERT_EQ(run("train-full" + c + " --corpus " + corpus + " --models " + models), 0);
    ASSERT_EQ(run("score" + c + " --corpus " + corpus + " --models " + models + " --out " + (dir / "scores").string()), 0);
    ASSERT_EQ(run("defer" + c + " --scores " + (dir / "scores" / "derived_scores.csv").string() + " --meta " + corpus +
                  "/test/metadata.csv --out " + (dir / "defer").string()),
              0);
    EXPECT_TRUE(fs::exists(dir / "models" / "full_1.json"));
    EXPECT_TRUE(fs::exists(dir / "defer" / "composition.csv"));
    const auto raw = io::read_score_table(dir / "scores" / "raw_scores.csv", scoring::EnsembleWeights::uniform(2));
    EXPECT_TRUE(scoring::audit(raw));
    EXPECT_EQ(raw.images.size(), 7u * 4u);

    // A corrupted checkpoint stops the next stage with a data error.
    auto text = io::read_file(dir / "models" / "full_0.json");
    text[text.find("data_b64") + 12] ^= 0x01;
    io::write_file(dir / "models" / "full_0.json", text);
    EXPECT_EQ(run("score" + c + " --corpus " + corpus + " --models " + models + " --out " + (dir / "s2").string()), 5);
}
