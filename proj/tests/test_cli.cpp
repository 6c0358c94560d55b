#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "facelet/pipeline.hpp"
#include "facelet/io/png.hpp"

using namespace facelet;
namespace fs = std::filesystem;

namespace {

struct CliRun {
    int code = -1;
    std::string output;
};

std::string quote(const std::string& s) { return "'" + s + "'"; }

CliRun facelet_cli(const std::vector<std::string>& args) {
    std::string cmd = quote(FACELET_CLI_PATH);
    for (const auto& a : args) cmd += " " + quote(a);
    cmd += " 2>&1";
    CliRun r;
    FILE* p = ::popen(cmd.c_str(), "r");
    if (!p) return r;
    char buf[4096];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.output.append(buf, n);
    const int st = ::pclose(p);
    r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    return r;
}

nlohmann::json read_json(const fs::path& p) {
    std::ifstream in(p);
    return nlohmann::json::parse(in);
}

/// One small end-to-end pipeline at 32 px shared by every test.
class Cli : public ::testing::Test {
protected:
    static inline fs::path dir;

    static fs::path at(const std::string& name) { return dir / name; }

    static void SetUpTestSuite() {
        dir = fs::temp_directory_path() / ("facelet_cli_" + std::to_string(::getpid()));
        fs::remove_all(dir);
        fs::create_directories(dir);
        auto must = [](const std::vector<std::string>& args) {
            const CliRun r = facelet_cli(args);
            ASSERT_EQ(r.code, 0) << r.output;
        };
        must({"gen-data", "--out", at("data"), "--count", "160", "--size", "32", "--seed", "5"});
        must({"train-codec", "--data", at("data"), "--out", at("codec.fclt"), "--base-channels", "4",
              "--encoder-epochs", "1", "--epochs", "1", "--seed", "3"});
        must({"build-labels", "--data", at("data"), "--codec", at("codec.fclt"), "--effect", "mustache", "--pos-attr",
              "mustache", "--k", "3", "--out", at("labels.fclt")});
        must({"train-facelet", "--labels", at("labels.fclt"), "--codec", at("codec.fclt"), "--out", at("mustache.fclt"),
              "--epochs", "1"});
        const auto ds = synth::load_dataset(at("data").string());
        fs::copy_file(at("data") / ds.entries.front().file, at("face.png"));
    }

    static void TearDownTestSuite() { fs::remove_all(dir); }
};

}  // namespace

TEST_F(Cli, NoSubcommandIsAnError) { EXPECT_NE(facelet_cli({}).code, 0); }

TEST_F(Cli, GenDataIsDeterministic) {
    ASSERT_EQ(facelet_cli({"gen-data", "--out", at("again"), "--count", "160", "--size", "32", "--seed", "5"}).code, 0);
    EXPECT_EQ(io::read_file((at("again") / "manifest.json").string()), io::read_file((at("data") / "manifest.json").string()));
    const auto ds = synth::load_dataset(at("again").string());
    for (std::size_t i = 0; i < 5; ++i)
        EXPECT_EQ(io::read_file((at("again") / ds.entries[i].file).string()),
                  io::read_file((at("data") / ds.entries[i].file).string()));
}

TEST_F(Cli, GenDataRejectsZeroCount) {
    const CliRun r = facelet_cli({"gen-data", "--out", at("empty"), "--count", "0"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.output.find("error:"), std::string::npos);
}

TEST_F(Cli, TrainCodecSameSeedSameBytes) {
    ASSERT_EQ(facelet_cli({"train-codec", "--data", at("data"), "--out", at("codec2.fclt"), "--base-channels", "4",
                           "--encoder-epochs", "1", "--epochs", "1", "--seed", "3"})
                  .code,
              0);
    EXPECT_EQ(io::read_file(at("codec2.fclt").string()), io::read_file(at("codec.fclt").string()));
    const CodecModel c = load_codec(at("codec.fclt").string());
    EXPECT_TRUE(c.encoder_frozen());
    EXPECT_EQ(c.config().image_size, 32u);
}

TEST_F(Cli, TrainCodecWithLabelsKeepsEncoder) {
    ASSERT_EQ(facelet_cli({"train-codec", "--data", at("data"), "--out", at("pre.fclt"), "--labels", at("labels.fclt"),
                           "--encoder-from", at("codec.fclt"), "--pretrain-steps", "5", "--epochs", "1", "--seed", "3"})
                  .code,
              0);
    const CodecModel a = load_codec(at("codec.fclt").string()), b = load_codec(at("pre.fclt").string());
    EXPECT_EQ(a.encoder_checksum(), b.encoder_checksum());
    EXPECT_NE(a.fingerprint(), b.fingerprint());
}

TEST_F(Cli, BuildLabelsRejectsOversizedK) {
    const CliRun r = facelet_cli({"build-labels", "--data", at("data"), "--codec", at("codec.fclt"), "--effect", "m",
                               "--pos-attr", "mustache", "--k", "100000", "--out", at("big_k.fclt")});
    EXPECT_EQ(r.code, 1);
    EXPECT_FALSE(fs::exists(at("big_k.fclt")));
}

TEST_F(Cli, BuildLabelsRejectsUnknownAttribute) {
    EXPECT_EQ(facelet_cli({"build-labels", "--data", at("data"), "--codec", at("codec.fclt"), "--effect", "m",
                           "--pos-attr", "tail", "--out", at("bad_attr.fclt")})
                  .code,
              1);
}

TEST_F(Cli, FlippedPolarityLabelsTheOtherDomain) {
    ASSERT_EQ(facelet_cli({"build-labels", "--data", at("data"), "--codec", at("codec.fclt"), "--effect", "shave",
                           "--pos-attr", "!mustache", "--k", "3", "--out", at("flip.fclt")})
                  .code,
              0);
    const auto fwd = pseudo::load_labels(at("labels.fclt").string());
    const auto rev = pseudo::load_labels(at("flip.fclt").string());
    EXPECT_TRUE(fwd.positive_polarity);
    EXPECT_FALSE(rev.positive_polarity);
    // Forward labels cover samples without the attribute, reversed ones those with it.
    const auto ds = synth::load_dataset(at("data").string());
    std::map<std::string, bool> has;
    for (const auto& e : ds.entries) has[e.portrait.sample_id] = e.portrait.attributes.get("mustache");
    for (const auto& l : fwd.labels) EXPECT_FALSE(has.at(l.sample_id));
    for (const auto& l : rev.labels) EXPECT_TRUE(has.at(l.sample_id));
    EXPECT_EQ(fwd.labels.size() + rev.labels.size(), pipeline::split(ds, false).size());
}

TEST_F(Cli, LabelFileBoundToEncoder) {
    const CodecModel other(load_codec(at("codec.fclt").string()).config(), 77);
    const auto labels = pseudo::load_labels(at("labels.fclt").string());
    EXPECT_THROW(pseudo::check_labels(other, labels), FingerprintError);
    EXPECT_NO_THROW(pseudo::check_labels(load_codec(at("codec.fclt").string()), labels));
}

TEST_F(Cli, ApplyLambdaZeroIsReconstruction) {
    ASSERT_EQ(facelet_cli({"apply", "--codec", at("codec.fclt"), "--bank", at("mustache.fclt"), "--in", at("face.png"),
                           "--lambda", "0", "--out", at("zero.png")})
                  .code,
              0);
    const CodecModel c = load_codec(at("codec.fclt").string());
    EXPECT_EQ(io::read_file(at("zero.png").string()),
              io::encode_png(reconstruct(c, io::load_png(at("face.png").string()))));
}

TEST_F(Cli, ApplyMatchesLibrary) {
    ASSERT_EQ(facelet_cli({"apply", "--codec", at("codec.fclt"), "--bank", at("mustache.fclt"), "--in", at("face.png"),
                           "--lambda", "1.4", "--out", at("edit.png")})
                  .code,
              0);
    const CodecModel c = load_codec(at("codec.fclt").string());
    const FaceletBank b = load_bank(at("mustache.fclt").string());
    EXPECT_EQ(io::read_file(at("edit.png").string()),
              io::encode_png(edit_image(c, b, io::load_png(at("face.png").string()), 1.4f)));
}

TEST_F(Cli, ApplyOffSizeNeedsResize) {
    const auto big = synth::make_dataset(9, 2, 64).entries[0].portrait.image;
    io::save_png(at("big.png").string(), big);
    const std::vector<std::string> base{"apply", "--codec", at("codec.fclt"), "--bank", at("mustache.fclt"), "--in",
                                        at("big.png"), "--lambda", "1", "--out", at("big_out.png")};
    const CliRun r = facelet_cli(base);
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.output.find("--resize"), std::string::npos);
    auto with = base;
    with.push_back("--resize");
    ASSERT_EQ(facelet_cli(with).code, 0);
    EXPECT_EQ(io::load_png(at("big_out.png").string()).shape(), (Shape{3, 32, 32}));
}

TEST_F(Cli, ApplyRejectsNonFiniteLambda) {
    EXPECT_NE(facelet_cli({"apply", "--codec", at("codec.fclt"), "--bank", at("mustache.fclt"), "--in", at("face.png"),
                           "--lambda", "nan", "--out", at("nan.png")})
                  .code,
              0);
}

TEST_F(Cli, FingerprintMismatchIsAnError) {
    save_codec(at("stranger.fclt").string(), CodecModel(load_codec(at("codec.fclt").string()).config(), 42));
    for (const char* cmd : {"apply", "heatmap"}) {
        std::vector<std::string> args{cmd, "--codec", at("stranger.fclt"), "--bank", at("mustache.fclt"), "--in",
                                      at("face.png"), "--out", at("x.png")};
        if (std::string(cmd) == "apply") args.insert(args.end(), {"--lambda", "1"});
        const CliRun r = facelet_cli(args);
        EXPECT_EQ(r.code, 1) << cmd;
        EXPECT_NE(r.output.find("fingerprint"), std::string::npos) << r.output;
    }
    EXPECT_EQ(facelet_cli({"train-facelet", "--labels", at("labels.fclt"), "--codec", at("stranger.fclt"), "--out",
                           at("never.fclt")})
                  .code,
              1);
}

TEST_F(Cli, CorruptBankIsAnError) {
    auto bytes = io::read_file(at("mustache.fclt").string());
    bytes.resize(bytes.size() - 8);
    io::write_file(at("short.fclt").string(), bytes);
    EXPECT_EQ(facelet_cli({"apply", "--codec", at("codec.fclt"), "--bank", at("short.fclt"), "--in", at("face.png"),
                           "--lambda", "1", "--out", at("y.png")})
                  .code,
              1);
}

TEST_F(Cli, HeatmapIsGrayscaleAtImageSize) {
    ASSERT_EQ(facelet_cli({"heatmap", "--codec", at("codec.fclt"), "--bank", at("mustache.fclt"), "--in", at("face.png"),
                           "--out", at("heat.png")})
                  .code,
              0);
    const Tensor h = io::load_png(at("heat.png").string());
    EXPECT_EQ(h.dim(1), 32u);
    EXPECT_EQ(h.dim(2), 32u);
}

TEST_F(Cli, BankMetadataRecordsProvenance) {
    const FaceletBank b = load_bank(at("mustache.fclt").string());
    const auto ds = synth::load_dataset(at("data").string());
    EXPECT_EQ(b.effect_name, "mustache");
    EXPECT_EQ(b.metadata.trained_on, ds.id());
    EXPECT_EQ(b.metadata.k_neighbors, 3u);
    EXPECT_FALSE(b.metadata.created_at.empty());
    EXPECT_EQ(b.codec_fingerprint, load_codec(at("codec.fclt").string()).fingerprint());
}

TEST_F(Cli, BenchReportsAllTimings) {
    ASSERT_EQ(facelet_cli({"bench", "--codec", at("codec.fclt"), "--bank", at("mustache.fclt"), "--data", at("data"),
                           "--k", "3", "--out", at("bench.json")})
                  .code,
              0);
    const auto j = read_json(at("bench.json"));
    for (const char* k : {"bank_edit_ms", "dfi_edit_ms", "relambda_ms", "index_size"}) EXPECT_TRUE(j.contains(k)) << k;
    EXPECT_EQ(j["detail"]["bank_edit"]["reps"], 20);
    EXPECT_EQ(facelet_cli({"bench", "--codec", at("codec.fclt"), "--bank", at("mustache.fclt"), "--data", at("data"),
                           "--reps", "5"})
                  .code,
              1);
}

TEST_F(Cli, EvalOutputMatchesSchema) {
    const CliRun r = facelet_cli({"eval", "--codec", at("codec.fclt"), "--bank", at("mustache.fclt"), "--data", at("data"),
                               "--k", "3", "--locality-images", "5", "--sweep-images", "3", "--covariance-images", "1",
                               "--probe-epochs", "1", "--probe-floor", "0", "--out", at("eval.json")});
    ASSERT_EQ(r.code, 0) << r.output;
    const auto j = read_json(at("eval.json"));
    EXPECT_EQ(j["schema"], "facelet-eval/1");
    EXPECT_EQ(j["locality"]["images"], 5);
    EXPECT_EQ(j["strength"]["images"], 3);
    ASSERT_TRUE(j.contains("timing"));

    if (std::system("python3 -c 'import jsonschema' >/dev/null 2>&1") != 0) GTEST_SKIP() << "python3 jsonschema unavailable";
    const std::string check = "python3 -c 'import json,sys,jsonschema; jsonschema.validate(json.load(open(sys.argv[1])), "
                              "json.load(open(sys.argv[2])))' " +
                              quote(at("eval.json").string()) + " " + quote(FACELET_EVAL_SCHEMA) + " 2>&1";
    EXPECT_EQ(std::system(check.c_str()), 0);
}

TEST_F(Cli, EvalProbeFloorEnforced) {
    // An untrained probe cannot reach a 99.9% floor.
    const CliRun r = facelet_cli({"eval", "--codec", at("codec.fclt"), "--bank", at("mustache.fclt"), "--data", at("data"),
                               "--k", "3", "--probe-epochs", "0", "--probe-floor", "0.999", "--no-timing"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.output.find("probe"), std::string::npos) << r.output;
    EXPECT_NE(facelet_cli({"eval", "--codec", at("codec.fclt"), "--bank", at("mustache.fclt"), "--data", at("data"),
                           "--probe-floor", "1.5"})
                  .code,
              0);
}
