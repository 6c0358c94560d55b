#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include "facelet/bank/facelet.hpp"
#include "facelet/synth/portrait.hpp"
#include "support/oracles.hpp"

using namespace facelet;

namespace {

CodecConfig tiny_config() {
    CodecConfig c;
    c.base_channels = 2;
    c.image_size = 32;
    return c;
}

FeaturePyramid random_pyramid(const CodecConfig& cfg, std::uint64_t seed, float lo = -1, float hi = 1) {
    Rng rng(seed);
    FeaturePyramid p;
    for (int l : cfg.tap_levels) p.levels[l] = uniform_tensor<float>(cfg.level_shape(l), rng, lo, hi);
    return p;
}

/// Circular shift of a [C,H,W] map by (dy, dx).
Tensor roll(const Tensor& t, int dy, int dx) {
    const int h = static_cast<int>(t.dim(1)), w = static_cast<int>(t.dim(2));
    Tensor out(t.shape());
    for (std::size_t c = 0; c < t.dim(0); ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                out.at(c, static_cast<std::size_t>(((y + dy) % h + h) % h), static_cast<std::size_t>(((x + dx) % w + w) % w)) =
                    t.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
    return out;
}

}  // namespace

TEST(FaceletForward, PreservesShapes) {
    CodecModel codec(CodecConfig{}, 1);
    FaceletBank bank("e", codec, 2);
    auto psi = random_pyramid(codec.config(), 3);
    auto dv = facelet_forward(bank, psi);
    EXPECT_EQ(dv.at(3).shape(), (Shape{64, 16, 16}));
    EXPECT_EQ(dv.at(4).shape(), (Shape{128, 8, 8}));
    EXPECT_EQ(dv.at(5).shape(), (Shape{256, 4, 4}));
}

TEST(FaceletForward, ZeroBankGivesZeroShift) {
    CodecModel codec(tiny_config(), 1);
    FaceletBank bank("e", codec, 2, 0.0f);
    for (const auto& [l, t] : facelet_forward(bank, random_pyramid(codec.config(), 4)).levels)
        for (float v : t.storage()) EXPECT_EQ(v, 0.0f);
}

TEST(FaceletForward, MatchesPrimitiveComposition) {
    CodecModel codec(tiny_config(), 1);
    FaceletBank bank("e", codec, 5);
    auto psi = random_pyramid(codec.config(), 6);
    auto dv = facelet_forward(bank, psi);
    for (const auto& [l, convs] : bank.levels) {
        auto relu_t = [](Tensor t) {
            for (auto& v : t.storage()) v = std::max(v, 0.0f);
            return t;
        };
        Tensor h = relu_t(check::naive_conv2d(psi.at(l), convs[0].weight.value, convs[0].bias.value, 1, 1));
        h = relu_t(check::naive_conv2d(h, convs[1].weight.value, convs[1].bias.value, 1, 1));
        h = check::naive_conv2d(h, convs[2].weight.value, convs[2].bias.value, 1, 1);
        EXPECT_LT(max_abs_diff(h, dv.at(l)), 1e-5) << "level " << l;
    }
}

TEST(FaceletForward, OutputCanBeNegative) {
    CodecModel codec(tiny_config(), 1);
    FaceletBank bank("e", codec, 7);
    bool negative = false;
    for (const auto& [l, t] : facelet_forward(bank, random_pyramid(codec.config(), 8, 0, 2)).levels)
        for (float v : t.storage()) negative |= v < 0;
    EXPECT_TRUE(negative);
}

TEST(FaceletForward, ShapeMismatchRejected) {
    CodecModel codec(tiny_config(), 1);
    FaceletBank bank("e", codec, 7);
    auto psi = random_pyramid(codec.config(), 1);
    psi.levels[4] = Tensor::zeros({3, 4, 4});
    EXPECT_THROW(facelet_forward(bank, psi), ShapeError);
    psi.levels.erase(4);
    EXPECT_THROW(facelet_forward(bank, psi), ShapeError);
}

TEST(FaceletForward, TranslationCovariantInInterior) {
    CodecModel codec(CodecConfig{}, 1);
    FaceletBank bank("e", codec, 9);
    auto psi = random_pyramid(codec.config(), 10, 0, 1);
    auto base = facelet_forward(bank, psi);
    for (auto [dy, dx] : {std::pair{1, 2}, {-2, 1}, {3, -3}}) {
        FeaturePyramid shifted;
        for (const auto& [l, t] : psi.levels) shifted.levels[l] = roll(t, dy, dx);
        auto out = facelet_forward(bank, shifted);
        std::size_t compared = 0;
        for (const auto& [l, t] : base.levels) {
            const int h = static_cast<int>(t.dim(1));
            for (std::size_t c = 0; c < t.dim(0); ++c)
                for (int y = 3; y < h - 3; ++y)
                    for (int x = 3; x < h - 3; ++x) {
                        const int sy = y + dy, sx = x + dx;
                        if (sy < 3 || sy >= h - 3 || sx < 3 || sx >= h - 3) continue;
                        ASSERT_NEAR(out.at(l).at(c, sy, sx), t.at(c, y, x), 1e-4);
                        ++compared;
                    }
        }
        EXPECT_GT(compared, 0u);
    }
}

TEST(ApplyShift, Examples) {
    FeaturePyramid psi, dv;
    psi.levels[3] = Tensor({2, 1, 1}, std::vector<float>{1, 1});
    dv.levels[3] = Tensor({2, 1, 1}, std::vector<float>{2, 0});
    EXPECT_EQ(apply_shift(psi, dv, 0.5f).at(3).storage(), (std::vector<float>{2, 1}));
    EXPECT_EQ(apply_shift(psi, dv, 0.0f), psi);
    dv.levels[3] = Tensor({1, 1, 1});
    EXPECT_THROW(apply_shift(psi, dv, 1.0f), ShapeError);
}

TEST(ApplyShift, LambdaZeroIsBitIdentical) {
    auto cfg = tiny_config();
    auto psi = random_pyramid(cfg, 1), dv = random_pyramid(cfg, 2, -1e6, 1e6);
    psi.levels[3][0] = -0.0f;
    auto out = apply_shift(psi, dv, 0.0f);
    for (const auto& [l, t] : psi.levels)
        EXPECT_EQ(std::memcmp(t.data(), out.at(l).data(), t.numel() * sizeof(float)), 0);
}

TEST(ApplyShift, LinearAcrossSweep) {
    CodecModel codec(CodecConfig{}, 1);
    auto psi = random_pyramid(codec.config(), 3), dv = random_pyramid(codec.config(), 4);
    const std::vector<float> sweep{0.0f, 0.2f, 0.4f, 0.6f, 0.8f, 1.0f, 1.2f, 1.4f, 1.6f, 1.8f};
    std::vector<FeaturePyramid> outs;
    for (float l : sweep) outs.push_back(apply_shift(psi, dv, l));
    ASSERT_EQ(outs.size(), 10u);
    for (std::size_t a = 0; a < sweep.size(); ++a)
        for (std::size_t b = 0; b < sweep.size(); ++b)
            for (const auto& [l, t] : dv.levels)
                for (std::size_t i = 0; i < t.numel(); ++i)
                    ASSERT_NEAR(outs[b].at(l)[i] - outs[a].at(l)[i], (sweep[b] - sweep[a]) * t[i], 1e-5);
}

TEST(ApplyShift, AdditiveComposition) {
    auto cfg = tiny_config();
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        auto psi = random_pyramid(cfg, seed), dv = random_pyramid(cfg, seed + 50);
        Rng rng(seed);
        const float l1 = static_cast<float>(rng.uniform(-2, 2)), l2 = static_cast<float>(rng.uniform(-2, 2));
        auto twice = apply_shift(apply_shift(psi, dv, l1), dv, l2);
        auto once = apply_shift(psi, dv, l1 + l2);
        for (const auto& [l, t] : once.levels) EXPECT_LT(max_abs_diff(t, twice.at(l)), 1e-5);
    }
}

TEST(ApplyShift, NonFiniteLambdaRejected) {
    auto cfg = tiny_config();
    auto psi = random_pyramid(cfg, 1);
    EXPECT_THROW(apply_shift(psi, psi, std::numeric_limits<float>::quiet_NaN()), Error);
    EXPECT_THROW(apply_shift(psi, psi, std::numeric_limits<float>::infinity()), Error);
}

TEST(TrainFacelet, ZeroLabelsDriveOutputToZero) {
    CodecModel codec(tiny_config(), 1);
    codec.freeze_encoder();
    std::vector<FeaturePyramid> feats, labels;
    for (const auto& p : synth::generate_portraits(3, 32, 32)) {
        feats.push_back(encode(codec, p.image));
        auto z = feats.back();
        for (auto& [l, t] : z.levels) t.fill(0.0f);
        labels.push_back(z);
    }
    FaceletTrainConfig cfg;
    cfg.schedule.epochs = 30;
    cfg.schedule.batch_size = 8;
    TrainLog log;
    auto bank = train_facelet(codec, "zero", feats, labels, cfg, &log);
    double sum = 0;
    std::size_t n = 0;
    for (const auto& f : feats)
        for (const auto& [l, t] : facelet_forward(bank, f).levels) {
            for (float v : t.storage()) sum += std::abs(v);
            n += t.numel();
        }
    EXPECT_LT(sum / static_cast<double>(n), 1e-2);
    for (std::size_t e = 1; e < log.epoch_means.size(); ++e)
        EXPECT_LE(log.epoch_means[e], log.epoch_means[e - 1] * 1.05) << "epoch " << e;
}

TEST(TrainFacelet, CountMismatchRejected) {
    CodecModel codec(tiny_config(), 1);
    codec.freeze_encoder();
    auto f = encode(codec, synth::generate_portraits(3, 2, 32)[0].image);
    EXPECT_THROW(train_facelet(codec, "e", {f, f}, {f}, FaceletTrainConfig{}), Error);
    CodecModel unfrozen(tiny_config(), 1);
    EXPECT_THROW(train_facelet(unfrozen, "e", {f}, {f}, FaceletTrainConfig{}), Error);
}

TEST(EditImage, LambdaZeroEqualsReconstruction) {
    CodecModel codec(tiny_config(), 1);
    FaceletBank bank("e", codec, 2);
    for (const auto& p : synth::generate_portraits(4, 4, 32)) {
        EXPECT_EQ(edit_image(codec, bank, p.image, 0.0f), reconstruct(codec, p.image));
        const Tensor big = edit_image(codec, bank, p.image, 1.8f);
        for (float v : big.storage()) {
            EXPECT_GE(v, 0.0f);
            EXPECT_LE(v, 1.0f);
        }
    }
}

TEST(EditImage, CacheComputesShiftOnce) {
    CodecModel codec(tiny_config(), 1);
    FaceletBank bank("e", codec, 2);
    auto img = synth::generate_portraits(4, 2, 32)[0].image;
    EditCache cache(codec, img);
    EXPECT_FALSE(cache.has_delta("e"));
    const FeaturePyramid* first = &cache.delta(bank);
    EXPECT_TRUE(cache.has_delta("e"));
    EXPECT_EQ(first, &cache.delta(bank));
    EXPECT_EQ(cache.render(codec, bank, 0.7f), edit_image(codec, bank, img, 0.7f));
}

TEST(EditImage, FingerprintMismatchRejected) {
    CodecModel a(tiny_config(), 1), b(tiny_config(), 2);
    FaceletBank bank("e", a, 2);
    EXPECT_THROW(edit_image(b, bank, Tensor({3, 32, 32}, 0.5f), 1.0f), FingerprintError);
}

TEST(BankFile, RoundTripByteStable) {
    CodecModel codec(tiny_config(), 1);
    FaceletBank bank("mustache", codec, 3);
    bank.metadata = {"synthetic-test", 10, "2020-01-01T00:00:00Z", {{"seed", 3}}};
    const auto bytes = io::serialize_fclt(bank_to_fclt(bank));
    const auto back = bank_from_fclt(io::parse_fclt(bytes));
    EXPECT_EQ(back.checksum(), bank.checksum());
    EXPECT_EQ(back.codec_fingerprint, bank.codec_fingerprint);
    EXPECT_EQ(io::serialize_fclt(bank_to_fclt(back)), bytes);
}

TEST(BankFile, RejectsCodecContainer) {
    CodecModel codec(tiny_config(), 1);
    io::FcltFile f;
    f.info = {{"kind", "codec"}};
    EXPECT_THROW(bank_from_fclt(f), io::FormatError);
}

TEST(Registry, InsertLookupAndIsolation) {
    CodecModel codec(tiny_config(), 1);
    BankRegistry reg(codec);
    EXPECT_TRUE(reg.names().empty());
    FaceletBank a("a", codec, 1), b("b", codec, 2);
    const std::string b_sum = b.checksum();
    reg.swap(a);
    reg.swap(b);
    EXPECT_EQ(reg.lookup("a")->checksum(), a.checksum());
    reg.swap(FaceletBank("a", codec, 99));
    EXPECT_NE(reg.lookup("a")->checksum(), a.checksum());
    EXPECT_EQ(reg.lookup("b")->checksum(), b_sum);
    EXPECT_EQ(reg.names(), (std::vector<std::string>{"a", "b"}));
    EXPECT_EQ(reg.lookup("missing"), nullptr);
}

TEST(Registry, FingerprintMismatchRejected) {
    CodecModel a(tiny_config(), 1), b(tiny_config(), 2);
    BankRegistry reg(a);
    EXPECT_THROW(reg.swap(FaceletBank("x", b, 1)), FingerprintError);
    FaceletBank bad("y", a, 1);
    bad.levels.erase(4);
    EXPECT_THROW(reg.swap(bad), FingerprintError);
}

TEST(Registry, ConcurrentLookupsNeverTorn) {
    CodecModel codec(tiny_config(), 1);
    BankRegistry reg(codec);
    FaceletBank old_bank("fx", codec, 1), new_bank("fx", codec, 2);
    const std::string old_sum = old_bank.checksum(), new_sum = new_bank.checksum();
    reg.swap(old_bank);
    std::atomic<bool> go{false};
    std::atomic<int> bad{0}, seen_new{0};
    std::vector<std::thread> readers;
    for (int t = 0; t < 4; ++t)
        readers.emplace_back([&] {
            while (!go) std::this_thread::yield();
            for (int i = 0; i < 25; ++i) {
                auto b = reg.lookup("fx");
                const std::string s = b->checksum();
                if (s != old_sum && s != new_sum) ++bad;
                if (s == new_sum) ++seen_new;
            }
        });
    go = true;
    reg.swap(new_bank);
    for (auto& th : readers) th.join();
    EXPECT_EQ(bad.load(), 0);
    EXPECT_EQ(reg.lookup("fx")->checksum(), new_sum);
}

TEST(Registry, InFlightEditKeepsOldBank) {
    CodecModel codec(tiny_config(), 1);
    BankRegistry reg(codec);
    reg.swap(FaceletBank("fx", codec, 1));
    auto held = reg.lookup("fx");
    const std::string sum = held->checksum();
    reg.swap(FaceletBank("fx", codec, 2));
    EXPECT_EQ(held->checksum(), sum);
    EXPECT_NE(reg.lookup("fx")->checksum(), sum);
}
