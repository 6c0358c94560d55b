#include <csignal>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "facelet/eval/report.hpp"
#include "facelet/io/base64.hpp"
#include "facelet/pipeline.hpp"
#include "facelet/service/edit_service.hpp"

namespace fs = std::filesystem;
using namespace facelet;

namespace {

void log_line(const std::string& m) { std::cerr << m << "\n"; }

Tensor load_input(const std::string& path, const CodecModel& codec, bool resize) {
    Tensor img = io::load_png(path);
    const std::size_t s = codec.config().image_size;
    if (img.dim(1) == s && img.dim(2) == s) return img;
    if (!resize)
        throw Error(path + " is " + std::to_string(img.dim(2)) + "x" + std::to_string(img.dim(1)) + ", codec expects " +
                    std::to_string(s) + "x" + std::to_string(s) + " (pass --resize to resample)");
    return io::resize_bilinear(img, s);
}

FaceletBank load_checked_bank(const std::string& path, const CodecModel& codec) {
    FaceletBank bank = load_bank(path);
    check_bank(codec, bank);
    return bank;
}

void write_json(const nlohmann::json& j, const std::string& out) {
    const std::string text = j.dump(2) + "\n";
    if (out.empty() || out == "-") {
        std::cout << text;
        return;
    }
    io::write_file(out, io::Bytes(text.begin(), text.end()));
}

/// "!attr" selects the opposite polarity.
std::pair<std::string, bool> parse_polarity(const std::string& spec) {
    if (!spec.empty() && spec[0] == '!') return {spec.substr(1), false};
    return {spec, true};
}

volatile std::sig_atomic_t g_stop = 0;

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Facelet portrait editing: data, training, editing and evaluation"};
    app.require_subcommand(1);

    // gen-data
    std::string gd_out;
    std::size_t gd_count = 0;
    int gd_size = 64;
    std::uint64_t gd_seed = 1;
    auto* gen = app.add_subcommand("gen-data", "Write a synthetic portrait dataset");
    gen->add_option("--out", gd_out, "Output directory")->required();
    gen->add_option("--count", gd_count, "Number of portraits")->required();
    gen->add_option("--size", gd_size, "Image size (32 or 64)");
    gen->add_option("--seed", gd_seed, "Generator seed");

    // train-codec
    std::string tc_data, tc_out, tc_labels, tc_encoder;
    pipeline::CodecTrainOptions tc;
    auto* trc = app.add_subcommand("train-codec", "Train the encoder and decoder");
    trc->add_option("--data", tc_data, "Dataset directory")->required();
    trc->add_option("--out", tc_out, "Output codec file")->required();
    trc->add_option("--epochs", tc.epochs, "Decoder-phase epochs");
    trc->add_option("--lr", tc.lr, "Decoder-phase learning rate");
    trc->add_option("--seed", tc.seed, "Training seed");
    trc->add_option("--encoder-epochs", tc.encoder_epochs, "Encoder-phase epochs");
    trc->add_option("--encoder-lr", tc.encoder_lr, "Encoder-phase learning rate");
    trc->add_option("--batch", tc.batch_size, "Batch size");
    trc->add_option("--decay-every", tc.decay_every, "Epochs between step decays (0 = constant)");
    trc->add_option("--decay", tc.decay, "Step decay factor");
    trc->add_option("--base-channels", tc.config.base_channels, "Channels of the first encoder block");
    trc->add_option("--labels", tc_labels, "Pseudo-label file; enables decoder pre-training");
    trc->add_option("--pretrain-steps", tc.pretrain_steps, "Pre-training steps when --labels is given");
    trc->add_option("--encoder-from", tc_encoder, "Reuse the frozen encoder of this codec");

    // build-labels
    std::string bl_data, bl_codec, bl_effect, bl_attr, bl_out;
    std::size_t bl_k = 10;
    auto* bl = app.add_subcommand("build-labels", "Compute K-NN pseudo-labels for every source-domain sample");
    bl->add_option("--data", bl_data, "Dataset directory")->required();
    bl->add_option("--codec", bl_codec, "Codec file")->required();
    bl->add_option("--effect", bl_effect, "Effect name")->required();
    bl->add_option("--pos-attr", bl_attr, "Target attribute; prefix with ! to flip polarity")->required();
    bl->add_option("--k", bl_k, "Neighbours per domain");
    bl->add_option("--out", bl_out, "Output label file")->required();

    // train-facelet
    std::string tf_labels, tf_codec, tf_out, tf_data;
    FaceletTrainConfig tf;
    auto* tfc = app.add_subcommand("train-facelet", "Train one effect bank against pseudo-labels");
    tfc->add_option("--labels", tf_labels, "Pseudo-label file")->required();
    tfc->add_option("--codec", tf_codec, "Codec file")->required();
    tfc->add_option("--out", tf_out, "Output bank file")->required();
    tfc->add_option("--data", tf_data, "Dataset directory (default: the one recorded in the labels)");
    tfc->add_option("--epochs", tf.schedule.epochs, "Epochs");
    tfc->add_option("--lr", tf.schedule.lr, "Learning rate");
    tfc->add_option("--batch", tf.schedule.batch_size, "Batch size");
    tfc->add_option("--seed", tf.schedule.seed, "Seed");

    // apply
    std::string ap_codec, ap_bank, ap_in, ap_out;
    float ap_lambda = 1.0f;
    bool ap_resize = false;
    auto* ap = app.add_subcommand("apply", "Edit one image");
    ap->add_option("--codec", ap_codec, "Codec file")->required();
    ap->add_option("--bank", ap_bank, "Bank file")->required();
    ap->add_option("--in", ap_in, "Input PNG")->required();
    ap->add_option("--lambda", ap_lambda, "Effect strength")->required();
    ap->add_option("--out", ap_out, "Output PNG")->required();
    ap->add_flag("--resize", ap_resize, "Resample off-size inputs instead of rejecting them");

    // heatmap
    std::string hm_codec, hm_bank, hm_in, hm_out;
    bool hm_resize = false;
    auto* hm = app.add_subcommand("heatmap", "Write the shift energy map of one image as a grayscale PNG");
    hm->add_option("--codec", hm_codec, "Codec file")->required();
    hm->add_option("--bank", hm_bank, "Bank file")->required();
    hm->add_option("--in", hm_in, "Input PNG")->required();
    hm->add_option("--out", hm_out, "Output PNG")->required();
    hm->add_flag("--resize", hm_resize, "Resample off-size inputs instead of rejecting them");

    // eval
    std::string ev_codec, ev_bank, ev_data, ev_out;
    eval::ReportOptions ev;
    bool ev_no_timing = false;
    auto* evc = app.add_subcommand("eval", "Held-out evaluation report as JSON");
    evc->add_option("--codec", ev_codec, "Codec file")->required();
    evc->add_option("--bank", ev_bank, "Bank file")->required();
    evc->add_option("--data", ev_data, "Dataset directory")->required();
    evc->add_option("--k", ev.k, "Neighbours for the K-NN baseline");
    evc->add_option("--locality-images", ev.locality_images, "Held-out images for the locality comparison");
    evc->add_option("--sweep-images", ev.sweep_images, "Held-out images for the strength sweep");
    evc->add_option("--covariance-images", ev.covariance_images, "Held-out images for the translation check");
    evc->add_option("--out", ev_out, "Output JSON (default: stdout)");
    evc->add_flag("--no-timing", ev_no_timing, "Skip the timing section");
    evc->add_option("--probe-epochs", ev.probe.schedule.epochs, "Attribute probe training epochs");
    evc->add_option("--probe-floor", ev.probe.accuracy_floor, "Minimum held-out probe accuracy")
        ->check(CLI::Range(0.0, 1.0));

    // bench
    std::string bn_codec, bn_bank, bn_data, bn_out;
    std::size_t bn_k = 10, bn_reps = 20;
    auto* bn = app.add_subcommand("bench", "Time bank edits, K-NN edits and strength-only re-renders");
    bn->add_option("--codec", bn_codec, "Codec file")->required();
    bn->add_option("--bank", bn_bank, "Bank file")->required();
    bn->add_option("--data", bn_data, "Dataset directory")->required();
    bn->add_option("--k", bn_k, "Neighbours for the K-NN edit");
    bn->add_option("--reps", bn_reps, "Repetitions (>= 20)");
    bn->add_option("--out", bn_out, "Output JSON (default: stdout)");

    // serve
    service::ServiceConfig sv;
    auto* srv = app.add_subcommand("serve", "Run the HTTP editing service");
    srv->add_option("--codec", sv.codec_path, "Codec file (env CODEC_PATH)");
    srv->add_option("--banks", sv.banks_dir, "Directory of bank files (env BANKS_DIR)");
    srv->add_option("--port", sv.port, "Port (env PORT); 0 picks a free one");
    srv->add_option("--host", sv.host, "Bind address");
    std::size_t sv_ttl = 0;
    srv->add_option("--session-ttl", sv_ttl, "Idle session timeout in seconds (env SESSION_TTL_SECS)");
    srv->add_option("--max-body", sv.max_body_bytes, "Request body limit in bytes (env MAX_BODY_BYTES)");
    srv->add_flag("--resize", sv.resize, "Resample off-size uploads instead of rejecting them");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*gen) {
            if (gd_count == 0) throw Error("gen-data: --count must be positive");
            auto ds = synth::make_dataset(gd_seed, gd_count, gd_size);
            synth::write_dataset(ds, gd_out);
            log_line("wrote " + std::to_string(ds.size()) + " portraits to " + gd_out);
        } else if (*trc) {
            tc.log = log_line;
            const auto ds = synth::load_dataset(tc_data);
            if (static_cast<std::size_t>(ds.image_size) != tc.config.image_size) tc.config.image_size = ds.image_size;
            pseudo::LabelSet labels;
            CodecModel encoder;
            if (!tc_labels.empty()) labels = pseudo::load_labels(tc_labels);
            if (!tc_encoder.empty()) encoder = load_codec(tc_encoder);
            if (!tc_labels.empty() && tc_encoder.empty())
                log_line("note: --labels without --encoder-from; labels must match the freshly trained encoder");
            const CodecModel m = pipeline::train_codec(ds, tc, tc_labels.empty() ? nullptr : &labels,
                                                       tc_encoder.empty() ? nullptr : &encoder);
            save_codec(tc_out, m, pipeline::codec_training_info(ds, tc, !tc_labels.empty()));
            log_line("codec " + m.fingerprint().substr(0, 16) + " written to " + tc_out);
        } else if (*bl) {
            const auto ds = synth::load_dataset(bl_data);
            const CodecModel codec = load_codec(bl_codec);
            const auto [attr, positive] = parse_polarity(bl_attr);
            auto set = pipeline::build_labels(codec, ds, bl_effect, attr, positive, bl_k);
            set.dataset_dir = fs::absolute(bl_data).string();
            pseudo::save_labels(bl_out, set);
            log_line(std::to_string(set.labels.size()) + " pseudo-labels written to " + bl_out);
        } else if (*tfc) {
            tf.schedule.log = log_line;
            const auto labels = pseudo::load_labels(tf_labels);
            const CodecModel codec = load_codec(tf_codec);
            const std::string dir = tf_data.empty() ? labels.dataset_dir : tf_data;
            if (dir.empty()) throw Error("train-facelet: labels record no dataset directory; pass --data");
            const auto ds = synth::load_dataset(dir);
            const FaceletBank bank = pipeline::train_bank(codec, ds, labels, tf);
            save_bank(tf_out, bank);
            log_line("bank '" + bank.effect_name + "' written to " + tf_out);
        } else if (*ap) {
            const CodecModel codec = load_codec(ap_codec);
            const FaceletBank bank = load_checked_bank(ap_bank, codec);
            const Tensor img = load_input(ap_in, codec, ap_resize);
            io::save_png(ap_out, edit_image(codec, bank, img, ap_lambda));
        } else if (*hm) {
            const CodecModel codec = load_codec(hm_codec);
            const FaceletBank bank = load_checked_bank(hm_bank, codec);
            const Tensor img = load_input(hm_in, codec, hm_resize);
            const auto map = eval::heatmap(facelet_forward(bank, encode(codec, img)), codec.config().image_size);
            io::write_file(hm_out, io::encode_png_gray(eval::normalized_heatmap(map)));
        } else if (*evc) {
            ev.log = log_line;
            ev.timing = !ev_no_timing;
            ev.probe.schedule.log = log_line;
            const CodecModel codec = load_codec(ev_codec);
            const FaceletBank bank = load_checked_bank(ev_bank, codec);
            write_json(eval::evaluate(codec, bank, synth::load_dataset(ev_data), ev), ev_out);
        } else if (*bn) {
            const CodecModel codec = load_codec(bn_codec);
            const FaceletBank bank = load_checked_bank(bn_bank, codec);
            const auto ds = synth::load_dataset(bn_data);
            const std::string attr = bank.metadata.extra.value("pos_attr", std::string("mustache"));
            const bool positive = bank.metadata.extra.value("positive_polarity", true);
            const auto domains = pipeline::build_domains(codec, ds, attr, positive);
            const auto test = pipeline::split(ds, true);
            const Tensor& img = (test.empty() ? ds.entries.front().portrait : *test.front()).image;
            write_json(eval::bench_json(eval::bench(codec, bank, domains.x, domains.y, bn_k, img, bn_reps)), bn_out);
        } else if (*srv) {
            service::ServiceConfig env_cfg;
            env_cfg.apply_env();
            if (srv->count("--codec") == 0) sv.codec_path = env_cfg.codec_path;
            if (srv->count("--banks") == 0) sv.banks_dir = env_cfg.banks_dir;
            if (srv->count("--port") == 0) sv.port = env_cfg.port;
            if (srv->count("--max-body") == 0) sv.max_body_bytes = env_cfg.max_body_bytes;
            sv.session_ttl = srv->count("--session-ttl") ? std::chrono::seconds(sv_ttl) : env_cfg.session_ttl;
            if (sv.codec_path.empty()) throw Error("serve: no codec (--codec or CODEC_PATH)");
            auto codec = std::make_shared<const CodecModel>(load_codec(sv.codec_path));
            auto registry = std::make_shared<BankRegistry>(*codec);
            std::optional<service::BankDirWatcher> watcher;
            if (!sv.banks_dir.empty()) {
                watcher.emplace(*registry, sv.banks_dir);
                for (const auto& n : watcher->scan()) log_line("loaded effect " + n);
            }
            service::EditService svc(codec, registry, sv);
            service::RunningServer server(svc);
            std::cout << "listening on " << sv.host << ":" << server.port() << std::endl;
            std::signal(SIGINT, [](int) { g_stop = 1; });
            std::signal(SIGTERM, [](int) { g_stop = 1; });
            // New or retrained bank files are picked up without a restart.
            auto last_scan = std::chrono::steady_clock::now();
            while (!g_stop) {
                std::this_thread::sleep_for(std::chrono::milliseconds(200));
                if (watcher && std::chrono::steady_clock::now() - last_scan > std::chrono::seconds(2)) {
                    last_scan = std::chrono::steady_clock::now();
                    try {
                        for (const auto& n : watcher->scan()) log_line("reloaded effect " + n);
                    } catch (const std::exception& e) {
                        log_line(std::string("bank rescan failed: ") + e.what());
                    }
                }
            }
            server.stop();
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
