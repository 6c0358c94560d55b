#pragma once

#include <openssl/rand.h>

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>

#include <json.hpp>

#include "facelet/bank/facelet.hpp"
#include "facelet/eval/metrics.hpp"
#include "facelet/io/base64.hpp"

// After Eigen: resolv.h (via httplib) defines a `_res` macro that collides with Eigen internals.
#ifndef CPPHTTPLIB_LISTEN_BACKLOG
#define CPPHTTPLIB_LISTEN_BACKLOG 128  // library default of 5 resets bursts of new connections
#endif
#include <httplib.h>

namespace facelet::service {

using Clock = std::chrono::steady_clock;

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string codec_path;
    std::string banks_dir;
    std::chrono::seconds session_ttl{600};
    std::size_t max_body_bytes = 4u << 20;
    bool resize = false;
    std::size_t threads = 8;

    /// Overlays PORT, CODEC_PATH, BANKS_DIR, SESSION_TTL_SECS and MAX_BODY_BYTES when set.
    void apply_env() {
        auto env = [](const char* k) -> const char* {
            const char* v = std::getenv(k);
            return v && *v ? v : nullptr;
        };
        auto number = [](const char* k, const char* v) {
            char* end = nullptr;
            const long long n = std::strtoll(v, &end, 10);
            if (*end != '\0' || n < 0) throw Error(std::string(k) + " must be a non-negative integer, got '" + v + "'");
            return n;
        };
        if (auto v = env("PORT")) port = static_cast<int>(number("PORT", v));
        if (auto v = env("CODEC_PATH")) codec_path = v;
        if (auto v = env("BANKS_DIR")) banks_dir = v;
        if (auto v = env("SESSION_TTL_SECS")) session_ttl = std::chrono::seconds(number("SESSION_TTL_SECS", v));
        if (auto v = env("MAX_BODY_BYTES")) max_body_bytes = static_cast<std::size_t>(number("MAX_BODY_BYTES", v));
    }
};

struct Reply {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;

    static Reply json(const nlohmann::json& j, int status = 200) { return {status, "application/json", j.dump()}; }
    static Reply error(int status, const std::string& msg) { return json({{"error", msg}}, status); }
};

/// Encoded upload plus the shifts computed for it. A shift is keyed by the exact bank
/// object it came from, so a hot swap never mixes versions.
struct EditSession {
    std::string session_id;
    FeaturePyramid psi;
    Clock::time_point created_at;
    Clock::time_point last_used;

    std::shared_ptr<const FeaturePyramid> delta(const BankRegistry::BankPtr& bank) {
        std::lock_guard<std::mutex> lk(mu_);
        auto it = deltas_.find(bank.get());
        if (it != deltas_.end()) return it->second.second;
        auto d = std::make_shared<const FeaturePyramid>(facelet_forward(*bank, psi));
        deltas_.emplace(bank.get(), std::make_pair(bank, d));
        return d;
    }

    bool has_delta(const BankRegistry::BankPtr& bank) const {
        std::lock_guard<std::mutex> lk(mu_);
        return deltas_.count(bank.get()) != 0;
    }

private:
    mutable std::mutex mu_;
    std::map<const FaceletBank*, std::pair<BankRegistry::BankPtr, std::shared_ptr<const FeaturePyramid>>> deltas_;
};

class SessionStore {
public:
    using Now = std::function<Clock::time_point()>;

    explicit SessionStore(std::chrono::seconds ttl, Now now = Clock::now) : ttl_(ttl), now_(std::move(now)) {}

    std::shared_ptr<EditSession> create(FeaturePyramid psi) {
        auto s = std::make_shared<EditSession>();
        s->session_id = new_id();
        s->psi = std::move(psi);
        s->created_at = s->last_used = now_();
        std::lock_guard<std::mutex> lk(mu_);
        expire_locked(s->created_at);
        sessions_[s->session_id] = s;
        return s;
    }

    /// Live session or nullptr; touching it resets the idle clock.
    std::shared_ptr<EditSession> find(const std::string& id) {
        const auto t = now_();
        std::lock_guard<std::mutex> lk(mu_);
        expire_locked(t);
        auto it = sessions_.find(id);
        if (it == sessions_.end()) return nullptr;
        it->second->last_used = t;
        return it->second;
    }

    std::size_t size() const {
        std::lock_guard<std::mutex> lk(mu_);
        return sessions_.size();
    }

private:
    void expire_locked(Clock::time_point t) {
        for (auto it = sessions_.begin(); it != sessions_.end();)
            it = t - it->second->last_used > ttl_ ? sessions_.erase(it) : std::next(it);
    }

    static std::string new_id() {
        unsigned char raw[16];
        if (RAND_bytes(raw, sizeof raw) != 1) throw Error("RAND_bytes failed");
        static const char* hex = "0123456789abcdef";
        std::string id;
        for (unsigned char b : raw) {
            id += hex[b >> 4];
            id += hex[b & 15];
        }
        return id;
    }

    std::chrono::seconds ttl_;
    Now now_;
    mutable std::mutex mu_;
    std::map<std::string, std::shared_ptr<EditSession>> sessions_;
};

/// Loads *.fclt banks from a directory into a registry; later scans reload only files whose
/// size or modification time changed.
class BankDirWatcher {
public:
    BankDirWatcher(BankRegistry& registry, std::string dir) : registry_(registry), dir_(std::move(dir)) {}

    /// Names of the effects (re)loaded by this scan.
    std::vector<std::string> scan() {
        namespace fs = std::filesystem;
        if (!fs::is_directory(dir_)) throw Error("banks directory not found: " + dir_);
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(dir_))
            if (e.is_regular_file() && e.path().extension() == ".fclt") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        std::vector<std::string> names;
        for (const auto& p : files) {
            const Stamp st{fs::last_write_time(p), fs::file_size(p)};
            auto it = seen_.find(p.string());
            if (it != seen_.end() && it->second == st) continue;
            auto bank = load_bank(p.string());
            names.push_back(bank.effect_name);
            registry_.swap(std::move(bank));
            seen_[p.string()] = st;
        }
        return names;
    }

private:
    using Stamp = std::pair<std::filesystem::file_time_type, std::uintmax_t>;
    BankRegistry& registry_;
    std::string dir_;
    std::map<std::string, Stamp> seen_;
};

inline std::vector<std::string> load_bank_dir(BankRegistry& registry, const std::string& dir) {
    return BankDirWatcher(registry, dir).scan();
}

inline nlohmann::json bank_summary(const FaceletBank& bank) {
    return {{"name", bank.effect_name},
            {"metadata",
             {{"trained_on", bank.metadata.trained_on},
              {"k_neighbors", bank.metadata.k_neighbors},
              {"created_at", bank.metadata.created_at},
              {"extra", bank.metadata.extra}}}};
}

/// Transport-independent request handlers; mount() binds them to an httplib server.
class EditService {
public:
    EditService(std::shared_ptr<const CodecModel> codec, std::shared_ptr<BankRegistry> registry, ServiceConfig cfg,
                SessionStore::Now now = Clock::now)
        : codec_(std::move(codec)), registry_(std::move(registry)), cfg_(std::move(cfg)), sessions_(cfg_.session_ttl, now) {
        if (!codec_ || !registry_) throw Error("edit service needs a codec and a registry");
        if (registry_->codec_fingerprint() != codec_->fingerprint())
            throw FingerprintError("registry is bound to a different codec");
    }

    BankRegistry& registry() { return *registry_; }
    SessionStore& sessions() { return sessions_; }
    const ServiceConfig& config() const { return cfg_; }

    Reply effects() const {
        nlohmann::json out = nlohmann::json::array();
        for (const auto& [name, bank] : *registry_->snapshot()) out.push_back(bank_summary(*bank));
        return Reply::json(out);
    }

    Reply create_session(const std::string& body) {
        if (body.size() > cfg_.max_body_bytes) return Reply::error(413, "request body exceeds the size limit");
        nlohmann::json req = nlohmann::json::parse(body, nullptr, false);
        if (req.is_discarded() || !req.is_object()) return Reply::error(400, "body is not a JSON object");
        if (!req.contains("image") || !req["image"].is_string()) return Reply::error(400, "missing string field 'image'");
        Tensor image;
        try {
            image = io::decode_png(io::base64_decode(req["image"].get_ref<const std::string&>()));
        } catch (const Error& e) {
            return Reply::error(400, e.what());
        }
        const std::size_t s = codec_->config().image_size;
        if (image.dim(1) != s || image.dim(2) != s) {
            if (!cfg_.resize)
                return Reply::error(400, "image is " + std::to_string(image.dim(2)) + "x" + std::to_string(image.dim(1)) +
                                             ", codec expects " + std::to_string(s) + "x" + std::to_string(s));
            image = io::resize_bilinear(image, s);
        }
        auto session = sessions_.create(encode(*codec_, image));
        const Tensor rec = decode(*codec_, session->psi);
        return Reply::json({{"session_id", session->session_id}, {"reconstruction", io::base64_encode(io::encode_png(rec))}});
    }

    Reply edit(const std::string& id, const std::string& body) {
        nlohmann::json req = nlohmann::json::parse(body, nullptr, false);
        if (req.is_discarded() || !req.is_object()) return Reply::error(400, "body is not a JSON object");
        if (!req.contains("effect") || !req["effect"].is_string()) return Reply::error(400, "missing string field 'effect'");
        float lambda = 0;
        if (auto r = parse_lambda(req, lambda)) return *r;
        auto session = sessions_.find(id);
        if (!session) return Reply::error(404, "unknown session " + id);
        auto bank = registry_->lookup(req["effect"].get<std::string>());
        if (!bank) return Reply::error(404, "unknown effect " + req["effect"].get<std::string>());

        const auto t0 = Clock::now();
        auto delta = session->delta(bank);
        const Tensor out = decode(*codec_, apply_shift(session->psi, *delta, lambda));
        const double ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
        return Reply::json({{"image", io::base64_encode(io::encode_png(out))}, {"timing_ms", ms}});
    }

    Reply heatmap(const std::string& id, const std::string& effect) {
        auto session = sessions_.find(id);
        if (!session) return Reply::error(404, "unknown session " + id);
        if (effect.empty()) return Reply::error(400, "missing query parameter 'effect'");
        auto bank = registry_->lookup(effect);
        if (!bank) return Reply::error(404, "unknown effect " + effect);
        const auto hm = eval::heatmap(*session->delta(bank), codec_->config().image_size);
        const io::Bytes png = io::encode_png_gray(eval::normalized_heatmap(hm));
        return {200, "image/png", std::string(png.begin(), png.end())};
    }

    void mount(httplib::Server& srv) {
        srv.set_payload_max_length(cfg_.max_body_bytes);
        auto send = [](httplib::Response& res, const Reply& r) {
            res.status = r.status;
            res.set_content(r.body, r.content_type);
        };
        srv.Get("/effects", [this, send](const httplib::Request&, httplib::Response& res) { send(res, effects()); });
        srv.Post("/sessions", [this, send](const httplib::Request& req, httplib::Response& res) {
            send(res, create_session(req.body));
        });
        srv.Post(R"(/sessions/([0-9a-zA-Z]+)/edit)", [this, send](const httplib::Request& req, httplib::Response& res) {
            send(res, edit(req.matches[1], req.body));
        });
        srv.Get(R"(/sessions/([0-9a-zA-Z]+)/heatmap)", [this, send](const httplib::Request& req, httplib::Response& res) {
            send(res, heatmap(req.matches[1], req.get_param_value("effect")));
        });
        srv.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
            std::string msg = "internal error";
            try {
                std::rethrow_exception(ep);
            } catch (const std::exception& e) {
                msg = e.what();
            } catch (...) {
            }
            res.status = 500;
            res.set_content(nlohmann::json({{"error", msg}}).dump(), "application/json");
        });
        srv.set_error_handler([](const httplib::Request&, httplib::Response& res) {
            if (res.body.empty()) {
                const char* msg = res.status == 413 ? "request body exceeds the size limit" : "not found";
                res.set_content(nlohmann::json({{"error", msg}}).dump(), "application/json");
            }
        });
    }

private:
    /// Accepts a JSON number, or one of the strings NaN/Infinity/-Infinity so clients can express non-finite values.
    static std::optional<Reply> parse_lambda(const nlohmann::json& req, float& lambda) {
        if (!req.contains("lambda")) return Reply::error(400, "missing field 'lambda'");
        const auto& v = req["lambda"];
        double d = 0;
        if (v.is_number()) {
            d = v.get<double>();
        } else if (v.is_string()) {
            const std::string s = v.get<std::string>();
            if (s == "NaN" || s == "nan") d = std::nan("");
            else if (s == "Infinity" || s == "inf") d = HUGE_VAL;
            else if (s == "-Infinity" || s == "-inf") d = -HUGE_VAL;
            else return Reply::error(400, "'lambda' must be a number");
        } else {
            return Reply::error(400, "'lambda' must be a number");
        }
        lambda = static_cast<float>(d);
        if (!std::isfinite(d) || !std::isfinite(lambda)) return Reply::error(422, "'lambda' must be finite");
        return std::nullopt;
    }

    std::shared_ptr<const CodecModel> codec_;
    std::shared_ptr<BankRegistry> registry_;
    ServiceConfig cfg_;
    SessionStore sessions_;
};

/// Server on a background thread, for tests and the serve command.
class RunningServer {
public:
    explicit RunningServer(EditService& service) {
        srv_.new_task_queue = [n = service.config().threads] { return new httplib::ThreadPool(n); };
        service.mount(srv_);
        port_ = service.config().port == 0 ? srv_.bind_to_any_port(service.config().host)
                                           : (srv_.bind_to_port(service.config().host, service.config().port)
                                                  ? service.config().port
                                                  : -1);
        if (port_ < 0) throw Error("cannot bind " + service.config().host + ":" + std::to_string(service.config().port));
        thread_ = std::thread([this] { srv_.listen_after_bind(); });
        srv_.wait_until_ready();
    }
    ~RunningServer() { stop(); }
    RunningServer(const RunningServer&) = delete;
    RunningServer& operator=(const RunningServer&) = delete;

    int port() const { return port_; }
    void stop() {
        if (thread_.joinable()) {
            srv_.stop();
            thread_.join();
        }
    }
    void wait() {
        if (thread_.joinable()) thread_.join();
    }

private:
    httplib::Server srv_;
    int port_ = -1;
    std::thread thread_;
};

}  // namespace facelet::service
