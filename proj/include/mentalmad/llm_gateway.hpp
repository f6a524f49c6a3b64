#pragma once

// Teacher-model access: OpenAI-compatible chat completions over HTTP with
// retries, refusal detection, bounded concurrency and an on-disk cache.

#include "mentalmad/corpus.hpp"
#include "mentalmad/detail/hash.hpp"
#include "mentalmad/detail/text.hpp"
#include "mentalmad/error.hpp"

#include <httplib.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <semaphore>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace mentalmad {

struct LlmRequest {
    std::string model;
    std::string prompt;
    double temperature = 0.0;
    int max_output_tokens = 1024;

    void validate() const {
        if (max_output_tokens < 1) throw ConfigError("max_output_tokens must be >= 1");
        if (!(temperature >= 0.0)) throw ConfigError("temperature must be >= 0");
    }
};

enum class ResponseStatus { ok, refusal, transport_error };

inline const char* toString(ResponseStatus s) {
    switch (s) {
    case ResponseStatus::ok: return "ok";
    case ResponseStatus::refusal: return "refusal";
    case ResponseStatus::transport_error: return "transport_error";
    }
    return "transport_error";
}

struct LlmResponse {
    std::string text;
    ResponseStatus status = ResponseStatus::transport_error;
    double latency_ms = 0.0;
    bool cache_hit = false;
    int http_status = 0;
    std::string error; // transport_error detail
};

inline std::vector<std::string> defaultRefusalPatterns() {
    return {"I can't help",    "I can't assist",     "I can't provide",   "I can't comply",
            "I cannot help",   "I cannot assist",    "I cannot provide",  "I cannot comply",
            "I'm sorry, but I", "I am sorry, but I", "I'm unable to",     "I am unable to",
            "I won't be able to", "As an AI"};
}

/// Case-insensitive substring match against the pattern list. Typographic
/// apostrophes are folded to ASCII first.
inline bool detectRefusal(std::string_view text, const std::vector<std::string>& patterns) {
    if (text.empty()) return false;
    std::string folded(text);
    for (std::size_t pos = 0; (pos = folded.find("\xE2\x80\x99", pos)) != std::string::npos;)
        folded.replace(pos, 3, "'");
    const auto lowered = detail::toLower(folded);
    for (const auto& p : patterns) {
        if (!p.empty() && lowered.find(detail::toLower(p)) != std::string::npos) return true;
    }
    return false;
}

inline bool detectRefusal(std::string_view text) { return detectRefusal(text, defaultRefusalPatterns()); }

/// All teacher calls go through this interface.
class LlmGateway {
public:
    virtual ~LlmGateway() = default;
    virtual LlmResponse complete(const LlmRequest& req) = 0;
};

struct GatewayConfig {
    std::string endpoint = "http://127.0.0.1:8000/v1/chat/completions";
    std::string api_key;
    std::string model = "meta-llama/Meta-Llama-3-70B-Instruct";
    int retry_limit = 3; // retries after the first attempt
    int backoff_ms = 500;
    int parallelism = 4;
    int timeout_s = 120;
    std::string cache_dir; // empty disables caching
    std::vector<std::string> refusal_patterns = defaultRefusalPatterns();
};

inline std::string cacheKey(const LlmRequest& req) {
    const Json key = Json::array({req.model, req.prompt, req.temperature, req.max_output_tokens});
    return detail::sha256Hex(key.dump());
}

/// One JSON file per key hash. Writes go through a rename so readers never
/// observe partial files; concurrent writers of one key are last-writer-wins.
class ResponseCache {
public:
    explicit ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) {
        std::filesystem::create_directories(dir_);
    }

    [[nodiscard]] std::optional<LlmResponse> get(const std::string& key) const {
        std::ifstream in(pathFor(key), std::ios::binary);
        if (!in) return std::nullopt;
        try {
            const auto j = Json::parse(in);
            LlmResponse r;
            r.text = j.at("text").get<std::string>();
            const auto status = j.at("status").get<std::string>();
            if (status == "ok") r.status = ResponseStatus::ok;
            else if (status == "refusal") r.status = ResponseStatus::refusal;
            else return std::nullopt;
            r.cache_hit = true;
            return r;
        } catch (const Json::exception&) {
            return std::nullopt;
        }
    }

    void put(const std::string& key, const LlmRequest& req, const LlmResponse& resp) const {
        const Json j{{"request",
                      {{"model", req.model},
                       {"prompt", req.prompt},
                       {"temperature", req.temperature},
                       {"max_output_tokens", req.max_output_tokens}}},
                     {"status", toString(resp.status)},
                     {"text", resp.text}};
        std::ostringstream suffix;
        suffix << ".tmp" << std::hash<std::thread::id>{}(std::this_thread::get_id());
        const auto final_path = pathFor(key);
        auto tmp = final_path;
        tmp += suffix.str();
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            if (!out) throw DataError("cannot write cache entry " + tmp.string());
            out << j.dump(2) << '\n';
        }
        std::filesystem::rename(tmp, final_path);
    }

private:
    [[nodiscard]] std::filesystem::path pathFor(const std::string& key) const { return dir_ / (key + ".json"); }

    std::filesystem::path dir_;
};

namespace detail {

struct ParsedUrl {
    std::string origin; // scheme://host[:port]
    std::string path;
};

inline ParsedUrl parseUrl(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ConfigError("endpoint URL needs a scheme: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {url, "/"};
    return {url.substr(0, path_start), url.substr(path_start)};
}

inline bool retryableStatus(int status) {
    return status == 408 || status == 425 || status == 429 || status >= 500;
}

} // namespace detail

class HttpGateway : public LlmGateway {
public:
    explicit HttpGateway(GatewayConfig cfg)
        : cfg_(std::move(cfg)), url_(detail::parseUrl(cfg_.endpoint)),
          slots_(std::make_unique<std::counting_semaphore<256>>(std::clamp(cfg_.parallelism, 1, 256))) {
        if (cfg_.retry_limit < 0) throw ConfigError("retry_limit must be >= 0");
        if (!cfg_.cache_dir.empty()) cache_.emplace(cfg_.cache_dir);
    }

    LlmResponse complete(const LlmRequest& req) override {
        req.validate();
        const auto started = std::chrono::steady_clock::now();
        const auto key = cacheKey(req);
        if (cache_) {
            if (auto hit = cache_->get(key)) {
                hit->latency_ms = elapsedMs(started);
                return *hit;
            }
        }

        LlmResponse resp;
        {
            slots_->acquire();
            struct Release {
                std::counting_semaphore<256>* s;
                ~Release() { s->release(); }
            } release{slots_.get()};
            resp = send(req);
        }
        resp.latency_ms = elapsedMs(started);
        if (resp.status != ResponseStatus::transport_error && cache_) cache_->put(key, req, resp);
        return resp;
    }

    [[nodiscard]] const GatewayConfig& config() const { return cfg_; }

private:
    static double elapsedMs(std::chrono::steady_clock::time_point since) {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
    }

    LlmResponse send(const LlmRequest& req) {
        const Json body{{"model", req.model},
                        {"messages", Json::array({Json{{"role", "user"}, {"content", req.prompt}}})},
                        {"temperature", req.temperature},
                        {"max_tokens", req.max_output_tokens}};
        const auto payload = body.dump();

        httplib::Client client(url_.origin);
        client.set_connection_timeout(std::chrono::seconds(cfg_.timeout_s));
        client.set_read_timeout(std::chrono::seconds(cfg_.timeout_s));
        client.set_write_timeout(std::chrono::seconds(cfg_.timeout_s));
        httplib::Headers headers;
        if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);

        LlmResponse resp;
        for (int attempt = 0; attempt <= cfg_.retry_limit; ++attempt) {
            if (attempt > 0) {
                std::this_thread::sleep_for(std::chrono::milliseconds(cfg_.backoff_ms) * (1LL << (attempt - 1)));
            }
            auto res = client.Post(url_.path, headers, payload, "application/json");
            if (!res) {
                resp.error = "transport failure: " + httplib::to_string(res.error());
                continue;
            }
            resp.http_status = res->status;
            if (res->status >= 200 && res->status < 300) return parseCompletion(res->body, res->status);
            resp.error = "HTTP " + std::to_string(res->status);
            if (!detail::retryableStatus(res->status)) break;
        }
        resp.status = ResponseStatus::transport_error;
        return resp;
    }

    LlmResponse parseCompletion(const std::string& body, int http_status) const {
        LlmResponse resp;
        resp.http_status = http_status;
        try {
            const auto j = Json::parse(body);
            resp.text = j.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const Json::exception& e) {
            resp.status = ResponseStatus::transport_error;
            resp.error = std::string("malformed completion body: ") + e.what();
            return resp;
        }
        if (detail::trim(resp.text).empty()) {
            resp.status = ResponseStatus::transport_error;
            resp.error = "empty completion";
        } else {
            resp.status = detectRefusal(resp.text, cfg_.refusal_patterns) ? ResponseStatus::refusal
                                                                          : ResponseStatus::ok;
        }
        return resp;
    }

    GatewayConfig cfg_;
    detail::ParsedUrl url_;
    std::unique_ptr<std::counting_semaphore<256>> slots_;
    std::optional<ResponseCache> cache_;
};

} // namespace mentalmad
