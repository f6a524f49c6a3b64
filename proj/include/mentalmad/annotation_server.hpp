#pragma once

// HTTP JSON API over an AnnotationStore. Every response body is a JSON
// object carrying "schema_version".

#include "mentalmad/annotation.hpp"
#include "mentalmad/corpus.hpp"

#include <httplib.h>

#include <string>

namespace mentalmad {

class AnnotationServer {
public:
    explicit AnnotationServer(AnnotationStore& store) : store_(store) { routes(); }

    /// Binds and serves until stop(). Returns false if the bind failed.
    bool listen(const std::string& host, int port) { return server_.listen(host, port); }

    /// Binds to a free port on host and returns it, or -1.
    int bindAnyPort(const std::string& host) { return server_.bind_to_any_port(host); }
    bool bindPort(const std::string& host, int port) { return server_.bind_to_port(host, port); }
    bool listenAfterBind() { return server_.listen_after_bind(); }

    void stop() { server_.stop(); }
    void waitUntilReady() const { server_.wait_until_ready(); }
    [[nodiscard]] bool isRunning() const { return server_.is_running(); }

private:
    static void reply(httplib::Response& res, int status, Json body) {
        Json out{{"schema_version", kAnnotationSchemaVersion}};
        for (auto& [k, v] : body.items()) out[k] = std::move(v);
        res.status = status;
        res.set_content(out.dump(), "application/json");
    }

    static void fail(httplib::Response& res, int status, const std::string& message) {
        reply(res, status, Json{{"error", message}});
    }

    void routes() {
        server_.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                     {"Access-Control-Allow-Headers", "Content-Type"},
                                     {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
        server_.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

        server_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
            try {
                std::rethrow_exception(ep);
            } catch (const std::exception& e) {
                fail(res, 500, e.what());
            } catch (...) {
                fail(res, 500, "internal error");
            }
        });

        server_.Get(R"(/api/annotators/([^/]+)/next)", [this](const httplib::Request& req, httplib::Response& res) {
            const std::string id = req.matches[1];
            try {
                const auto a = store_.annotator(id);
                const auto next = store_.next(id);
                Json body{{"annotator_id", id},
                          {"mode", a.qualified ? "annotation" : "qualification"},
                          {"qualified", a.qualified},
                          {"guideline", kAnnotationGuideline},
                          {"remaining", store_.remaining(id)},
                          {"dialogue", nullptr}};
                if (next) {
                    const auto* d = store_.dialogue(next->first);
                    body["dialogue"] = toJson(d->dialogue);
                }
                reply(res, 200, std::move(body));
            } catch (const DataError& e) {
                fail(res, 404, e.what());
            }
        });

        server_.Post("/api/annotations", [this](const httplib::Request& req, httplib::Response& res) {
            AnnotationRecord rec;
            try {
                rec = annotationFromJson(Json::parse(req.body));
            } catch (const Json::exception& e) {
                return fail(res, 400, std::string("invalid JSON: ") + e.what());
            } catch (const DataError& e) {
                return fail(res, 400, e.what());
            }
            if (!store_.dialogue(rec.dialogue_id)) return fail(res, 404, "unknown dialogue " + rec.dialogue_id);
            const auto r = store_.submit(rec);
            switch (r.status) {
            case SubmitStatus::stored: return reply(res, 201, Json{{"status", "stored"}, {"record", toJson(r.record)}});
            case SubmitStatus::duplicate: return fail(res, 409, r.message);
            case SubmitStatus::unassigned:
            case SubmitStatus::unqualified: return fail(res, 403, r.message);
            case SubmitStatus::invalid: return fail(res, 400, r.message);
            }
        });

        server_.Get(R"(/api/consensus/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            const std::string id = req.matches[1];
            if (!store_.dialogue(id)) return fail(res, 404, "unknown dialogue " + id);
            const auto n = store_.voteCount(id);
            if (n != static_cast<std::size_t>(kRatersPerItem)) {
                return reply(res, 409, Json{{"error", "incomplete votes"}, {"dialogue_id", id}, {"n_votes", n}});
            }
            reply(res, 200, toJson(store_.consensus(id)));
        });

        server_.Get("/api/agreement",
                    [this](const httplib::Request&, httplib::Response& res) { reply(res, 200, toJson(store_.agreement())); });

        server_.Get("/api/export", [this](const httplib::Request& req, httplib::Response& res) {
            ExportPolicy policy;
            try {
                policy = parseExportPolicy(req.has_param("policy") ? req.get_param_value("policy") : "majority");
            } catch (const ConfigError& e) {
                return fail(res, 400, e.what());
            }
            const auto d = store_.exportDataset(policy);
            Json items = Json::array();
            for (const auto& it : d.items) items.push_back(toJson(it));
            reply(res, 200,
                  Json{{"policy", policy == ExportPolicy::majority ? "majority" : "unanimous"},
                       {"count", d.items.size()},
                       {"items", std::move(items)}});
        });

        server_.Get(R"(/api/qualification/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            try {
                reply(res, 200, toJson(store_.annotator(req.matches[1])));
            } catch (const DataError& e) {
                fail(res, 404, e.what());
            }
        });

        server_.Get("/api/progress", [this](const httplib::Request&, httplib::Response& res) {
            Json groups = Json::array();
            for (const auto& g : store_.progress()) {
                groups.push_back(Json{{"group", g.group},
                                      {"dialogues", g.dialogues},
                                      {"complete", g.complete},
                                      {"votes_by_annotator", g.votes_by_annotator}});
            }
            reply(res, 200, Json{{"groups", std::move(groups)}});
        });
    }

    AnnotationStore& store_;
    httplib::Server server_;
};

} // namespace mentalmad
