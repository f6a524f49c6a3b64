#include "mentalmad/annotation_server.hpp"
#include "support/stubs.hpp"

#include <gtest/gtest.h>
#include <httplib.h>

#include <thread>

using namespace mentalmad;
using namespace testing_support;

namespace {

Json vote(const std::string& d, const std::string& a, int label, int confidence = 3) {
    return Json{{"dialogue_id", d}, {"annotator_id", a}, {"label", label}, {"confidence", confidence}};
}

class ServerTest : public ::testing::Test {
protected:
    void start(std::optional<Dataset> qualification = std::nullopt, double accuracy = 0.9) {
        StoreConfig c;
        c.pool.name = "pool";
        for (int i = 0; i < 4; ++i) c.pool.items.push_back(labeled("x" + std::to_string(100 + i), std::nullopt));
        for (int g = 1; g <= 2; ++g)
            for (int k = 0; k < 3; ++k)
                c.annotators.push_back({"g" + std::to_string(g) + "a" + std::to_string(k), g,
                                        qualification ? std::nullopt : std::optional<double>(accuracy)});
        c.qualification_set = std::move(qualification);
        c.log_path = tmp.file("votes.jsonl");
        store = std::make_unique<AnnotationStore>(std::move(c));
        server = std::make_unique<AnnotationServer>(*store);
        port = server->bindAnyPort("127.0.0.1");
        ASSERT_GT(port, 0);
        thread = std::thread([this] { server->listenAfterBind(); });
        server->waitUntilReady();
        client = std::make_unique<httplib::Client>("127.0.0.1", port);
    }

    void TearDown() override {
        if (server) server->stop();
        if (thread.joinable()) thread.join();
    }

    // Every reply is JSON and carries the schema version.
    Json body(const httplib::Result& r) {
        EXPECT_TRUE(r) << "no response";
        if (!r) return {};
        auto j = Json::parse(r->body);
        EXPECT_EQ(j.value("schema_version", -1), kAnnotationSchemaVersion) << r->body;
        return j;
    }

    httplib::Result post(const Json& j) { return client->Post("/api/annotations", j.dump(), "application/json"); }

    std::string firstOf(int group) { return store->assignment().dialogues.at(group).front(); }

    TempDir tmp;
    std::unique_ptr<AnnotationStore> store;
    std::unique_ptr<AnnotationServer> server;
    std::unique_ptr<httplib::Client> client;
    std::thread thread;
    int port = 0;
};

} // namespace

TEST_F(ServerTest, NextServesTheFirstAssignedDialogue) {
    start();
    auto r = client->Get("/api/annotators/g1a0/next");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 200);
    EXPECT_EQ(r->get_header_value("Access-Control-Allow-Origin"), "*");
    const auto j = body(r);
    EXPECT_EQ(j.at("annotator_id"), "g1a0");
    EXPECT_EQ(j.at("mode"), "annotation");
    EXPECT_EQ(j.at("qualified"), true);
    EXPECT_EQ(j.at("remaining"), 2);
    EXPECT_EQ(j.at("guideline"), kAnnotationGuideline);
    EXPECT_EQ(j.at("dialogue").at("id"), firstOf(1));

    r = client->Get("/api/annotators/nobody/next");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 404);
    EXPECT_TRUE(body(r).contains("error"));
}

TEST_F(ServerTest, NextIsNullOnceEverythingIsVoted) {
    start();
    for (const auto& id : store->assignment().dialogues.at(1)) ASSERT_EQ(post(vote(id, "g1a0", 1))->status, 201);
    const auto j = body(client->Get("/api/annotators/g1a0/next"));
    EXPECT_TRUE(j.at("dialogue").is_null());
    EXPECT_EQ(j.at("remaining"), 0);
}

TEST_F(ServerTest, PostStatusCodes) {
    start();
    const auto id = firstOf(1);
    auto r = post(vote(id, "g1a0", 1, 4));
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 201);
    auto j = body(r);
    EXPECT_EQ(j.at("status"), "stored");
    EXPECT_EQ(j.at("record").at("label"), 1);
    EXPECT_FALSE(j.at("record").at("timestamp").get<std::string>().empty());

    EXPECT_EQ(post(vote(id, "g1a0", 0))->status, 409);
    EXPECT_EQ(post(vote(firstOf(2), "g1a0", 1))->status, 403);
    EXPECT_EQ(post(vote(id, "g1a1", 1, 9))->status, 400);
    EXPECT_EQ(post(vote(id, "g1a1", 2))->status, 400);
    EXPECT_EQ(post(vote("missing", "g1a1", 1))->status, 404);
    r = client->Post("/api/annotations", "{not json", "application/json");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 400);
    body(r);
    EXPECT_EQ(store->voteCount(id), 1u);
}

TEST_F(ServerTest, ConsensusNeedsAllThreeVotes) {
    start();
    const auto id = firstOf(1);
    post(vote(id, "g1a0", 1, 5));
    post(vote(id, "g1a1", 1, 2));
    auto r = client->Get("/api/consensus/" + id);
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 409);
    auto j = body(r);
    EXPECT_EQ(j.at("error"), "incomplete votes");
    EXPECT_EQ(j.at("n_votes"), 2);

    post(vote(id, "g1a2", 0, 3));
    r = client->Get("/api/consensus/" + id);
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 200);
    j = body(r);
    EXPECT_EQ(j.at("majority_label"), 1);
    EXPECT_EQ(j.at("unanimous"), false);
    EXPECT_NEAR(j.at("v_score").get<double>(), 0.7, 1e-12);

    EXPECT_EQ(client->Get("/api/consensus/missing")->status, 404);
}

TEST_F(ServerTest, AgreementExportAndProgress) {
    start();
    const auto& g1 = store->assignment().dialogues.at(1);
    for (const char* a : {"g1a0", "g1a1", "g1a2"}) post(vote(g1[0], a, 1));
    post(vote(g1[1], "g1a0", 0));
    post(vote(g1[1], "g1a1", 0));
    post(vote(g1[1], "g1a2", 1));

    auto j = body(client->Get("/api/agreement"));
    EXPECT_EQ(j.at("n_items"), 2);
    EXPECT_EQ(j.at("n_raters_per_item"), 3);

    j = body(client->Get("/api/export?policy=majority"));
    EXPECT_EQ(j.at("policy"), "majority");
    EXPECT_EQ(j.at("count"), 2);
    EXPECT_EQ(j.at("items").size(), 2u);
    j = body(client->Get("/api/export"));
    EXPECT_EQ(j.at("policy"), "majority");
    j = body(client->Get("/api/export?policy=unanimous"));
    EXPECT_EQ(j.at("count"), 1);
    EXPECT_EQ(j.at("items").at(0).at("label"), 1);
    auto r = client->Get("/api/export?policy=loudest");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 400);
    body(r);

    j = body(client->Get("/api/progress"));
    ASSERT_EQ(j.at("groups").size(), 2u);
    EXPECT_EQ(j.at("groups").at(0).at("group"), 1);
    EXPECT_EQ(j.at("groups").at(0).at("dialogues"), 2);
    EXPECT_EQ(j.at("groups").at(0).at("complete"), 2);
    EXPECT_EQ(j.at("groups").at(1).at("complete"), 0);
}

TEST_F(ServerTest, QualificationRoutesAndGating) {
    Dataset q;
    for (int i = 0; i < 20; ++i) q.items.push_back(labeled("q" + std::to_string(10 + i), Label::yes));
    start(q);
    auto j = body(client->Get("/api/annotators/g1a0/next"));
    EXPECT_EQ(j.at("mode"), "qualification");
    EXPECT_EQ(j.at("qualified"), false);
    EXPECT_EQ(j.at("dialogue").at("id"), "q10");

    EXPECT_EQ(post(vote(firstOf(1), "g1a0", 1))->status, 403);
    for (int i = 0; i < 20; ++i) ASSERT_EQ(post(vote("q" + std::to_string(10 + i), "g1a0", i < 17 ? 1 : 0))->status, 201);

    j = body(client->Get("/api/qualification/g1a0"));
    EXPECT_EQ(j.at("qualified"), true);
    EXPECT_NEAR(j.at("qualification_accuracy").get<double>(), 0.85, 1e-12);
    j = body(client->Get("/api/annotators/g1a0/next"));
    EXPECT_EQ(j.at("mode"), "annotation");
    EXPECT_EQ(client->Get("/api/qualification/nobody")->status, 404);
}

TEST_F(ServerTest, PreflightAllowsBrowserClients) {
    start();
    auto r = client->Options("/api/annotations");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 204);
    EXPECT_EQ(r->get_header_value("Access-Control-Allow-Origin"), "*");
    EXPECT_NE(r->get_header_value("Access-Control-Allow-Methods").find("POST"), std::string::npos);
}

TEST_F(ServerTest, VotesSurviveARestart) {
    start();
    const auto id = firstOf(1);
    ASSERT_EQ(post(vote(id, "g1a0", 1))->status, 201);
    server->stop();
    thread.join();
    client.reset();
    server.reset();
    store.reset();
    start();
    EXPECT_EQ(post(vote(id, "g1a0", 1))->status, 409);
}
