#include "mentalmad/cli.hpp"
#include "support/stubs.hpp"

#include <gtest/gtest.h>
#include <httplib.h>

#include <atomic>
#include <map>
#include <sstream>

using namespace mentalmad;
using namespace testing_support;

namespace {

struct Outcome {
    int code;
    std::string out;
    std::string err;
};

/// Forwards to a shared ScriptedGateway so the test can inspect calls after
/// the CLI has dropped its handle.
class SharedGateway : public LlmGateway {
public:
    explicit SharedGateway(std::shared_ptr<ScriptedGateway> g) : g_(std::move(g)) {}
    LlmResponse complete(const LlmRequest& req) override { return g_->complete(req); }

private:
    std::shared_ptr<ScriptedGateway> g_;
};

class CliTest : public ::testing::Test {
protected:
    CliTest() {
        teacher = std::make_shared<ScriptedGateway>([](const LlmRequest& r, std::size_t) {
            if (r.prompt.find("### Hint:") != std::string::npos) return okReply("Feedback: Look again.");
            if (r.prompt.find("Rewrite") != std::string::npos || r.prompt.find("Person1:") != std::string::npos)
                return okReply(kValidChild);
            return okReply("Rationale: Because of the wording.");
        });
        services.gateway = [this](const GatewayConfig& c) {
            ++gateways_built;
            last_gateway = c;
            return std::unique_ptr<LlmGateway>(new SharedGateway(teacher));
        };
        services.env = [this](const std::string& k) -> std::optional<std::string> {
            auto f = env.find(k);
            if (f == env.end()) return std::nullopt;
            return f->second;
        };
    }

    Outcome run(std::vector<std::string> args) {
        std::ostringstream out, err;
        const int code = cli::run(args, services, out, err);
        return {code, out.str(), err.str()};
    }

    std::string path(const std::string& name) const { return tmp.file(name); }

    // Ingested and split copy of the 60-dialogue fixture corpus.
    std::string preparedCorpus() {
        EXPECT_EQ(run({"ingest", "--input", fixture("corpus_raw.jsonl"), "--output", path("c.jsonl"), "--anonymize"})
                      .code,
                  0);
        EXPECT_EQ(run({"split", "--input", path("c.jsonl"), "--output", path("s.jsonl")}).code, 0);
        return path("s.jsonl");
    }

    static std::string mockTrainer(const std::string& env_prefix = "") {
        return env_prefix + (env_prefix.empty() ? "" : " ") + detail::shellQuote(MOCK_TRAINER_PATH);
    }

    TempDir tmp;
    std::shared_ptr<ScriptedGateway> teacher;
    cli::Services services;
    std::map<std::string, std::string> env;
    std::atomic<int> gateways_built{0};
    GatewayConfig last_gateway;
};

} // namespace

TEST_F(CliTest, HelpAndUsageErrors) {
    auto r = run({"--help"});
    EXPECT_EQ(r.code, 0);
    for (const char* sub : {"ingest", "prefilter", "augment", "supervise", "manifests", "distill", "predict",
                            "evaluate", "annotate-serve"})
        EXPECT_NE(r.out.find(sub), std::string::npos) << sub;

    r = run({});
    EXPECT_EQ(r.code, 2);
    EXPECT_EQ(r.err.rfind("error[config]", 0), 0u) << r.err;
    EXPECT_EQ(run({"ingest", "--input", "x"}).code, 2);
    EXPECT_EQ(run({"frobnicate"}).code, 2);
}

TEST_F(CliTest, MissingInputIsADataError) {
    const auto r = run({"stats", "--input", path("absent.jsonl")});
    EXPECT_EQ(r.code, 4);
    EXPECT_EQ(r.err.rfind("error[data]", 0), 0u) << r.err;
}

TEST_F(CliTest, IngestReportsRejectedLines) {
    const auto r = run({"ingest", "--input", fixture("ingest_mixed.jsonl"), "--output", path("m.jsonl"), "--errors",
                        path("err.jsonl"), "--anonymize"});
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("ingested 9 dialogues, 1 rejected lines"), std::string::npos) << r.out;
    EXPECT_NE(r.err.find("warning[data]"), std::string::npos);
    EXPECT_EQ(loadDataset(path("m.jsonl")).items.size(), 9u);
    EXPECT_NE(readFile(path("err.jsonl")).find("\"line\":3"), std::string::npos);
}

TEST_F(CliTest, SplitAndStatsAreDeterministic) {
    const auto first = readFile(preparedCorpus());
    const auto again = readFile(preparedCorpus());
    EXPECT_EQ(first, again);
    ASSERT_EQ(run({"split", "--input", path("c.jsonl"), "--output", path("s7.jsonl"), "--seed", "7"}).code, 0);
    EXPECT_NE(readFile(path("s7.jsonl")), first);

    const auto r = run({"stats", "--input", path("s.jsonl"), "--split", "train"});
    EXPECT_EQ(r.code, 0);
    const auto stats = Json::parse(r.out);
    EXPECT_EQ(stats.at("sample_size"), 36);
    EXPECT_EQ(stats.at("yes_count"), 24);
}

TEST_F(CliTest, DryRunAugmentMakesNoGatewayCalls) {
    const auto in = preparedCorpus();
    const auto r = run({"--dry-run", "augment", "--input", in, "--output", path("a.jsonl"), "--records",
                        path("ar.jsonl"), "--target-plus", "10"});
    EXPECT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("target_plus=10 target_minus=5"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("gateway calls: 0"), std::string::npos);
    EXPECT_EQ(gateways_built.load(), 0);
    EXPECT_EQ(teacher->calls(), 0u);
    EXPECT_FALSE(std::filesystem::exists(path("a.jsonl")));
}

TEST_F(CliTest, SeedPrecedenceIsFlagThenEnvThenFile) {
    const auto in = preparedCorpus();
    std::ofstream(path("cfg.toml")) << "seed = 5\n";
    const std::vector<std::string> tail{"augment", "--input", in, "--output", "o", "--records", "r", "--target-plus",
                                        "2"};
    auto with = [&](std::vector<std::string> head) {
        head.insert(head.end(), tail.begin(), tail.end());
        return run(head).out;
    };
    EXPECT_NE(with({"--dry-run"}).find("seed=42"), std::string::npos);
    EXPECT_NE(with({"--dry-run", "--config", path("cfg.toml")}).find("seed=5"), std::string::npos);
    env["MENTALMAD_SEED"] = "6";
    EXPECT_NE(with({"--dry-run", "--config", path("cfg.toml")}).find("seed=6"), std::string::npos);
    EXPECT_NE(with({"--dry-run", "--config", path("cfg.toml"), "--seed", "9"}).find("seed=9"), std::string::npos);
}

TEST_F(CliTest, AugmentWritesChildrenAndRecords) {
    const auto in = preparedCorpus();
    env["MENTALMAD_GATEWAY_MODEL"] = "teacher-x";
    const auto r = run({"augment", "--input", in, "--output", path("a.jsonl"), "--records", path("ar.jsonl"),
                        "--target-plus", "4", "--target-minus", "2"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(last_gateway.model, "teacher-x");
    EXPECT_EQ(teacher->calls(), 6u);
    const auto out = loadDataset(path("a.jsonl"));
    EXPECT_EQ(out.items.size(), 66u);
    std::size_t augmented = 0;
    for (const auto& it : out.items) augmented += it.provenance.isAugmented();
    EXPECT_EQ(augmented, 6u);
}

TEST_F(CliTest, UpstreamAndConfigFailuresMapToExitCodes) {
    const auto in = preparedCorpus();
    teacher = std::make_shared<ScriptedGateway>([](const LlmRequest&, std::size_t) { return transportFailure(); });
    auto r = run({"augment", "--input", in, "--output", path("a.jsonl"), "--records", path("ar.jsonl"),
                  "--target-plus", "2"});
    EXPECT_EQ(r.code, 3);
    EXPECT_EQ(r.err.rfind("error[upstream]", 0), 0u) << r.err;

    env["MENTALMAD_GATEWAY_PARALLELISM"] = "0";
    r = run({"augment", "--input", in, "--output", path("a.jsonl"), "--records", path("ar.jsonl"), "--target-plus",
             "2"});
    EXPECT_EQ(r.code, 2);
    env["MENTALMAD_GATEWAY_PARALLELISM"] = "many";
    EXPECT_EQ(run({"augment", "--input", in, "--output", path("a.jsonl"), "--records", path("ar.jsonl"),
                   "--target-plus", "2"})
                  .code,
              2);
}

TEST_F(CliTest, PrefilterKeyModeNeedsNoGateway) {
    const auto in = preparedCorpus();
    std::ofstream(path("phrases.txt")) << "put up with you\nit was a joke\n";
    const auto r = run({"prefilter", "--input", in, "--output", path("flags.jsonl"), "--key-phrases",
                        path("phrases.txt")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(gateways_built.load(), 0);
    EXPECT_EQ(loadFlags(path("flags.jsonl")).size(), 60u);
    ASSERT_EQ(run({"pool", "--input", in, "--flags", path("flags.jsonl"), "--extra", "3", "--output",
                   path("pool.jsonl")})
                  .code,
              0);
    EXPECT_FALSE(loadDataset(path("pool.jsonl")).items.empty());
    EXPECT_EQ(run({"prefilter", "--input", in, "--output", path("f2.jsonl"), "--mode", "fuzzy"}).code, 2);
}

TEST_F(CliTest, SuperviseDistillPredictEvaluate) {
    const auto in = preparedCorpus();
    auto r = run({"supervise", "--input", in, "--split", "train", "--output", path("sup.jsonl")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("wrote 108 records, 0 gaps"), std::string::npos) << r.out;

    r = run({"manifests", "--input", path("sup.jsonl"), "--out-dir", path("man")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("phase 1: 108 records, tasks 1 2 3"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("phase 3: 36 records, tasks 3"), std::string::npos) << r.out;
    const auto m1 = readFile(path("man/phase1.jsonl"));
    ASSERT_EQ(run({"manifests", "--input", path("sup.jsonl"), "--out-dir", path("man")}).code, 0);
    EXPECT_EQ(readFile(path("man/phase1.jsonl")), m1);

    r = run({"distill", "--manifests", path("man"), "--out", path("run"), "--trainer-cmd", mockTrainer()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto report = Json::parse(readFile(path("run/distill_report.json")));
    EXPECT_EQ(report.at("completed"), true);
    ASSERT_EQ(report.at("reports").size(), 3u);
    const auto ckpt = report.at("reports").at(2).at("checkpoint_ref").get<std::string>();

    r = run({"predict", "--input", in, "--split", "test", "--checkpoint", ckpt, "--output", path("pred.jsonl"),
             "--trainer-cmd", mockTrainer()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("predicted 12 dialogues"), std::string::npos) << r.out;

    r = run({"evaluate", "--gold", in, "--split", "test", "--predictions", path("pred.jsonl"), "--report",
             path("eval.json")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.out.rfind("Model", 0), 0u);
    const auto cm = Json::parse(readFile(path("eval.json"))).at("rows").at(0).at("metrics").at("confusion");
    std::size_t positives = 0;
    for (const auto& it : filterSplit(loadDataset(in), Split::test).items) positives += *it.label == Label::yes;
    EXPECT_EQ(cm.at("tp").get<std::size_t>() + cm.at("fn").get<std::size_t>(), positives);
    EXPECT_EQ(cm.at("tn").get<std::size_t>() + cm.at("fp").get<std::size_t>(), 12 - positives);
}

TEST_F(CliTest, DistillFailureIsUpstreamAndLeavesAReport) {
    const auto in = preparedCorpus();
    ASSERT_EQ(run({"supervise", "--input", in, "--split", "train", "--output", path("sup.jsonl")}).code, 0);
    ASSERT_EQ(run({"manifests", "--input", path("sup.jsonl"), "--out-dir", path("man")}).code, 0);
    const auto r = run({"distill", "--manifests", path("man"), "--out", path("run"), "--trainer-cmd",
                        mockTrainer("MOCK_TRAINER_FAIL_PHASE=2") + " 2>/dev/null"});
    EXPECT_EQ(r.code, 3);
    const auto report = Json::parse(readFile(path("run/distill_report.json")));
    EXPECT_EQ(report.at("completed"), false);
    EXPECT_EQ(report.at("failed_phase"), 2);
    EXPECT_EQ(run({"distill", "--manifests", path("man"), "--out", path("run2")}).code, 2);
}

TEST_F(CliTest, EvaluateMatricesWithRelativeImprovement) {
    std::ofstream(path("cm.json")) << R"({"SFT": [80, 100, 40, 363], "Ours": [90, 90, 52, 351]})";
    const auto r = run({"evaluate", "--matrices", path("cm.json"), "--ours", "Ours", "--baseline", "SFT", "--report",
                        path("rep.json")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("Ours     75.6    79.6    87.1    69.5    74.8"), std::string::npos) << r.out;
    const auto rep = Json::parse(readFile(path("rep.json")));
    EXPECT_EQ(rep.at("schema_version"), 1);
    ASSERT_EQ(rep.at("rows").size(), 2u);
    EXPECT_EQ(rep.at("relative_improvement").at("best_baseline").at("accuracy"), "SFT");
    EXPECT_TRUE(rep.at("relative_improvement").at("percent").contains("f1_macro"));

    EXPECT_EQ(run({"evaluate", "--matrices", path("cm.json"), "--ours", "Ours"}).code, 2);
    EXPECT_EQ(run({"evaluate", "--matrices", path("cm.json"), "--ours", "Nope", "--baseline", "SFT"}).code, 2);
    EXPECT_EQ(run({"evaluate"}).code, 2);
    std::ofstream(path("bad.json")) << "[1, 2";
    EXPECT_EQ(run({"evaluate", "--matrices", path("bad.json")}).code, 4);
}

TEST_F(CliTest, KappaFromVoteLog) {
    std::ofstream log(path("votes.jsonl"));
    const std::vector<std::array<int, 3>> items{{1, 1, 1}, {0, 0, 0}, {1, 1, 0}, {1, 0, 0}};
    for (std::size_t i = 0; i < items.size(); ++i)
        for (int a = 0; a < 3; ++a)
            log << Json{{"dialogue_id", "d" + std::to_string(i)},
                        {"annotator_id", "a" + std::to_string(a)},
                        {"label", items[i][static_cast<std::size_t>(a)]},
                        {"confidence", 3}}
                       .dump()
                << '\n';
    log << R"({"kind":"qualification","dialogue_id":"q","annotator_id":"a0","label":1,"confidence":3})" << '\n';
    log << R"({"dialogue_id":"d9","annotator_id":"a0","label":1,"confidence":3})" << '\n';
    log.close();
    const auto r = run({"kappa", "--votes", path("votes.jsonl"), "--consensus", path("cons.jsonl")});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = Json::parse(r.out);
    EXPECT_NEAR(j.at("fleiss_kappa").get<double>(), 1.0 / 3.0, 1e-12);
    EXPECT_EQ(j.at("incomplete_items"), 1);
    EXPECT_EQ(j.at("n_items"), 4);
}

TEST_F(CliTest, AnnotateServeUsesTheHook) {
    Dataset pool;
    for (int i = 0; i < 4; ++i) pool.items.push_back(labeled("x" + std::to_string(i), std::nullopt));
    writeDataset(pool, path("pool.jsonl"));
    Json roster = Json::array();
    for (int k = 0; k < 3; ++k) roster.push_back(Json{{"id", "a" + std::to_string(k)}, {"group", 1}, {"qualification_accuracy", 0.9}});
    std::ofstream(path("roster.json")) << roster.dump();

    int status = 0;
    Json next;
    std::thread client;
    services.on_serving = [&](AnnotationServer& server, int port) {
        client = std::thread([&server, port, &status, &next] {
            server.waitUntilReady();
            httplib::Client c("127.0.0.1", port);
            if (auto r = c.Get("/api/annotators/a0/next")) {
                status = r->status;
                next = Json::parse(r->body);
            }
            server.stop();
        });
    };
    const auto r = run({"annotate-serve", "--pool", path("pool.jsonl"), "--annotators", path("roster.json"), "--log",
                        path("log/votes.jsonl"), "--port", "0"});
    if (client.joinable()) client.join();
    EXPECT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("serving on 127.0.0.1:"), std::string::npos);
    EXPECT_EQ(status, 200);
    EXPECT_EQ(next.at("remaining"), 4);

    std::ofstream(path("bad_roster.json")) << R"([{"id": "a0"}])";
    EXPECT_EQ(run({"annotate-serve", "--pool", path("pool.jsonl"), "--annotators", path("bad_roster.json"), "--log",
                   path("v.jsonl"), "--port", "0"})
                  .code,
              2);
}
