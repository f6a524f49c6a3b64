#include "mentalmad/annotation.hpp"
#include "support/stubs.hpp"

#include <gtest/gtest.h>

#include <random>
#include <thread>

using namespace mentalmad;
using namespace testing_support;

namespace {

AnnotationRecord vote(std::string d, std::string a, int label, int confidence) {
    return {std::move(d), std::move(a), labelFromInt(label), confidence, "2024-01-01T00:00:00Z"};
}

std::vector<AnnotatorSpec> roster(int groups, double accuracy = 0.9) {
    std::vector<AnnotatorSpec> out;
    for (int g = 1; g <= groups; ++g)
        for (int k = 0; k < 3; ++k) out.push_back({"g" + std::to_string(g) + "a" + std::to_string(k), g, accuracy});
    return out;
}

Dataset pool(std::size_t n) {
    Dataset d;
    d.name = "pool";
    for (std::size_t i = 0; i < n; ++i) d.items.push_back(labeled("x" + std::to_string(100 + i), std::nullopt));
    return d;
}

// Kappa from its pairwise definition: the share of agreeing ordered rater
// pairs per item against the agreement expected from pooled marginals.
double pairwiseKappa(const std::vector<std::vector<int>>& ratings) {
    double agree_pairs = 0, pairs = 0;
    std::array<double, 2> marg{};
    double votes = 0;
    for (const auto& item : ratings) {
        for (std::size_t a = 0; a < item.size(); ++a) {
            marg[item[a]] += 1;
            votes += 1;
            for (std::size_t b = 0; b < item.size(); ++b) {
                if (a == b) continue;
                pairs += 1;
                agree_pairs += item[a] == item[b];
            }
        }
    }
    const double po = agree_pairs / pairs;
    const double pe = (marg[0] / votes) * (marg[0] / votes) + (marg[1] / votes) * (marg[1] / votes);
    return (po - pe) / (1 - pe);
}

} // namespace

TEST(Qualification, ThresholdIsInclusive) {
    EXPECT_TRUE(meetsQualification(85, 100));
    EXPECT_FALSE(meetsQualification(84, 100));
    EXPECT_TRUE(meetsQualification(17, 20));
    EXPECT_FALSE(meetsQualification(16, 20));
    EXPECT_FALSE(meetsQualification(0, 0));
}

TEST(Assignment, DisjointCoveringBalancedAndThreePerDialogue) {
    std::mt19937 gen(5);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = gen() % 60;
        const int groups = 1 + static_cast<int>(gen() % 5);
        std::vector<Annotator> annotators;
        for (const auto& s : roster(groups)) annotators.push_back({s.id, s.group, true, 0.9});
        const auto a = assignDialogues(pool(n), annotators, gen());
        ASSERT_EQ(a.group_of_dialogue.size(), n);
        std::size_t lo = n, hi = 0, covered = 0;
        for (int g = 1; g <= groups; ++g) {
            const auto f = a.dialogues.find(g);
            const std::size_t size = f == a.dialogues.end() ? 0 : f->second.size();
            lo = std::min(lo, size);
            hi = std::max(hi, size);
            covered += size;
        }
        ASSERT_EQ(covered, n);
        ASSERT_LE(hi - lo, 1u);
        for (const auto& [id, g] : a.group_of_dialogue) ASSERT_EQ(a.assignees(id).size(), 3u);
    }
}

TEST(Assignment, EightOverFourGroups) {
    std::vector<Annotator> annotators;
    for (const auto& s : roster(4)) annotators.push_back({s.id, s.group, true, 0.9});
    const auto a = assignDialogues(pool(8), annotators, 42);
    for (int g = 1; g <= 4; ++g) EXPECT_EQ(a.dialogues.at(g).size(), 2u);
    EXPECT_EQ(assignDialogues(pool(8), annotators, 42).group_of_dialogue, a.group_of_dialogue);
}

TEST(Assignment, RequiresQualifiedTriples) {
    std::vector<Annotator> annotators{{"a", 1, true, 0.9}, {"b", 1, true, 0.9}};
    EXPECT_THROW(assignDialogues(pool(3), annotators, 1), ConfigError);
    annotators.push_back({"c", 1, false, 0.5});
    EXPECT_THROW(assignDialogues(pool(3), annotators, 1), ConfigError);
    annotators.back().qualified = true;
    EXPECT_NO_THROW(assignDialogues(pool(3), annotators, 1));
    annotators.push_back({"c", 2, true, 0.9});
    EXPECT_THROW(assignDialogues(pool(3), annotators, 1), ConfigError);
}

TEST(Consensus, WeightedScoreExamples) {
    auto c = computeConsensus("d", {vote("d", "a", 1, 5), vote("d", "b", 0, 3), vote("d", "c", 1, 2)});
    EXPECT_EQ(c.majority_label, Label::yes);
    EXPECT_FALSE(c.unanimous);
    EXPECT_DOUBLE_EQ(c.v_score, 0.7);
    c = computeConsensus("d", {vote("d", "a", 0, 1), vote("d", "b", 0, 1), vote("d", "c", 1, 5)});
    EXPECT_EQ(c.majority_label, Label::no);
    EXPECT_DOUBLE_EQ(c.v_score, 2.0 / 7.0);
    c = computeConsensus("d", {vote("d", "a", 1, 1), vote("d", "b", 1, 4), vote("d", "c", 1, 2)});
    EXPECT_TRUE(c.unanimous);
    EXPECT_EQ(c.v_score, 1.0);
}

TEST(Consensus, ScoreBoundsOverAllVotePatterns) {
    for (int mask = 0; mask < 8; ++mask)
        for (int c1 = 1; c1 <= 5; ++c1)
            for (int c2 = 1; c2 <= 5; ++c2)
                for (int c3 = 1; c3 <= 5; ++c3) {
                    const auto r = computeConsensus("d", {vote("d", "a", mask & 1, c1), vote("d", "b", (mask >> 1) & 1, c2),
                                                          vote("d", "c", (mask >> 2) & 1, c3)});
                    ASSERT_GT(r.v_score, 0.0);
                    ASSERT_LE(r.v_score, 1.0);
                    ASSERT_EQ(r.unanimous, mask == 0 || mask == 7);
                    ASSERT_EQ(r.majority_label == Label::yes, __builtin_popcount(mask) >= 2);
                }
}

TEST(Consensus, NeedsExactlyThreeValidVotes) {
    EXPECT_THROW(computeConsensus("d", {vote("d", "a", 1, 5)}), DataError);
    EXPECT_THROW(computeConsensus("d", {vote("d", "a", 1, 5), vote("d", "b", 1, 0), vote("d", "c", 1, 5)}), DataError);
}

TEST(Kappa, HandWorkedExample) {
    const auto r = fleissKappa({{3, 0}, {0, 3}, {2, 1}, {1, 2}});
    ASSERT_TRUE(r.fleiss_kappa);
    EXPECT_NEAR(*r.fleiss_kappa, 1.0 / 3.0, 1e-12);
    EXPECT_NEAR(r.p_bar, 2.0 / 3.0, 1e-12);
    EXPECT_NEAR(r.p_e, 0.5, 1e-12);
}

TEST(Kappa, AgreesWithPairwiseDefinition) {
    std::mt19937 gen(11);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t items = 2 + gen() % 40;
        std::vector<std::vector<int>> ratings(items, std::vector<int>(3));
        std::vector<VoteCounts> counts(items, VoteCounts{0, 0});
        for (std::size_t i = 0; i < items; ++i)
            for (auto& v : ratings[i]) {
                v = static_cast<int>(gen() % 2);
                ++counts[i][static_cast<std::size_t>(v)];
            }
        const auto r = fleissKappa(counts);
        ASSERT_TRUE(r.fleiss_kappa);
        if (r.degenerate_marginals) continue;
        ASSERT_NEAR(*r.fleiss_kappa, pairwiseKappa(ratings), 1e-12);
        ASSERT_LE(*r.fleiss_kappa, 1.0 + 1e-12);
    }
}

TEST(Kappa, DegenerateAndInvalidInputs) {
    const auto r = fleissKappa({{3, 0}, {3, 0}});
    EXPECT_TRUE(r.degenerate_marginals);
    EXPECT_EQ(r.fleiss_kappa, 1.0);
    EXPECT_THROW(fleissKappa({{3, 0}}), DataError);
    EXPECT_THROW(fleissKappa({{3, 0}, {1, 1}}), DataError);
}

TEST(Record, JsonValidation) {
    EXPECT_THROW(annotationFromJson(Json{{"dialogue_id", "d"}, {"annotator_id", "a"}, {"label", 2}, {"confidence", 3}}),
                 DataError);
    EXPECT_THROW(annotationFromJson(Json{{"dialogue_id", "d"}, {"annotator_id", "a"}, {"label", 1}, {"confidence", 6}}),
                 DataError);
    const auto r = annotationFromJson(Json{{"dialogue_id", "d"}, {"annotator_id", "a"}, {"label", 1}, {"confidence", 3}});
    EXPECT_EQ(r.label, Label::yes);
}

class StoreTest : public ::testing::Test {
protected:
    StoreConfig config(std::size_t n = 4, int groups = 2) {
        StoreConfig c;
        c.pool = pool(n);
        c.annotators = roster(groups);
        c.log_path = tmp.file("votes.jsonl");
        return c;
    }
    TempDir tmp;
};

TEST_F(StoreTest, AcceptsAssignedVotesAndRejectsTheRest) {
    AnnotationStore store(config());
    const auto& a = store.assignment();
    const auto id = a.dialogues.at(1).front();
    const auto other = a.dialogues.at(2).front();
    EXPECT_EQ(store.submit(vote(id, "g1a0", 1, 4)).status, SubmitStatus::stored);
    EXPECT_EQ(store.submit(vote(id, "g1a0", 0, 4)).status, SubmitStatus::duplicate);
    EXPECT_EQ(store.submit(vote(other, "g1a0", 1, 4)).status, SubmitStatus::unassigned);
    EXPECT_EQ(store.submit(vote(id, "nobody", 1, 4)).status, SubmitStatus::unassigned);
    EXPECT_EQ(store.submit(vote(id, "g1a1", 1, 9)).status, SubmitStatus::invalid);
    EXPECT_EQ(store.voteCount(id), 1u);
    EXPECT_THROW(store.consensus(id), DataError);
}

TEST_F(StoreTest, UnqualifiedAnnotatorIsRefused) {
    auto c = config();
    c.annotators[0].qualification_accuracy = 0.8;
    AnnotationStore store(c);
    const auto id = store.assignment().dialogues.at(1).front();
    EXPECT_EQ(store.submit(vote(id, "g1a0", 1, 4)).status, SubmitStatus::unqualified);
    EXPECT_FALSE(store.annotator("g1a0").qualified);
    EXPECT_FALSE(store.next("g1a0"));
}

TEST_F(StoreTest, NextWalksAssignedItemsInIdOrder) {
    AnnotationStore store(config());
    const auto& mine = store.assignment().dialogues.at(1);
    EXPECT_EQ(store.remaining("g1a0"), mine.size());
    EXPECT_EQ(store.next("g1a0")->first, mine[0]);
    store.submit(vote(mine[0], "g1a0", 1, 4));
    EXPECT_EQ(store.next("g1a0")->first, mine[1]);
    EXPECT_EQ(store.remaining("g1a0"), mine.size() - 1);
    EXPECT_EQ(store.next("g1a1")->first, mine[0]);
}

TEST_F(StoreTest, ReplaysLogAndDropsTornTail) {
    std::string id;
    {
        AnnotationStore store(config());
        id = store.assignment().dialogues.at(1).front();
        store.submit(vote(id, "g1a0", 1, 4));
        store.submit(vote(id, "g1a1", 1, 2));
    }
    std::ofstream(tmp.file("votes.jsonl"), std::ios::app) << R"({"dialogue_id":")" << id << R"(","annot)";
    {
        AnnotationStore store(config());
        EXPECT_EQ(store.voteCount(id), 2u);
        EXPECT_EQ(store.submit(vote(id, "g1a0", 0, 1)).status, SubmitStatus::duplicate);
        EXPECT_EQ(store.submit(vote(id, "g1a2", 0, 1)).status, SubmitStatus::stored);
    }
    AnnotationStore again(config());
    EXPECT_EQ(again.voteCount(id), 3u);
    EXPECT_NEAR(again.consensus(id).v_score, 6.0 / 7.0, 1e-12);
}

TEST_F(StoreTest, CorruptCompleteLineIsAnError) {
    std::ofstream(tmp.file("votes.jsonl")) << "{not json}\n";
    EXPECT_THROW(AnnotationStore{config()}, DataError);
}

TEST_F(StoreTest, ConcurrentSubmitsStoreEachVoteOnce) {
    AnnotationStore store(config(30, 2));
    std::vector<std::thread> threads;
    for (const auto& spec : roster(2)) {
        threads.emplace_back([&store, id = spec.id, g = spec.group] {
            for (const auto& d : store.assignment().dialogues.at(g)) {
                store.submit(vote(d, id, 1, 3));
                store.submit(vote(d, id, 0, 3)); // duplicate
            }
        });
    }
    for (auto& t : threads) t.join();
    for (const auto& it : pool(30).items) EXPECT_EQ(store.voteCount(it.id()), 3u);
    AnnotationStore replayed(config(30, 2));
    for (const auto& it : pool(30).items) EXPECT_EQ(replayed.consensus(it.id()).majority_label, Label::yes);
}

TEST_F(StoreTest, QualificationSetGatesAnnotation) {
    auto c = config(3, 1);
    for (auto& s : c.annotators) s.qualification_accuracy.reset();
    Dataset qual;
    for (int i = 0; i < 20; ++i) qual.items.push_back(labeled("q" + std::to_string(10 + i), Label::yes));
    c.qualification_set = qual;
    AnnotationStore store(c);

    // g1a0 gets 17 of 20 right, g1a1 16 of 20.
    for (int i = 0; i < 20; ++i) {
        EXPECT_TRUE(store.next("g1a0")->second);
        EXPECT_EQ(store.submit(vote("q" + std::to_string(10 + i), "g1a0", i < 17 ? 1 : 0, 3)).status,
                  SubmitStatus::stored);
        store.submit(vote("q" + std::to_string(10 + i), "g1a1", i < 16 ? 1 : 0, 3));
    }
    EXPECT_TRUE(store.annotator("g1a0").qualified);
    EXPECT_DOUBLE_EQ(store.annotator("g1a0").qualification_accuracy, 0.85);
    EXPECT_FALSE(store.annotator("g1a1").qualified);
    EXPECT_FALSE(store.next("g1a0")->second);
    const auto id = store.assignment().dialogues.at(1).front();
    EXPECT_EQ(store.submit(vote(id, "g1a0", 1, 3)).status, SubmitStatus::stored);
    EXPECT_EQ(store.submit(vote(id, "g1a1", 1, 3)).status, SubmitStatus::unqualified);
    EXPECT_EQ(store.submit(vote("q10", "g1a0", 1, 3)).status, SubmitStatus::unassigned);

    AnnotationStore replayed(c);
    EXPECT_TRUE(replayed.annotator("g1a0").qualified);
}

TEST_F(StoreTest, ExportPoliciesAndAgreement) {
    AnnotationStore store(config(4, 1));
    const auto& ids = store.assignment().dialogues.at(1);
    // ids[0] unanimous yes, ids[1] 2-1 no, ids[2] incomplete, ids[3] untouched.
    for (const char* a : {"g1a0", "g1a1", "g1a2"}) store.submit(vote(ids[0], a, 1, 4));
    store.submit(vote(ids[1], "g1a0", 0, 5));
    store.submit(vote(ids[1], "g1a1", 0, 3));
    store.submit(vote(ids[1], "g1a2", 1, 2));
    store.submit(vote(ids[2], "g1a0", 1, 2));

    const auto majority = store.exportDataset(ExportPolicy::majority);
    ASSERT_EQ(majority.items.size(), 2u);
    EXPECT_EQ(majority.find(ids[0])->label, Label::yes);
    EXPECT_EQ(majority.find(ids[1])->label, Label::no);
    EXPECT_EQ(majority.find(ids[1])->extra.at("annotation").at("unanimous"), false);
    EXPECT_DOUBLE_EQ(majority.find(ids[1])->extra.at("annotation").at("v_score").get<double>(), 0.8);

    const auto unanimous = store.exportDataset(ExportPolicy::unanimous);
    ASSERT_EQ(unanimous.items.size(), 1u);
    EXPECT_EQ(unanimous.items[0].id(), ids[0]);

    // Exported items round-trip through the corpus reader.
    std::stringstream buf;
    writeJsonl(majority, buf);
    const auto back = ingestStream(buf, false);
    ASSERT_TRUE(back.errors.empty());
    EXPECT_EQ(back.dataset.items, majority.items);

    const auto agreement = store.agreement();
    ASSERT_TRUE(agreement.fleiss_kappa);
    EXPECT_EQ(agreement.n_items, 2u);
    EXPECT_NEAR(*agreement.fleiss_kappa, pairwiseKappa({{1, 1, 1}, {0, 0, 1}}), 1e-12);

    AnnotationStore empty(StoreConfig{pool(2), roster(1), std::nullopt, tmp.file("other.jsonl"), 42});
    EXPECT_FALSE(empty.agreement().fleiss_kappa);
    EXPECT_FALSE(empty.agreement().error.empty());
}

TEST_F(StoreTest, ProgressCountsVotesPerGroup) {
    AnnotationStore store(config(4, 2));
    const auto id = store.assignment().dialogues.at(2).front();
    for (const char* a : {"g2a0", "g2a1", "g2a2"}) store.submit(vote(id, a, 0, 1));
    const auto p = store.progress();
    ASSERT_EQ(p.size(), 2u);
    EXPECT_EQ(p[0].complete, 0u);
    EXPECT_EQ(p[1].complete, 1u);
    EXPECT_EQ(p[1].votes_by_annotator.at("g2a0"), 1u);
    EXPECT_EQ(p[0].dialogues + p[1].dialogues, 4u);
}
