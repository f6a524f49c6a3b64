#include "mentalmad/supervision.hpp"
#include "support/stubs.hpp"

#include <gtest/gtest.h>

#include <map>
#include <set>

using namespace mentalmad;
using namespace testing_support;

namespace {

/// Replies by prompt shape: the feedback prompt has a hint section; the
/// rationale prompt asks to explain why.
LlmResponse teacherByPrompt(const LlmRequest& req) {
    if (req.prompt.find("### Hint:") != std::string::npos) return okReply("Feedback: The student missed the guilt trip.");
    if (req.prompt.find("does not contain elements of mental manipulation. Let's") != std::string::npos)
        return okReply("Rationale: It is ordinary talk.");
    return okReply("  rationale:  It pressures the listener.  ");
}

} // namespace

TEST(Supervision, ThreeRecordsPerItemWithExpectedTargets) {
    ScriptedGateway gw([](const LlmRequest& r, std::size_t) { return teacherByPrompt(r); });
    const auto d = balancedDataset(3, 2);
    const auto set = buildSupervisionSet(d, gw, {"teacher", 1});
    EXPECT_TRUE(set.gaps.empty());
    ASSERT_EQ(set.records.size(), 15u);
    EXPECT_EQ(gw.calls(), 15u);

    std::map<int, int> per_task;
    for (const auto& r : set.records) {
        ++per_task[r.task];
        const auto* x = d.find(r.dialogue_id);
        ASSERT_NE(x, nullptr);
        const bool yes = *x->label == Label::yes;
        if (r.task == 3) {
            EXPECT_EQ(r.target, yes ? "Yes" : "No");
            EXPECT_EQ(r.prompt, renderStudentTask23(x->dialogue));
        } else if (r.task == 2) {
            // Task 2 targets start with the judgment and carry the correct rationale.
            EXPECT_EQ(r.target, yes ? "Yes. It pressures the listener." : "No. It is ordinary talk.");
        } else {
            EXPECT_EQ(r.target, "The student missed the guilt trip.");
            EXPECT_NE(r.prompt.find("### Student's Response:"), std::string::npos);
        }
    }
    EXPECT_EQ(per_task[1], 5);
    EXPECT_EQ(per_task[2], 5);
    EXPECT_EQ(per_task[3], 5);
    EXPECT_TRUE(std::is_sorted(set.records.begin(), set.records.end(), recordOrder));
}

TEST(Supervision, IncorrectRationaleFeedsTask1PromptAndFeedbackCall) {
    ScriptedGateway gw([](const LlmRequest& r, std::size_t) {
        if (r.prompt.find("### Hint:") != std::string::npos) return okReply("Feedback: wrong");
        // For a positive item the incorrect-rationale prompt asks why it does NOT contain manipulation.
        if (r.prompt.find("why this dialogue does not contain") != std::string::npos)
            return okReply("Rationale: MINUS-TEXT");
        return okReply("Rationale: PLUS-TEXT");
    });
    Dataset d;
    d.items.push_back(labeled("a", Label::yes));
    const auto set = buildSupervisionSet(d, gw, {"t", 1});
    ASSERT_EQ(set.records.size(), 3u);
    EXPECT_EQ(set.records[0].prompt, renderStudentTask1(d.items[0].dialogue, Label::yes, "MINUS-TEXT"));
    EXPECT_EQ(set.records[1].target, "Yes. PLUS-TEXT");
    const auto prompts = gw.prompts();
    EXPECT_TRUE(std::any_of(prompts.begin(), prompts.end(), [](const std::string& p) {
        return p.find("### Student's Answer:\nThis dialogue does not contain elements of mental manipulation. MINUS-TEXT") !=
               std::string::npos;
    }));
}

TEST(Supervision, RefusalDropsOnlyTheAffectedTask) {
    ScriptedGateway gw([](const LlmRequest& r, std::size_t) {
        if (r.prompt.find("### Hint:") != std::string::npos) return refusalReply();
        return teacherByPrompt(r);
    });
    const auto set = buildSupervisionSet(balancedDataset(2, 0), gw, {"t", 1});
    ASSERT_EQ(set.gaps.size(), 2u);
    for (const auto& g : set.gaps) EXPECT_EQ(g.task, 1);
    ASSERT_EQ(set.records.size(), 4u);
    for (const auto& r : set.records) EXPECT_NE(r.task, 1);
}

TEST(Supervision, TransportFailureOnCorrectRationaleDropsTask2) {
    ScriptedGateway gw([](const LlmRequest& r, std::size_t) {
        if (r.prompt.find("why this dialogue contains") != std::string::npos) return transportFailure();
        return teacherByPrompt(r);
    });
    const auto set = buildSupervisionSet(balancedDataset(1, 0), gw, {"t", 1});
    ASSERT_EQ(set.gaps.size(), 1u);
    EXPECT_EQ(set.gaps[0].task, 2);
    EXPECT_EQ(set.records.size(), 2u);
}

TEST(Supervision, EmptyAfterPrefixStripIsAGap) {
    ScriptedGateway gw([](const LlmRequest&, std::size_t) { return okReply("Rationale:   "); });
    const auto set = buildSupervisionSet(balancedDataset(1, 0), gw, {"t", 1});
    EXPECT_EQ(set.gaps.size(), 2u);
    ASSERT_EQ(set.records.size(), 1u);
    EXPECT_EQ(set.records[0].task, 3);
}

TEST(Supervision, UnlabeledInputIsRejectedUpFront) {
    ScriptedGateway gw([](const LlmRequest&, std::size_t) { return okReply("x"); });
    Dataset d;
    d.items.push_back(labeled("u", std::nullopt));
    EXPECT_THROW(buildSupervisionSet(d, gw, {"t", 1}), DataError);
    EXPECT_EQ(gw.calls(), 0u);
}

TEST(Supervision, ParallelMatchesSerial) {
    ScriptedGateway a([](const LlmRequest& r, std::size_t) { return teacherByPrompt(r); });
    ScriptedGateway b([](const LlmRequest& r, std::size_t) { return teacherByPrompt(r); });
    const auto d = balancedDataset(6, 5);
    const auto serial = buildSupervisionSet(d, a, {"t", 1});
    const auto parallel = buildSupervisionSet(d, b, {"t", 4});
    EXPECT_EQ(serial.records, parallel.records);
}

TEST(Supervision, PrefixStrip) {
    EXPECT_EQ(stripLabelPrefix("  Rationale: text ", "Rationale:"), "text");
    EXPECT_EQ(stripLabelPrefix("FEEDBACK:x", "Feedback:"), "x");
    EXPECT_EQ(stripLabelPrefix("No prefix here", "Rationale:"), "No prefix here");
}

TEST(Supervision, JsonRoundTripAndValidation) {
    const SupervisionRecord r{"d", 2, "p", "Yes. because", std::nullopt};
    EXPECT_EQ(supervisionFromJson(toJson(r)), r);
    EXPECT_THROW(supervisionFromJson(Json{{"dialogue_id", "d"}, {"task", 4}, {"prompt", "p"}, {"target", "x"}}),
                 DataError);
    EXPECT_THROW(supervisionFromJson(Json{{"dialogue_id", "d"}, {"task", 3}, {"prompt", "p"}, {"target", "maybe"}}),
                 DataError);
    EXPECT_THROW(supervisionFromJson(Json{{"dialogue_id", "d"}}), DataError);
}
