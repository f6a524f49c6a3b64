#pragma once

// Complementary-task supervision. For each labeled dialogue the teacher
// writes an incorrect rationale, feedback on it, and a correct rationale:
//   Task 1: feedback on an incorrect rationale
//   Task 2: judgment followed by the correct rationale
//   Task 3: judgment token only

#include "mentalmad/corpus.hpp"
#include "mentalmad/detail/text.hpp"
#include "mentalmad/error.hpp"
#include "mentalmad/llm_gateway.hpp"
#include "mentalmad/prompts.hpp"

#include <algorithm>
#include <fstream>
#include <future>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

namespace mentalmad {

struct TeacherMeta {
    ResponseStatus status = ResponseStatus::ok;
    bool cache_hit = false;
};

struct SupervisionRecord {
    std::string dialogue_id;
    int task = 3; // 1, 2 or 3
    std::string prompt;
    std::string target;
    std::optional<TeacherMeta> teacher_meta; // absent for Task 3 and for records read from disk

    friend bool operator==(const SupervisionRecord& a, const SupervisionRecord& b) {
        return std::tie(a.dialogue_id, a.task, a.prompt, a.target) == std::tie(b.dialogue_id, b.task, b.prompt, b.target);
    }
};

inline bool recordOrder(const SupervisionRecord& a, const SupervisionRecord& b) {
    return std::tie(a.dialogue_id, a.task) < std::tie(b.dialogue_id, b.task);
}

// ---------------------------------------------------------------------------
// Prompt rendering

inline std::string renderTeacherRationale(const Dialogue& d, Label conditioned_on) {
    return renderTemplate(TemplateName::teacher_rationale,
                          {{"label_phrase", labelPhrase(conditioned_on)}, {"dialogue", serializeDialogue(d)}});
}

/// The rationale prompt with the label flipped, asking the teacher to argue
/// for the wrong judgment.
inline std::string renderTeacherIncorrectRationale(const Dialogue& d, Label true_label) {
    return renderTemplate(TemplateName::teacher_incorrect_rationale,
                          {{"label_phrase", labelPhrase(negate(true_label))}, {"dialogue", serializeDialogue(d)}});
}

inline std::string renderTeacherFeedback(const Dialogue& d, Label true_label, const std::string& r_minus) {
    return renderTemplate(TemplateName::teacher_feedback, {{"dialogue", serializeDialogue(d)},
                                                           {"student_label_phrase", labelPhrase(negate(true_label))},
                                                           {"incorrect_response", r_minus},
                                                           {"label_phrase", labelPhrase(true_label)}});
}

/// The student sees the wrong judgment sentence and the incorrect rationale,
/// never the true label.
inline std::string incorrectStudentResponse(Label true_label, const std::string& r_minus) {
    return std::string("This dialogue ") + labelPhrase(negate(true_label)) + " elements of mental manipulation. " +
           r_minus;
}

inline std::string renderStudentTask1(const Dialogue& d, Label true_label, const std::string& r_minus) {
    return renderTemplate(TemplateName::student_task1,
                          {{"dialogue", serializeDialogue(d)},
                           {"incorrect_response", incorrectStudentResponse(true_label, r_minus)}});
}

inline std::string renderStudentTask23(const Dialogue& d) {
    return renderTemplate(TemplateName::student_task23, {{"dialogue", serializeDialogue(d)}});
}

/// Removes a leading "Rationale:"/"Feedback:" (any case, leading whitespace
/// allowed) and trims the rest.
inline std::string stripLabelPrefix(std::string_view text, std::string_view prefix) {
    auto t = detail::trim(text);
    if (detail::startsWithIgnoreCase(t, prefix)) t.remove_prefix(prefix.size());
    return std::string(detail::trim(t));
}

// ---------------------------------------------------------------------------
// Teacher calls

struct TeacherText {
    std::string text;
    TeacherMeta meta;
};

class TeacherError : public UpstreamError {
public:
    TeacherError(std::string dialogue_id, ResponseStatus status, const std::string& what)
        : UpstreamError(dialogue_id + ": " + what), dialogue_id_(std::move(dialogue_id)), status_(status) {}

    [[nodiscard]] const std::string& dialogueId() const { return dialogue_id_; }
    [[nodiscard]] ResponseStatus status() const { return status_; }

private:
    std::string dialogue_id_;
    ResponseStatus status_;
};

namespace detail {

inline Label requireLabel(const LabeledDialogue& x) {
    if (!x.label) throw DataError("dialogue " + x.id() + " is unlabeled");
    return *x.label;
}

inline TeacherText askTeacher(const std::string& id, const std::string& prompt, std::string_view prefix,
                              LlmGateway& gateway, const std::string& model) {
    const auto resp = gateway.complete({model, prompt});
    if (resp.status == ResponseStatus::transport_error) throw TeacherError(id, resp.status, resp.error);
    if (resp.status == ResponseStatus::refusal)
        throw TeacherError(id, resp.status, "teacher refused: " + Json(resp.text).dump());
    auto text = stripLabelPrefix(resp.text, prefix);
    if (text.empty()) throw TeacherError(id, resp.status, "teacher reply is empty after prefix strip");
    return {std::move(text), {resp.status, resp.cache_hit}};
}

} // namespace detail

inline TeacherText generateIncorrectRationale(const LabeledDialogue& x, LlmGateway& gateway,
                                              const std::string& model) {
    const auto label = detail::requireLabel(x);
    return detail::askTeacher(x.id(), renderTeacherIncorrectRationale(x.dialogue, label), "Rationale:", gateway,
                              model);
}

inline TeacherText generateFeedback(const LabeledDialogue& x, const std::string& r_minus, LlmGateway& gateway,
                                    const std::string& model) {
    const auto label = detail::requireLabel(x);
    if (detail::trim(r_minus).empty()) throw DataError("incorrect rationale for " + x.id() + " is empty");
    return detail::askTeacher(x.id(), renderTeacherFeedback(x.dialogue, label, r_minus), "Feedback:", gateway, model);
}

inline TeacherText generateCorrectRationale(const LabeledDialogue& x, LlmGateway& gateway, const std::string& model) {
    const auto label = detail::requireLabel(x);
    return detail::askTeacher(x.id(), renderTeacherRationale(x.dialogue, label), "Rationale:", gateway, model);
}

// ---------------------------------------------------------------------------
// Assembly

struct SupervisionGap {
    std::string dialogue_id;
    int task = 0;
    std::string reason;
};

struct SupervisionSet {
    std::vector<SupervisionRecord> records; // sorted by (dialogue_id, task)
    std::vector<SupervisionGap> gaps;
};

struct SupervisionOptions {
    std::string model;
    int parallelism = 1;
};

inline SupervisionRecord task3Record(const LabeledDialogue& x) {
    return {x.id(), 3, renderStudentTask23(x.dialogue), judgmentWord(detail::requireLabel(x)), std::nullopt};
}

inline SupervisionRecord task2Record(const LabeledDialogue& x, const TeacherText& r_plus) {
    return {x.id(), 2, renderStudentTask23(x.dialogue),
            std::string(judgmentWord(detail::requireLabel(x))) + ". " + r_plus.text, r_plus.meta};
}

namespace detail {

inline SupervisionSet superviseOne(const LabeledDialogue& x, LlmGateway& gateway, const std::string& model) {
    SupervisionSet out;
    const auto label = requireLabel(x);
    try {
        const auto r_minus = generateIncorrectRationale(x, gateway, model);
        const auto f = generateFeedback(x, r_minus.text, gateway, model);
        out.records.push_back({x.id(), 1, renderStudentTask1(x.dialogue, label, r_minus.text), f.text, f.meta});
    } catch (const TeacherError& e) {
        out.gaps.push_back({x.id(), 1, e.what()});
    }
    try {
        out.records.push_back(task2Record(x, generateCorrectRationale(x, gateway, model)));
    } catch (const TeacherError& e) {
        out.gaps.push_back({x.id(), 2, e.what()});
    }
    out.records.push_back(task3Record(x));
    return out;
}

} // namespace detail

/// Three records per item unless the teacher fails; a failure removes only
/// the affected task for that item and is reported as a gap.
inline SupervisionSet buildSupervisionSet(const Dataset& d, LlmGateway& gateway, const SupervisionOptions& opts) {
    for (const auto& x : d.items) detail::requireLabel(x);

    SupervisionSet all;
    const auto wave = static_cast<std::size_t>(std::max(1, opts.parallelism));
    for (std::size_t start = 0; start < d.items.size(); start += wave) {
        const auto end = std::min(d.items.size(), start + wave);
        std::vector<std::future<SupervisionSet>> jobs;
        for (auto i = start; i < end; ++i) {
            jobs.push_back(std::async(wave > 1 ? std::launch::async : std::launch::deferred,
                                      [&, i] { return detail::superviseOne(d.items[i], gateway, opts.model); }));
        }
        for (auto& j : jobs) {
            auto part = j.get();
            std::move(part.records.begin(), part.records.end(), std::back_inserter(all.records));
            std::move(part.gaps.begin(), part.gaps.end(), std::back_inserter(all.gaps));
        }
    }
    std::sort(all.records.begin(), all.records.end(), recordOrder);
    std::sort(all.gaps.begin(), all.gaps.end(), [](const auto& a, const auto& b) {
        return std::tie(a.dialogue_id, a.task) < std::tie(b.dialogue_id, b.task);
    });
    return all;
}

// ---------------------------------------------------------------------------
// JSONL

inline Json toJson(const SupervisionRecord& r) {
    return Json{{"dialogue_id", r.dialogue_id}, {"task", r.task}, {"prompt", r.prompt}, {"target", r.target}};
}

inline Json toJson(const SupervisionGap& g) {
    return Json{{"dialogue_id", g.dialogue_id}, {"task", g.task}, {"reason", g.reason}};
}

inline SupervisionRecord supervisionFromJson(const Json& j) {
    SupervisionRecord r;
    try {
        r.dialogue_id = j.at("dialogue_id").get<std::string>();
        r.task = j.at("task").get<int>();
        r.prompt = j.at("prompt").get<std::string>();
        r.target = j.at("target").get<std::string>();
    } catch (const Json::exception& e) {
        throw DataError(std::string("malformed supervision record: ") + e.what());
    }
    if (r.task < 1 || r.task > 3) throw DataError("supervision task must be 1, 2 or 3");
    if (r.target.empty()) throw DataError("supervision target is empty for " + r.dialogue_id);
    if (r.task == 3 && r.target != "Yes" && r.target != "No")
        throw DataError("task 3 target must be Yes or No for " + r.dialogue_id);
    return r;
}

inline std::vector<SupervisionRecord> loadSupervision(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read supervision '" + path + "'");
    std::vector<SupervisionRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (detail::trim(line).empty()) continue;
        try {
            out.push_back(supervisionFromJson(Json::parse(line)));
        } catch (const Json::exception& e) {
            throw DataError(path + ": invalid JSON: " + e.what());
        }
    }
    return out;
}

} // namespace mentalmad
