#pragma once

// Prompt templates for the teacher and the student, with named {slot}
// placeholders. Rendering is byte-stable and fails on any unfilled slot.

#include "mentalmad/corpus.hpp"
#include "mentalmad/error.hpp"

#include <cctype>
#include <map>
#include <string>
#include <string_view>

namespace mentalmad {

enum class TemplateName {
    teacher_rationale,
    teacher_incorrect_rationale,
    teacher_feedback,
    student_task1,
    student_task23,
    evosa,
};

inline const char* toString(TemplateName n) {
    switch (n) {
    case TemplateName::teacher_rationale: return "teacher_rationale";
    case TemplateName::teacher_incorrect_rationale: return "teacher_incorrect_rationale";
    case TemplateName::teacher_feedback: return "teacher_feedback";
    case TemplateName::student_task1: return "student_task1";
    case TemplateName::student_task23: return "student_task23";
    case TemplateName::evosa: return "evosa";
    }
    return "";
}

/// Slot phrase for a label: "contains" / "does not contain".
inline const char* labelPhrase(Label l) { return l == Label::yes ? "contains" : "does not contain"; }

namespace prompt_text {

inline constexpr std::string_view kDefinition =
    "Mental manipulation is using language to influence, alter, or control an individual's psychological "
    "state or perception for the manipulator's benefit.";

// The incorrect-rationale prompt is the rationale prompt rendered with the
// negated label, so both names share this body.
inline const std::string kTeacherRationale =
    "You are an advanced dialogue analysis agent. Using your knowledge of dark psychology based on the "
    "definition of mental manipulation, please explain why this dialogue {label_phrase} elements of mental "
    "manipulation. Let's think step by step.\n\n"
    "### Definition of Mental Manipulation:\n" +
    std::string(kDefinition) +
    "\n\n"
    "### Dialogue:\n"
    "{dialogue}\n\n"
    "### Output Format:\n"
    "Rationale: [Provide only strong evidence using direct dialogue quotes. Clearly explain how the language "
    "used aligns\xE2\x80\x94or does not align\xE2\x80\x94with known manipulation tactics.]";

inline const std::string kTeacherFeedback =
    "You are an advanced dialogue analysis teacher. In the task of detecting whether the dialogue contains "
    "elements of mental manipulation, students gave incorrect answers. You should point out the mistakes in "
    "the student's answer using knowledge of dark psychology and the definition of mental manipulation. "
    "Let's think step by step.\n\n"
    "### Definition of Mental Manipulation:\n" +
    std::string(kDefinition) +
    "\n\n"
    "### Dialogue:\n"
    "{dialogue}\n\n"
    "### Student's Answer:\n"
    "This dialogue {student_label_phrase} elements of mental manipulation. {incorrect_response}\n\n"
    "### Hint:\n"
    "This dialogue {label_phrase} elements of mental manipulation.\n\n"
    "### Output Format:\n"
    "Feedback: [Provide the student's mistakes.]";

inline const std::string kStudentTask1 =
    "In the task of detecting whether the dialogue contains elements of mental manipulation, one student "
    "gave an answer. Please give the correct answer and point out any mistakes (if any) in the student's "
    "response.\n\n"
    "### Dialogue:\n"
    "{dialogue}\n\n"
    "### Student's Response:\n"
    "{incorrect_response}";

inline const std::string kStudentTask23 =
    "I will provide you with a dialogue. Please determine if it contains elements of mental manipulation. "
    "Answer Yes or No and give a rationale.\n\n"
    "{dialogue}";

// Seven steps: select utterances with distinct speech acts, recombine,
// mutate (1-3); analyse the parents' label, check and refine the child
// once, output it (4-7).
inline const std::string kEvosa =
    "You are an expert in dialogue writing, pragmatics, and speech act theory. You are given two parent "
    "dialogues. Each parent dialogue {label_phrase} elements of mental manipulation. Create one new child "
    "dialogue from the two parents by following the steps below.\n\n"
    "### Definition of Mental Manipulation:\n" +
    std::string(kDefinition) +
    "\n\n"
    "### Parent Dialogue 1:\n"
    "{parent_a}\n\n"
    "### Parent Dialogue 2:\n"
    "{parent_b}\n\n"
    "### Steps:\n"
    "Step 1 (Selection): From each parent dialogue, select utterances that instantiate distinct speech acts "
    "(for example assertions, questions, requests, promises, accusations, threats, apologies, or compliments) "
    "and distinct conversational strategies.\n"
    "Step 2 (Crossover): Recombine the selected utterances from both parents into an initial child dialogue "
    "between Person1 and Person2 with a natural turn order.\n"
    "Step 3 (Mutation): Apply strong content mutations to the initial child dialogue. Change the topic, "
    "setting, wording, and details so that it copies neither parent, while keeping the selected speech acts "
    "and strategies.\n"
    "Step 4 (Label Analysis): Explain why each parent dialogue {label_phrase} elements of mental "
    "manipulation, focusing on its speech acts, conversational strategies, and pragmatic cues.\n"
    "Step 5 (Consistency Check): Check whether the initial child dialogue {label_phrase} elements of mental "
    "manipulation for the same reasons, and list any cues that conflict with this.\n"
    "Step 6 (Refinement): Optimize the child dialogue once so that its pragmatic cues clearly align with the "
    "parents: the child dialogue must {label_phrase_bare} elements of mental manipulation. Keep it coherent "
    "and natural.\n"
    "Step 7 (Output): Output the final refined child dialogue.\n\n"
    "### Output Format:\n"
    "Write your work for Steps 1 to 6 first. Then write the final child dialogue inside a block that starts "
    "and ends with a line containing only ```. Put one turn per line, and start every line with \"Person1:\" "
    "or \"Person2:\".";

} // namespace prompt_text

inline const std::string& templateBody(TemplateName n) {
    switch (n) {
    case TemplateName::teacher_rationale:
    case TemplateName::teacher_incorrect_rationale: return prompt_text::kTeacherRationale;
    case TemplateName::teacher_feedback: return prompt_text::kTeacherFeedback;
    case TemplateName::student_task1: return prompt_text::kStudentTask1;
    case TemplateName::student_task23: return prompt_text::kStudentTask23;
    case TemplateName::evosa: return prompt_text::kEvosa;
    }
    return prompt_text::kStudentTask23;
}

using SlotValues = std::map<std::string, std::string, std::less<>>;

/// Replaces every {slot} in body. A slot without a value is an error; braces
/// that do not enclose a lowercase identifier are copied literally.
inline std::string renderTemplate(std::string_view body, const SlotValues& values) {
    std::string out;
    out.reserve(body.size() + 256);
    std::size_t i = 0;
    while (i < body.size()) {
        if (body[i] == '{') {
            std::size_t j = i + 1;
            while (j < body.size() && (std::islower(static_cast<unsigned char>(body[j])) || body[j] == '_')) ++j;
            if (j < body.size() && body[j] == '}' && j > i + 1) {
                const auto name = body.substr(i + 1, j - i - 1);
                auto it = values.find(name);
                if (it == values.end()) throw ConfigError("unfilled template slot {" + std::string(name) + "}");
                out += it->second;
                i = j + 1;
                continue;
            }
        }
        out += body[i++];
    }
    return out;
}

inline std::string renderTemplate(TemplateName n, const SlotValues& values) {
    return renderTemplate(templateBody(n), values);
}

} // namespace mentalmad
