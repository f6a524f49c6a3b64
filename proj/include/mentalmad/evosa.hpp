#pragma once

// Label-preserving dialogue augmentation. Two parents with the same label
// are recombined and mutated by the teacher under a seven-step prompt; the
// child inherits the parents' label.

#include "mentalmad/corpus.hpp"
#include "mentalmad/detail/random.hpp"
#include "mentalmad/detail/text.hpp"
#include "mentalmad/error.hpp"
#include "mentalmad/llm_gateway.hpp"
#include "mentalmad/prompts.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <future>
#include <iomanip>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace mentalmad {

/// C(n, 2)
inline std::uint64_t pairCount(std::uint64_t n) { return n < 2 ? 0 : n * (n - 1) / 2; }

struct AugmentationPlan {
    std::size_t n_plus = 0;
    std::size_t n_minus = 0;
    std::size_t target_plus = 0;
    std::size_t target_minus = 0;
    std::uint64_t seed = 42;
    std::optional<Split> parent_split; // parents drawn from this split only

    /// Enforces target <= C(n, 2) per class, which also rules out n < 2.
    void validate() const {
        auto check = [](std::size_t n, std::size_t target, const char* cls) {
            if (target == 0) return;
            if (n < 2)
                throw ConfigError(std::string("need at least 2 ") + cls + " parents, have " + std::to_string(n));
            if (target > pairCount(n))
                throw ConfigError(std::string(cls) + " target " + std::to_string(target) + " exceeds C(" +
                                  std::to_string(n) + ",2) = " + std::to_string(pairCount(n)));
        };
        check(n_plus, target_plus, "positive");
        check(n_minus, target_minus, "negative");
    }
};

namespace detail {

inline bool isParent(const LabeledDialogue& it, const std::optional<Split>& split) {
    return it.label && (!split || it.split == split);
}

/// Parent ids of one class, sorted so sampling does not depend on file order.
inline std::vector<std::string> classIds(const Dataset& d, Label label, const std::optional<Split>& split) {
    std::vector<std::string> ids;
    for (const auto& it : d.items)
        if (isParent(it, split) && *it.label == label) ids.push_back(it.id());
    std::sort(ids.begin(), ids.end());
    return ids;
}

/// round(a * b / c), halves rounded up.
inline std::size_t roundedRatio(std::size_t a, std::size_t b, std::size_t c) {
    return static_cast<std::size_t>((2 * static_cast<std::uint64_t>(a) * b + c) / (2 * static_cast<std::uint64_t>(c)));
}

} // namespace detail

/// Plans the number of children per class. With proportional_negative the
/// negative target follows the source label ratio, rounded half-up.
inline AugmentationPlan planAugmentation(const Dataset& d, std::size_t target_plus, bool proportional_negative,
                                         std::uint64_t seed, std::optional<std::size_t> target_minus = std::nullopt,
                                         std::optional<Split> parent_split = std::nullopt) {
    AugmentationPlan plan;
    plan.seed = seed;
    plan.parent_split = parent_split;
    for (const auto& it : d.items) {
        if (!detail::isParent(it, parent_split)) continue;
        (*it.label == Label::yes ? plan.n_plus : plan.n_minus)++;
    }
    plan.target_plus = target_plus;
    if (proportional_negative) {
        if (target_minus) throw ConfigError("explicit negative target conflicts with proportional mode");
        if (target_plus > 0 && plan.n_plus == 0) throw ConfigError("no positive parents to scale from");
        plan.target_minus = target_plus == 0 ? 0 : detail::roundedRatio(target_plus, plan.n_minus, plan.n_plus);
    } else {
        plan.target_minus = target_minus.value_or(0);
    }
    plan.validate();
    return plan;
}

/// Draws distinct unordered index pairs from {0..n-1} in a seeded random
/// order without materializing all C(n, 2) pairs (sparse Fisher-Yates over
/// pair ranks). Keeps drawing past the initial target for replacements.
class PairSampler {
public:
    PairSampler(std::size_t n, std::uint64_t seed, std::uint64_t stream)
        : n_(n), total_(pairCount(n)), rng_(seed, stream) {}

    std::optional<std::pair<std::size_t, std::size_t>> next() {
        if (drawn_ >= total_) return std::nullopt;
        const std::uint64_t j = drawn_ + rng_.below(total_ - drawn_);
        const std::uint64_t picked = slot(j);
        swapped_[j] = slot(drawn_);
        swapped_.erase(drawn_);
        ++drawn_;
        return unrank(picked);
    }

    [[nodiscard]] std::uint64_t remaining() const { return total_ - drawn_; }

    /// Rank k in row-major order (0,1),(0,2),...,(0,n-1),(1,2),...
    [[nodiscard]] std::pair<std::size_t, std::size_t> unrank(std::uint64_t k) const {
        const auto n = static_cast<std::uint64_t>(n_);
        auto before = [n](std::uint64_t i) { return i * (2 * n - i - 1) / 2; };
        const double nd = static_cast<double>(n);
        auto i = static_cast<std::uint64_t>(
            std::max(0.0, std::floor(((2 * nd - 1) - std::sqrt((2 * nd - 1) * (2 * nd - 1) - 8.0 * static_cast<double>(k))) / 2)));
        while (i > 0 && before(i) > k) --i;
        while (i + 1 < n && before(i + 1) <= k) ++i;
        return {static_cast<std::size_t>(i), static_cast<std::size_t>(k - before(i) + i + 1)};
    }

private:
    std::uint64_t slot(std::uint64_t idx) const {
        auto it = swapped_.find(idx);
        return it == swapped_.end() ? idx : it->second;
    }

    std::size_t n_;
    std::uint64_t total_;
    std::uint64_t drawn_ = 0;
    detail::Rng rng_;
    std::unordered_map<std::uint64_t, std::uint64_t> swapped_;
};

struct ParentPair {
    std::string parent_a;
    std::string parent_b;
    Label label = Label::yes;

    friend bool operator==(const ParentPair&, const ParentPair&) = default;
};

namespace detail {

inline std::uint64_t samplerStream(Label l) { return l == Label::yes ? 0xE1 : 0xE0; }

class ClassPairSource {
public:
    ClassPairSource(const Dataset& d, Label label, const AugmentationPlan& plan)
        : label_(label), ids_(classIds(d, label, plan.parent_split)),
          sampler_(ids_.size(), plan.seed, samplerStream(label)) {}

    std::optional<ParentPair> next() {
        auto p = sampler_.next();
        if (!p) return std::nullopt;
        return ParentPair{ids_[p->first], ids_[p->second], label_};
    }

private:
    Label label_;
    std::vector<std::string> ids_;
    PairSampler sampler_;
};

} // namespace detail

/// Exactly target_plus positive and target_minus negative same-label pairs,
/// positives first. Unordered pairs never repeat within a class.
inline std::vector<ParentPair> samplePairs(const Dataset& d, const AugmentationPlan& plan) {
    plan.validate();
    std::vector<ParentPair> out;
    out.reserve(plan.target_plus + plan.target_minus);
    for (auto [label, target] : {std::pair{Label::yes, plan.target_plus}, std::pair{Label::no, plan.target_minus}}) {
        detail::ClassPairSource source(d, label, plan);
        for (std::size_t i = 0; i < target; ++i) {
            auto p = source.next();
            if (!p) throw DataError("pair pool exhausted; dataset does not match plan");
            out.push_back(std::move(*p));
        }
    }
    return out;
}

inline std::string renderEvosaPrompt(const Dialogue& parent_a, const Dialogue& parent_b, Label label) {
    return renderTemplate(TemplateName::evosa, {{"label_phrase", labelPhrase(label)},
                                                {"label_phrase_bare", label == Label::yes ? "contain" : "not contain"},
                                                {"parent_a", serializeDialogue(parent_a)},
                                                {"parent_b", serializeDialogue(parent_b)}});
}

// ---------------------------------------------------------------------------
// Child parsing

struct ChildParse {
    std::optional<Dialogue> dialogue;
    std::string error; // set when dialogue is empty
};

namespace detail {

inline const std::regex& personLine() {
    static const std::regex re(R"(^\s*(?:[-*>]\s*)*\**\s*Person\s*([12])\s*\**\s*:\s*\**\s*(.*)$)",
                               std::regex::icase);
    return re;
}

inline const std::regex& otherSpeakerLine() {
    static const std::regex re(R"(^\s*(?:[-*>]\s*)*\**\s*([A-Z][A-Za-z0-9_']*(?: [A-Z0-9][A-Za-z0-9_']*){0,2})\s*\**\s*:\s*(.*)$)");
    return re;
}

inline bool isPersonLine(const std::string& line) { return std::regex_match(line, personLine()); }

inline bool isFence(const std::string& line) { return trim(line).substr(0, 3) == "```"; }

/// Lines of the final dialogue region: the last fenced block holding a
/// PersonN line, otherwise the trailing paragraphs that hold PersonN lines.
inline std::vector<std::string> finalDialogueRegion(const std::vector<std::string>& lines) {
    std::vector<std::vector<std::string>> fenced;
    std::optional<std::vector<std::string>> open;
    for (const auto& line : lines) {
        if (isFence(line)) {
            if (open) {
                fenced.push_back(std::move(*open));
                open.reset();
            } else {
                open.emplace();
            }
        } else if (open) {
            open->push_back(line);
        }
    }
    for (auto it = fenced.rbegin(); it != fenced.rend(); ++it) {
        if (std::any_of(it->begin(), it->end(), isPersonLine)) return *it;
    }

    std::vector<std::vector<std::string>> paragraphs(1);
    for (const auto& line : lines) {
        if (trim(line).empty()) {
            if (!paragraphs.back().empty()) paragraphs.emplace_back();
        } else if (!isFence(line)) {
            paragraphs.back().push_back(line);
        }
    }
    auto hasPerson = [](const std::vector<std::string>& p) { return std::any_of(p.begin(), p.end(), isPersonLine); };
    auto end = paragraphs.size();
    while (end > 0 && !hasPerson(paragraphs[end - 1])) --end;
    auto begin = end;
    while (begin > 0 && hasPerson(paragraphs[begin - 1])) --begin;
    std::vector<std::string> region;
    for (auto i = begin; i < end; ++i) region.insert(region.end(), paragraphs[i].begin(), paragraphs[i].end());
    return region;
}

} // namespace detail

/// Extracts the final refined child dialogue from a teacher reply.
inline ChildParse parseChild(const std::string& raw) {
    const auto region = detail::finalDialogueRegion(detail::splitLines(raw));
    Dialogue d;
    d.source = Source::augmented;
    bool started = false;
    for (const auto& line : region) {
        if (detail::trim(line).empty()) continue;
        std::smatch m;
        if (std::regex_match(line, m, detail::personLine())) {
            started = true;
            auto text = std::string(detail::trim(m[2].str()));
            while (!text.empty() && text.back() == '*') text.pop_back();
            d.turns.push_back({m[1].str() == "1" ? Speaker::person1 : Speaker::person2, text});
            continue;
        }
        if (!started) continue; // heading before the first turn
        if (std::regex_match(line, m, detail::otherSpeakerLine()))
            return {std::nullopt, "unexpected speaker '" + m[1].str() + "'"};
        d.turns.back().text += " ";
        d.turns.back().text += detail::trim(line);
    }
    if (d.turns.empty()) return {std::nullopt, "no Person1/Person2 turns found"};
    for (auto& t : d.turns) {
        t.text = std::string(detail::trim(t.text));
        if (t.text.empty()) return {std::nullopt, "empty turn in child dialogue"};
    }
    return {std::move(d), {}};
}

// ---------------------------------------------------------------------------
// Generation

enum class AugmentationStatus { ok, refusal, parse_error };

inline const char* toString(AugmentationStatus s) {
    switch (s) {
    case AugmentationStatus::ok: return "ok";
    case AugmentationStatus::refusal: return "refusal";
    case AugmentationStatus::parse_error: return "parse_error";
    }
    return "parse_error";
}

struct AugmentationRecord {
    std::string parent_a_id;
    std::string parent_b_id;
    Label label = Label::yes;
    std::string raw_output;
    std::optional<Dialogue> child; // present iff status == ok
    AugmentationStatus status = AugmentationStatus::parse_error;
    std::string error;
};

inline Json toJson(const AugmentationRecord& r) {
    Json j{{"parents", Json::array({r.parent_a_id, r.parent_b_id})},
           {"label", toInt(r.label)},
           {"status", toString(r.status)},
           {"raw_output", r.raw_output},
           {"child", r.child ? toJson(*r.child) : Json(nullptr)}};
    if (!r.error.empty()) j["error"] = r.error;
    return j;
}

struct AugmentOptions {
    std::string model;
    bool replace_failures = true; // draw unused pairs after refusals/parse errors
    int parallelism = 1;
};

struct AugmentationResult {
    Dataset expanded;
    std::vector<AugmentationRecord> records;
    std::size_t ok_plus = 0;
    std::size_t ok_minus = 0;
    bool aborted = false;
    std::string abort_reason;
};

inline std::string childId(Label label, std::size_t sequence) {
    std::ostringstream os;
    os << "aug-" << toInt(label) << '-' << std::setw(6) << std::setfill('0') << sequence;
    return os.str();
}

/// Generates the planned children and returns the expanded dataset (all
/// source items unchanged, followed by the accepted children) plus one
/// record per teacher call, in pair order. A transport failure stops the run
/// and returns what was produced so far with aborted set.
inline AugmentationResult runAugmentation(const Dataset& d, const AugmentationPlan& plan, LlmGateway& gateway,
                                          const AugmentOptions& opts) {
    plan.validate();
    AugmentationResult result;
    result.expanded = d;

    std::set<std::string> ids;
    std::unordered_map<std::string, const LabeledDialogue*> by_id;
    for (const auto& it : d.items) {
        ids.insert(it.id());
        by_id.emplace(it.id(), &it);
    }
    const auto parallelism = static_cast<std::size_t>(std::max(1, opts.parallelism));

    for (auto [label, target] : {std::pair{Label::yes, plan.target_plus}, std::pair{Label::no, plan.target_minus}}) {
        detail::ClassPairSource source(d, label, plan);
        std::size_t ok = 0, attempts = 0, sequence = 0;
        while (ok < target && !result.aborted) {
            const std::size_t budget = opts.replace_failures ? target - ok : target - attempts;
            if (budget == 0) break;
            std::vector<ParentPair> wave;
            while (wave.size() < std::min(parallelism, budget)) {
                auto p = source.next();
                if (!p) break;
                wave.push_back(std::move(*p));
            }
            if (wave.empty()) break; // all C(n,2) pairs used

            std::vector<std::future<LlmResponse>> calls;
            for (const auto& p : wave) {
                const auto* a = by_id.at(p.parent_a);
                const auto* b = by_id.at(p.parent_b);
                LlmRequest req{opts.model, renderEvosaPrompt(a->dialogue, b->dialogue, label)};
                calls.push_back(std::async(wave.size() > 1 ? std::launch::async : std::launch::deferred,
                                           [&gateway, req] { return gateway.complete(req); }));
            }
            for (std::size_t k = 0; k < wave.size(); ++k) {
                auto resp = calls[k].get();
                if (result.aborted) continue;
                if (resp.status == ResponseStatus::transport_error) {
                    result.aborted = true;
                    result.abort_reason = "teacher call failed for pair (" + wave[k].parent_a + ", " +
                                          wave[k].parent_b + "): " + resp.error;
                    continue;
                }
                ++attempts;
                AugmentationRecord rec{wave[k].parent_a, wave[k].parent_b, label, resp.text, std::nullopt,
                                       AugmentationStatus::parse_error, {}};
                if (resp.status == ResponseStatus::refusal) {
                    rec.status = AugmentationStatus::refusal;
                    rec.error = "teacher refused";
                } else if (auto parsed = parseChild(resp.text); parsed.dialogue) {
                    std::string id;
                    do id = childId(label, ++sequence);
                    while (ids.count(id));
                    ids.insert(id);
                    parsed.dialogue->id = id;
                    rec.child = parsed.dialogue;
                    rec.status = AugmentationStatus::ok;

                    const auto* a = by_id.at(wave[k].parent_a);
                    const auto* b = by_id.at(wave[k].parent_b);
                    LabeledDialogue child{*parsed.dialogue, label,
                                          Provenance::augmented(wave[k].parent_a, wave[k].parent_b), std::nullopt,
                                          Json::object()};
                    if (plan.parent_split) child.split = plan.parent_split;
                    else if (a->split == b->split) child.split = a->split;
                    result.expanded.items.push_back(std::move(child));
                    ++ok;
                } else {
                    rec.error = parsed.error;
                }
                result.records.push_back(std::move(rec));
            }
        }
        (label == Label::yes ? result.ok_plus : result.ok_minus) = ok;
        if (result.aborted) break;
    }
    return result;
}

} // namespace mentalmad
