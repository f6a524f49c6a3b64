#pragma once

// Candidate retrieval ahead of annotation: length-adaptive key-phrase
// matching, optional LLM-assisted flagging, and candidate-pool assembly.
// Nothing in here ever writes a label.

#include "mentalmad/corpus.hpp"
#include "mentalmad/detail/random.hpp"
#include "mentalmad/detail/text.hpp"
#include "mentalmad/error.hpp"
#include "mentalmad/llm_gateway.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

namespace mentalmad {

inline std::vector<std::string> defaultKeyPhrases() {
    return {"you make me do this",        "how could you do this to me", "know your place",
            "you should not feel that way", "what more do you want",     "i do not remember",
            "i do not like drama",        "watch your step",             "you always do this",
            "you are too sensitive",      "it was not intentional",      "you do not love me",
            "you would do it if you love me", "it is all in the past"};
}

/// Phrases of token length <= max_len require `percent` % of their tokens.
/// The last rule has no max_len and covers every longer phrase.
struct ThresholdRule {
    std::optional<std::size_t> max_len;
    int percent = 100;
};

inline std::vector<ThresholdRule> defaultThresholds() { return {{4, 100}, {6, 90}, {10, 80}, {std::nullopt, 70}}; }

struct MatcherConfig {
    std::vector<std::string> key_phrases = defaultKeyPhrases();
    std::vector<ThresholdRule> thresholds = defaultThresholds();

    void validate() const {
        if (thresholds.empty()) throw ConfigError("threshold rules are empty");
        std::size_t previous = 0;
        for (std::size_t i = 0; i < thresholds.size(); ++i) {
            const auto& r = thresholds[i];
            if (r.percent <= 0 || r.percent > 100) throw ConfigError("match percentage must be in (0, 100]");
            const bool last = i + 1 == thresholds.size();
            if (last != !r.max_len) throw ConfigError("only the last threshold rule may be unbounded");
            if (r.max_len) {
                if (*r.max_len <= previous) throw ConfigError("threshold buckets must be strictly increasing");
                previous = *r.max_len;
            }
        }
    }

    [[nodiscard]] int percentFor(std::size_t length) const {
        for (const auto& r : thresholds)
            if (!r.max_len || length <= *r.max_len) return r.percent;
        return thresholds.back().percent;
    }

    /// ceil(P/100 * L) in integer arithmetic.
    [[nodiscard]] std::size_t requiredOverlap(std::size_t length) const {
        return (static_cast<std::size_t>(percentFor(length)) * length + 99) / 100;
    }
};

/// Lowercase, whitespace split, leading/trailing punctuation stripped per token.
inline std::vector<std::string> normalizeTokens(std::string_view text) {
    std::vector<std::string> out;
    for (auto tok : detail::splitWhitespace(text)) {
        while (!tok.empty() && std::ispunct(static_cast<unsigned char>(tok.front()))) tok.remove_prefix(1);
        while (!tok.empty() && std::ispunct(static_cast<unsigned char>(tok.back()))) tok.remove_suffix(1);
        if (!tok.empty()) out.push_back(detail::toLower(tok));
    }
    return out;
}

/// Splits on '.', '!' and '?'; fragments without tokens are dropped.
inline std::vector<std::string> splitSentences(std::string_view text) {
    std::vector<std::string> out;
    std::string current;
    auto flush = [&] {
        if (!normalizeTokens(current).empty()) out.push_back(current);
        current.clear();
    };
    for (char c : text) {
        if (c == '.' || c == '!' || c == '?') flush();
        else current += c;
    }
    flush();
    return out;
}

/// Size of the multiset intersection of two token lists.
inline std::size_t multisetOverlap(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::unordered_map<std::string, std::size_t> counts;
    for (const auto& t : a) ++counts[t];
    std::size_t overlap = 0;
    for (const auto& t : b) {
        auto it = counts.find(t);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    return overlap;
}

struct MatchEvidence {
    std::size_t turn_index = 0;
    std::size_t sentence_index = 0; // within the turn
    std::string phrase;
    std::size_t overlap_count = 0;
    std::size_t required_count = 0;

    friend bool operator==(const MatchEvidence&, const MatchEvidence&) = default;
};

enum class FlagMode { key_phrase, llm, combined };

inline const char* toString(FlagMode m) {
    switch (m) {
    case FlagMode::key_phrase: return "key_phrase";
    case FlagMode::llm: return "llm";
    case FlagMode::combined: return "combined";
    }
    return "key_phrase";
}

struct FlagResult {
    std::string dialogue_id;
    bool flagged = false;
    std::vector<MatchEvidence> evidence;
    FlagMode mode = FlagMode::key_phrase;
    std::string llm_reply; // raw teacher reply when the LLM was consulted
};

class KeyPhraseMatcher {
public:
    explicit KeyPhraseMatcher(MatcherConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        for (const auto& p : cfg_.key_phrases) {
            auto tokens = normalizeTokens(p);
            if (tokens.empty()) continue;
            const auto required = cfg_.requiredOverlap(tokens.size());
            phrases_.push_back({p, std::move(tokens), required});
        }
    }

    [[nodiscard]] FlagResult match(const Dialogue& d) const {
        FlagResult r;
        r.dialogue_id = d.id;
        for (std::size_t t = 0; t < d.turns.size(); ++t) {
            const auto sentences = splitSentences(d.turns[t].text);
            for (std::size_t s = 0; s < sentences.size(); ++s) {
                const auto tokens = normalizeTokens(sentences[s]);
                for (const auto& p : phrases_) {
                    const auto overlap = multisetOverlap(p.tokens, tokens);
                    if (overlap >= p.required) r.evidence.push_back({t, s, p.text, overlap, p.required});
                }
            }
        }
        r.flagged = !r.evidence.empty();
        return r;
    }

    [[nodiscard]] const MatcherConfig& config() const { return cfg_; }

private:
    struct Phrase {
        std::string text;
        std::vector<std::string> tokens;
        std::size_t required;
    };

    MatcherConfig cfg_;
    std::vector<Phrase> phrases_;
};

inline FlagResult matchKeyPhrases(const Dialogue& d, const MatcherConfig& cfg) {
    return KeyPhraseMatcher(cfg).match(d);
}

inline std::string renderRetrievalPrompt(const Dialogue& d) {
    return "You are helping to retrieve candidate dialogues for a mental manipulation study. "
           "Decide whether the dialogue below may contain elements of mental manipulation. "
           "Answer with Yes or No only.\n\n"
           "### Definition of Mental Manipulation:\n"
           "Mental manipulation is using language to influence, alter, or control an individual's "
           "psychological state or perception for the manipulator's benefit.\n\n"
           "### Dialogue:\n" +
           serializeDialogue(d);
}

/// Retrieval-only LLM flag. An unparseable reply or a gateway failure is an
/// error carrying the raw reply, never a silent "not flagged".
inline FlagResult llmFlag(const Dialogue& d, LlmGateway& gateway, const std::string& model) {
    const auto resp = gateway.complete({model, renderRetrievalPrompt(d), 0.0, 16});
    if (resp.status == ResponseStatus::transport_error)
        throw UpstreamError("retrieval call failed for " + d.id + ": " + resp.error);
    const auto tokens = normalizeTokens(resp.text);
    FlagResult r;
    r.dialogue_id = d.id;
    r.mode = FlagMode::llm;
    r.llm_reply = resp.text;
    if (resp.status == ResponseStatus::ok && !tokens.empty()) {
        if (tokens.front() == "yes") {
            r.flagged = true;
            return r;
        }
        if (tokens.front() == "no") return r;
    }
    throw UpstreamError("unparseable retrieval reply for " + d.id + ": " + Json(resp.text).dump());
}

/// Union of a key-phrase flag and an LLM flag for the same dialogue.
inline FlagResult combineFlags(const FlagResult& key_phrase, const FlagResult& llm) {
    if (key_phrase.dialogue_id != llm.dialogue_id) throw DataError("combining flags of different dialogues");
    FlagResult r = key_phrase;
    r.mode = FlagMode::combined;
    r.flagged = key_phrase.flagged || llm.flagged;
    r.llm_reply = llm.llm_reply;
    return r;
}

/// All flagged dialogues plus a seeded sample of `extra_unflagged` others,
/// with labels and splits cleared.
inline Dataset buildCandidatePool(const Dataset& d, const std::vector<FlagResult>& flags,
                                  std::size_t extra_unflagged, std::uint64_t seed) {
    std::map<std::string, bool> flagged;
    for (const auto& f : flags) flagged[f.dialogue_id] = flagged[f.dialogue_id] || f.flagged;

    std::vector<std::string> unflagged;
    for (const auto& it : d.items) {
        auto f = flagged.find(it.id());
        if (f == flagged.end()) throw DataError("no flag result for dialogue " + it.id());
        if (!f->second) unflagged.push_back(it.id());
    }
    if (extra_unflagged > unflagged.size())
        throw ConfigError("requested " + std::to_string(extra_unflagged) + " unflagged dialogues but only " +
                          std::to_string(unflagged.size()) + " exist");

    std::sort(unflagged.begin(), unflagged.end());
    detail::Rng rng(seed, 0x9001);
    rng.shuffle(unflagged);
    const std::set<std::string> sampled(unflagged.begin(),
                                        unflagged.begin() + static_cast<std::ptrdiff_t>(extra_unflagged));

    Dataset pool{d.name, {}, seed};
    for (const auto& it : d.items) {
        if (flagged[it.id()] || sampled.count(it.id())) {
            auto copy = it;
            copy.label.reset();
            copy.split.reset();
            pool.items.push_back(std::move(copy));
        }
    }
    return pool;
}

inline std::vector<std::string> loadKeyPhrases(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read key phrases '" + path + "'");
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        const auto t = detail::trim(line);
        if (!t.empty()) out.emplace_back(t);
    }
    return out;
}

inline Json toJson(const FlagResult& f) {
    Json ev = Json::array();
    for (const auto& e : f.evidence) {
        ev.push_back(Json{{"turn_index", e.turn_index},
                          {"sentence_index", e.sentence_index},
                          {"phrase", e.phrase},
                          {"overlap_count", e.overlap_count},
                          {"required_count", e.required_count}});
    }
    Json j{{"dialogue_id", f.dialogue_id}, {"flagged", f.flagged}, {"evidence", std::move(ev)}, {"mode", toString(f.mode)}};
    if (f.mode != FlagMode::key_phrase) j["llm_reply"] = f.llm_reply;
    return j;
}

inline FlagResult flagFromJson(const Json& j) {
    FlagResult f;
    try {
        f.dialogue_id = j.at("dialogue_id").get<std::string>();
        f.flagged = j.at("flagged").get<bool>();
        for (const auto& e : j.value("evidence", Json::array())) {
            f.evidence.push_back({e.at("turn_index").get<std::size_t>(), e.at("sentence_index").get<std::size_t>(),
                                  e.at("phrase").get<std::string>(), e.at("overlap_count").get<std::size_t>(),
                                  e.at("required_count").get<std::size_t>()});
        }
        const auto mode = j.value("mode", std::string("key_phrase"));
        f.mode = mode == "llm" ? FlagMode::llm : mode == "combined" ? FlagMode::combined : FlagMode::key_phrase;
        f.llm_reply = j.value("llm_reply", std::string());
    } catch (const Json::exception& e) {
        throw DataError(std::string("malformed flag record: ") + e.what());
    }
    return f;
}

inline std::vector<FlagResult> loadFlags(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read flags '" + path + "'");
    std::vector<FlagResult> out;
    std::string line;
    while (std::getline(in, line)) {
        if (detail::trim(line).empty()) continue;
        try {
            out.push_back(flagFromJson(Json::parse(line)));
        } catch (const Json::exception& e) {
            throw DataError(path + ": invalid JSON: " + e.what());
        }
    }
    return out;
}

} // namespace mentalmad
