#pragma once

// Dialogue data model, JSONL persistence, anonymization, deterministic
// splitting and dataset statistics.

#include "mentalmad/detail/random.hpp"
#include "mentalmad/detail/text.hpp"
#include "mentalmad/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace mentalmad {

using Json = nlohmann::ordered_json;

enum class Speaker { person1, person2 };

inline const char* toString(Speaker s) { return s == Speaker::person1 ? "Person1" : "Person2"; }

inline std::optional<Speaker> parseSpeaker(std::string_view s) {
    if (s == "Person1") return Speaker::person1;
    if (s == "Person2") return Speaker::person2;
    return std::nullopt;
}

struct Turn {
    Speaker speaker = Speaker::person1;
    std::string text;

    friend bool operator==(const Turn&, const Turn&) = default;
};

enum class Source { original, augmented, external };

struct Dialogue {
    std::string id;
    std::vector<Turn> turns;
    Source source = Source::original;

    friend bool operator==(const Dialogue&, const Dialogue&) = default;
};

/// Binary manipulation label. yes = manipulation present.
enum class Label { no = 0, yes = 1 };

inline int toInt(Label l) { return l == Label::yes ? 1 : 0; }
inline Label labelFromInt(int v) { return v ? Label::yes : Label::no; }
inline const char* judgmentWord(Label l) { return l == Label::yes ? "Yes" : "No"; }
inline Label negate(Label l) { return l == Label::yes ? Label::no : Label::yes; }

enum class Split { train, val, test };

inline const char* toString(Split s) {
    switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    }
    return "train";
}

inline std::optional<Split> parseSplit(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    return std::nullopt;
}

struct Provenance {
    enum class Kind { original, augmented };
    Kind kind = Kind::original;
    std::string parent_a;
    std::string parent_b;

    static Provenance original() { return {}; }
    static Provenance augmented(std::string a, std::string b) {
        return {Kind::augmented, std::move(a), std::move(b)};
    }
    [[nodiscard]] bool isAugmented() const { return kind == Kind::augmented; }

    friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct LabeledDialogue {
    Dialogue dialogue;
    std::optional<Label> label;
    Provenance provenance;
    std::optional<Split> split;
    Json extra = Json::object(); // unknown fields, preserved on round-trip

    [[nodiscard]] const std::string& id() const { return dialogue.id; }

    friend bool operator==(const LabeledDialogue&, const LabeledDialogue&) = default;
};

struct Dataset {
    std::string name;
    std::vector<LabeledDialogue> items;
    std::uint64_t seed = 42;

    [[nodiscard]] std::size_t count(Label l) const {
        return static_cast<std::size_t>(std::count_if(items.begin(), items.end(), [l](const auto& it) {
            return it.label && *it.label == l;
        }));
    }
    [[nodiscard]] std::size_t unlabeledCount() const {
        return static_cast<std::size_t>(
            std::count_if(items.begin(), items.end(), [](const auto& it) { return !it.label; }));
    }
    [[nodiscard]] const LabeledDialogue* find(std::string_view id) const {
        for (const auto& it : items)
            if (it.id() == id) return &it;
        return nullptr;
    }
};

/// Items of one split, in dataset order.
inline Dataset filterSplit(const Dataset& d, Split s) {
    Dataset out{d.name, {}, d.seed};
    for (const auto& it : d.items)
        if (it.split == s) out.items.push_back(it);
    return out;
}

// "PersonN: text" lines joined by newlines.
inline std::string serializeDialogue(const Dialogue& d) {
    std::string out;
    for (std::size_t i = 0; i < d.turns.size(); ++i) {
        if (i) out += '\n';
        out += toString(d.turns[i].speaker);
        out += ": ";
        out += d.turns[i].text;
    }
    return out;
}

/// Checks the structural invariants; throws DataError with the reason.
inline void validate(const LabeledDialogue& item) {
    if (item.id().empty()) throw DataError("record has an empty id");
    if (item.dialogue.turns.empty()) throw DataError("record has no turns");
    for (const auto& t : item.dialogue.turns) {
        if (detail::trim(t.text).empty()) throw DataError("turn text is empty");
    }
    if (item.provenance.isAugmented()) {
        if (item.provenance.parent_a == item.provenance.parent_b)
            throw DataError("augmented record has identical parents");
        if (!item.label) throw DataError("augmented record has no label");
    }
}

// ---------------------------------------------------------------------------
// JSONL schema

inline Json toJson(const Dialogue& d) {
    Json turns = Json::array();
    for (const auto& t : d.turns) turns.push_back(Json{{"speaker", toString(t.speaker)}, {"text", t.text}});
    return Json{{"id", d.id}, {"turns", std::move(turns)}};
}

inline Json toJson(const LabeledDialogue& item) {
    Json j = toJson(item.dialogue);
    j["label"] = item.label ? Json(toInt(*item.label)) : Json(nullptr);
    if (item.provenance.isAugmented()) {
        j["provenance"] = Json{{"kind", "augmented"},
                               {"parents", Json::array({item.provenance.parent_a, item.provenance.parent_b})}};
    } else {
        j["provenance"] = Json{{"kind", "original"}};
    }
    j["split"] = item.split ? Json(toString(*item.split)) : Json(nullptr);
    if (item.dialogue.source == Source::external) j["source"] = "external";
    for (const auto& [k, v] : item.extra.items()) j[k] = v;
    return j;
}

/// Parses one corpus record. With anonymize set, speaker names are mapped to
/// Person1/Person2 by order of first appearance.
inline LabeledDialogue parseRecord(const Json& j, bool anonymize) {
    if (!j.is_object()) throw DataError("record is not a JSON object");
    LabeledDialogue item;

    if (!j.contains("id") || !j["id"].is_string()) throw DataError("record missing string id");
    item.dialogue.id = j["id"].get<std::string>();

    if (!j.contains("turns") || !j["turns"].is_array()) throw DataError("record missing turns");
    std::map<std::string, Speaker> mapping;
    for (const auto& t : j["turns"]) {
        if (!t.is_object() || !t.contains("speaker") || !t["speaker"].is_string() || !t.contains("text") ||
            !t["text"].is_string())
            throw DataError("turn must have string speaker and text");
        const auto name = t["speaker"].get<std::string>();
        Speaker speaker;
        if (anonymize) {
            auto it = mapping.find(name);
            if (it == mapping.end()) {
                if (mapping.size() == 2) throw DataError("more than two distinct speakers");
                it = mapping.emplace(name, mapping.empty() ? Speaker::person1 : Speaker::person2).first;
            }
            speaker = it->second;
        } else {
            auto parsed = parseSpeaker(name);
            if (!parsed) throw DataError("speaker '" + name + "' is not Person1/Person2 (use anonymize)");
            speaker = *parsed;
        }
        item.dialogue.turns.push_back({speaker, std::string(detail::trim(t["text"].get<std::string>()))});
    }

    if (j.contains("label") && !j["label"].is_null()) {
        const auto& l = j["label"];
        if (!l.is_number_integer() || (l.get<int>() != 0 && l.get<int>() != 1))
            throw DataError("label must be 0, 1 or null");
        item.label = labelFromInt(l.get<int>());
    }

    if (j.contains("provenance") && !j["provenance"].is_null()) {
        const auto& p = j["provenance"];
        if (!p.is_object() || !p.contains("kind") || !p["kind"].is_string())
            throw DataError("provenance must be an object with a kind");
        const auto kind = p["kind"].get<std::string>();
        if (kind == "augmented") {
            if (!p.contains("parents") || !p["parents"].is_array() || p["parents"].size() != 2 ||
                !p["parents"][0].is_string() || !p["parents"][1].is_string())
                throw DataError("augmented provenance needs two parent ids");
            item.provenance = Provenance::augmented(p["parents"][0].get<std::string>(),
                                                    p["parents"][1].get<std::string>());
            item.dialogue.source = Source::augmented;
        } else if (kind != "original") {
            throw DataError("unknown provenance kind '" + kind + "'");
        }
    }

    if (j.contains("split") && !j["split"].is_null()) {
        if (!j["split"].is_string()) throw DataError("split must be a string or null");
        auto s = parseSplit(j["split"].get<std::string>());
        if (!s) throw DataError("unknown split '" + j["split"].get<std::string>() + "'");
        item.split = s;
    }

    if (j.contains("source")) {
        if (j["source"] != "external") throw DataError("source field only supports \"external\"");
        item.dialogue.source = Source::external;
    }

    for (const auto& [k, v] : j.items()) {
        if (k != "id" && k != "turns" && k != "label" && k != "provenance" && k != "split" && k != "source")
            item.extra[k] = v;
    }

    validate(item);
    return item;
}

struct IngestError {
    std::size_t line = 0; // 1-based
    std::string id;       // empty when unknown
    std::string reason;
};

struct IngestResult {
    Dataset dataset;
    std::vector<IngestError> errors;
};

inline IngestResult ingestStream(std::istream& in, bool anonymize, std::string name = {}) {
    IngestResult result;
    result.dataset.name = std::move(name);
    std::set<std::string> seen;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (detail::trim(line).empty()) continue;
        std::string id;
        try {
            const auto j = Json::parse(line);
            if (j.is_object() && j.contains("id") && j["id"].is_string()) id = j["id"].get<std::string>();
            auto item = parseRecord(j, anonymize);
            if (!seen.insert(item.id()).second) throw DataError("duplicate id");
            result.dataset.items.push_back(std::move(item));
        } catch (const Json::exception& e) {
            result.errors.push_back({number, id, std::string("invalid JSON: ") + e.what()});
        } catch (const DataError& e) {
            result.errors.push_back({number, id, e.what()});
        }
    }
    return result;
}

/// Reads a JSONL corpus. Malformed lines are reported, not dropped silently.
inline IngestResult ingest(const std::string& path, bool anonymize) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read '" + path + "'");
    return ingestStream(in, anonymize, path);
}

/// Like ingest but any malformed line is an error.
inline Dataset loadDataset(const std::string& path) {
    auto r = ingest(path, false);
    if (!r.errors.empty()) {
        const auto& e = r.errors.front();
        throw DataError(path + ":" + std::to_string(e.line) + ": " + e.reason);
    }
    return std::move(r.dataset);
}

inline void writeJsonl(const Dataset& d, std::ostream& out) {
    for (const auto& item : d.items) out << toJson(item).dump() << '\n';
}

inline void writeDataset(const Dataset& d, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + path + "'");
    writeJsonl(d, out);
}

inline Json toJson(const IngestError& e) {
    return Json{{"line", e.line}, {"id", e.id.empty() ? Json(nullptr) : Json(e.id)}, {"reason", e.reason}};
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitRatios {
    double train = 0.6;
    double val = 0.2;
    double test = 0.2;
};

inline void validateRatios(const SplitRatios& r) {
    for (double v : {r.train, r.val, r.test}) {
        if (!std::isfinite(v) || v < 0.0) throw ConfigError("split ratios must be non-negative");
    }
    if (std::abs(r.train + r.val + r.test - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
}

/// Parses "6:2:2" or "0.6:0.2:0.2"; the parts are normalized by their sum.
inline SplitRatios parseRatios(std::string_view text) {
    std::vector<double> parts;
    std::size_t start = 0;
    while (start <= text.size()) {
        const auto colon = text.find(':', start);
        const auto piece = std::string(text.substr(start, colon == std::string_view::npos ? text.npos : colon - start));
        try {
            std::size_t used = 0;
            parts.push_back(std::stod(piece, &used));
            if (used != piece.size()) throw ConfigError("");
        } catch (...) {
            throw ConfigError("invalid split ratio '" + std::string(text) + "'");
        }
        if (colon == std::string_view::npos) break;
        start = colon + 1;
    }
    if (parts.size() != 3) throw ConfigError("split ratio needs three parts: train:val:test");
    const double sum = parts[0] + parts[1] + parts[2];
    if (!(sum > 0.0) || parts[0] < 0 || parts[1] < 0 || parts[2] < 0)
        throw ConfigError("invalid split ratio '" + std::string(text) + "'");
    return {parts[0] / sum, parts[1] / sum, parts[2] / sum};
}

struct SplitSizes {
    std::size_t train = 0, val = 0, test = 0;
};

/// val and test are floor(ratio * n); the remainder goes to train.
inline SplitSizes splitSizes(std::size_t n, const SplitRatios& r) {
    // Ratios such as 0.2 are not exact in binary; the epsilon keeps
    // 0.2 * 3355 at 671 rather than 670.
    auto part = [n](double ratio) {
        return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
    };
    SplitSizes s;
    s.val = std::min(part(r.val), n);
    s.test = std::min(part(r.test), n - s.val);
    s.train = n - s.val - s.test;
    return s;
}

/// Assigns every labeled item to exactly one split. Unlabeled items keep no
/// split. The assignment depends only on the item ids, ratios and seed.
inline Dataset splitDataset(Dataset d, const SplitRatios& ratios, std::uint64_t seed) {
    validateRatios(ratios);
    std::vector<std::size_t> labeled;
    for (std::size_t i = 0; i < d.items.size(); ++i) {
        d.items[i].split.reset();
        if (d.items[i].label) labeled.push_back(i);
    }
    std::sort(labeled.begin(), labeled.end(),
              [&](std::size_t a, std::size_t b) { return d.items[a].id() < d.items[b].id(); });
    detail::Rng rng(seed, 0x5b17);
    rng.shuffle(labeled);

    const auto sizes = splitSizes(labeled.size(), ratios);
    for (std::size_t k = 0; k < labeled.size(); ++k) {
        auto& item = d.items[labeled[k]];
        if (k < sizes.train) item.split = Split::train;
        else if (k < sizes.train + sizes.val) item.split = Split::val;
        else item.split = Split::test;
    }
    d.seed = seed;
    return d;
}

// ---------------------------------------------------------------------------
// Statistics

struct DatasetStats {
    std::size_t sample_size = 0;
    double avg_turns = 0.0;
    double avg_words = 0.0;
    std::size_t yes_count = 0;
    double yes_pct = 0.0;
    std::size_t no_count = 0;
    double no_pct = 0.0;
    std::size_t unlabeled_count = 0;
};

inline std::size_t wordCount(const Dialogue& d) {
    std::size_t words = 0;
    for (const auto& t : d.turns) words += detail::splitWhitespace(t.text).size();
    return words;
}

inline DatasetStats computeStats(const Dataset& d) {
    DatasetStats s;
    s.sample_size = d.items.size();
    if (d.items.empty()) return s;
    double turns = 0, words = 0;
    for (const auto& it : d.items) {
        turns += static_cast<double>(it.dialogue.turns.size());
        words += static_cast<double>(wordCount(it.dialogue));
    }
    s.avg_turns = turns / static_cast<double>(s.sample_size);
    s.avg_words = words / static_cast<double>(s.sample_size);
    s.yes_count = d.count(Label::yes);
    s.no_count = d.count(Label::no);
    s.unlabeled_count = d.unlabeledCount();
    if (const auto labeled = s.yes_count + s.no_count; labeled > 0) {
        s.yes_pct = 100.0 * static_cast<double>(s.yes_count) / static_cast<double>(labeled);
        s.no_pct = 100.0 * static_cast<double>(s.no_count) / static_cast<double>(labeled);
    }
    return s;
}

inline Json toJson(const DatasetStats& s) {
    return Json{{"sample_size", s.sample_size}, {"avg_turns", s.avg_turns},   {"avg_words", s.avg_words},
                {"yes_count", s.yes_count},     {"yes_pct", s.yes_pct},       {"no_count", s.no_count},
                {"no_pct", s.no_pct},           {"unlabeled_count", s.unlabeled_count}};
}

} // namespace mentalmad
