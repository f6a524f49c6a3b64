#pragma once

// Annotation protocol: qualification, group assignment, vote capture,
// majority consensus with a confidence-weighted score, and Fleiss' kappa.

#include "mentalmad/corpus.hpp"
#include "mentalmad/detail/random.hpp"
#include "mentalmad/error.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <ctime>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace mentalmad {

inline constexpr int kAnnotationSchemaVersion = 1;
inline constexpr int kRatersPerItem = 3;

inline const std::string kAnnotationGuideline =
    "Based on the definition of mental manipulation, please determine whether the given dialogue contains "
    "elements of mental manipulation. If it does, label it as 1; otherwise, label it as 0. In addition, provide "
    "your confidence level in the annotation on a 5-point scale (1 = very uncertain, 5 = very confident).\n\n"
    "### Definition:\n"
    "Mental manipulation is using language to influence, alter, or control an individual's psychological state "
    "or perception for the manipulator's benefit.\n\n"
    "### Dialogue:\n"
    "<insert dialogue>";

/// Integer form of "accuracy >= 0.85", so 85/100 is exactly on the line.
inline bool meetsQualification(std::size_t correct, std::size_t total) {
    return total > 0 && correct * 100 >= 85 * total;
}

struct Annotator {
    std::string id;
    int group = 1;
    bool qualified = false;
    double qualification_accuracy = 0;
};

struct AnnotationRecord {
    std::string dialogue_id;
    std::string annotator_id;
    Label label = Label::no;
    int confidence = 1; // 1 = very uncertain, 5 = very confident
    std::string timestamp;
};

inline void validate(const AnnotationRecord& r) {
    if (r.dialogue_id.empty()) throw DataError("annotation has no dialogue_id");
    if (r.annotator_id.empty()) throw DataError("annotation has no annotator_id");
    if (r.confidence < 1 || r.confidence > 5) throw DataError("confidence must be in 1..5");
}

inline Json toJson(const AnnotationRecord& r) {
    return Json{{"dialogue_id", r.dialogue_id},
                {"annotator_id", r.annotator_id},
                {"label", toInt(r.label)},
                {"confidence", r.confidence},
                {"timestamp", r.timestamp}};
}

inline AnnotationRecord annotationFromJson(const Json& j) {
    AnnotationRecord r;
    try {
        r.dialogue_id = j.at("dialogue_id").get<std::string>();
        r.annotator_id = j.at("annotator_id").get<std::string>();
        const int label = j.at("label").get<int>();
        if (label != 0 && label != 1) throw DataError("label must be 0 or 1");
        r.label = labelFromInt(label);
        r.confidence = j.at("confidence").get<int>();
        if (j.contains("timestamp") && !j["timestamp"].is_null()) r.timestamp = j["timestamp"].get<std::string>();
    } catch (const Json::exception& e) {
        throw DataError(std::string("malformed annotation: ") + e.what());
    }
    validate(r);
    return r;
}

inline Json toJson(const Annotator& a) {
    return Json{{"id", a.id},
                {"group", a.group},
                {"qualified", a.qualified},
                {"qualification_accuracy", a.qualification_accuracy}};
}

// ---------------------------------------------------------------------------
// Assignment

struct Assignment {
    std::map<std::string, int> group_of_dialogue;
    std::map<int, std::vector<std::string>> members; // group -> annotator ids
    std::map<int, std::vector<std::string>> dialogues; // group -> dialogue ids, sorted

    [[nodiscard]] std::vector<std::string> assignees(const std::string& dialogue_id) const {
        auto g = group_of_dialogue.find(dialogue_id);
        if (g == group_of_dialogue.end()) return {};
        return members.at(g->second);
    }
    [[nodiscard]] bool isAssigned(const std::string& dialogue_id, const std::string& annotator_id) const {
        const auto a = assignees(dialogue_id);
        return std::find(a.begin(), a.end(), annotator_id) != a.end();
    }
};

/// Groups annotators by their group id; every group must hold exactly three.
inline std::map<int, std::vector<std::string>> groupRoster(const std::vector<Annotator>& annotators) {
    std::map<int, std::vector<std::string>> groups;
    std::set<std::string> seen;
    for (const auto& a : annotators) {
        if (a.id.empty()) throw ConfigError("annotator with empty id");
        if (!seen.insert(a.id).second) throw ConfigError("duplicate annotator " + a.id);
        groups[a.group].push_back(a.id);
    }
    if (groups.empty()) throw ConfigError("no annotators");
    for (auto& [g, ids] : groups) {
        if (ids.size() != static_cast<std::size_t>(kRatersPerItem))
            throw ConfigError("group " + std::to_string(g) + " has " + std::to_string(ids.size()) +
                              " annotators, expected 3");
        std::sort(ids.begin(), ids.end());
    }
    return groups;
}

/// Shuffles the sorted pool ids and deals them round-robin over the groups,
/// so subsets are disjoint and differ in size by at most one.
inline Assignment partitionPool(std::vector<std::string> ids, std::map<int, std::vector<std::string>> groups,
                                std::uint64_t seed) {
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw DataError("duplicate dialogue id in pool");
    detail::Rng rng(seed, 0xA55);
    rng.shuffle(ids);
    Assignment a;
    a.members = std::move(groups);
    std::vector<int> order;
    for (const auto& [g, _] : a.members) order.push_back(g);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const int g = order[i % order.size()];
        a.group_of_dialogue[ids[i]] = g;
        a.dialogues[g].push_back(ids[i]);
    }
    for (auto& [g, list] : a.dialogues) std::sort(list.begin(), list.end());
    return a;
}

inline Assignment assignDialogues(const Dataset& pool, const std::vector<Annotator>& annotators, std::uint64_t seed) {
    for (const auto& a : annotators) {
        if (!a.qualified) throw ConfigError("annotator " + a.id + " is not qualified");
    }
    std::vector<std::string> ids;
    for (const auto& it : pool.items) ids.push_back(it.id());
    return partitionPool(std::move(ids), groupRoster(annotators), seed);
}

// ---------------------------------------------------------------------------
// Consensus

struct ConsensusResult {
    std::string dialogue_id;
    Label majority_label = Label::no;
    bool unanimous = false;
    double v_score = 0;
    int n_votes = 0;
};

/// Majority label t and v = sum(c_i * [a_i == t]) / sum(c_i) over exactly three votes.
inline ConsensusResult computeConsensus(const std::string& dialogue_id, const std::vector<AnnotationRecord>& votes) {
    if (votes.size() != static_cast<std::size_t>(kRatersPerItem))
        throw DataError("dialogue " + dialogue_id + " has " + std::to_string(votes.size()) + " of 3 votes");
    int yes = 0;
    long total = 0;
    for (const auto& v : votes) {
        validate(v);
        yes += v.label == Label::yes;
        total += v.confidence;
    }
    ConsensusResult r;
    r.dialogue_id = dialogue_id;
    r.n_votes = kRatersPerItem;
    r.majority_label = yes * 2 > kRatersPerItem ? Label::yes : Label::no;
    r.unanimous = yes == 0 || yes == kRatersPerItem;
    long agree = 0;
    for (const auto& v : votes)
        if (v.label == r.majority_label) agree += v.confidence;
    r.v_score = r.unanimous ? 1.0 : static_cast<double>(agree) / static_cast<double>(total);
    return r;
}

inline Json toJson(const ConsensusResult& c) {
    return Json{{"dialogue_id", c.dialogue_id},
                {"majority_label", toInt(c.majority_label)},
                {"unanimous", c.unanimous},
                {"v_score", c.v_score},
                {"n_votes", c.n_votes}};
}

// ---------------------------------------------------------------------------
// Fleiss' kappa

/// Per-item category counts: [votes for 0, votes for 1].
using VoteCounts = std::array<int, 2>;

struct AgreementReport {
    std::optional<double> fleiss_kappa; // empty when undefined
    std::size_t n_items = 0;
    int n_raters_per_item = 0;
    double p_bar = 0;
    double p_e = 0;
    bool degenerate_marginals = false; // every vote fell in one category
    std::string error;
};

inline AgreementReport fleissKappa(const std::vector<VoteCounts>& items) {
    if (items.size() < 2) throw DataError("Fleiss' kappa needs at least 2 items");
    const int n = items[0][0] + items[0][1];
    if (n < 2) throw DataError("Fleiss' kappa needs at least 2 raters per item");
    std::array<long long, 2> totals{0, 0};
    double sum_p = 0;
    for (const auto& c : items) {
        if (c[0] < 0 || c[1] < 0 || c[0] + c[1] != n) throw DataError("inconsistent rater counts across items");
        totals[0] += c[0];
        totals[1] += c[1];
        const long long agree = static_cast<long long>(c[0]) * (c[0] - 1) + static_cast<long long>(c[1]) * (c[1] - 1);
        sum_p += static_cast<double>(agree) / (static_cast<double>(n) * (n - 1));
    }
    AgreementReport r;
    r.n_items = items.size();
    r.n_raters_per_item = n;
    const double all = static_cast<double>(totals[0] + totals[1]);
    r.p_bar = sum_p / static_cast<double>(items.size());
    const double p0 = static_cast<double>(totals[0]) / all, p1 = static_cast<double>(totals[1]) / all;
    r.p_e = p0 * p0 + p1 * p1;
    if (totals[0] == 0 || totals[1] == 0) {
        // Chance agreement is 1, so the ratio is 0/0. Every vote agrees here,
        // which is taken as perfect agreement.
        r.p_e = 1;
        r.degenerate_marginals = true;
        r.fleiss_kappa = 1.0;
        return r;
    }
    r.fleiss_kappa = (r.p_bar - r.p_e) / (1 - r.p_e);
    return r;
}

inline Json toJson(const AgreementReport& a) {
    Json j{{"fleiss_kappa", a.fleiss_kappa ? Json(*a.fleiss_kappa) : Json(nullptr)},
           {"n_items", a.n_items},
           {"n_raters_per_item", a.n_raters_per_item},
           {"p_bar", a.p_bar},
           {"p_e", a.p_e},
           {"degenerate_marginals", a.degenerate_marginals}};
    if (!a.error.empty()) j["error"] = a.error;
    return j;
}

// ---------------------------------------------------------------------------
// Store

enum class ExportPolicy { majority, unanimous };

inline ExportPolicy parseExportPolicy(std::string_view s) {
    if (s == "majority") return ExportPolicy::majority;
    if (s == "unanimous") return ExportPolicy::unanimous;
    throw ConfigError("unknown export policy '" + std::string(s) + "' (majority|unanimous)");
}

enum class SubmitStatus { stored, duplicate, unassigned, unqualified, invalid };

struct SubmitResult {
    SubmitStatus status = SubmitStatus::stored;
    std::string message;
    AnnotationRecord record;
};

struct AnnotatorSpec {
    std::string id;
    int group = 1;
    std::optional<double> qualification_accuracy; // preset result when no qualification set is used
};

struct StoreConfig {
    Dataset pool;
    std::vector<AnnotatorSpec> annotators;
    std::optional<Dataset> qualification_set; // labeled gold items
    std::string log_path;
    std::uint64_t seed = 42;
};

struct GroupProgress {
    int group = 0;
    std::size_t dialogues = 0;
    std::size_t complete = 0;
    std::map<std::string, std::size_t> votes_by_annotator;
};

inline std::string utcNow() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Thread-safe vote store backed by an append-only JSONL log. A vote is
/// written and fsynced before submit() returns, and the log is replayed on
/// construction. A torn final line without a newline was never acknowledged
/// and is dropped.
class AnnotationStore {
public:
    explicit AnnotationStore(StoreConfig cfg) : cfg_(std::move(cfg)) {
        std::map<int, std::vector<std::string>> groups;
        std::vector<Annotator> roster;
        for (const auto& s : cfg_.annotators) roster.push_back({s.id, s.group, false, 0});
        groups = groupRoster(roster);
        for (const auto& s : cfg_.annotators) {
            if (s.group < 1) throw ConfigError("annotator group must be positive");
            specs_[s.id] = s;
        }
        if (!cfg_.qualification_set) {
            for (const auto& s : cfg_.annotators) {
                if (!s.qualification_accuracy)
                    throw ConfigError("annotator " + s.id + " needs a qualification accuracy or a qualification set");
            }
        } else {
            for (const auto& it : cfg_.qualification_set->items) {
                if (!it.label) throw ConfigError("qualification item " + it.id() + " has no gold label");
                if (cfg_.pool.find(it.id())) throw ConfigError("qualification item " + it.id() + " is also in the pool");
            }
        }
        std::vector<std::string> ids;
        for (const auto& it : cfg_.pool.items) ids.push_back(it.id());
        assignment_ = partitionPool(std::move(ids), std::move(groups), cfg_.seed);
        if (cfg_.log_path.empty()) throw ConfigError("annotation log path is empty");
        replay();
        fd_ = ::open(cfg_.log_path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
        if (fd_ < 0) throw DataError("cannot open annotation log '" + cfg_.log_path + "'");
    }

    ~AnnotationStore() {
        if (fd_ >= 0) ::close(fd_);
    }
    AnnotationStore(const AnnotationStore&) = delete;
    AnnotationStore& operator=(const AnnotationStore&) = delete;

    SubmitResult submit(AnnotationRecord rec) {
        std::lock_guard lock(mu_);
        try {
            validate(rec);
        } catch (const DataError& e) {
            return {SubmitStatus::invalid, e.what(), rec};
        }
        if (!specs_.count(rec.annotator_id)) return {SubmitStatus::unassigned, "unknown annotator", rec};
        const bool qualification_item = isQualificationItem(rec.dialogue_id);
        if (qualification_item) {
            if (qualificationDone(rec.annotator_id))
                return {SubmitStatus::unassigned, "qualification already complete", rec};
        } else {
            if (!assignment_.isAssigned(rec.dialogue_id, rec.annotator_id))
                return {SubmitStatus::unassigned, "dialogue not assigned to annotator", rec};
            if (!annotatorLocked(rec.annotator_id).qualified)
                return {SubmitStatus::unqualified, "annotator is not qualified", rec};
        }
        auto& bucket = qualification_item ? qual_votes_ : votes_;
        if (bucket[rec.dialogue_id].count(rec.annotator_id))
            return {SubmitStatus::duplicate, "annotator already voted on this dialogue", rec};
        if (rec.timestamp.empty()) rec.timestamp = utcNow();

        Json line = toJson(rec);
        line["kind"] = qualification_item ? "qualification" : "vote";
        const auto text = line.dump() + "\n";
        if (!writeAll(text)) throw DataError("failed to persist annotation to '" + cfg_.log_path + "'");
        bucket[rec.dialogue_id][rec.annotator_id] = rec;
        return {SubmitStatus::stored, "", rec};
    }

    /// Next dialogue for the annotator: unanswered qualification items first
    /// while not qualified, then unlabeled assigned pool items in id order.
    [[nodiscard]] std::optional<std::pair<std::string, bool>> next(const std::string& annotator_id) const {
        std::lock_guard lock(mu_);
        requireAnnotator(annotator_id);
        const auto a = annotatorLocked(annotator_id);
        if (!a.qualified) {
            if (!cfg_.qualification_set) return std::nullopt;
            for (const auto& id : sortedQualificationIds()) {
                auto f = qual_votes_.find(id);
                if (f == qual_votes_.end() || !f->second.count(annotator_id)) return std::make_pair(id, true);
            }
            return std::nullopt;
        }
        auto g = assignment_.dialogues.find(specs_.at(annotator_id).group);
        if (g == assignment_.dialogues.end()) return std::nullopt;
        for (const auto& id : g->second) {
            auto f = votes_.find(id);
            if (f == votes_.end() || !f->second.count(annotator_id)) return std::make_pair(id, false);
        }
        return std::nullopt;
    }

    [[nodiscard]] std::size_t remaining(const std::string& annotator_id) const {
        std::lock_guard lock(mu_);
        requireAnnotator(annotator_id);
        std::size_t n = 0;
        auto g = assignment_.dialogues.find(specs_.at(annotator_id).group);
        if (g == assignment_.dialogues.end()) return 0;
        for (const auto& id : g->second) {
            auto f = votes_.find(id);
            n += f == votes_.end() || !f->second.count(annotator_id);
        }
        return n;
    }

    [[nodiscard]] const LabeledDialogue* dialogue(const std::string& id) const {
        if (auto* p = cfg_.pool.find(id)) return p;
        return cfg_.qualification_set ? cfg_.qualification_set->find(id) : nullptr;
    }

    [[nodiscard]] Annotator annotator(const std::string& id) const {
        std::lock_guard lock(mu_);
        requireAnnotator(id);
        return annotatorLocked(id);
    }

    [[nodiscard]] std::vector<Annotator> annotators() const {
        std::lock_guard lock(mu_);
        std::vector<Annotator> out;
        for (const auto& [id, _] : specs_) out.push_back(annotatorLocked(id));
        return out;
    }

    /// Throws DataError for an unknown id or an incomplete item.
    [[nodiscard]] ConsensusResult consensus(const std::string& dialogue_id) const {
        std::lock_guard lock(mu_);
        if (!cfg_.pool.find(dialogue_id)) throw DataError("unknown dialogue " + dialogue_id);
        return computeConsensus(dialogue_id, votesFor(dialogue_id));
    }

    [[nodiscard]] std::size_t voteCount(const std::string& dialogue_id) const {
        std::lock_guard lock(mu_);
        return votesFor(dialogue_id).size();
    }

    /// Kappa over items with all three votes. Fewer than two complete items
    /// yields an empty kappa with an error message.
    [[nodiscard]] AgreementReport agreement() const {
        std::lock_guard lock(mu_);
        std::vector<VoteCounts> counts;
        for (const auto& [id, by_annotator] : votes_) {
            if (by_annotator.size() != static_cast<std::size_t>(kRatersPerItem)) continue;
            VoteCounts c{0, 0};
            for (const auto& [_, v] : by_annotator) ++c[static_cast<std::size_t>(toInt(v.label))];
            counts.push_back(c);
        }
        if (counts.size() < 2) {
            AgreementReport r;
            r.n_items = counts.size();
            r.n_raters_per_item = kRatersPerItem;
            r.error = "fewer than 2 complete items";
            return r;
        }
        return fleissKappa(counts);
    }

    /// Complete items labeled with their majority; the unanimous policy keeps
    /// only items with full agreement.
    [[nodiscard]] Dataset exportDataset(ExportPolicy policy) const {
        std::lock_guard lock(mu_);
        Dataset out;
        out.name = cfg_.pool.name + (policy == ExportPolicy::unanimous ? "_con" : "");
        out.seed = cfg_.seed;
        for (const auto& it : cfg_.pool.items) {
            const auto votes = votesFor(it.id());
            if (votes.size() != static_cast<std::size_t>(kRatersPerItem)) continue;
            const auto c = computeConsensus(it.id(), votes);
            if (policy == ExportPolicy::unanimous && !c.unanimous) continue;
            LabeledDialogue x;
            x.dialogue = it.dialogue;
            x.dialogue.source = Source::original;
            x.label = c.majority_label;
            x.extra = Json{{"annotation", Json{{"v_score", c.v_score}, {"unanimous", c.unanimous}}}};
            out.items.push_back(std::move(x));
        }
        return out;
    }

    [[nodiscard]] std::vector<GroupProgress> progress() const {
        std::lock_guard lock(mu_);
        std::vector<GroupProgress> out;
        for (const auto& [g, members] : assignment_.members) {
            GroupProgress p;
            p.group = g;
            for (const auto& m : members) p.votes_by_annotator[m] = 0;
            auto d = assignment_.dialogues.find(g);
            if (d != assignment_.dialogues.end()) {
                p.dialogues = d->second.size();
                for (const auto& id : d->second) {
                    auto f = votes_.find(id);
                    if (f == votes_.end()) continue;
                    p.complete += f->second.size() == static_cast<std::size_t>(kRatersPerItem);
                    for (const auto& [a, _] : f->second) ++p.votes_by_annotator[a];
                }
            }
            out.push_back(std::move(p));
        }
        return out;
    }

    [[nodiscard]] const Assignment& assignment() const { return assignment_; }

private:
    [[nodiscard]] bool isQualificationItem(const std::string& id) const {
        return cfg_.qualification_set && cfg_.qualification_set->find(id) != nullptr;
    }

    void requireAnnotator(const std::string& id) const {
        if (!specs_.count(id)) throw DataError("unknown annotator " + id);
    }

    [[nodiscard]] std::vector<std::string> sortedQualificationIds() const {
        std::vector<std::string> ids;
        for (const auto& it : cfg_.qualification_set->items) ids.push_back(it.id());
        std::sort(ids.begin(), ids.end());
        return ids;
    }

    [[nodiscard]] bool qualificationDone(const std::string& annotator_id) const {
        std::size_t answered = 0;
        for (const auto& [_, by] : qual_votes_) answered += by.count(annotator_id);
        return answered == cfg_.qualification_set->items.size();
    }

    [[nodiscard]] Annotator annotatorLocked(const std::string& id) const {
        const auto& s = specs_.at(id);
        Annotator a{s.id, s.group, false, 0};
        if (!cfg_.qualification_set) {
            a.qualification_accuracy = *s.qualification_accuracy;
            a.qualified = a.qualification_accuracy >= 0.85;
            return a;
        }
        std::size_t answered = 0, correct = 0;
        for (const auto& it : cfg_.qualification_set->items) {
            auto f = qual_votes_.find(it.id());
            if (f == qual_votes_.end()) continue;
            auto v = f->second.find(id);
            if (v == f->second.end()) continue;
            ++answered;
            correct += v->second.label == *it.label;
        }
        const auto total = cfg_.qualification_set->items.size();
        a.qualification_accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0;
        a.qualified = answered == total && meetsQualification(correct, total);
        return a;
    }

    [[nodiscard]] std::vector<AnnotationRecord> votesFor(const std::string& dialogue_id) const {
        std::vector<AnnotationRecord> out;
        auto f = votes_.find(dialogue_id);
        if (f == votes_.end()) return out;
        for (const auto& [_, v] : f->second) out.push_back(v);
        return out;
    }

    bool writeAll(const std::string& text) {
        std::size_t off = 0;
        while (off < text.size()) {
            const auto n = ::write(fd_, text.data() + off, text.size() - off);
            if (n < 0) {
                if (errno == EINTR) continue;
                return false;
            }
            off += static_cast<std::size_t>(n);
        }
        return ::fsync(fd_) == 0;
    }

    void replay() {
        std::ifstream in(cfg_.log_path, std::ios::binary);
        if (!in) return;
        const std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        in.close();
        std::size_t start = 0, line_no = 0;
        while (start < content.size()) {
            const auto end = content.find('\n', start);
            ++line_no;
            if (end == std::string::npos) {
                // Torn tail from a crash mid-write; drop it from the file too.
                ::truncate(cfg_.log_path.c_str(), static_cast<off_t>(start));
                break;
            }
            const auto line = content.substr(start, end - start);
            start = end + 1;
            if (line.empty()) continue;
            try {
                const auto j = Json::parse(line);
                auto rec = annotationFromJson(j);
                const bool qual = j.value("kind", std::string("vote")) == "qualification";
                (qual ? qual_votes_ : votes_)[rec.dialogue_id][rec.annotator_id] = rec;
            } catch (const std::exception& e) {
                throw DataError(cfg_.log_path + ":" + std::to_string(line_no) + ": " + e.what());
            }
        }
    }

    StoreConfig cfg_;
    std::map<std::string, AnnotatorSpec> specs_;
    Assignment assignment_;
    // dialogue -> annotator -> vote
    std::map<std::string, std::map<std::string, AnnotationRecord>> votes_;
    std::map<std::string, std::map<std::string, AnnotationRecord>> qual_votes_;
    mutable std::mutex mu_;
    int fd_ = -1;
};

} // namespace mentalmad
