#pragma once

// Binary classification metrics with "Yes" (1) as the positive class.
// Precision and recall are positive-class quantities; F1_m is the unweighted
// mean of the two per-class F1 scores, F1_w the support-weighted mean.

#include "mentalmad/corpus.hpp"
#include "mentalmad/error.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mentalmad {

struct ConfusionMatrix {
    std::uint64_t tn = 0, fp = 0, fn = 0, tp = 0;

    [[nodiscard]] std::uint64_t total() const { return tn + fp + fn + tp; }
    void add(Label gold, Label pred) {
        if (gold == Label::yes) (pred == Label::yes ? tp : fn)++;
        else (pred == Label::yes ? fp : tn)++;
    }
    friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

enum class Metric { accuracy, precision, recall, f1_macro, f1_weighted };

inline constexpr std::array<Metric, 5> kAllMetrics{Metric::accuracy, Metric::precision, Metric::recall,
                                                   Metric::f1_macro, Metric::f1_weighted};

inline const char* toString(Metric m) {
    switch (m) {
    case Metric::accuracy: return "accuracy";
    case Metric::precision: return "precision";
    case Metric::recall: return "recall";
    case Metric::f1_macro: return "f1_macro";
    case Metric::f1_weighted: return "f1_weighted";
    }
    return "";
}

inline const char* columnName(Metric m) {
    switch (m) {
    case Metric::accuracy: return "Acc";
    case Metric::precision: return "Pre";
    case Metric::recall: return "Re";
    case Metric::f1_macro: return "F1_m";
    case Metric::f1_weighted: return "F1_w";
    }
    return "";
}

struct EvalReport {
    ConfusionMatrix confusion;
    double accuracy = 0, precision = 0, recall = 0, f1_macro = 0, f1_weighted = 0;
    double f1_positive = 0, f1_negative = 0;
    std::size_t abstentions = 0;
    std::vector<std::string> zero_division; // names of ratios that hit 0/0 and were set to 0

    [[nodiscard]] double get(Metric m) const {
        switch (m) {
        case Metric::accuracy: return accuracy;
        case Metric::precision: return precision;
        case Metric::recall: return recall;
        case Metric::f1_macro: return f1_macro;
        case Metric::f1_weighted: return f1_weighted;
        }
        return 0;
    }
};

namespace detail {

inline double safeRatio(double num, double den, const char* name, std::vector<std::string>& flags) {
    if (den == 0) {
        flags.emplace_back(name);
        return 0;
    }
    return num / den;
}

inline double harmonic(double p, double r, const char* name, std::vector<std::string>& flags) {
    return safeRatio(2 * p * r, p + r, name, flags);
}

} // namespace detail

inline EvalReport fromConfusion(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw DataError("confusion matrix is empty");
    EvalReport r;
    r.confusion = cm;
    auto& z = r.zero_division;
    const double tn = cm.tn, fp = cm.fp, fn = cm.fn, tp = cm.tp, n = cm.total();

    r.accuracy = (tp + tn) / n;
    r.precision = detail::safeRatio(tp, tp + fp, "precision", z);
    r.recall = detail::safeRatio(tp, tp + fn, "recall", z);
    const double npv = detail::safeRatio(tn, tn + fn, "negative_precision", z);
    const double specificity = detail::safeRatio(tn, tn + fp, "negative_recall", z);
    r.f1_positive = detail::harmonic(r.precision, r.recall, "f1_positive", z);
    r.f1_negative = detail::harmonic(npv, specificity, "f1_negative", z);
    r.f1_macro = (r.f1_positive + r.f1_negative) / 2;
    r.f1_weighted = ((tp + fn) * r.f1_positive + (tn + fp) * r.f1_negative) / n;
    return r;
}

inline EvalReport computeMetrics(const std::vector<Label>& gold, const std::vector<Label>& pred) {
    if (gold.size() != pred.size()) throw DataError("gold and prediction lengths differ");
    if (gold.empty()) throw DataError("no predictions to evaluate");
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < gold.size(); ++i) cm.add(gold[i], pred[i]);
    return fromConfusion(cm);
}

/// Abstentions (empty predictions) are left out of the matrix and counted.
inline EvalReport computeMetrics(const std::vector<Label>& gold, const std::vector<std::optional<Label>>& pred) {
    if (gold.size() != pred.size()) throw DataError("gold and prediction lengths differ");
    std::vector<Label> g, p;
    std::size_t abstentions = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        if (!pred[i]) {
            ++abstentions;
            continue;
        }
        g.push_back(gold[i]);
        p.push_back(*pred[i]);
    }
    if (g.empty()) throw DataError("every prediction is an abstention");
    auto r = computeMetrics(g, p);
    r.abstentions = abstentions;
    return r;
}

/// Rounds x to one decimal, half away from zero. The 1e-9 nudge rounds values
/// such as 2.45, stored a hair below the midpoint in binary, upward.
inline double roundOneDecimal(double x) {
    const double s = x < 0 ? -1.0 : 1.0;
    return s * std::floor(std::abs(x) * 10 + 0.5 + 1e-9) / 10;
}

/// Percentage formatting used in tables: 0.7562 -> "75.6".
inline std::string formatPercent(double ratio) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", roundOneDecimal(ratio * 100));
    return buf;
}

struct RelativeImprovement {
    std::map<Metric, double> percent; // rounded to one decimal
    std::vector<Metric> omitted;      // baseline was zero
};

inline RelativeImprovement relativeImprovement(const EvalReport& ours, const EvalReport& baseline,
                                               const std::vector<Metric>& metrics = {kAllMetrics.begin(),
                                                                                     kAllMetrics.end()}) {
    RelativeImprovement out;
    for (auto m : metrics) {
        const double b = baseline.get(m);
        if (b <= 0) {
            out.omitted.push_back(m);
            continue;
        }
        out.percent[m] = roundOneDecimal(100.0 * (ours.get(m) - b) / b);
    }
    return out;
}

/// Per metric, the strongest of several baselines. Returns the index of the
/// winning baseline for each metric.
inline std::map<Metric, std::size_t> bestBaseline(const std::vector<EvalReport>& baselines) {
    if (baselines.empty()) throw DataError("no baselines given");
    std::map<Metric, std::size_t> best;
    for (auto m : kAllMetrics) {
        std::size_t k = 0;
        for (std::size_t i = 1; i < baselines.size(); ++i)
            if (baselines[i].get(m) > baselines[k].get(m)) k = i;
        best[m] = k;
    }
    return best;
}

/// Relative improvement of ours over the per-metric best baseline.
inline RelativeImprovement improvementOverBest(const EvalReport& ours, const std::vector<EvalReport>& baselines,
                                               const std::vector<Metric>& metrics = {kAllMetrics.begin(),
                                                                                     kAllMetrics.end()}) {
    const auto best = bestBaseline(baselines);
    RelativeImprovement out;
    for (auto m : metrics) {
        auto one = relativeImprovement(ours, baselines[best.at(m)], {m});
        out.percent.insert(one.percent.begin(), one.percent.end());
        out.omitted.insert(out.omitted.end(), one.omitted.begin(), one.omitted.end());
    }
    return out;
}

// ---------------------------------------------------------------------------
// I/O

inline Json toJson(const ConfusionMatrix& cm) {
    return Json{{"tn", cm.tn}, {"fp", cm.fp}, {"fn", cm.fn}, {"tp", cm.tp}};
}

inline ConfusionMatrix confusionFromJson(const Json& j) {
    try {
        if (j.is_array()) {
            if (j.size() != 4) throw DataError("confusion matrix array must be [tn, fp, fn, tp]");
            return {j[0].get<std::uint64_t>(), j[1].get<std::uint64_t>(), j[2].get<std::uint64_t>(),
                    j[3].get<std::uint64_t>()};
        }
        return {j.at("tn").get<std::uint64_t>(), j.at("fp").get<std::uint64_t>(), j.at("fn").get<std::uint64_t>(),
                j.at("tp").get<std::uint64_t>()};
    } catch (const Json::exception& e) {
        throw DataError(std::string("malformed confusion matrix: ") + e.what());
    }
}

inline Json toJson(const EvalReport& r) {
    Json j{{"schema_version", 1}, {"confusion", toJson(r.confusion)}};
    for (auto m : kAllMetrics) j[toString(m)] = r.get(m);
    j["f1_positive"] = r.f1_positive;
    j["f1_negative"] = r.f1_negative;
    j["abstentions"] = r.abstentions;
    j["zero_division"] = r.zero_division;
    return j;
}

inline Json toJson(const RelativeImprovement& ri) {
    Json j = Json::object();
    for (const auto& [m, v] : ri.percent) j[toString(m)] = v;
    Json omitted = Json::array();
    for (auto m : ri.omitted) omitted.push_back(toString(m));
    return Json{{"percent", j}, {"omitted", omitted}};
}

struct TableRow {
    std::string name;
    EvalReport report;
};

/// Fixed-width table in the column order Acc, Pre, Re, F1_m, F1_w, values in
/// percent with one decimal.
inline std::string formatTable(const std::vector<TableRow>& rows) {
    std::size_t width = 5;
    for (const auto& r : rows) width = std::max(width, r.name.size());
    std::string out;
    auto pad = [](std::string s, std::size_t w) {
        if (s.size() < w) s.insert(0, w - s.size(), ' ');
        return s;
    };
    std::string header = "Model";
    header.resize(width, ' ');
    out += header;
    for (auto m : kAllMetrics) out += pad(columnName(m), 8);
    out += '\n';
    for (const auto& r : rows) {
        auto name = r.name;
        name.resize(width, ' ');
        out += name;
        for (auto m : kAllMetrics) out += pad(formatPercent(r.report.get(m)), 8);
        out += '\n';
    }
    return out;
}

struct PredictionLine {
    std::string dialogue_id;
    std::optional<Label> pred;
};

inline std::vector<PredictionLine> loadPredictions(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read predictions '" + path + "'");
    std::vector<PredictionLine> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = Json::parse(line);
            PredictionLine p;
            p.dialogue_id = j.at("dialogue_id").get<std::string>();
            const auto& v = j.at("pred");
            if (!v.is_null()) p.pred = labelFromInt(v.get<int>());
            out.push_back(std::move(p));
        } catch (const Json::exception& e) {
            throw DataError(path + ":" + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

/// Joins predictions to gold labels by dialogue id. Every labeled gold item
/// must have exactly one prediction line.
inline EvalReport evaluatePredictions(const Dataset& gold, const std::vector<PredictionLine>& preds) {
    std::map<std::string, std::optional<Label>> by_id;
    for (const auto& p : preds) {
        if (!by_id.emplace(p.dialogue_id, p.pred).second)
            throw DataError("duplicate prediction for " + p.dialogue_id);
    }
    std::vector<Label> g;
    std::vector<std::optional<Label>> p;
    for (const auto& it : gold.items) {
        if (!it.label) continue;
        auto f = by_id.find(it.id());
        if (f == by_id.end()) throw DataError("no prediction for " + it.id());
        g.push_back(*it.label);
        p.push_back(f->second);
        by_id.erase(f);
    }
    if (!by_id.empty()) throw DataError("prediction for unknown dialogue " + by_id.begin()->first);
    return computeMetrics(g, p);
}

} // namespace mentalmad
