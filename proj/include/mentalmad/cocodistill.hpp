#pragma once

// Three-phase distillation scheduling. Phase 1 trains on Tasks 1-3, phase 2
// on Tasks 2-3, phase 3 on Task 3 only. Training itself is delegated to an
// external backend through a process-level contract:
//
//   <trainer> train --manifest <path> --init-checkpoint <ref|none> --out <dir>
//       exit 0 and write <dir>/report.json
//   <trainer> generate --checkpoint <ref> --prompts <path> --max-tokens 1 --greedy
//       exit 0 and print one {"id", "output"} JSON line per prompt to stdout
//
// The manifest header pins the loss contract: token-level cross-entropy on
// the target, averaged per target then over the batch; for Task 3 records
// only the judgment token contributes.

#include "mentalmad/corpus.hpp"
#include "mentalmad/detail/random.hpp"
#include "mentalmad/detail/text.hpp"
#include "mentalmad/error.hpp"
#include "mentalmad/supervision.hpp"

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace mentalmad {

inline constexpr int kManifestSchemaVersion = 1;

struct TrainerConfig {
    double learning_rate = 1e-5;
    int lora_rank = 8;
    int lora_alpha = 16;
    double lora_dropout = 0.05;
    int batch_size = 4;
    int grad_accum = 4;
    int max_seq_len = 1500;
    int epochs_per_phase = 1;
    std::uint64_t seed = 42;
    std::string optimizer = "lion";
    bool task3_loss_masking = true;

    void validate() const {
        if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
        if (lora_rank <= 0 || lora_alpha <= 0 || batch_size <= 0 || grad_accum <= 0 || max_seq_len <= 0 ||
            epochs_per_phase <= 0)
            throw ConfigError("trainer counts must be positive");
        if (!(lora_dropout >= 0.0 && lora_dropout < 1.0)) throw ConfigError("lora_dropout must be in [0, 1)");
        if (optimizer.empty()) throw ConfigError("optimizer name is empty");
    }
};

inline Json toJson(const TrainerConfig& c) {
    return Json{{"learning_rate", c.learning_rate},
                {"lr_schedule", "constant"},
                {"optimizer", c.optimizer},
                {"optimizer_reset_per_phase", true},
                {"lora_rank", c.lora_rank},
                {"lora_alpha", c.lora_alpha},
                {"lora_dropout", c.lora_dropout},
                {"lora_bias", "none"},
                {"task_type", "CAUSAL_LM"},
                {"batch_size", c.batch_size},
                {"grad_accum", c.grad_accum},
                {"max_seq_len", c.max_seq_len},
                {"epochs_per_phase", c.epochs_per_phase},
                {"seed", c.seed},
                {"loss", "cross_entropy"},
                {"loss_reduction", "token_mean_per_target_then_batch_mean"},
                {"task_loss_normalization", "phase_dataset_size"},
                {"task3_loss_masking", c.task3_loss_masking},
                {"batch_order", "interleaved_shuffle"}};
}

inline TrainerConfig trainerConfigFromJson(const Json& j) {
    TrainerConfig c;
    try {
        c.learning_rate = j.at("learning_rate").get<double>();
        c.optimizer = j.at("optimizer").get<std::string>();
        c.lora_rank = j.at("lora_rank").get<int>();
        c.lora_alpha = j.at("lora_alpha").get<int>();
        c.lora_dropout = j.at("lora_dropout").get<double>();
        c.batch_size = j.at("batch_size").get<int>();
        c.grad_accum = j.at("grad_accum").get<int>();
        c.max_seq_len = j.at("max_seq_len").get<int>();
        c.epochs_per_phase = j.at("epochs_per_phase").get<int>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.task3_loss_masking = j.at("task3_loss_masking").get<bool>();
    } catch (const Json::exception& e) {
        throw DataError(std::string("malformed hyperparams: ") + e.what());
    }
    c.validate();
    return c;
}

/// curriculum: {1,2,3} -> {2,3} -> {3}. joint and reverse are the ablation
/// schedules: {1,2,3} in every phase, and {3} -> {2,3} -> {1,2,3}.
enum class Schedule { curriculum, joint, reverse };

inline const char* toString(Schedule s) {
    switch (s) {
    case Schedule::curriculum: return "curriculum";
    case Schedule::joint: return "joint";
    case Schedule::reverse: return "reverse";
    }
    return "curriculum";
}

inline Schedule parseSchedule(std::string_view s) {
    if (s == "curriculum") return Schedule::curriculum;
    if (s == "joint") return Schedule::joint;
    if (s == "reverse") return Schedule::reverse;
    throw ConfigError("unknown schedule '" + std::string(s) + "' (curriculum|joint|reverse)");
}

inline std::set<int> phaseTasks(Schedule s, int phase) {
    static const std::array<std::set<int>, 3> curriculum{{{1, 2, 3}, {2, 3}, {3}}};
    if (phase < 1 || phase > 3) throw ConfigError("phase must be 1, 2 or 3");
    switch (s) {
    case Schedule::curriculum: return curriculum[phase - 1];
    case Schedule::joint: return {1, 2, 3};
    case Schedule::reverse: return curriculum[3 - phase];
    }
    return {};
}

struct PhaseManifest {
    int phase = 1;
    std::set<int> tasks;
    std::vector<SupervisionRecord> records;
    int epochs = 1;
    TrainerConfig hyperparams;
    std::uint64_t seed = 42;
    Schedule schedule = Schedule::curriculum;
};

using PhaseManifests = std::array<PhaseManifest, 3>;

/// Filters the records per phase and shuffles each phase deterministically,
/// so tasks are interleaved within the batch stream.
inline PhaseManifests buildPhaseManifests(std::vector<SupervisionRecord> records, const TrainerConfig& cfg,
                                          Schedule schedule = Schedule::curriculum) {
    cfg.validate();
    if (records.empty()) throw DataError("no supervision records");
    for (const auto& r : records) {
        if (r.task < 1 || r.task > 3) throw DataError("record with invalid task " + std::to_string(r.task));
    }
    std::sort(records.begin(), records.end(), recordOrder);

    PhaseManifests out;
    for (int phase = 1; phase <= 3; ++phase) {
        auto& m = out[static_cast<std::size_t>(phase - 1)];
        m.phase = phase;
        m.tasks = phaseTasks(schedule, phase);
        m.epochs = cfg.epochs_per_phase;
        m.hyperparams = cfg;
        m.seed = cfg.seed;
        m.schedule = schedule;
        for (const auto& r : records)
            if (m.tasks.count(r.task)) m.records.push_back(r);
        if (m.records.empty())
            throw DataError("phase " + std::to_string(phase) + " has no records after task filtering");
        detail::Rng rng(cfg.seed, 0xC0C0 + static_cast<std::uint64_t>(phase));
        rng.shuffle(m.records);
    }
    return out;
}

inline Json manifestHeader(const PhaseManifest& m) {
    return Json{{"schema_version", kManifestSchemaVersion},
                {"phase", m.phase},
                {"tasks", Json(std::vector<int>(m.tasks.begin(), m.tasks.end()))},
                {"epochs", m.epochs},
                {"hyperparams", toJson(m.hyperparams)},
                {"seed", m.seed},
                {"schedule", toString(m.schedule)},
                {"n_records", m.records.size()}};
}

inline void writeManifest(const PhaseManifest& m, std::ostream& out) {
    out << manifestHeader(m).dump() << '\n';
    for (const auto& r : m.records) out << toJson(r).dump() << '\n';
}

inline void writeManifest(const PhaseManifest& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write manifest '" + path + "'");
    writeManifest(m, out);
}

inline PhaseManifest readManifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read manifest '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw DataError("manifest '" + path + "' is empty");
    PhaseManifest m;
    try {
        const auto h = Json::parse(line);
        if (h.at("schema_version").get<int>() != kManifestSchemaVersion)
            throw DataError("unsupported manifest schema version in '" + path + "'");
        m.phase = h.at("phase").get<int>();
        for (int t : h.at("tasks")) m.tasks.insert(t);
        m.epochs = h.at("epochs").get<int>();
        m.hyperparams = trainerConfigFromJson(h.at("hyperparams"));
        m.seed = h.at("seed").get<std::uint64_t>();
        m.schedule = parseSchedule(h.value("schedule", std::string("curriculum")));
        while (std::getline(in, line)) {
            if (detail::trim(line).empty()) continue;
            auto r = supervisionFromJson(Json::parse(line));
            if (!m.tasks.count(r.task))
                throw DataError("manifest '" + path + "' holds a task " + std::to_string(r.task) + " record");
            m.records.push_back(std::move(r));
        }
        if (m.records.size() != h.at("n_records").get<std::size_t>())
            throw DataError("manifest '" + path + "' record count does not match its header");
    } catch (const Json::exception& e) {
        throw DataError("malformed manifest '" + path + "': " + e.what());
    }
    return m;
}

// ---------------------------------------------------------------------------
// Trainer contract

struct TrainerRunReport {
    int phase = 0;
    std::size_t steps = 0;
    std::map<int, double> mean_loss_per_task;
    std::string checkpoint_ref;
};

inline Json toJson(const TrainerRunReport& r) {
    Json losses = Json::object();
    for (const auto& [task, loss] : r.mean_loss_per_task) losses[std::to_string(task)] = loss;
    return Json{{"phase", r.phase}, {"steps", r.steps}, {"mean_loss_per_task", losses}, {"checkpoint_ref", r.checkpoint_ref}};
}

inline TrainerRunReport reportFromJson(const Json& j) {
    TrainerRunReport r;
    try {
        r.phase = j.at("phase").get<int>();
        r.steps = j.at("steps").get<std::size_t>();
        for (const auto& [task, loss] : j.at("mean_loss_per_task").items())
            r.mean_loss_per_task[std::stoi(task)] = loss.get<double>();
        r.checkpoint_ref = j.at("checkpoint_ref").get<std::string>();
    } catch (const std::exception& e) {
        throw UpstreamError(std::string("malformed trainer report: ") + e.what());
    }
    return r;
}

struct GenerateItem {
    std::string id;
    std::string prompt;
};

struct GenerateOutput {
    std::string id;
    std::optional<std::string> output; // empty when the trainer produced nothing for this id
};

class TrainerBackend {
public:
    virtual ~TrainerBackend() = default;
    virtual TrainerRunReport train(const std::string& manifest_path, const std::optional<std::string>& init_checkpoint,
                                   const std::string& out_dir) = 0;
    virtual std::vector<GenerateOutput> generate(const std::string& checkpoint, const std::vector<GenerateItem>& items,
                                                 int max_tokens) = 0;
};

namespace detail {

inline std::string shellQuote(const std::string& s) {
    std::string out = "'";
    for (char c : s) {
        if (c == '\'') out += "'\\''";
        else out += c;
    }
    return out + "'";
}

inline int exitStatus(int raw) { return raw == -1 ? -1 : (WIFEXITED(raw) ? WEXITSTATUS(raw) : 128); }

} // namespace detail

/// Runs the trainer contract as a subprocess. `command` is a shell prefix,
/// for example "python -m trainer_adapter".
class ProcessTrainer : public TrainerBackend {
public:
    ProcessTrainer(std::string command, std::string work_dir)
        : command_(std::move(command)), work_dir_(std::move(work_dir)) {
        if (command_.empty()) throw ConfigError("trainer command is empty");
    }

    TrainerRunReport train(const std::string& manifest_path, const std::optional<std::string>& init_checkpoint,
                           const std::string& out_dir) override {
        std::filesystem::create_directories(out_dir);
        const auto cmd = command_ + " train --manifest " + detail::shellQuote(manifest_path) + " --init-checkpoint " +
                         detail::shellQuote(init_checkpoint.value_or("none")) + " --out " +
                         detail::shellQuote(out_dir);
        const int status = detail::exitStatus(std::system(cmd.c_str()));
        if (status != 0) throw UpstreamError("trainer exited with status " + std::to_string(status) + ": " + cmd);
        std::ifstream in(std::filesystem::path(out_dir) / "report.json");
        if (!in) throw UpstreamError("trainer wrote no report.json in " + out_dir);
        try {
            return reportFromJson(Json::parse(in));
        } catch (const Json::exception& e) {
            throw UpstreamError(std::string("trainer report is not JSON: ") + e.what());
        }
    }

    std::vector<GenerateOutput> generate(const std::string& checkpoint, const std::vector<GenerateItem>& items,
                                         int max_tokens) override {
        std::filesystem::create_directories(work_dir_);
        const auto prompts = (std::filesystem::path(work_dir_) / "generate_prompts.jsonl").string();
        {
            std::ofstream out(prompts, std::ios::binary | std::ios::trunc);
            for (const auto& it : items) out << Json{{"id", it.id}, {"prompt", it.prompt}}.dump() << '\n';
        }
        const auto cmd = command_ + " generate --checkpoint " + detail::shellQuote(checkpoint) + " --prompts " +
                         detail::shellQuote(prompts) + " --max-tokens " + std::to_string(max_tokens) + " --greedy";
        std::unique_ptr<FILE, int (*)(FILE*)> pipe(popen(cmd.c_str(), "r"), pclose);
        if (!pipe) throw UpstreamError("cannot start trainer: " + cmd);
        std::string captured;
        char buf[4096];
        while (auto n = std::fread(buf, 1, sizeof buf, pipe.get())) captured.append(buf, n);
        const int status = detail::exitStatus(pclose(pipe.release()));
        if (status != 0) throw UpstreamError("trainer generate exited with status " + std::to_string(status));

        std::map<std::string, std::string> by_id;
        for (const auto& line : detail::splitLines(captured)) {
            if (detail::trim(line).empty()) continue;
            try {
                const auto j = Json::parse(line);
                by_id[j.at("id").get<std::string>()] = j.at("output").get<std::string>();
            } catch (const Json::exception& e) {
                throw UpstreamError(std::string("trainer generate printed a malformed line: ") + e.what());
            }
        }
        std::vector<GenerateOutput> out;
        for (const auto& it : items) {
            auto f = by_id.find(it.id);
            out.push_back({it.id, f == by_id.end() ? std::nullopt : std::optional<std::string>(f->second)});
        }
        return out;
    }

private:
    std::string command_;
    std::string work_dir_;
};

struct DistillationResult {
    std::vector<TrainerRunReport> reports;
    bool completed = false;
    int failed_phase = 0;
    std::string error;
};

/// Trains phase 1, then 2 from phase 1's checkpoint, then 3. Stops at the
/// first failing phase and returns the reports gathered so far.
inline DistillationResult runDistillation(const PhaseManifests& manifests, const std::array<std::string, 3>& paths,
                                          TrainerBackend& trainer, const std::string& out_root) {
    DistillationResult result;
    std::optional<std::string> checkpoint;
    for (std::size_t k = 0; k < 3; ++k) {
        const auto& m = manifests[k];
        const auto out_dir = (std::filesystem::path(out_root) / ("phase" + std::to_string(m.phase))).string();
        try {
            auto report = trainer.train(paths[k], checkpoint, out_dir);
            if (report.phase != m.phase)
                throw UpstreamError("trainer reported phase " + std::to_string(report.phase) + " for phase " +
                                    std::to_string(m.phase));
            for (const auto& [task, loss] : report.mean_loss_per_task) {
                if (!m.tasks.count(task))
                    throw UpstreamError("trainer reported loss for task " + std::to_string(task) +
                                        " outside the manifest task set");
            }
            if (report.checkpoint_ref.empty()) throw UpstreamError("trainer returned no checkpoint");
            checkpoint = report.checkpoint_ref;
            result.reports.push_back(std::move(report));
        } catch (const Error& e) {
            result.failed_phase = m.phase;
            result.error = e.what();
            return result;
        }
    }
    result.completed = true;
    return result;
}

// ---------------------------------------------------------------------------
// Prediction

/// Case-insensitive yes/no after trimming whitespace and punctuation.
inline std::optional<Label> parseJudgmentToken(std::string_view raw) {
    auto t = detail::trim(raw);
    while (!t.empty() && std::ispunct(static_cast<unsigned char>(t.back()))) t.remove_suffix(1);
    while (!t.empty() && std::ispunct(static_cast<unsigned char>(t.front()))) t.remove_prefix(1);
    const auto lowered = detail::toLower(t);
    if (lowered == "yes") return Label::yes;
    if (lowered == "no") return Label::no;
    return std::nullopt;
}

struct Prediction {
    std::string dialogue_id;
    std::optional<Label> pred; // empty for abstentions and failures
    std::string raw;
    bool failed = false; // trainer produced no output for this item
};

struct PredictionSet {
    std::vector<Prediction> predictions;
    std::size_t abstentions = 0;
    std::size_t failures = 0;
};

/// Greedy single-token judgments. Unparseable tokens are abstentions and are
/// never coerced to a label.
inline PredictionSet predictJudgments(const Dataset& d, TrainerBackend& trainer, const std::string& checkpoint) {
    std::vector<GenerateItem> items;
    for (const auto& it : d.items) items.push_back({it.id(), renderStudentTask23(it.dialogue)});
    const auto outputs = trainer.generate(checkpoint, items, 1);
    if (outputs.size() != items.size()) throw UpstreamError("trainer returned a different number of outputs");

    PredictionSet set;
    for (const auto& o : outputs) {
        Prediction p{o.id, std::nullopt, o.output.value_or(""), !o.output};
        if (p.failed) ++set.failures;
        else if (!(p.pred = parseJudgmentToken(p.raw))) ++set.abstentions;
        set.predictions.push_back(std::move(p));
    }
    return set;
}

inline Json toJson(const Prediction& p) {
    Json j{{"dialogue_id", p.dialogue_id}, {"pred", p.pred ? Json(toInt(*p.pred)) : Json(nullptr)}, {"raw", p.raw}};
    if (p.failed) j["failed"] = true;
    return j;
}

} // namespace mentalmad
