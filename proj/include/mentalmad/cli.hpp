#pragma once

// Command-line entry point. run() is the whole program minus process setup,
// so tests can drive it with stub gateways and trainers.

#include "mentalmad/annotation.hpp"
#include "mentalmad/annotation_server.hpp"
#include "mentalmad/cocodistill.hpp"
#include "mentalmad/config.hpp"
#include "mentalmad/corpus.hpp"
#include "mentalmad/error.hpp"
#include "mentalmad/evaluation.hpp"
#include "mentalmad/evosa.hpp"
#include "mentalmad/llm_gateway.hpp"
#include "mentalmad/prefilter.hpp"
#include "mentalmad/supervision.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace mentalmad::cli {

struct Services {
    std::function<std::unique_ptr<LlmGateway>(const GatewayConfig&)> gateway = [](const GatewayConfig& c) {
        return std::unique_ptr<LlmGateway>(new HttpGateway(c));
    };
    std::function<std::unique_ptr<TrainerBackend>(const std::string& command, const std::string& work_dir)> trainer =
        [](const std::string& command, const std::string& work_dir) {
            return std::unique_ptr<TrainerBackend>(new ProcessTrainer(command, work_dir));
        };
    EnvLookup env = processEnv();
    // Called with the bound port before annotate-serve blocks.
    std::function<void(AnnotationServer&, int port)> on_serving;
};

/// Keys that may be set from the environment even when absent from the file.
inline const std::vector<std::string>& knownKeys() {
    static const std::vector<std::string> keys{
        "seed",
        "gateway.endpoint",
        "gateway.api_key",
        "gateway.model",
        "gateway.retry_limit",
        "gateway.backoff_ms",
        "gateway.parallelism",
        "gateway.timeout_s",
        "gateway.cache_dir",
        "gateway.refusal_patterns",
        "paths.key_phrases",
        "paths.output_dir",
        "plan.target_plus",
        "plan.target_minus",
        "plan.proportional",
        "plan.parent_split",
        "split.ratios",
        "trainer.command",
        "trainer.work_dir",
        "trainer.learning_rate",
        "trainer.lora_rank",
        "trainer.lora_alpha",
        "trainer.lora_dropout",
        "trainer.batch_size",
        "trainer.grad_accum",
        "trainer.max_seq_len",
        "trainer.epochs_per_phase",
        "trainer.optimizer",
        "trainer.task3_loss_masking",
        "annotation.host",
        "annotation.port",
    };
    return keys;
}

namespace detail {

template <class T>
T pick(const std::optional<T>& flag, const std::optional<T>& configured, T fallback) {
    if (flag) return *flag;
    if (configured) return *configured;
    return fallback;
}

inline void ensureParent(const std::string& path) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
}

inline std::ofstream openOut(const std::string& path) {
    ensureParent(path);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + path + "'");
    return out;
}

template <class Range>
void writeLines(const std::string& path, const Range& items) {
    auto out = openOut(path);
    for (const auto& it : items) out << toJson(it).dump() << '\n';
}

inline void writeJson(const std::string& path, const Json& j) {
    auto out = openOut(path);
    out << j.dump(2) << '\n';
}

inline void requireExists(const std::string& path) {
    if (!std::filesystem::exists(path)) throw DataError("input '" + path + "' does not exist");
}

inline Dataset loadInput(const std::string& path, const std::optional<std::string>& split) {
    requireExists(path);
    auto d = loadDataset(path);
    if (split) {
        auto s = parseSplit(*split);
        if (!s) throw ConfigError("unknown split '" + *split + "'");
        d = filterSplit(d, *s);
    }
    return d;
}

} // namespace detail

/// Per-invocation state shared by the subcommand handlers.
struct Context {
    Config config;
    std::uint64_t seed = kDefaultSeed;
    bool dry_run = false;
    const Services* services = nullptr;
    std::ostream* out = nullptr;
    std::ostream* err = nullptr;

    [[nodiscard]] GatewayConfig gatewayConfig() const {
        GatewayConfig g;
        g.endpoint = config.getString("gateway.endpoint").value_or(g.endpoint);
        g.api_key = config.getString("gateway.api_key").value_or("");
        g.model = config.getString("gateway.model").value_or(g.model);
        g.retry_limit = static_cast<int>(config.getInt("gateway.retry_limit").value_or(g.retry_limit));
        g.backoff_ms = static_cast<int>(config.getInt("gateway.backoff_ms").value_or(g.backoff_ms));
        g.parallelism = static_cast<int>(config.getInt("gateway.parallelism").value_or(g.parallelism));
        g.timeout_s = static_cast<int>(config.getInt("gateway.timeout_s").value_or(g.timeout_s));
        g.cache_dir = config.getString("gateway.cache_dir").value_or("");
        if (config.has("gateway.refusal_patterns")) g.refusal_patterns = config.getList("gateway.refusal_patterns");
        if (g.retry_limit < 0 || g.parallelism < 1 || g.timeout_s < 1 || g.backoff_ms < 0)
            throw ConfigError("gateway retry_limit, parallelism, timeout_s or backoff_ms out of range");
        return g;
    }

    [[nodiscard]] std::unique_ptr<LlmGateway> gateway() const { return services->gateway(gatewayConfig()); }

    [[nodiscard]] TrainerConfig trainerConfig() const {
        TrainerConfig t;
        t.learning_rate = config.getDouble("trainer.learning_rate").value_or(t.learning_rate);
        t.lora_rank = static_cast<int>(config.getInt("trainer.lora_rank").value_or(t.lora_rank));
        t.lora_alpha = static_cast<int>(config.getInt("trainer.lora_alpha").value_or(t.lora_alpha));
        t.lora_dropout = config.getDouble("trainer.lora_dropout").value_or(t.lora_dropout);
        t.batch_size = static_cast<int>(config.getInt("trainer.batch_size").value_or(t.batch_size));
        t.grad_accum = static_cast<int>(config.getInt("trainer.grad_accum").value_or(t.grad_accum));
        t.max_seq_len = static_cast<int>(config.getInt("trainer.max_seq_len").value_or(t.max_seq_len));
        t.epochs_per_phase = static_cast<int>(config.getInt("trainer.epochs_per_phase").value_or(t.epochs_per_phase));
        t.optimizer = config.getString("trainer.optimizer").value_or(t.optimizer);
        t.task3_loss_masking = config.getBool("trainer.task3_loss_masking").value_or(t.task3_loss_masking);
        t.seed = seed;
        t.validate();
        return t;
    }

    [[nodiscard]] std::unique_ptr<TrainerBackend> trainer(const std::optional<std::string>& flag_cmd,
                                                          const std::string& default_work_dir) const {
        const auto cmd = flag_cmd ? flag_cmd : config.getString("trainer.command");
        if (!cmd) throw ConfigError("no trainer command (use --trainer-cmd or trainer.command)");
        return services->trainer(*cmd, config.getString("trainer.work_dir").value_or(default_work_dir));
    }
};

// ---------------------------------------------------------------------------
// Subcommands

inline void cmdIngest(Context& ctx, const std::string& input, const std::string& output, bool anonymize,
                      const std::optional<std::string>& errors_path, const std::optional<std::string>& name) {
    detail::requireExists(input);
    auto r = ingest(input, anonymize);
    r.dataset.seed = ctx.seed;
    if (name) r.dataset.name = *name;
    for (const auto& e : r.errors)
        *ctx.err << "warning[data]: " << input << ":" << e.line << ": " << e.reason << '\n';
    *ctx.out << "ingested " << r.dataset.items.size() << " dialogues, " << r.errors.size() << " rejected lines\n";
    if (ctx.dry_run) return;
    writeDataset(r.dataset, output);
    if (errors_path) detail::writeLines(*errors_path, r.errors);
}

inline void cmdPrefilter(Context& ctx, const std::string& input, const std::string& output, const std::string& mode,
                         const std::optional<std::string>& key_phrases_flag) {
    const auto d = detail::loadInput(input, std::nullopt);
    if (mode != "key" && mode != "llm" && mode != "combined")
        throw ConfigError("unknown prefilter mode '" + mode + "' (key|llm|combined)");
    MatcherConfig mcfg;
    if (auto kp = key_phrases_flag ? key_phrases_flag : ctx.config.getString("paths.key_phrases")) {
        detail::requireExists(*kp);
        mcfg.key_phrases = loadKeyPhrases(*kp);
    }
    mcfg.validate();
    const bool use_llm = mode != "key";
    if (ctx.dry_run) {
        *ctx.out << "prefilter " << d.items.size() << " dialogues, mode " << mode << ", "
                 << mcfg.key_phrases.size() << " key phrases, " << (use_llm ? d.items.size() : 0)
                 << " gateway calls\n";
        return;
    }
    const KeyPhraseMatcher matcher(mcfg);
    std::unique_ptr<LlmGateway> gw;
    std::string model;
    if (use_llm) {
        gw = ctx.gateway();
        model = ctx.gatewayConfig().model;
    }
    std::vector<FlagResult> flags;
    std::size_t n_flagged = 0;
    for (const auto& it : d.items) {
        FlagResult f;
        if (mode == "key") f = matcher.match(it.dialogue);
        else if (mode == "llm") f = llmFlag(it.dialogue, *gw, model);
        else f = combineFlags(matcher.match(it.dialogue), llmFlag(it.dialogue, *gw, model));
        n_flagged += f.flagged;
        flags.push_back(std::move(f));
    }
    detail::writeLines(output, flags);
    *ctx.out << "flagged " << n_flagged << " of " << d.items.size() << " dialogues\n";
}

inline void cmdPool(Context& ctx, const std::string& input, const std::string& flags_path, std::size_t extra,
                    const std::string& output) {
    const auto d = detail::loadInput(input, std::nullopt);
    detail::requireExists(flags_path);
    const auto pool = buildCandidatePool(d, loadFlags(flags_path), extra, ctx.seed);
    *ctx.out << "candidate pool: " << pool.items.size() << " dialogues\n";
    if (!ctx.dry_run) writeDataset(pool, output);
}

inline void cmdSplit(Context& ctx, const std::string& input, const std::optional<std::string>& ratios_flag,
                     const std::string& output) {
    const auto d = detail::loadInput(input, std::nullopt);
    const auto ratios = parseRatios(ratios_flag ? *ratios_flag : ctx.config.getString("split.ratios").value_or("6:2:2"));
    const auto sizes = splitSizes(d.items.size() - d.unlabeledCount(), ratios);
    *ctx.out << "split sizes train/val/test: " << sizes.train << "/" << sizes.val << "/" << sizes.test << '\n';
    if (!ctx.dry_run) writeDataset(splitDataset(d, ratios, ctx.seed), output);
}

struct AugmentArgs {
    std::string input;
    std::string output;
    std::string records;
    std::optional<std::size_t> target_plus;
    std::optional<std::size_t> target_minus;
    std::optional<bool> proportional;
    std::optional<std::string> parent_split;
    bool no_replace = false;
};

inline void cmdAugment(Context& ctx, const AugmentArgs& a) {
    const auto d = detail::loadInput(a.input, std::nullopt);
    const auto target_plus = detail::pick<std::size_t>(
        a.target_plus,
        ctx.config.getInt("plan.target_plus") ? std::optional<std::size_t>(*ctx.config.getInt("plan.target_plus"))
                                              : std::nullopt,
        0);
    std::optional<std::size_t> target_minus = a.target_minus;
    if (!target_minus) {
        if (auto v = ctx.config.getInt("plan.target_minus")) target_minus = static_cast<std::size_t>(*v);
    }
    const bool proportional = !target_minus && detail::pick(a.proportional, ctx.config.getBool("plan.proportional"), true);
    std::optional<Split> parent_split;
    if (auto s = a.parent_split ? a.parent_split : ctx.config.getString("plan.parent_split")) {
        parent_split = parseSplit(*s);
        if (!parent_split) throw ConfigError("unknown split '" + *s + "'");
    }
    const auto plan = planAugmentation(d, target_plus, proportional, ctx.seed, target_minus, parent_split);
    *ctx.out << "plan: n_plus=" << plan.n_plus << " n_minus=" << plan.n_minus << " target_plus=" << plan.target_plus
             << " target_minus=" << plan.target_minus << " seed=" << plan.seed << '\n';
    if (ctx.dry_run) {
        const auto pairs = samplePairs(d, plan);
        *ctx.out << "pairs: " << pairs.size() << " (gateway calls: 0, dry run)\n";
        return;
    }
    const auto gcfg = ctx.gatewayConfig();
    auto gw = ctx.gateway();
    const auto result = runAugmentation(d, plan, *gw, {gcfg.model, !a.no_replace, gcfg.parallelism});
    writeDataset(result.expanded, a.output);
    detail::writeLines(a.records, result.records);
    *ctx.out << "generated " << result.ok_plus << " positive and " << result.ok_minus << " negative children; "
             << result.expanded.items.size() << " items total\n";
    if (result.aborted) throw UpstreamError("augmentation aborted, partial results written: " + result.abort_reason);
}

inline void cmdSupervise(Context& ctx, const std::string& input, const std::optional<std::string>& split,
                         const std::string& output, const std::optional<std::string>& gaps_path) {
    const auto d = detail::loadInput(input, split);
    if (d.unlabeledCount() > 0) throw DataError(std::to_string(d.unlabeledCount()) + " items are unlabeled");
    if (ctx.dry_run) {
        *ctx.out << "supervise " << d.items.size() << " dialogues: " << 3 * d.items.size() << " records, "
                 << 3 * d.items.size() << " teacher calls\n";
        return;
    }
    const auto gcfg = ctx.gatewayConfig();
    auto gw = ctx.gateway();
    const auto set = buildSupervisionSet(d, *gw, {gcfg.model, gcfg.parallelism});
    detail::writeLines(output, set.records);
    if (gaps_path) detail::writeLines(*gaps_path, set.gaps);
    for (const auto& g : set.gaps)
        *ctx.err << "warning[upstream]: " << g.dialogue_id << " task " << g.task << ": " << g.reason << '\n';
    *ctx.out << "wrote " << set.records.size() << " records, " << set.gaps.size() << " gaps\n";
}

inline std::array<std::string, 3> manifestPaths(const std::string& dir) {
    std::array<std::string, 3> out;
    for (int p = 1; p <= 3; ++p)
        out[static_cast<std::size_t>(p - 1)] =
            (std::filesystem::path(dir) / ("phase" + std::to_string(p) + ".jsonl")).string();
    return out;
}

inline void cmdManifests(Context& ctx, const std::string& input, const std::string& out_dir,
                         const std::string& schedule) {
    detail::requireExists(input);
    const auto manifests = buildPhaseManifests(loadSupervision(input), ctx.trainerConfig(), parseSchedule(schedule));
    const auto paths = manifestPaths(out_dir);
    for (std::size_t k = 0; k < 3; ++k) {
        const auto& m = manifests[k];
        *ctx.out << "phase " << m.phase << ": " << m.records.size() << " records, tasks";
        for (int t : m.tasks) *ctx.out << ' ' << t;
        *ctx.out << '\n';
        if (!ctx.dry_run) {
            detail::ensureParent(paths[k]);
            writeManifest(m, paths[k]);
        }
    }
}

inline void cmdDistill(Context& ctx, const std::string& manifest_dir, const std::string& out_dir,
                       const std::optional<std::string>& trainer_cmd) {
    const auto paths = manifestPaths(manifest_dir);
    PhaseManifests manifests;
    for (std::size_t k = 0; k < 3; ++k) {
        detail::requireExists(paths[k]);
        manifests[k] = readManifest(paths[k]);
        if (manifests[k].phase != static_cast<int>(k + 1)) throw DataError(paths[k] + " is not phase " + std::to_string(k + 1));
    }
    if (ctx.dry_run) {
        for (std::size_t k = 0; k < 3; ++k)
            *ctx.out << "would train phase " << k + 1 << " on " << manifests[k].records.size() << " records\n";
        return;
    }
    auto trainer = ctx.trainer(trainer_cmd, (std::filesystem::path(out_dir) / "work").string());
    const auto result = runDistillation(manifests, paths, *trainer, out_dir);
    Json reports = Json::array();
    for (const auto& r : result.reports) reports.push_back(toJson(r));
    Json summary{{"schema_version", kManifestSchemaVersion}, {"completed", result.completed}, {"reports", reports}};
    if (!result.completed) {
        summary["failed_phase"] = result.failed_phase;
        summary["error"] = result.error;
    }
    detail::writeJson((std::filesystem::path(out_dir) / "distill_report.json").string(), summary);
    for (const auto& r : result.reports)
        *ctx.out << "phase " << r.phase << ": " << r.steps << " steps, checkpoint " << r.checkpoint_ref << '\n';
    if (!result.completed)
        throw UpstreamError("distillation stopped at phase " + std::to_string(result.failed_phase) + ": " + result.error);
}

inline void cmdPredict(Context& ctx, const std::string& input, const std::optional<std::string>& split,
                       const std::string& checkpoint, const std::string& output,
                       const std::optional<std::string>& trainer_cmd) {
    const auto d = detail::loadInput(input, split);
    if (ctx.dry_run) {
        *ctx.out << "would predict " << d.items.size() << " dialogues with checkpoint " << checkpoint << '\n';
        return;
    }
    auto trainer = ctx.trainer(trainer_cmd, (std::filesystem::path(output).parent_path() / "work").string());
    const auto set = predictJudgments(d, *trainer, checkpoint);
    detail::writeLines(output, set.predictions);
    *ctx.out << "predicted " << set.predictions.size() << " dialogues, " << set.abstentions << " abstentions, "
             << set.failures << " failures\n";
}

struct EvaluateArgs {
    std::optional<std::string> gold;
    std::optional<std::string> split;
    std::optional<std::string> predictions;
    std::optional<std::string> matrices;
    std::optional<std::string> report;
    std::optional<std::string> ours;
    std::vector<std::string> baselines;
};

/// Matrices file: a JSON object mapping row name to [tn, fp, fn, tp] or
/// {"tn", "fp", "fn", "tp"}.
inline std::vector<TableRow> loadMatrices(const std::string& path) {
    detail::requireExists(path);
    std::ifstream in(path);
    Json j;
    try {
        j = Json::parse(in);
    } catch (const Json::exception& e) {
        throw DataError(path + ": " + e.what());
    }
    if (!j.is_object()) throw DataError(path + ": expected an object of name -> confusion matrix");
    std::vector<TableRow> rows;
    for (const auto& [name, cm] : j.items()) rows.push_back({name, fromConfusion(confusionFromJson(cm))});
    return rows;
}

inline void cmdEvaluate(Context& ctx, const EvaluateArgs& a) {
    std::vector<TableRow> rows;
    if (a.matrices) {
        rows = loadMatrices(*a.matrices);
    } else {
        if (!a.gold || !a.predictions) throw ConfigError("evaluate needs --gold and --predictions, or --matrices");
        const auto gold = detail::loadInput(*a.gold, a.split);
        detail::requireExists(*a.predictions);
        rows.push_back({"model", evaluatePredictions(gold, loadPredictions(*a.predictions))});
    }
    *ctx.out << formatTable(rows);

    Json report{{"schema_version", 1}, {"rows", Json::array()}};
    for (const auto& r : rows) report["rows"].push_back(Json{{"name", r.name}, {"metrics", toJson(r.report)}});
    for (const auto& r : rows) {
        if (r.report.abstentions) *ctx.out << r.name << ": " << r.report.abstentions << " abstentions excluded\n";
    }

    if (a.ours) {
        auto find = [&](const std::string& name) -> const EvalReport& {
            for (const auto& r : rows)
                if (r.name == name) return r.report;
            throw ConfigError("no row named '" + name + "'");
        };
        if (a.baselines.empty()) throw ConfigError("--ours needs at least one --baseline");
        std::vector<EvalReport> base;
        for (const auto& b : a.baselines) base.push_back(find(b));
        const auto best = bestBaseline(base);
        const auto ri = improvementOverBest(find(*a.ours), base);
        *ctx.out << "relative improvement of " << *a.ours << " over best baseline:";
        for (const auto& [m, v] : ri.percent) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%+.1f", v);
            *ctx.out << ' ' << columnName(m) << ' ' << buf << "% (" << a.baselines[best.at(m)] << ")";
        }
        *ctx.out << '\n';
        auto j = toJson(ri);
        Json best_names = Json::object();
        for (const auto& [m, k] : best) best_names[toString(m)] = a.baselines[k];
        j["best_baseline"] = best_names;
        report["relative_improvement"] = j;
    }
    if (a.report && !ctx.dry_run) detail::writeJson(*a.report, report);
}

inline void cmdStats(Context& ctx, const std::string& input, const std::optional<std::string>& split) {
    const auto d = detail::loadInput(input, split);
    *ctx.out << toJson(computeStats(d)).dump(2) << '\n';
}

/// Reads a vote log (AnnotationRecord JSONL, "kind" lines other than votes
/// are skipped) and reports kappa over complete items plus consensus.
inline void cmdKappa(Context& ctx, const std::string& votes_path, const std::optional<std::string>& consensus_out) {
    detail::requireExists(votes_path);
    std::ifstream in(votes_path);
    std::map<std::string, std::map<std::string, AnnotationRecord>> votes;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        Json j;
        try {
            j = Json::parse(line);
        } catch (const Json::exception& e) {
            throw DataError(votes_path + ":" + std::to_string(n) + ": " + e.what());
        }
        if (j.value("kind", std::string("vote")) != "vote") continue;
        auto rec = annotationFromJson(j);
        if (!votes[rec.dialogue_id].emplace(rec.annotator_id, rec).second)
            throw DataError(votes_path + ":" + std::to_string(n) + ": duplicate vote");
    }
    std::vector<VoteCounts> counts;
    std::vector<ConsensusResult> consensus;
    std::size_t incomplete = 0;
    for (const auto& [id, by] : votes) {
        if (by.size() != static_cast<std::size_t>(kRatersPerItem)) {
            ++incomplete;
            continue;
        }
        std::vector<AnnotationRecord> v;
        VoteCounts c{0, 0};
        for (const auto& [_, r] : by) {
            v.push_back(r);
            ++c[static_cast<std::size_t>(toInt(r.label))];
        }
        counts.push_back(c);
        consensus.push_back(computeConsensus(id, v));
    }
    const auto agreement = fleissKappa(counts);
    auto j = toJson(agreement);
    j["incomplete_items"] = incomplete;
    *ctx.out << j.dump(2) << '\n';
    if (consensus_out && !ctx.dry_run) detail::writeLines(*consensus_out, consensus);
}

struct ServeArgs {
    std::string pool;
    std::string roster;
    std::string log;
    std::optional<std::string> qualification;
    std::optional<std::string> host;
    std::optional<int> port;
};

/// Roster file: [{"id": "...", "group": 1, "qualification_accuracy": 0.9}, ...]
inline std::vector<AnnotatorSpec> loadRoster(const std::string& path) {
    detail::requireExists(path);
    std::ifstream in(path);
    std::vector<AnnotatorSpec> out;
    try {
        for (const auto& a : Json::parse(in)) {
            AnnotatorSpec s{a.at("id").get<std::string>(), a.at("group").get<int>(), std::nullopt};
            if (a.contains("qualification_accuracy") && !a["qualification_accuracy"].is_null())
                s.qualification_accuracy = a["qualification_accuracy"].get<double>();
            out.push_back(std::move(s));
        }
    } catch (const Json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return out;
}

inline void cmdServe(Context& ctx, const ServeArgs& a) {
    StoreConfig sc;
    sc.pool = detail::loadInput(a.pool, std::nullopt);
    sc.annotators = loadRoster(a.roster);
    if (a.qualification) sc.qualification_set = detail::loadInput(*a.qualification, std::nullopt);
    sc.log_path = a.log;
    sc.seed = ctx.seed;
    const auto host = a.host ? *a.host : ctx.config.getString("annotation.host").value_or("127.0.0.1");
    const int port = a.port ? *a.port : static_cast<int>(ctx.config.getInt("annotation.port").value_or(8080));
    if (ctx.dry_run) {
        *ctx.out << "would serve " << sc.pool.items.size() << " dialogues to " << sc.annotators.size()
                 << " annotators on " << host << ":" << port << '\n';
        return;
    }
    detail::ensureParent(sc.log_path);
    AnnotationStore store(std::move(sc));
    AnnotationServer server(store);
    const int bound = port == 0 ? server.bindAnyPort(host) : (server.bindPort(host, port) ? port : -1);
    if (bound < 0) throw ConfigError("cannot bind " + host + ":" + std::to_string(port));
    *ctx.out << "serving on " << host << ":" << bound << std::endl;
    if (ctx.services->on_serving) ctx.services->on_serving(server, bound);
    server.listenAfterBind();
}

// ---------------------------------------------------------------------------

inline int run(const std::vector<std::string>& args, const Services& services, std::ostream& out,
               std::ostream& err) {
    CLI::App app{"Mental manipulation detection pipeline"};
    app.name("mentalmad");
    app.require_subcommand(1);
    app.fallthrough();

    std::optional<std::string> config_path;
    std::optional<std::uint64_t> seed_flag;
    bool dry_run = false;
    app.add_option("--config", config_path, "TOML-style config file");
    app.add_option("--seed", seed_flag, "Seed for every randomized stage (default 42)");
    app.add_flag("--dry-run", dry_run, "Print planned actions and counts without gateway or trainer calls");

    Context ctx;
    ctx.services = &services;
    ctx.out = &out;
    ctx.err = &err;
    std::function<void()> action;

    // ingest
    std::string in_input, in_output;
    bool in_anonymize = false;
    std::optional<std::string> in_errors, in_name;
    auto* sc_ingest = app.add_subcommand("ingest", "Read dialogue JSONL into the corpus schema");
    sc_ingest->add_option("--input", in_input)->required();
    sc_ingest->add_option("--output", in_output)->required();
    sc_ingest->add_flag("--anonymize", in_anonymize, "Rename speakers to Person1/Person2 by first appearance");
    sc_ingest->add_option("--errors", in_errors, "Write rejected lines as JSONL");
    sc_ingest->add_option("--name", in_name, "Dataset name");
    sc_ingest->callback([&] { action = [&] { cmdIngest(ctx, in_input, in_output, in_anonymize, in_errors, in_name); }; });

    // prefilter
    std::string pf_input, pf_output, pf_mode = "key";
    std::optional<std::string> pf_phrases;
    auto* sc_pf = app.add_subcommand("prefilter", "Flag candidate dialogues");
    sc_pf->add_option("--input", pf_input)->required();
    sc_pf->add_option("--output", pf_output)->required();
    sc_pf->add_option("--mode", pf_mode, "key | llm | combined")->capture_default_str();
    sc_pf->add_option("--key-phrases", pf_phrases, "One phrase per line");
    sc_pf->callback([&] { action = [&] { cmdPrefilter(ctx, pf_input, pf_output, pf_mode, pf_phrases); }; });

    // pool
    std::string pl_input, pl_flags, pl_output;
    std::size_t pl_extra = 0;
    auto* sc_pool = app.add_subcommand("pool", "Build the annotation candidate pool");
    sc_pool->add_option("--input", pl_input)->required();
    sc_pool->add_option("--flags", pl_flags)->required();
    sc_pool->add_option("--extra", pl_extra, "Unflagged dialogues to sample")->capture_default_str();
    sc_pool->add_option("--output", pl_output)->required();
    sc_pool->callback([&] { action = [&] { cmdPool(ctx, pl_input, pl_flags, pl_extra, pl_output); }; });

    // split
    std::string sp_input, sp_output;
    std::optional<std::string> sp_ratios;
    auto* sc_split = app.add_subcommand("split", "Assign train/val/test splits");
    sc_split->add_option("--input", sp_input)->required();
    sc_split->add_option("--output", sp_output)->required();
    sc_split->add_option("--ratios", sp_ratios, "train:val:test, default 6:2:2");
    sc_split->callback([&] { action = [&] { cmdSplit(ctx, sp_input, sp_ratios, sp_output); }; });

    // augment
    AugmentArgs ag;
    auto* sc_aug = app.add_subcommand("augment", "Generate label-preserving children from parent pairs");
    sc_aug->add_option("--input", ag.input)->required();
    sc_aug->add_option("--output", ag.output, "Expanded dataset")->required();
    sc_aug->add_option("--records", ag.records, "Augmentation records JSONL")->required();
    sc_aug->add_option("--target-plus", ag.target_plus);
    sc_aug->add_option("--target-minus", ag.target_minus, "Explicit negative target (disables proportional)");
    sc_aug->add_option("--proportional", ag.proportional, "Derive the negative target from the label ratio");
    sc_aug->add_option("--parent-split", ag.parent_split, "Draw parents from this split only");
    sc_aug->add_flag("--no-replace", ag.no_replace, "Do not draw replacement pairs after failures");
    sc_aug->callback([&] { action = [&] { cmdAugment(ctx, ag); }; });

    // supervise
    std::string su_input, su_output;
    std::optional<std::string> su_split, su_gaps;
    auto* sc_sup = app.add_subcommand("supervise", "Generate Task 1/2/3 supervision records");
    sc_sup->add_option("--input", su_input)->required();
    sc_sup->add_option("--split", su_split);
    sc_sup->add_option("--output", su_output)->required();
    sc_sup->add_option("--gaps", su_gaps, "Write teacher failures as JSONL");
    sc_sup->callback([&] { action = [&] { cmdSupervise(ctx, su_input, su_split, su_output, su_gaps); }; });

    // manifests
    std::string mf_input, mf_out, mf_schedule = "curriculum";
    auto* sc_mf = app.add_subcommand("manifests", "Write the three phase manifests");
    sc_mf->add_option("--input", mf_input, "Supervision JSONL")->required();
    sc_mf->add_option("--out-dir", mf_out)->required();
    sc_mf->add_option("--schedule", mf_schedule, "curriculum | joint | reverse")->capture_default_str();
    sc_mf->callback([&] { action = [&] { cmdManifests(ctx, mf_input, mf_out, mf_schedule); }; });

    // distill
    std::string ds_manifests, ds_out;
    std::optional<std::string> ds_trainer;
    auto* sc_ds = app.add_subcommand("distill", "Run the trainer over the three phases");
    sc_ds->add_option("--manifests", ds_manifests, "Directory holding phase1..3.jsonl")->required();
    sc_ds->add_option("--out", ds_out)->required();
    sc_ds->add_option("--trainer-cmd", ds_trainer);
    sc_ds->callback([&] { action = [&] { cmdDistill(ctx, ds_manifests, ds_out, ds_trainer); }; });

    // predict
    std::string pr_input, pr_checkpoint, pr_output;
    std::optional<std::string> pr_split, pr_trainer;
    auto* sc_pr = app.add_subcommand("predict", "Single-token judgments from a checkpoint");
    sc_pr->add_option("--input", pr_input)->required();
    sc_pr->add_option("--split", pr_split);
    sc_pr->add_option("--checkpoint", pr_checkpoint)->required();
    sc_pr->add_option("--output", pr_output)->required();
    sc_pr->add_option("--trainer-cmd", pr_trainer);
    sc_pr->callback([&] { action = [&] { cmdPredict(ctx, pr_input, pr_split, pr_checkpoint, pr_output, pr_trainer); }; });

    // evaluate
    EvaluateArgs ev;
    auto* sc_ev = app.add_subcommand("evaluate", "Metrics from predictions or confusion matrices");
    sc_ev->add_option("--gold", ev.gold);
    sc_ev->add_option("--split", ev.split);
    sc_ev->add_option("--predictions", ev.predictions);
    sc_ev->add_option("--matrices", ev.matrices, "JSON object of name -> [tn, fp, fn, tp]");
    sc_ev->add_option("--report", ev.report, "Write the report JSON here");
    sc_ev->add_option("--ours", ev.ours, "Row to compare against the baselines");
    sc_ev->add_option("--baseline", ev.baselines, "Baseline row name (repeatable)");
    sc_ev->callback([&] { action = [&] { cmdEvaluate(ctx, ev); }; });

    // stats
    std::string st_input;
    std::optional<std::string> st_split;
    auto* sc_st = app.add_subcommand("stats", "Dataset statistics");
    sc_st->add_option("--input", st_input)->required();
    sc_st->add_option("--split", st_split);
    sc_st->callback([&] { action = [&] { cmdStats(ctx, st_input, st_split); }; });

    // kappa
    std::string kp_votes;
    std::optional<std::string> kp_consensus;
    auto* sc_kp = app.add_subcommand("kappa", "Fleiss' kappa and consensus from a vote log");
    sc_kp->add_option("--votes", kp_votes)->required();
    sc_kp->add_option("--consensus", kp_consensus, "Write per-item consensus JSONL");
    sc_kp->callback([&] { action = [&] { cmdKappa(ctx, kp_votes, kp_consensus); }; });

    // annotate-serve
    ServeArgs sv;
    auto* sc_sv = app.add_subcommand("annotate-serve", "Serve the annotation HTTP API");
    sc_sv->add_option("--pool", sv.pool)->required();
    sc_sv->add_option("--annotators", sv.roster, "Roster JSON")->required();
    sc_sv->add_option("--log", sv.log, "Append-only vote log")->required();
    sc_sv->add_option("--qualification", sv.qualification, "Labeled qualification set");
    sc_sv->add_option("--host", sv.host);
    sc_sv->add_option("--port", sv.port, "0 picks a free port");
    sc_sv->callback([&] { action = [&] { cmdServe(ctx, sv); }; });

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << errorPrefix(ErrorKind::config) << ": " << e.what() << '\n';
        return exitCode(ErrorKind::config);
    }

    try {
        if (config_path) ctx.config = Config::load(*config_path);
        ctx.config.applyEnv(services.env, knownKeys());
        std::optional<std::uint64_t> configured_seed;
        if (auto s = ctx.config.getInt("seed")) {
            if (*s < 0) throw ConfigError("seed must be non-negative");
            configured_seed = static_cast<std::uint64_t>(*s);
        }
        ctx.seed = detail::pick(seed_flag, configured_seed, kDefaultSeed);
        ctx.dry_run = dry_run;
        if (!action) throw ConfigError("no subcommand given");
        action();
        return 0;
    } catch (const Error& e) {
        err << errorPrefix(e.kind()) << ": " << e.what() << '\n';
        return exitCode(e.kind());
    } catch (const std::filesystem::filesystem_error& e) {
        err << errorPrefix(ErrorKind::data) << ": " << e.what() << '\n';
        return exitCode(ErrorKind::data);
    } catch (const Json::exception& e) {
        err << errorPrefix(ErrorKind::data) << ": " << e.what() << '\n';
        return exitCode(ErrorKind::data);
    }
}

} // namespace mentalmad::cli
