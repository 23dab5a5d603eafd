#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "lmc/config.hpp"
#include "lmc/metrics.hpp"
#include "lmc/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lmc;

namespace {

std::string fmt_score(double v) {
    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(6);
    s << v;
    return s.str();
}

std::string fmt_full(double v) {
    std::ostringstream s;
    s.precision(17);
    s << v;
    return s.str();
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw InputError("write failed for " + path.string());
}

TaskStream generate_stream(const RunConfig& cfg) {
    return cfg.kind == TaskKind::Mre ? generate_mre_stream(cfg.synthetic)
                                     : generate_mner_stream(cfg.synthetic);
}

void check_model_matches_stream(const RunConfig& cfg, const TaskStream& stream) {
    if (stream.kind != cfg.kind)
        throw ConfigError("dataset task kind does not match run.task");
    if (stream.vocab_size != cfg.encoder.vocab_size)
        throw ConfigError("encoder.vocab_size " + std::to_string(cfg.encoder.vocab_size) +
                          " does not match the dataset's " + std::to_string(stream.vocab_size));
    if (stream.patch_dim != cfg.encoder.patch_dim)
        throw ConfigError("encoder.patch_dim does not match the dataset");
}

int cmd_gen(const std::string& config_path, const std::string& out_path) {
    RunConfig cfg = load_run_config(config_path);
    TaskStream stream = generate_stream(cfg);
    save_stream(stream, out_path);

    json manifest;
    manifest["tasks"] = static_cast<int>(stream.tasks.size());
    json rosters = json::array(), fresh = json::array(), counts = json::array();
    for (const Snapshot& s : stream.tasks) {
        rosters.push_back(s.classes);
        fresh.push_back(s.new_classes);
        counts.push_back({{"train", s.train.size()}, {"val", s.val.size()}, {"test", s.test.size()}});
    }
    manifest["classes"] = rosters;
    manifest["new_classes"] = fresh;
    manifest["counts"] = counts;
    manifest["seed"] = cfg.synthetic.seed;
    manifest["config_hash"] = run_config_hash(cfg);
    write_text(out_path + ".manifest.json", manifest.dump(2) + "\n");
    std::cout << "wrote " << out_path << " (" << stream.tasks.size() << " tasks)\n";
    return 0;
}

// predictions for every test split seen so far, logged at a task boundary
void log_predictions(std::ofstream& out, DualStreamModel& model, const TaskStream& stream,
                     int k, bool mi, uint64_t hash) {
    for (int i = 1; i <= k; ++i) {
        json rec;
        rec["k"] = k;
        rec["i"] = i;
        rec["config_hash"] = hash;
        json ids = json::array();
        if (stream.kind == TaskKind::Mre) {
            json pred = json::array(), gold = json::array();
            for (const Example& ex : stream.tasks[i - 1].test) {
                ids.push_back(ex.id);
                pred.push_back(predict_mre(model, ex, mi));
                gold.push_back(ex.relation);
            }
            rec["pred"] = std::move(pred);
            rec["gold"] = std::move(gold);
        } else {
            json pred = json::array(), gold = json::array();
            for (const Example& ex : stream.tasks[i - 1].test) {
                ids.push_back(ex.id);
                pred.push_back(predict_mner(model, ex, mi));
                gold.push_back(ex.tags);
            }
            rec["pred"] = std::move(pred);
            rec["gold"] = std::move(gold);
        }
        rec["ids"] = std::move(ids);
        out << rec.dump() << "\n";
    }
}

std::string trace_csv(const std::vector<TraceRow>& trace, uint64_t hash) {
    std::ostringstream out;
    out << "# config_hash=" << hash << "\n";
    out << "task,phase,epoch,batch,gamma,g\n";
    for (const TraceRow& r : trace)
        out << r.task << "," << r.phase << "," << r.epoch << "," << r.batch << ","
            << fmt_full(r.gamma) << "," << fmt_full(r.g) << "\n";
    return out.str();
}

int cmd_train(const std::string& config_path, const std::string& resume_path) {
    RunConfig cfg = load_run_config(config_path);
    if (cfg.dataset.empty()) throw ConfigError("run.dataset is required for train");
    TaskStream stream = load_stream(cfg.dataset);
    check_model_matches_stream(cfg, stream);

    fs::path run_dir = fs::path(output_root(cfg)) / cfg.run_id;
    fs::create_directories(run_dir);
    uint64_t hash = run_config_hash(cfg);
    write_text(run_dir / "resolved_config.json", resolved_config_json(cfg).dump(2) + "\n");

    std::unique_ptr<Trainer> trainer;
    if (resume_path.empty()) {
        trainer = std::make_unique<Trainer>(cfg.encoder, cfg.trainer, cfg.kind);
    } else {
        TrainerCheckpoint ckpt = load_checkpoint(resume_path);
        trainer = std::make_unique<Trainer>(ckpt, cfg.trainer);
        std::cout << "resuming after task " << ckpt.completed_task << "\n";
    }

    std::ofstream pred_out(run_dir / "predictions.jsonl",
                           resume_path.empty() ? std::ios::trunc : std::ios::app);
    RunResult res = trainer->run_lifelong(stream, [&](int k, const TrainerCheckpoint& ckpt) {
        save_checkpoint((run_dir / ("ckpt_task" + std::to_string(k) + ".bin")).string(), ckpt);
        log_predictions(pred_out, trainer->model(), stream, k, cfg.trainer.sw.mi, hash);
    });
    pred_out.close();

    write_text(run_dir / "score_matrix.csv",
               "# config_hash=" + std::to_string(hash) + "\n" + res.matrix.to_csv());

    json metrics;
    metrics["forgetting"] = res.report.A;
    metrics["plasticity"] = res.report.U;
    metrics["config_hash"] = hash;
    write_text(run_dir / "metrics.json", metrics.dump(2) + "\n");

    write_text(run_dir / "gamma_trace.csv", trace_csv(res.trace, hash));

    std::ofstream summary(run_dir / "task_summaries.jsonl",
                          resume_path.empty() ? std::ios::trunc : std::ios::app);
    for (const TaskSummary& s : res.tasks) {
        json rec;
        rec["event"] = "task-summary";
        rec["run_id"] = cfg.run_id;
        rec["config_hash"] = hash;
        rec["seed"] = cfg.trainer.seed;
        rec["task"] = s.task;
        rec["A"] = s.A;
        rec["U"] = s.U;
        rec["G"] = s.G;
        rec["mean_abs_gamma_dev"] = s.mean_abs_gamma_dev;
        rec["wall_seconds"] = s.wall_seconds;
        summary << rec.dump() << "\n";
    }
    summary.close();

    std::cout << "run " << cfg.run_id << " finished: A_K=" << fmt_score(res.report.A.back())
              << " U_K=" << fmt_score(res.report.U.back()) << "\n";
    return 0;
}

int cmd_ablate(const std::string& config_path) {
    RunConfig cfg = load_run_config(config_path);
    if (cfg.dataset.empty()) throw ConfigError("run.dataset is required for ablate");
    TaskStream stream = load_stream(cfg.dataset);
    check_model_matches_stream(cfg, stream);

    fs::path run_dir = fs::path(output_root(cfg)) / cfg.run_id;
    fs::create_directories(run_dir);
    uint64_t hash = run_config_hash(cfg);
    write_text(run_dir / "resolved_config.json", resolved_config_json(cfg).dump(2) + "\n");

    auto rows = ablate(stream, cfg.encoder, cfg.trainer);
    std::ostringstream csv;
    csv << "# config_hash=" << hash << "\n";
    csv << "variant,A_final,U_final\n";
    std::ofstream events(run_dir / "ablation.jsonl");
    for (const AblationRow& r : rows) {
        csv << r.name << "," << fmt_score(r.A_final) << "," << fmt_score(r.U_final) << "\n";
        json rec;
        rec["event"] = "ablation-row";
        rec["run_id"] = cfg.run_id;
        rec["config_hash"] = hash;
        rec["seed"] = cfg.trainer.seed;
        rec["variant"] = r.name;
        rec["A_final"] = r.A_final;
        rec["U_final"] = r.U_final;
        events << rec.dump() << "\n";
    }
    write_text(run_dir / "ablation.csv", csv.str());
    std::cout << "ablation finished: " << rows.size() << " variants\n";
    return 0;
}

// recompute metrics from the saved predictions and compare with the stored
// artifacts; any disagreement is a failure
int cmd_score(const std::string& run_dir_str, bool force) {
    fs::path run_dir(run_dir_str);
    std::ifstream cfg_in(run_dir / "resolved_config.json");
    if (!cfg_in) throw InputError("no resolved_config.json in " + run_dir_str);
    json cfg_json;
    cfg_in >> cfg_json;
    uint64_t hash = cfg_json.value("config_hash", uint64_t{0});
    bool is_mre = cfg_json.at("run").at("task").get<std::string>() == "mre";

    std::ifstream metrics_in(run_dir / "metrics.json");
    if (!metrics_in) throw InputError("no metrics.json in " + run_dir_str);
    json metrics;
    metrics_in >> metrics;
    if (metrics.value("config_hash", uint64_t{0}) != hash && !force)
        throw ValidationError("metrics.json config hash mismatch (use --force to override)");
    std::vector<double> stored_A = metrics.at("forgetting").get<std::vector<double>>();

    std::string matrix_csv;
    {
        std::ifstream in(run_dir / "score_matrix.csv", std::ios::binary);
        if (!in) throw InputError("no score_matrix.csv in " + run_dir_str);
        std::ostringstream ss;
        ss << in.rdbuf();
        matrix_csv = ss.str();
    }

    std::ifstream pred_in(run_dir / "predictions.jsonl");
    if (!pred_in) throw InputError("no predictions.jsonl in " + run_dir_str);

    // pooled counts per k rebuild A_k; per-cell F1 rebuilds matrix entries
    std::map<int, std::vector<int>> pool_pred_mre, pool_gold_mre;
    std::map<int, std::vector<std::vector<int>>> pool_pred_ner, pool_gold_ner;
    int checked_cells = 0;
    std::string line;
    int line_no = 0;
    while (std::getline(pred_in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError("predictions.jsonl line " + std::to_string(line_no) + ": " + e.what());
        }
        if (rec.value("config_hash", uint64_t{0}) != hash && !force)
            throw ValidationError("predictions.jsonl line " + std::to_string(line_no) +
                                  ": config hash mismatch (use --force to override)");
        int k = rec.at("k").get<int>();
        int i = rec.at("i").get<int>();
        double cell;
        if (is_mre) {
            auto pred = rec.at("pred").get<std::vector<int>>();
            auto gold = rec.at("gold").get<std::vector<int>>();
            cell = micro_f1_mre(pred, gold);
            auto& pp = pool_pred_mre[k];
            pp.insert(pp.end(), pred.begin(), pred.end());
            auto& pg = pool_gold_mre[k];
            pg.insert(pg.end(), gold.begin(), gold.end());
        } else {
            auto pred = rec.at("pred").get<std::vector<std::vector<int>>>();
            auto gold = rec.at("gold").get<std::vector<std::vector<int>>>();
            cell = micro_f1_mner(pred, gold);
            auto& pp = pool_pred_ner[k];
            pp.insert(pp.end(), pred.begin(), pred.end());
            auto& pg = pool_gold_ner[k];
            pg.insert(pg.end(), gold.begin(), gold.end());
        }
        // the stored matrix must contain this cell at CSV precision
        std::string needle = fmt_score(cell);
        if (matrix_csv.find(needle) == std::string::npos)
            throw ValidationError("cell (" + std::to_string(k) + ", " + std::to_string(i) +
                                  ") recomputed as " + needle + " not found in score_matrix.csv");
        ++checked_cells;
    }
    if (checked_cells == 0) throw ValidationError("predictions.jsonl holds no records");

    int checked_A = 0;
    for (const auto& [k, pred] : pool_pred_mre) {
        double a = micro_f1_mre(pred, pool_gold_mre[k]);
        if (k <= static_cast<int>(stored_A.size()) && a != stored_A[k - 1])
            throw ValidationError("A_" + std::to_string(k) + " recomputed as " + fmt_full(a) +
                                  " but metrics.json holds " + fmt_full(stored_A[k - 1]));
        ++checked_A;
    }
    for (const auto& [k, pred] : pool_pred_ner) {
        double a = micro_f1_mner(pred, pool_gold_ner[k]);
        if (k <= static_cast<int>(stored_A.size()) && a != stored_A[k - 1])
            throw ValidationError("A_" + std::to_string(k) + " recomputed as " + fmt_full(a) +
                                  " but metrics.json holds " + fmt_full(stored_A[k - 1]));
        ++checked_A;
    }

    std::cout << "score ok: " << checked_cells << " cells and " << checked_A
              << " pooled scores match\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"lifelong multimodal knowledge-graph construction engine"};
    app.require_subcommand(1);

    std::string config_path, out_path, resume_path, run_dir;
    bool force = false;

    CLI::App* gen = app.add_subcommand("gen", "generate a synthetic task stream");
    gen->add_option("--config", config_path, "run configuration file")->required();
    gen->add_option("--out", out_path, "output stream file")->required();

    CLI::App* train = app.add_subcommand("train", "run the lifelong training loop");
    train->add_option("--config", config_path, "run configuration file")->required();
    train->add_option("--resume", resume_path, "task-boundary checkpoint to continue from");

    CLI::App* abl = app.add_subcommand("ablate", "full configuration plus single-switch removals");
    abl->add_option("--config", config_path, "run configuration file")->required();

    CLI::App* score = app.add_subcommand("score", "recheck metrics from saved predictions");
    score->add_option("--run-dir", run_dir, "directory of a finished run")->required();
    score->add_flag("--force", force, "ignore config hash mismatches");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen(config_path, out_path);
        if (train->parsed()) return cmd_train(config_path, resume_path);
        if (abl->parsed()) return cmd_ablate(config_path);
        if (score->parsed()) return cmd_score(run_dir, force);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
