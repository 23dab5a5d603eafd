#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kBase = "/tmp/lmc_cli_t";

struct CmdResult {
    int code = -1;
    std::string output;
};

CmdResult run(const std::string& args) {
    std::string cmd = std::string(LMC_CLI_PATH) + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    CmdResult r;
    char buf[512];
    while (fgets(buf, sizeof buf, pipe)) r.output += buf;
    int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

json base_config(const std::string& run_id) {
    json j;
    j["run"] = {{"run_id", run_id},
                {"output_dir", (kBase / "out").string()},
                {"dataset", (kBase / "stream.jsonl").string()},
                {"task", "mre"}};
    j["synthetic"] = {{"tasks", 2},      {"classes_per_task", 1}, {"samples_per_class", 10},
                      {"vocab_size", 32}, {"patch_dim", 4},        {"tokens_per_example", 6},
                      {"patches_per_example", 2}, {"seed", 9}};
    j["encoder"] = {{"layers", 2}, {"heads", 2},      {"width", 8},    {"seq_len", 8},
                    {"interact_layers", 1}, {"vocab_size", 32}, {"patch_dim", 4}};
    j["trainer"] = {{"epochs_c", 1}, {"epochs_m", 1}, {"batch_size", 8},
                    {"lr", 0.05},    {"budget_per_class", 3}, {"seed", 5}};
    return j;
}

std::string write_config(const json& j, const std::string& name) {
    fs::create_directories(kBase);
    std::string path = (kBase / name).string();
    std::ofstream out(path);
    out << j.dump(2);
    return path;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("generation writes the stream and a manifest deterministically") {
    fs::remove_all(kBase);
    std::string cfg = write_config(base_config("r1"), "cfg.json");
    std::string stream = (kBase / "stream.jsonl").string();

    CmdResult r = run("gen --config " + cfg + " --out " + stream);
    CHECK(r.code == 0);
    REQUIRE(fs::exists(stream));
    REQUIRE(fs::exists(stream + ".manifest.json"));

    json manifest = json::parse(slurp(stream + ".manifest.json"));
    CHECK(manifest.at("tasks") == 2);
    CHECK(manifest.at("classes").size() == 2);
    CHECK(manifest.at("counts")[0].at("train") == 2 * 7);  // one class + N/A at 10 samples

    std::string first = slurp(stream);
    CHECK(run("gen --config " + cfg + " --out " + stream).code == 0);
    CHECK(slurp(stream) == first);
}

TEST_CASE("invalid configurations exit non-zero with a message") {
    json bad = base_config("r_bad");
    bad["synthetic"]["snr_text"] = -0.5;
    std::string cfg = write_config(bad, "bad.json");
    CmdResult r = run("gen --config " + cfg + " --out " + (kBase / "x.jsonl").string());
    CHECK(r.code != 0);
    CHECK(r.output.find("snr_text") != std::string::npos);

    json unknown = base_config("r_bad2");
    unknown["trainer"]["learning_rate"] = 0.1;
    cfg = write_config(unknown, "bad2.json");
    r = run("gen --config " + cfg + " --out " + (kBase / "x.jsonl").string());
    CHECK(r.code != 0);
    CHECK(r.output.find("learning_rate") != std::string::npos);

    // dataset missing on disk
    json no_data = base_config("r_bad3");
    no_data["run"]["dataset"] = (kBase / "nope.jsonl").string();
    cfg = write_config(no_data, "bad3.json");
    r = run("train --config " + cfg);
    CHECK(r.code != 0);
}

TEST_CASE("training writes every artifact and is reproducible") {
    std::string cfg1 = write_config(base_config("t1"), "t1.json");
    std::string cfg2 = write_config(base_config("t2"), "t2.json");

    CHECK(run("train --config " + cfg1).code == 0);
    fs::path dir1 = kBase / "out" / "t1";
    for (const char* name : {"resolved_config.json", "score_matrix.csv", "metrics.json",
                             "gamma_trace.csv", "predictions.jsonl", "task_summaries.jsonl",
                             "ckpt_task1.bin", "ckpt_task2.bin"})
        CHECK(fs::exists(dir1 / name));

    CHECK(run("train --config " + cfg2).code == 0);
    CHECK(slurp(dir1 / "score_matrix.csv") == slurp(kBase / "out" / "t2" / "score_matrix.csv"));
    CHECK(slurp(dir1 / "metrics.json") == slurp(kBase / "out" / "t2" / "metrics.json"));
    CHECK(slurp(dir1 / "gamma_trace.csv") == slurp(kBase / "out" / "t2" / "gamma_trace.csv"));

    json metrics = json::parse(slurp(dir1 / "metrics.json"));
    CHECK(metrics.at("forgetting").size() == 2);
    CHECK(metrics.at("plasticity").size() == 2);
}

TEST_CASE("resume from the task-1 checkpoint matches the straight run") {
    std::string cfg = write_config(base_config("t3"), "t3.json");
    CHECK(run("train --config " + cfg).code == 0);
    fs::path straight = kBase / "out" / "t3";

    std::string resume_cfg = write_config(base_config("t3resume"), "t3r.json");
    CmdResult r = run("train --config " + resume_cfg + " --resume " +
                      (straight / "ckpt_task1.bin").string());
    CHECK(r.code == 0);
    CHECK(r.output.find("resuming after task 1") != std::string::npos);

    fs::path resumed = kBase / "out" / "t3resume";
    CHECK(slurp(straight / "score_matrix.csv") == slurp(resumed / "score_matrix.csv"));
    CHECK(slurp(straight / "metrics.json") == slurp(resumed / "metrics.json"));
    CHECK(slurp(straight / "gamma_trace.csv") == slurp(resumed / "gamma_trace.csv"));
    CHECK(slurp(straight / "ckpt_task2.bin") == slurp(resumed / "ckpt_task2.bin"));

    // corrupt checkpoint header
    std::ofstream bad(kBase / "bad.bin", std::ios::binary);
    bad << "junk";
    bad.close();
    r = run("train --config " + resume_cfg + " --resume " + (kBase / "bad.bin").string());
    CHECK(r.code != 0);
    CHECK(r.output.find("format") != std::string::npos);
}

TEST_CASE("scoring recomputes the stored numbers from predictions") {
    fs::path dir = kBase / "out" / "t1";
    REQUIRE(fs::exists(dir / "predictions.jsonl"));

    CHECK(run("score --run-dir " + dir.string()).code == 0);

    // hash tampering is refused unless forced
    fs::path copy = kBase / "out" / "t1_tampered";
    fs::remove_all(copy);
    fs::copy(dir, copy);
    json metrics = json::parse(slurp(copy / "metrics.json"));
    metrics["config_hash"] = 12345;
    std::ofstream(copy / "metrics.json") << metrics.dump(2) << "\n";
    CHECK(run("score --run-dir " + copy.string()).code != 0);
    CHECK(run("score --run-dir " + copy.string() + " --force").code == 0);

    // a falsified pooled score fails even when forced
    metrics["forgetting"][0] = 0.123456789;
    std::ofstream(copy / "metrics.json") << metrics.dump(2) << "\n";
    CmdResult r = run("score --run-dir " + copy.string() + " --force");
    CHECK(r.code != 0);
    CHECK(r.output.find("A_1") != std::string::npos);
}

TEST_CASE("the gamma trace reduces to the summary statistic") {
    fs::path dir = kBase / "out" / "t1";
    std::ifstream trace(dir / "gamma_trace.csv");
    std::string line;
    std::getline(trace, line);  // hash comment
    std::getline(trace, line);  // header
    std::map<int, std::pair<double, int>> acc;
    while (std::getline(trace, line)) {
        std::istringstream row(line);
        std::string field;
        std::getline(row, field, ',');
        int task = std::stoi(field);
        for (int skip = 0; skip < 3; ++skip) std::getline(row, field, ',');
        std::getline(row, field, ',');
        double gamma = std::stod(field);
        acc[task].first += std::abs(gamma - 1.0);
        acc[task].second += 1;
    }
    REQUIRE(acc.size() == 2);

    std::ifstream summaries(dir / "task_summaries.jsonl");
    while (std::getline(summaries, line)) {
        json rec = json::parse(line);
        int task = rec.at("task").get<int>();
        double expect = acc.at(task).first / acc.at(task).second;
        CHECK(rec.at("mean_abs_gamma_dev").get<double>() ==
              doctest::Approx(expect).epsilon(1e-9));
    }
}

TEST_CASE("the environment variable overrides the output root") {
    std::string cfg = write_config(base_config("envrun"), "env.json");
    fs::path alt_root = kBase / "alt_root";
    fs::remove_all(alt_root);
    std::string cmd = "LMC_OUTPUT_ROOT=" + alt_root.string() + " " + LMC_CLI_PATH +
                      " train --config " + cfg + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    char buf[256];
    while (fgets(buf, sizeof buf, pipe)) {}
    int status = pclose(pipe);
    CHECK(WEXITSTATUS(status) == 0);
    CHECK(fs::exists(alt_root / "envrun" / "score_matrix.csv"));
    CHECK_FALSE(fs::exists(kBase / "out" / "envrun"));
}

TEST_CASE("ablation emits the five-variant table") {
    std::string cfg = write_config(base_config("abl"), "abl.json");
    CHECK(run("ablate --config " + cfg).code == 0);
    fs::path dir = kBase / "out" / "abl";
    std::string csv = slurp(dir / "ablation.csv");
    CHECK(csv.find("variant,A_final,U_final") != std::string::npos);
    for (const char* name : {"full", "wo_mi", "wo_ad", "wo_gm", "wo_mm"})
        CHECK(csv.find(name) != std::string::npos);

    int rows = 0;
    std::istringstream lines(slurp(dir / "ablation.jsonl"));
    std::string line;
    while (std::getline(lines, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 5);
}
