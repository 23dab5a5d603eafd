#include "lmc/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "lmc/rng.hpp"

namespace lmc {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [key, value] : j.items())
        if (!known.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
}

template <typename T>
void read_into(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void parse_run_section(const json& j, RunConfig& cfg) {
    reject_unknown(j, {"run_id", "output_dir", "dataset", "task"}, "run");
    read_into(j, "run_id", cfg.run_id);
    read_into(j, "output_dir", cfg.output_dir);
    read_into(j, "dataset", cfg.dataset);
    if (j.contains("task")) {
        std::string t = j.at("task").get<std::string>();
        if (t == "mre") cfg.kind = TaskKind::Mre;
        else if (t == "mner") cfg.kind = TaskKind::Mner;
        else throw ConfigError("run.task must be 'mre' or 'mner', got '" + t + "'");
    }
}

void parse_synthetic(const json& j, SyntheticConfig& s) {
    reject_unknown(j,
                   {"tasks", "classes_per_task", "samples_per_class", "vocab_size", "patch_dim",
                    "tokens_per_example", "patches_per_example", "relation_pool", "snr_text",
                    "snr_visual", "seed"},
                   "synthetic");
    read_into(j, "tasks", s.tasks);
    read_into(j, "classes_per_task", s.classes_per_task);
    read_into(j, "samples_per_class", s.samples_per_class);
    read_into(j, "vocab_size", s.vocab_size);
    read_into(j, "patch_dim", s.patch_dim);
    read_into(j, "tokens_per_example", s.tokens_per_example);
    read_into(j, "patches_per_example", s.patches_per_example);
    read_into(j, "relation_pool", s.relation_pool);
    read_into(j, "snr_text", s.snr_text);
    read_into(j, "snr_visual", s.snr_visual);
    read_into(j, "seed", s.seed);
}

void parse_encoder(const json& j, EncoderConfig& e) {
    reject_unknown(j,
                   {"layers", "heads", "width", "seq_len", "interact_layers", "vocab_size",
                    "patch_dim", "freeze_shared_keys_after_task1"},
                   "encoder");
    read_into(j, "layers", e.layers);
    read_into(j, "heads", e.heads);
    read_into(j, "width", e.width);
    read_into(j, "seq_len", e.seq_len);
    read_into(j, "interact_layers", e.interact_layers);
    read_into(j, "vocab_size", e.vocab_size);
    read_into(j, "patch_dim", e.patch_dim);
    read_into(j, "freeze_shared_keys_after_task1", e.freeze_shared_keys_after_task1);
}

void parse_trainer(const json& j, TrainerConfig& t) {
    reject_unknown(j,
                   {"epochs_c", "epochs_m", "batch_size", "lr", "alpha", "budget_per_class",
                    "global_limit", "seed", "switches", "modulation_mode"},
                   "trainer");
    read_into(j, "epochs_c", t.epochs_c);
    read_into(j, "epochs_m", t.epochs_m);
    read_into(j, "batch_size", t.batch_size);
    read_into(j, "lr", t.lr);
    read_into(j, "alpha", t.alpha);
    read_into(j, "budget_per_class", t.budget_per_class);
    read_into(j, "global_limit", t.global_limit);
    read_into(j, "seed", t.seed);
    if (j.contains("switches")) {
        const json& s = j.at("switches");
        reject_unknown(s, {"mi", "ad", "gm", "mm"}, "trainer.switches");
        read_into(s, "mi", t.sw.mi);
        read_into(s, "ad", t.sw.ad);
        read_into(s, "gm", t.sw.gm);
        read_into(s, "mm", t.sw.mm);
    }
    if (j.contains("modulation_mode")) {
        std::string m = j.at("modulation_mode").get<std::string>();
        if (m == "symmetric") t.mode = ModulationMode::Symmetric;
        else if (m == "visual_only") t.mode = ModulationMode::VisualOnly;
        else throw ConfigError("trainer.modulation_mode must be 'symmetric' or 'visual_only'");
    }
}

void parse_distill(const json& j, TrainerConfig& t) {
    reject_unknown(j, {"lambda", "post_softmax"}, "distill");
    read_into(j, "lambda", t.lambda);
    read_into(j, "post_softmax", t.post_softmax_distill);
}

}  // namespace

RunConfig parse_run_config(const json& j) {
    reject_unknown(j, {"run", "synthetic", "encoder", "trainer", "distill"}, "config");
    RunConfig cfg;
    if (j.contains("run")) parse_run_section(j.at("run"), cfg);
    try {
        if (j.contains("synthetic")) parse_synthetic(j.at("synthetic"), cfg.synthetic);
        if (j.contains("encoder")) parse_encoder(j.at("encoder"), cfg.encoder);
        if (j.contains("trainer")) parse_trainer(j.at("trainer"), cfg.trainer);
        if (j.contains("distill")) parse_distill(j.at("distill"), cfg.trainer);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    cfg.synthetic.validate(cfg.kind);
    cfg.encoder.validate();
    cfg.trainer.validate();
    DistillConfig dc{cfg.trainer.lambda, cfg.trainer.post_softmax_distill};
    dc.validate();
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open config " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ParseError(std::string("config ") + path + ": " + e.what());
    }
    return parse_run_config(j);
}

nlohmann::json resolved_config_json(const RunConfig& cfg) {
    json j;
    j["run"] = {{"run_id", cfg.run_id},
                {"output_dir", cfg.output_dir},
                {"dataset", cfg.dataset},
                {"task", task_kind_name(cfg.kind)}};
    j["synthetic"] = {{"tasks", cfg.synthetic.tasks},
                      {"classes_per_task", cfg.synthetic.classes_per_task},
                      {"samples_per_class", cfg.synthetic.samples_per_class},
                      {"vocab_size", cfg.synthetic.vocab_size},
                      {"patch_dim", cfg.synthetic.patch_dim},
                      {"tokens_per_example", cfg.synthetic.tokens_per_example},
                      {"patches_per_example", cfg.synthetic.patches_per_example},
                      {"relation_pool", cfg.synthetic.relation_pool},
                      {"snr_text", cfg.synthetic.snr_text},
                      {"snr_visual", cfg.synthetic.snr_visual},
                      {"seed", cfg.synthetic.seed}};
    j["encoder"] = {{"layers", cfg.encoder.layers},
                    {"heads", cfg.encoder.heads},
                    {"width", cfg.encoder.width},
                    {"seq_len", cfg.encoder.seq_len},
                    {"interact_layers", cfg.encoder.interact_layers},
                    {"vocab_size", cfg.encoder.vocab_size},
                    {"patch_dim", cfg.encoder.patch_dim},
                    {"freeze_shared_keys_after_task1",
                     cfg.encoder.freeze_shared_keys_after_task1}};
    j["trainer"] = {{"epochs_c", cfg.trainer.epochs_c},
                    {"epochs_m", cfg.trainer.epochs_m},
                    {"batch_size", cfg.trainer.batch_size},
                    {"lr", cfg.trainer.lr},
                    {"alpha", cfg.trainer.alpha},
                    {"budget_per_class", cfg.trainer.budget_per_class},
                    {"global_limit", cfg.trainer.global_limit},
                    {"seed", cfg.trainer.seed},
                    {"switches",
                     {{"mi", cfg.trainer.sw.mi},
                      {"ad", cfg.trainer.sw.ad},
                      {"gm", cfg.trainer.sw.gm},
                      {"mm", cfg.trainer.sw.mm}}},
                    {"modulation_mode", modulation_mode_name(cfg.trainer.mode)}};
    j["distill"] = {{"lambda", cfg.trainer.lambda},
                    {"post_softmax", cfg.trainer.post_softmax_distill}};
    j["config_hash"] = run_config_hash(cfg);
    return j;
}

uint64_t run_config_hash(const RunConfig& cfg) {
    std::ostringstream s;
    s << task_kind_name(cfg.kind) << '|' << cfg.synthetic.tasks << '|'
      << cfg.synthetic.classes_per_task << '|' << cfg.synthetic.samples_per_class << '|'
      << cfg.synthetic.vocab_size << '|' << cfg.synthetic.patch_dim << '|'
      << cfg.synthetic.tokens_per_example << '|' << cfg.synthetic.patches_per_example << '|'
      << cfg.synthetic.relation_pool << '|' << cfg.synthetic.snr_text << '|'
      << cfg.synthetic.snr_visual << '|' << cfg.synthetic.seed;
    return mix64(fnv1a(s.str()), trainer_config_hash(cfg.encoder, cfg.trainer));
}

std::string output_root(const RunConfig& cfg) {
    const char* env = std::getenv("LMC_OUTPUT_ROOT");
    if (env && *env) return env;
    return cfg.output_dir;
}

}  // namespace lmc
