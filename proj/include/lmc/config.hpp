#pragma once

#include <string>

#include "json.hpp"
#include "lmc/encoder.hpp"
#include "lmc/taskstream.hpp"
#include "lmc/trainer.hpp"

namespace lmc {

// One run configuration file: generation, model, and training settings plus
// artifact placement. Unknown keys are rejected so typos fail loudly.
struct RunConfig {
    std::string run_id = "run";
    std::string output_dir = "out";
    std::string dataset;  // stream file consumed by train/ablate
    TaskKind kind = TaskKind::Mre;

    SyntheticConfig synthetic;
    EncoderConfig encoder;
    TrainerConfig trainer;
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

// Fully resolved settings, defaults included, as written into the run dir.
nlohmann::json resolved_config_json(const RunConfig& cfg);

// Hash over the semantic sections only; run id and paths don't affect it.
uint64_t run_config_hash(const RunConfig& cfg);

// Output root, overridable through the LMC_OUTPUT_ROOT environment variable.
std::string output_root(const RunConfig& cfg);

}  // namespace lmc
