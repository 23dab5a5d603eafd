#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lmc/balance.hpp"
#include "lmc/encoder.hpp"
#include "lmc/memory.hpp"
#include "lmc/metrics.hpp"

namespace lmc {

// One γ observation: the batch ratio and the coefficient actually applied.
struct TraceRow {
    int task = 0;
    std::string phase;  // "current" or "memory"
    int epoch = 0;
    int batch = 0;
    double gamma = 1.0;
    double g = 1.0;
};

// Everything needed to continue a lifelong run from a task boundary.
struct TrainerCheckpoint {
    EncoderConfig enc;
    TaskKind kind = TaskKind::Mre;
    uint64_t model_seed = 0;
    uint64_t config_hash = 0;
    int completed_task = 0;

    std::vector<int> class_ids;
    std::vector<Tensor> params;  // model parameter order

    MemoryBank bank;
    ModulationState modulation;

    std::vector<ScoreMatrix::Cell> scores;
    std::vector<double> A;
    std::vector<TraceRow> trace;
};

TrainerCheckpoint snapshot_model(const DualStreamModel& model);

// Rebuilds the model and overwrites its parameters from the checkpoint.
DualStreamModel restore_model(const TrainerCheckpoint& ckpt);

void save_checkpoint(const std::string& path, const TrainerCheckpoint& ckpt);
TrainerCheckpoint load_checkpoint(const std::string& path);

}  // namespace lmc
